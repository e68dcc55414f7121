//! Class-conditional soft assignment of embeddings to prototypes.
//!
//! Within each class the batch embeddings are assigned to that class's
//! prototypes by entropic optimal transport over the transportation polytope
//! `{W ≥ 0 : W·1 = 1/K, Wᵀ·1 = 1/B}`, solved with Sinkhorn-Knopp scaling.
//! Each sample's column is then pruned to its `k_top` largest weights.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;

/// Residual target when Sinkhorn runs to convergence (`iterations == 0`).
pub const CONVERGENCE_TOLERANCE: f64 = 1e-9;
/// Sweep cap in convergence mode.
pub const MAX_SWEEPS: usize = 10_000;
/// Below this epsilon the scaling runs in the log domain.
pub const LOG_DOMAIN_EPSILON: f64 = 0.01;

/// Sinkhorn output for one class: `weights` is `K × B_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub weights: Array2<f64>,
    pub class: usize,
    pub converged: bool,
    pub iterations_used: usize,
    /// Largest absolute deviation of any row or column sum from its target.
    pub residual: f64,
}

impl AssignmentMatrix {
    pub fn num_prototypes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.weights.ncols()
    }
}

/// Row/column marginal residual against `1/K` and `1/B`.
pub fn marginal_residual(w: &Array2<f64>) -> f64 {
    let (k, b) = w.dim();
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let rows = w
        .sum_axis(Axis(1))
        .iter()
        .map(|r| (r - row_target).abs())
        .fold(0.0, f64::max);
    let cols = w
        .sum_axis(Axis(0))
        .iter()
        .map(|c| (c - col_target).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

fn similarities(prototypes: ArrayView2<f64>, embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
    if prototypes.ncols() != embeddings.ncols() {
        return Err(Error::InvalidInput(format!(
            "prototype dimension {} != embedding dimension {}",
            prototypes.ncols(),
            embeddings.ncols()
        )));
    }
    let sim = prototypes.dot(&embeddings.t());
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite prototype/embedding similarity".into()));
    }
    Ok(sim)
}

/// Soft assignment `W = diag(u)·exp(PᵀZ/ε)·diag(v)`.
///
/// `prototypes` is `K × D`, `embeddings` is `B × D`. Runs exactly `iterations`
/// row-then-column sweeps, or sweeps until the marginal residual is below
/// [`CONVERGENCE_TOLERANCE`] when `iterations == 0`.
pub fn sinkhorn_assign(
    prototypes: ArrayView2<f64>,
    embeddings: ArrayView2<f64>,
    epsilon: f64,
    iterations: usize,
) -> Result<AssignmentMatrix> {
    if embeddings.nrows() == 0 {
        return Err(Error::EmptyClass(0));
    }
    if prototypes.nrows() == 0 {
        return Err(Error::InvalidInput("no prototypes".into()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidInput(format!("epsilon must be > 0, got {epsilon}")));
    }
    let sim = similarities(prototypes, embeddings)?;
    let (k, b) = sim.dim();
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let max_sweeps = if iterations == 0 { MAX_SWEEPS } else { iterations };

    // Subtracting the global maximum only rescales u and v.
    let shift = sim.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sweeps = 0;
    let mut residual;

    let weights = if epsilon < LOG_DOMAIN_EPSILON {
        let mut logw = sim.mapv(|v| (v - shift) / epsilon);
        let total = log_sum_exp(logw.iter().cloned());
        logw.mapv_inplace(|v| v - total);
        let (ln_k, ln_b) = ((k as f64).ln(), (b as f64).ln());
        loop {
            residual = marginal_residual(&logw.mapv(f64::exp));
            if (iterations == 0 && residual < CONVERGENCE_TOLERANCE) || sweeps == max_sweeps {
                break;
            }
            for mut row in logw.rows_mut() {
                let lse = log_sum_exp(row.iter().cloned());
                row.mapv_inplace(|v| v - lse - ln_k);
            }
            for mut col in logw.columns_mut() {
                let lse = log_sum_exp(col.iter().cloned());
                col.mapv_inplace(|v| v - lse - ln_b);
            }
            sweeps += 1;
        }
        logw.mapv(f64::exp)
    } else {
        let mut w = sim.mapv(|v| ((v - shift) / epsilon).exp());
        let total = w.sum();
        w.mapv_inplace(|v| v / total);
        loop {
            residual = marginal_residual(&w);
            if (iterations == 0 && residual < CONVERGENCE_TOLERANCE) || sweeps == max_sweeps {
                break;
            }
            for mut row in w.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s * row_target);
            }
            for mut col in w.columns_mut() {
                let s = col.sum();
                col.mapv_inplace(|v| v / s * col_target);
            }
            sweeps += 1;
        }
        w
    };

    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Sinkhorn weights".into()));
    }
    Ok(AssignmentMatrix {
        weights,
        class: 0,
        converged: residual < CONVERGENCE_TOLERANCE,
        iterations_used: sweeps,
        residual,
    })
}

pub(crate) fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Keeps the `k_top` largest entries of every column (ties keep the lower
/// prototype index) and zeroes the rest. Survivors are not renormalized.
pub fn prune_topk(matrix: &AssignmentMatrix, k_top: usize) -> Result<AssignmentMatrix> {
    let k = matrix.num_prototypes();
    if k_top == 0 || k_top > k {
        return Err(Error::InvalidInput(format!("k_top must be in [1, {k}], got {k_top}")));
    }
    let mut out = matrix.clone();
    if k_top == k {
        return Ok(out);
    }
    let mut order: Vec<usize> = (0..k).collect();
    for mut col in out.weights.columns_mut() {
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        for &drop in &order[k_top..] {
            col[drop] = 0.0;
        }
        order.sort_unstable();
    }
    Ok(out)
}

/// One-hot assignment of every embedding to its most similar prototype
/// (ties to the lower index).
pub fn hard_assign(prototypes: ArrayView2<f64>, embeddings: ArrayView2<f64>) -> Result<AssignmentMatrix> {
    if embeddings.nrows() == 0 {
        return Err(Error::EmptyClass(0));
    }
    if prototypes.nrows() == 0 {
        return Err(Error::InvalidInput("no prototypes".into()));
    }
    let sim = similarities(prototypes, embeddings)?;
    let mut weights = Array2::zeros(sim.dim());
    for (j, col) in sim.columns().into_iter().enumerate() {
        let mut best = 0;
        for (i, &v) in col.iter().enumerate() {
            if v > col[best] {
                best = i;
            }
        }
        weights[[best, j]] = 1.0;
    }
    Ok(AssignmentMatrix {
        weights,
        class: 0,
        converged: true,
        iterations_used: 0,
        residual: 0.0,
    })
}

/// Soft (Sinkhorn + pruning) or hard (nearest prototype) assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignmentParams {
    pub epsilon: f64,
    pub iterations: usize,
    pub k_top: usize,
    pub mode: AssignmentMode,
}

impl Default for AssignmentParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            iterations: 3,
            k_top: 5,
            mode: AssignmentMode::Soft,
        }
    }
}

/// Assign `embeddings` to `prototypes` according to `params`.
pub fn assign(
    prototypes: ArrayView2<f64>,
    embeddings: ArrayView2<f64>,
    params: &AssignmentParams,
) -> Result<AssignmentMatrix> {
    match params.mode {
        AssignmentMode::Soft => {
            let raw = sinkhorn_assign(prototypes, embeddings, params.epsilon, params.iterations)?;
            prune_topk(&raw, params.k_top.min(raw.num_prototypes()))
        }
        AssignmentMode::Hard => hard_assign(prototypes, embeddings),
    }
}

/// Per-sample, per-class weights `w_i^c ∈ R^K`, stored as a `B × (C·K)`
/// matrix whose column `c·K + k` holds `w_{i,k}^c`. The weights are constants
/// with respect to every gradient computed downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    pub classes: usize,
    pub per_class: usize,
    pub weights: Array2<f64>,
    /// Sinkhorn statistics of each class that was present in the batch.
    pub class_stats: Vec<AssignmentStats>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignmentStats {
    pub class: usize,
    pub samples: usize,
    pub iterations_used: usize,
    pub residual: f64,
}

impl WeightTable {
    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    /// `w_i^c` as a slice of length `K`.
    pub fn row(&self, sample: usize, class: usize) -> ndarray::ArrayView1<'_, f64> {
        let k = self.per_class;
        self.weights.slice(s![sample, class * k..(class + 1) * k])
    }

    /// Always true: assignment weights never carry gradients.
    pub fn stop_gradient(&self) -> bool {
        true
    }

    /// Mean Shannon entropy of the own-class weight columns after
    /// renormalizing each to a distribution.
    pub fn mean_own_entropy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let row = self.row(i, c);
                let s = row.sum();
                if s <= 0.0 {
                    return 0.0;
                }
                row.iter()
                    .filter(|&&w| w > 0.0)
                    .map(|&w| -(w / s) * (w / s).ln())
                    .sum::<f64>()
            })
            .sum();
        total / labels.len() as f64
    }
}

/// Indices of each class's samples, in batch order.
pub fn group_by_class(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidInput(format!(
                "label {c} out of range for {classes} classes"
            )));
        }
        groups[c].push(i);
    }
    Ok(groups)
}

/// Builds the weight table for a labeled batch `z` (`B × D`). Own-class rows
/// come from the per-class assignment; rows for every other class are the
/// uniform vector `1/K`. Classes absent from the batch are skipped.
pub fn build_weight_table(
    z: ArrayView2<f64>,
    labels: &[usize],
    bank: &PrototypeBank,
    params: &AssignmentParams,
) -> Result<WeightTable> {
    if labels.len() != z.nrows() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} embeddings",
            labels.len(),
            z.nrows()
        )));
    }
    let (classes, k) = (bank.classes(), bank.per_class());
    let groups = group_by_class(labels, classes)?;
    let mut weights = Array2::from_elem((z.nrows(), classes * k), 1.0 / k as f64);
    let mut class_stats = Vec::new();
    for (c, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let zc = z.select(Axis(0), members);
        let mut m = assign(bank.class_prototypes(c), zc.view(), params)?;
        m.class = c;
        for (col, &i) in members.iter().enumerate() {
            weights
                .slice_mut(s![i, c * k..(c + 1) * k])
                .assign(&m.weights.column(col));
        }
        class_stats.push(AssignmentStats {
            class: c,
            samples: members.len(),
            iterations_used: m.iterations_used,
            residual: m.residual,
        });
    }
    Ok(WeightTable {
        classes,
        per_class: k,
        weights,
        class_stats,
    })
}

/// Label-free assignment of the whole batch to a single prototype pool.
/// Returns `B × K` codes whose rows are the pruned assignment columns
/// rescaled so that each unpruned column sums to one.
pub fn assign_global(
    prototypes: ArrayView2<f64>,
    z: ArrayView2<f64>,
    params: &AssignmentParams,
) -> Result<Array2<f64>> {
    let m = assign(prototypes, z, params)?;
    let mut codes = m.weights.t().to_owned();
    if params.mode == AssignmentMode::Soft {
        codes.mapv_inplace(|v| v * z.nrows() as f64);
    }
    Ok(codes)
}
