//! The `C × K` prototype bank and its EMA update.
//!
//! An update `p ← Normalize(α·p + (1−α)·Σ_i 1(y_i = c)·w_{i,k}^c·z_i)` leaves
//! the bank *attached*: it carries an [`EmaPathway`] through which loss
//! gradients on the prototypes flow back to the batch embeddings. Detaching
//! drops the pathway before the next iteration.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::assignment::WeightTable;
use crate::error::{Error, Result};
use crate::geometry::{self, normalize, normalize_vjp, MIN_NORM};

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    classes: usize,
    per_class: usize,
    /// Row `c·K + k` holds `p_k^c`.
    prototypes: Array2<f64>,
    alpha: f64,
    pathway: Option<EmaPathway>,
}

/// One prototype's share of the gradient route created by an EMA update.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeRecord {
    /// `(sample index, w_{i,k}^c)` for every sample with positive weight.
    pub contributors: Vec<(usize, f64)>,
    /// Pre-normalization blend vector `α·p_old + (1−α)·Σ w·z`.
    pub blend: Vec<f64>,
    pub blend_norm: f64,
}

/// Gradient route from the updated prototypes back to the batch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaPathway {
    pub batch_len: usize,
    pub alpha: f64,
    /// Prototype values before the update, same layout as the bank.
    pub previous: Array2<f64>,
    /// `None` for prototypes the update left untouched.
    pub records: Vec<Option<PrototypeRecord>>,
}

impl EmaPathway {
    /// Pushes `∂L/∂P` (bank layout) through the normalization and the
    /// `(1−α)` blend term onto the embeddings, returning `∂L/∂z` (`B × D`).
    pub fn backprop(&self, grad_prototypes: ArrayView2<f64>) -> Result<Array2<f64>> {
        let dim = self.previous.ncols();
        if grad_prototypes.dim() != self.previous.dim() {
            return Err(Error::InvalidInput("prototype gradient shape mismatch".into()));
        }
        let mut grad_z = Array2::zeros((self.batch_len, dim));
        let scale = 1.0 - self.alpha;
        if scale == 0.0 {
            return Ok(grad_z);
        }
        for (r, record) in self.records.iter().enumerate() {
            let Some(rec) = record else { continue };
            let g = grad_prototypes.row(r).to_vec();
            let g_blend = normalize_vjp(&rec.blend, &g)?;
            for &(i, w) in &rec.contributors {
                grad_z
                    .row_mut(i)
                    .iter_mut()
                    .zip(&g_blend)
                    .for_each(|(dst, gb)| *dst += scale * w * gb);
            }
        }
        Ok(grad_z)
    }

    /// Recomputes the updated prototype `row` from the recorded inputs.
    pub fn reconstruct(&self, row: usize, z: ArrayView2<f64>) -> Option<Vec<f64>> {
        let rec = self.records[row].as_ref()?;
        let mut blend: Vec<f64> = self.previous.row(row).iter().map(|p| self.alpha * p).collect();
        for &(i, w) in &rec.contributors {
            blend
                .iter_mut()
                .zip(z.row(i))
                .for_each(|(b, zi)| *b += (1.0 - self.alpha) * w * zi);
        }
        normalize(&blend).ok().map(|u| u.into_inner())
    }
}

impl PrototypeBank {
    /// Bank from explicit rows (`C·K × D`, class-major); rows are normalized.
    pub fn from_rows(classes: usize, per_class: usize, rows: Array2<f64>, alpha: f64) -> Result<Self> {
        if classes == 0 || per_class == 0 {
            return Err(Error::InvalidConfiguration("bank needs C, K >= 1".into()));
        }
        if rows.nrows() != classes * per_class {
            return Err(Error::InvalidInput(format!(
                "expected {} prototype rows, got {}",
                classes * per_class,
                rows.nrows()
            )));
        }
        if rows.ncols() < 2 {
            return Err(Error::InvalidInput("prototype dimension must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfiguration(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        let mut prototypes = rows;
        for mut row in prototypes.rows_mut() {
            let u = normalize(row.as_slice().expect("standard layout"))?;
            row.iter_mut().zip(u.as_slice()).for_each(|(d, v)| *d = *v);
        }
        Ok(Self {
            classes,
            per_class,
            prototypes,
            alpha,
            pathway: None,
        })
    }

    /// Bank from rows that are already unit norm (within 1e-9); values are
    /// kept bit for bit.
    pub fn from_unit_rows(classes: usize, per_class: usize, rows: Array2<f64>, alpha: f64) -> Result<Self> {
        let mut bank = Self::from_rows(classes, per_class, rows.clone(), alpha)?;
        for row in rows.rows() {
            let n = geometry::norm(row.as_slice().expect("standard layout"));
            if !((n - 1.0).abs() <= 1e-9) {
                return Err(Error::InvalidInput(format!("prototype norm {n} is not 1")));
            }
        }
        bank.prototypes = rows;
        Ok(bank)
    }

    /// `C·K` independent uniform points on the sphere in `R^dim`.
    pub fn init_uniform<R: Rng + ?Sized>(
        classes: usize,
        per_class: usize,
        dim: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidConfiguration("prototype dimension must be >= 2".into()));
        }
        let mut rows = Array2::zeros((classes * per_class, dim));
        for mut row in rows.rows_mut() {
            let u = geometry::sample_uniform_sphere(dim, rng);
            row.iter_mut().zip(u.as_slice()).for_each(|(d, v)| *d = *v);
        }
        Self::from_rows(classes, per_class, rows, alpha)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfiguration(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        self.alpha = alpha;
        Ok(self)
    }

    /// All prototypes, `C·K × D`.
    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.prototypes.view()
    }

    pub fn class_prototypes(&self, class: usize) -> ArrayView2<'_, f64> {
        let k = self.per_class;
        self.prototypes.slice(s![class * k..(class + 1) * k, ..])
    }

    pub fn prototype(&self, class: usize, index: usize) -> ArrayView1<'_, f64> {
        self.prototypes.row(class * self.per_class + index)
    }

    pub fn is_attached(&self) -> bool {
        self.pathway.is_some()
    }

    pub fn pathway(&self) -> Option<&EmaPathway> {
        self.pathway.as_ref()
    }

    /// Same values, no gradient pathway.
    pub fn detach(&self) -> PrototypeBank {
        PrototypeBank {
            pathway: None,
            ..self.clone()
        }
    }

    /// EMA update from a labeled batch `z` (`B × D`) and its weight table.
    ///
    /// Prototypes that receive no positive weight (including every prototype
    /// of a class absent from the batch) keep their value exactly, as does the
    /// whole bank when `α = 1`.
    pub fn ema_update(&self, z: ArrayView2<f64>, labels: &[usize], table: &WeightTable) -> Result<PrototypeBank> {
        if self.is_attached() {
            return Err(Error::InvalidInput("EMA update requires a detached bank".into()));
        }
        if z.ncols() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "embedding dimension {} != {}",
                z.ncols(),
                self.dim()
            )));
        }
        if labels.len() != z.nrows() || table.len() != z.nrows() {
            return Err(Error::InvalidInput("labels, table and batch lengths differ".into()));
        }
        if table.classes != self.classes || table.per_class != self.per_class {
            return Err(Error::InvalidInput("weight table shape does not match bank".into()));
        }
        let groups = crate::assignment::group_by_class(labels, self.classes)?;
        let (alpha, k) = (self.alpha, self.per_class);
        let mut next = self.prototypes.clone();
        let mut records = vec![None; self.classes * k];

        for (c, members) in groups.iter().enumerate() {
            for idx in 0..k {
                let r = c * k + idx;
                let contributors: Vec<(usize, f64)> = members
                    .iter()
                    .map(|&i| (i, table.row(i, c)[idx]))
                    .filter(|&(_, w)| w > 0.0)
                    .collect();
                if contributors.is_empty() {
                    continue;
                }
                let mut blend: Vec<f64> = self.prototypes.row(r).iter().map(|p| alpha * p).collect();
                for &(i, w) in &contributors {
                    blend
                        .iter_mut()
                        .zip(z.row(i))
                        .for_each(|(b, zi)| *b += (1.0 - alpha) * w * zi);
                }
                let blend_norm = geometry::norm(&blend);
                if !(blend_norm >= MIN_NORM) {
                    return Err(Error::DegeneratePrototype { class: c, index: idx });
                }
                if alpha < 1.0 {
                    next.row_mut(r)
                        .iter_mut()
                        .zip(&blend)
                        .for_each(|(p, b)| *p = b / blend_norm);
                }
                records[r] = Some(PrototypeRecord {
                    contributors,
                    blend,
                    blend_norm,
                });
            }
        }

        Ok(PrototypeBank {
            classes: self.classes,
            per_class: k,
            prototypes: next,
            alpha,
            pathway: Some(EmaPathway {
                batch_len: z.nrows(),
                alpha,
                previous: self.prototypes.clone(),
                records,
            }),
        })
    }

    /// Largest angular change (as `‖p_new − p_old‖`) between two banks.
    pub fn max_drift(&self, other: &PrototypeBank) -> f64 {
        (&self.prototypes - &other.prototypes)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .fold(0.0, |a, &b| a.max(b))
    }
}
