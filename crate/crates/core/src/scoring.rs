//! Test-time OOD scores and embedding-quality diagnostics.
//!
//! Every score follows one orientation: larger means more ID-like.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::class_posterior;
use crate::prototypes::PrototypeBank;

/// Default relative shrinkage: `δ = 1e-6·trace(Σ)/E`.
pub const DEFAULT_RELATIVE_SHRINKAGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Shrinkage {
    /// Fixed `δ`.
    Absolute(f64),
    /// `δ = factor·trace(Σ)/E`.
    TraceScaled(f64),
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage::TraceScaled(DEFAULT_RELATIVE_SHRINKAGE)
    }
}

/// Class means and one shared covariance, regularized to `Σ + δI`.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    means: Array2<f64>,
    covariance: Array2<f64>,
    shrinkage: f64,
    factor: Cholesky<f64, Dyn>,
}

impl PartialEq for GaussianFit {
    fn eq(&self, other: &Self) -> bool {
        self.means == other.means && self.covariance == other.covariance && self.shrinkage == other.shrinkage
    }
}

impl GaussianFit {
    /// Assembles a fit from its parts; fails if `Σ + δI` is not positive definite.
    pub fn new(means: Array2<f64>, covariance: Array2<f64>, shrinkage: f64) -> Result<Self> {
        let e = covariance.nrows();
        if covariance.ncols() != e || means.ncols() != e || means.nrows() == 0 {
            return Err(Error::InvalidInput("Gaussian fit shapes are inconsistent".into()));
        }
        if !(shrinkage >= 0.0) || means.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "Gaussian fit has non-finite entries or negative shrinkage".into(),
            ));
        }
        let regularized = DMatrix::from_fn(e, e, |i, j| covariance[[i, j]] + if i == j { shrinkage } else { 0.0 });
        let scale = (0..e).map(|i| regularized[(i, i)].abs()).fold(0.0, f64::max);
        let factor = Cholesky::new(regularized).ok_or(Error::SingularCovariance)?;
        let min_pivot = factor
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d * d)
            .fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-14 * scale) {
            return Err(Error::SingularCovariance);
        }
        Ok(Self {
            means,
            covariance,
            shrinkage,
            factor,
        })
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn covariance(&self) -> ArrayView2<'_, f64> {
        self.covariance.view()
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    /// `(h − μ)ᵀ(Σ + δI)⁻¹(h − μ)` for class `c`.
    pub fn squared_distance(&self, h: ArrayView1<f64>, class: usize) -> f64 {
        let diff = DVector::from_iterator(self.dim(), h.iter().zip(self.means.row(class)).map(|(a, b)| a - b));
        let y = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }
}

/// Per-class means and pooled covariance (divisor `N`) of labeled features.
pub fn fit_gaussian(features: ArrayView2<f64>, labels: &[usize], shrinkage: Shrinkage) -> Result<GaussianFit> {
    let (n, e) = features.dim();
    if labels.len() != n {
        return Err(Error::InvalidInput("label count != feature count".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if classes == 0 {
        return Err(Error::InsufficientData { class: 0, count: 0 });
    }
    let mut counts = vec![0usize; classes];
    let mut means = Array2::<f64>::zeros((classes, e));
    for (row, &c) in features.rows().into_iter().zip(labels) {
        counts[c] += 1;
        means.row_mut(c).scaled_add(1.0, &row);
    }
    for (c, &count) in counts.iter().enumerate() {
        if count < 2 {
            return Err(Error::InsufficientData { class: c, count });
        }
        means.row_mut(c).mapv_inplace(|v| v / count as f64);
    }
    let mut centered = features.to_owned();
    for (mut row, &c) in centered.rows_mut().into_iter().zip(labels) {
        row -= &means.row(c);
    }
    let covariance = centered.t().dot(&centered) / n as f64;
    let delta = match shrinkage {
        Shrinkage::Absolute(d) => d,
        Shrinkage::TraceScaled(f) => f * covariance.diag().sum() / e as f64,
    };
    GaussianFit::new(means, covariance, delta)
}

/// `−min_c (h − μ_c)ᵀ(Σ + δI)⁻¹(h − μ_c)`.
pub fn mahalanobis_score(fit: &GaussianFit, h: ArrayView1<f64>) -> Result<f64> {
    if h.len() != fit.dim() {
        return Err(Error::InvalidInput(format!(
            "feature width {} != {}",
            h.len(),
            fit.dim()
        )));
    }
    let best = (0..fit.classes())
        .map(|c| fit.squared_distance(h, c))
        .fold(f64::INFINITY, f64::min);
    Ok(-best)
}

fn squared_euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `−‖z − t_(k)‖` where `t_(k)` is the k-th nearest training embedding.
pub fn knn_score(train: ArrayView2<f64>, z: ArrayView1<f64>, k: usize) -> Result<f64> {
    if k == 0 || k > train.nrows() {
        return Err(Error::InvalidInput(format!(
            "k must be in [1, {}], got {k}",
            train.nrows()
        )));
    }
    if z.len() != train.ncols() {
        return Err(Error::InvalidInput("query dimension != training dimension".into()));
    }
    let mut dists: Vec<(f64, usize)> = train
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (squared_euclidean(t, z), i))
        .collect();
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(-kth.0.sqrt())
}

/// Maximum class posterior with uniform mixture weights `1/K`.
pub fn posterior_score(z: ArrayView1<f64>, bank: &PrototypeBank, tau: f64) -> Result<f64> {
    let weights = Array2::from_elem((bank.classes(), bank.per_class()), 1.0 / bank.per_class() as f64);
    let p = class_posterior(z, bank, weights.view(), tau)?;
    Ok(p.into_iter().fold(0.0, f64::max))
}

fn max_cosines(embeddings: ArrayView2<f64>, bank: &PrototypeBank) -> Result<Array1<f64>> {
    if embeddings.nrows() == 0 {
        return Err(Error::InvalidInput("no embeddings".into()));
    }
    if embeddings.ncols() != bank.dim() {
        return Err(Error::InvalidInput("embedding dimension != prototype dimension".into()));
    }
    let sims = embeddings.dot(&bank.rows().t());
    Ok(sims.map_axis(ndarray::Axis(1), |r| {
        r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// Mean angle in degrees between each embedding and its nearest prototype.
pub fn compactness(embeddings: ArrayView2<f64>, bank: &PrototypeBank) -> Result<f64> {
    let best = max_cosines(embeddings, bank)?;
    Ok(best.iter().map(|c| c.clamp(-1.0, 1.0).acos().to_degrees()).sum::<f64>() / best.len() as f64)
}

/// Fraction of embeddings whose best prototype cosine is below `threshold`.
pub fn far_id_fraction(embeddings: ArrayView2<f64>, bank: &PrototypeBank, threshold: f64) -> Result<f64> {
    let best = max_cosines(embeddings, bank)?;
    Ok(best.iter().filter(|&&c| c < threshold).count() as f64 / best.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Mahalanobis,
    Knn,
    Posterior,
}

impl std::str::FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(Self::Mahalanobis),
            "knn" => Ok(Self::Knn),
            "posterior" => Ok(Self::Posterior),
            other => Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }
}

/// Scores for a set of samples, larger = more ID-like.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub values: Vec<f64>,
    pub source: ScoreSource,
}

impl ScoreSeries {
    pub fn new(values: Vec<f64>, source: ScoreSource) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite {source:?} score")));
        }
        Ok(Self { values, source })
    }
}

pub fn mahalanobis_scores(fit: &GaussianFit, features: ArrayView2<f64>) -> Result<ScoreSeries> {
    let values = features
        .rows()
        .into_iter()
        .map(|h| mahalanobis_score(fit, h))
        .collect::<Result<_>>()?;
    ScoreSeries::new(values, ScoreSource::Mahalanobis)
}

pub fn knn_scores(train: ArrayView2<f64>, queries: ArrayView2<f64>, k: usize) -> Result<ScoreSeries> {
    let values = queries
        .rows()
        .into_iter()
        .map(|z| knn_score(train, z, k))
        .collect::<Result<_>>()?;
    ScoreSeries::new(values, ScoreSource::Knn)
}

pub fn posterior_scores(bank: &PrototypeBank, z: ArrayView2<f64>, tau: f64) -> Result<ScoreSeries> {
    let values = z
        .rows()
        .into_iter()
        .map(|zi| posterior_score(zi, bank, tau))
        .collect::<Result<_>>()?;
    ScoreSeries::new(values, ScoreSource::Posterior)
}

/// Row-normalized copy (rows with zero norm are left as is).
pub fn normalize_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn two_point_classes() {
        let h = arr2(&[[0.0, 0.0], [2.0, 0.0], [10.0, 10.0], [10.0, 12.0]]);
        let fit = fit_gaussian(h.view(), &[0, 0, 1, 1], Shrinkage::Absolute(0.0)).unwrap();
        assert_eq!(fit.means(), arr2(&[[1.0, 0.0], [10.0, 11.0]]));
        // centered scatter: (±1, 0) twice and (0, ±1) twice, divided by 4
        assert_eq!(fit.covariance(), arr2(&[[0.5, 0.0], [0.0, 0.5]]));
        assert_eq!(mahalanobis_score(&fit, arr1(&[1.0, 0.0]).view()).unwrap(), 0.0);
    }

    #[test]
    fn identical_features_need_shrinkage() {
        let h = arr2(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert!(matches!(
            fit_gaussian(h.view(), &[0, 0, 0], Shrinkage::Absolute(0.0)),
            Err(Error::SingularCovariance)
        ));
        assert!(matches!(
            fit_gaussian(h.view(), &[0, 0, 0], Shrinkage::default()),
            Err(Error::SingularCovariance)
        ));
        assert!(fit_gaussian(h.view(), &[0, 0, 0], Shrinkage::Absolute(1e-3)).is_ok());
        assert!(matches!(
            fit_gaussian(h.view(), &[0, 0, 1], Shrinkage::Absolute(1.0)),
            Err(Error::InsufficientData { class: 1, count: 1 })
        ));
    }

    #[test]
    fn mahalanobis_quadratic_form() {
        let fit = GaussianFit::new(arr2(&[[0.0, 0.0], [5.0, 5.0]]), arr2(&[[1.0, 0.0], [0.0, 4.0]]), 0.0).unwrap();
        assert!((mahalanobis_score(&fit, arr1(&[0.0, 2.0]).view()).unwrap() + 1.0).abs() < 1e-12);
        let eye = GaussianFit::new(arr2(&[[0.0, 0.0], [3.0, 0.0]]), arr2(&[[1.0, 0.0], [0.0, 1.0]]), 0.0).unwrap();
        assert!((mahalanobis_score(&eye, arr1(&[2.0, 1.0]).view()).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn knn_examples() {
        let train = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(knn_score(train.view(), arr1(&[0.0, 1.0]).view(), 1).unwrap(), 0.0);
        let line = arr2(&[[0.1, 0.0], [0.3, 0.0]]);
        assert!((knn_score(line.view(), arr1(&[0.0, 0.0]).view(), 2).unwrap() + 0.3).abs() < 1e-15);
        assert!(knn_score(line.view(), arr1(&[0.0, 0.0]).view(), 3).is_err());
        assert!(knn_score(line.view(), arr1(&[0.0, 0.0]).view(), 0).is_err());
    }

    #[test]
    fn posterior_score_cases() {
        let one = PrototypeBank::from_rows(1, 2, arr2(&[[1.0, 0.0], [0.0, 1.0]]), 0.9).unwrap();
        assert_eq!(posterior_score(arr1(&[0.6, 0.8]).view(), &one, 0.1).unwrap(), 1.0);
        let two = PrototypeBank::from_rows(2, 1, arr2(&[[1.0, 0.0], [0.0, 1.0]]), 0.9).unwrap();
        let s = posterior_score(arr1(&[FRAC_1_SQRT_2, FRAC_1_SQRT_2]).view(), &two, 0.1).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compactness_and_far_fraction() {
        let bank = PrototypeBank::from_rows(1, 2, arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), 0.9).unwrap();
        let on = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(compactness(on.view(), &bank).unwrap().abs() < 1e-6);
        assert_eq!(far_id_fraction(on.view(), &bank, 0.8).unwrap(), 0.0);
        let off = arr2(&[[0.0, 0.0, 1.0]]);
        assert!((compactness(off.view(), &bank).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(far_id_fraction(off.view(), &bank, 0.8).unwrap(), 1.0);
        assert!(compactness(Array2::zeros((0, 3)).view(), &bank).is_err());
    }
}
