//! Hyperspherical primitives: normalization and its Jacobian, von Mises-Fisher
//! sampling, and the synthetic ID/OOD generator used in place of image data.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Inputs with a norm at or below this are rejected by [`normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Maximum rejected draws while placing well-separated directions.
pub const MAX_DIRECTION_REJECTIONS: usize = 10_000;

/// A finite point on the unit sphere in `R^D`, `D >= 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `components`; see [`normalize`].
    pub fn new(components: Vec<f64>) -> Result<Self> {
        normalize(&components)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Standard basis vector `e_axis`.
    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        UnitVector(v)
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Returns `x / ‖x‖`.
pub fn normalize(x: &[f64]) -> Result<UnitVector> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite component in normalize".into()));
    }
    let n = norm(x);
    if n <= MIN_NORM {
        return Err(Error::DegenerateVector(n));
    }
    Ok(UnitVector(x.iter().map(|v| v / n).collect()))
}

/// Jacobian of `x ↦ x/‖x‖`, i.e. `(I − uuᵀ)/‖x‖` with `u = x/‖x‖`.
pub fn normalize_jacobian(x: &[f64]) -> Result<Array2<f64>> {
    let u = normalize(x)?;
    let n = norm(x);
    let d = x.len();
    let u = u.as_slice();
    Ok(Array2::from_shape_fn((d, d), |(i, j)| {
        let id = if i == j { 1.0 } else { 0.0 };
        (id - u[i] * u[j]) / n
    }))
}

/// Computes `J(x)·g` without materializing the Jacobian. `J` is symmetric, so
/// this is also the vector-Jacobian product used in backpropagation.
pub fn normalize_vjp(x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n <= MIN_NORM || !n.is_finite() {
        return Err(Error::DegenerateVector(n));
    }
    let ug: f64 = dot(x, g) / n;
    Ok(x.iter().zip(g).map(|(xi, gi)| (gi - ug * xi / n) / n).collect())
}

/// Von Mises-Fisher parameters. `kappa == 0` is the uniform distribution,
/// `kappa == +inf` is a point mass at `mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct VmfParams {
    pub mu: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVector, kappa: f64) -> Result<Self> {
        if kappa.is_nan() || kappa < 0.0 {
            return Err(Error::InvalidInput(format!("kappa must be >= 0, got {kappa}")));
        }
        if mu.dim() < 2 {
            return Err(Error::InvalidInput("vMF dimension must be >= 2".into()));
        }
        Ok(Self { mu, kappa })
    }
}

/// A uniformly distributed point on the unit sphere in `R^dim`.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

/// Draws `n` i.i.d. vMF samples using Wood's rejection sampler for the
/// component along `mu` and a uniform direction in the tangent space.
pub fn sample_vmf<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Result<Vec<UnitVector>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let dim = params.mu.dim();
    let kappa = params.kappa;
    if kappa == 0.0 {
        return Ok((0..n).map(|_| sample_uniform_sphere(dim, rng)).collect());
    }
    if kappa.is_infinite() {
        return Ok(vec![params.mu.clone(); n]);
    }

    let m = (dim - 1) as f64;
    // b = (−2κ + sqrt(4κ² + m²)) / m, rewritten to avoid cancellation.
    let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
    let beta = Beta::new(m / 2.0, m / 2.0).map_err(|e| Error::Internal(e.to_string()))?;

    let mu = params.mu.as_slice();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let u: f64 = rng.random();
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            if kappa * w + m * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w.clamp(-1.0, 1.0);
            }
        };
        let tangent = sample_tangent(mu, rng);
        let r = (1.0 - w * w).max(0.0).sqrt();
        let v: Vec<f64> = mu.iter().zip(&tangent).map(|(m, t)| w * m + r * t).collect();
        out.push(normalize(&v)?);
    }
    Ok(out)
}

fn sample_tangent<R: Rng + ?Sized>(mu: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        let proj = dot(&v, mu);
        v.iter_mut().zip(mu).for_each(|(vi, m)| *vi -= proj * m);
        if let Ok(u) = normalize(&v) {
            return u.into_inner();
        }
    }
}

/// Parameters of the synthetic benchmark: `classes` ID classes, each an
/// equal-weight mixture of `modes_per_class` vMF components, plus held-out
/// OOD directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub modes_per_class: usize,
    pub kappa_id: f64,
    pub kappa_ood: f64,
    pub ood_directions: usize,
    /// Radians.
    pub min_angular_sep: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            modes_per_class: 2,
            kappa_id: 50.0,
            kappa_ood: 50.0,
            ood_directions: 4,
            min_angular_sep: PI / 3.0,
            train_per_class: 250,
            test_per_class: 100,
            ood_samples: 400,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.classes == 0 || self.modes_per_class == 0 {
            return bad("classes and modes_per_class must be >= 1");
        }
        if self.kappa_id.is_nan() || self.kappa_id < 0.0 || self.kappa_ood.is_nan() || self.kappa_ood < 0.0 {
            return bad("concentrations must be >= 0");
        }
        if !(0.0..=PI).contains(&self.min_angular_sep) {
            return bad("min_angular_sep must lie in [0, pi]");
        }
        if self.ood_samples > 0 && self.ood_directions == 0 {
            return bad("ood_samples requires at least one OOD direction");
        }
        Ok(())
    }
}

/// Output of [`gen_synthetic`]. Inputs are unit vectors in `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub id_train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
    /// `classes × modes_per_class` mode directions, class-major.
    pub mode_directions: Vec<UnitVector>,
    pub ood_directions: Vec<UnitVector>,
}

/// Places `count` directions pairwise at least `min_sep` radians apart, in
/// addition to `existing`.
fn place_directions<R: Rng + ?Sized>(
    existing: &[UnitVector],
    count: usize,
    dim: usize,
    min_sep: f64,
    rejections: &mut usize,
    rng: &mut R,
) -> Result<Vec<UnitVector>> {
    let max_cos = min_sep.cos();
    let mut placed: Vec<UnitVector> = Vec::with_capacity(count);
    while placed.len() < count {
        let cand = sample_uniform_sphere(dim, rng);
        let ok = existing.iter().chain(placed.iter()).all(|d| d.dot(&cand) <= max_cos);
        if ok {
            placed.push(cand);
        } else {
            *rejections += 1;
            if *rejections > MAX_DIRECTION_REJECTIONS {
                return Err(Error::SpecInfeasible(format!(
                    "could not place {} directions {:.3} rad apart in dimension {} after {} rejections",
                    existing.len() + count,
                    min_sep,
                    dim,
                    MAX_DIRECTION_REJECTIONS
                )));
            }
        }
    }
    Ok(placed)
}

fn draw_split<R: Rng + ?Sized>(
    directions: &[UnitVector],
    groups: usize,
    per_group: usize,
    kappa: f64,
    labeled: bool,
    rng: &mut R,
) -> Result<Dataset> {
    let dim = directions[0].dim();
    let modes = directions.len() / groups;
    let mut inputs = Array2::zeros((groups * per_group, dim));
    let mut labels = Vec::with_capacity(groups * per_group);
    let mut row = 0;
    for g in 0..groups {
        for _ in 0..per_group {
            let mode = rng.random_range(0..modes);
            let params = VmfParams::new(directions[g * modes + mode].clone(), kappa)?;
            let s = sample_vmf(&params, 1, rng)?.remove(0);
            inputs
                .row_mut(row)
                .iter_mut()
                .zip(s.as_slice())
                .for_each(|(d, v)| *d = *v);
            labels.push(g);
            row += 1;
        }
    }
    Dataset::new(inputs, labeled.then_some(labels))
}

/// Generates the labeled ID train/test splits and the unlabeled OOD split.
/// Fully determined by `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rejections = 0;
    let n_modes = spec.classes * spec.modes_per_class;
    let modes = place_directions(&[], n_modes, spec.dim, spec.min_angular_sep, &mut rejections, &mut rng)?;
    let ood = place_directions(
        &modes,
        spec.ood_directions,
        spec.dim,
        spec.min_angular_sep,
        &mut rejections,
        &mut rng,
    )?;

    let id_train = draw_split(
        &modes,
        spec.classes,
        spec.train_per_class,
        spec.kappa_id,
        true,
        &mut rng,
    )?;
    let id_test = draw_split(&modes, spec.classes, spec.test_per_class, spec.kappa_id, true, &mut rng)?;
    let ood_test = if spec.ood_samples == 0 {
        Dataset::new(Array2::zeros((0, spec.dim)), None)?
    } else {
        // One group with all OOD directions as its modes.
        draw_split(&ood, 1, spec.ood_samples, spec.kappa_ood, false, &mut rng)?
    };

    Ok(SyntheticData {
        id_train,
        id_test,
        ood_test,
        mode_directions: modes,
        ood_directions: ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn normalize_examples() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(u.as_slice()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(u.as_slice()[1], 0.8, epsilon = 1e-15);
        assert_eq!(normalize(&[1.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
        assert!(matches!(normalize(&[1e-15, 0.0]), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn jacobian_closed_forms() {
        let j = normalize_jacobian(&[2.0, 0.0]).unwrap();
        assert_eq!(j, ndarray::arr2(&[[0.0, 0.0], [0.0, 0.5]]));

        let x = normalize(&[1.0, 2.0, -2.0]).unwrap();
        let j = normalize_jacobian(x.as_slice()).unwrap();
        let u = x.as_slice();
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 } - u[a] * u[b];
                assert_abs_diff_eq!(j[[a, b]], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut r = rng(7);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let analytic = normalize_vjp(&x, &g).unwrap();
            let j = normalize_jacobian(&x).unwrap();
            let h = 1e-6;
            let fd: Vec<f64> = (0..6)
                .map(|row| {
                    // (J g)_row = Σ_col ∂u_row/∂x_col g_col
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    for c in 0..6 {
                        xp[c] += h * g[c];
                        xm[c] -= h * g[c];
                    }
                    (normalize(&xp).unwrap().as_slice()[row] - normalize(&xm).unwrap().as_slice()[row]) / (2.0 * h)
                })
                .collect();
            let scale = norm(&fd).max(1e-12);
            for i in 0..6 {
                let matvec: f64 = (0..6).map(|c| j[[i, c]] * g[c]).sum();
                assert!((analytic[i] - fd[i]).abs() / scale <= 1e-6);
                assert!((matvec - analytic[i]).abs() <= 1e-12);
            }
            // tangency
            let jx = normalize_vjp(&x, &x).unwrap();
            assert!(norm(&jx) < 1e-12);
        }
    }

    #[test]
    fn vmf_uniform_has_small_mean() {
        let params = VmfParams::new(UnitVector::basis(8, 0), 0.0).unwrap();
        let s = sample_vmf(&params, 10_000, &mut rng(1)).unwrap();
        let mut mean = vec![0.0; 8];
        for v in &s {
            mean.iter_mut().zip(v.as_slice()).for_each(|(m, x)| *m += x / 10_000.0);
        }
        assert!(norm(&mean) < 0.05);
    }

    #[test]
    fn vmf_high_concentration() {
        let mu = normalize(&[1.0, -1.0, 0.5, 2.0]).unwrap();
        let params = VmfParams::new(mu.clone(), 1e4).unwrap();
        for v in sample_vmf(&params, 2000, &mut rng(2)).unwrap() {
            assert!(v.dot(&mu) > 0.99);
            assert!((norm(v.as_slice()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vmf_rejects_bad_params() {
        assert!(VmfParams::new(UnitVector::basis(3, 0), -1.0).is_err());
        let p = VmfParams::new(UnitVector::basis(3, 0), 1.0).unwrap();
        assert!(sample_vmf(&p, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_with_exact_counts() {
        let spec = SyntheticSpec {
            train_per_class: 30,
            test_per_class: 10,
            ood_samples: 25,
            ..Default::default()
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id_train.class_counts(), vec![30; 4]);
        assert_eq!(a.id_test.class_counts(), vec![10; 4]);
        assert_eq!(a.ood_test.len(), 25);
        assert!(a.ood_test.labels.is_none());
        let all: Vec<_> = a.mode_directions.iter().chain(&a.ood_directions).collect();
        for i in 0..all.len() {
            for j in 0..i {
                assert!(all[i].dot(all[j]) <= spec.min_angular_sep.cos() + 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_point_mass_collapses() {
        let spec = SyntheticSpec {
            modes_per_class: 1,
            kappa_id: f64::INFINITY,
            train_per_class: 5,
            test_per_class: 2,
            ood_samples: 3,
            ..Default::default()
        };
        let d = gen_synthetic(&spec).unwrap();
        let labels = d.id_train.labels.as_ref().unwrap();
        for (row, &c) in d.id_train.inputs.rows().into_iter().zip(labels) {
            assert_eq!(row.to_vec(), d.mode_directions[c].as_slice());
        }
    }

    #[test]
    fn synthetic_infeasible_separation() {
        let spec = SyntheticSpec {
            dim: 2,
            classes: 4,
            modes_per_class: 2,
            min_angular_sep: PI / 2.0,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic(&spec), Err(Error::SpecInfeasible(_))));
    }
}
