//! A small fully connected encoder `f` and projector `g` with hand-written
//! reverse mode, plus SGD with momentum under a cosine learning-rate schedule.
//!
//! Layers are `y = W·x + b`. A rectifier follows every layer except the
//! projector's last one; `h` is the encoder output and `z = g(h)/‖g(h)‖`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_vjp, MIN_NORM};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros_like(&self) -> Linear {
        Linear {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Layer widths. `encoder` lists the output width of each encoder layer
/// (the last is the feature dimension `E`; empty means `h = x`), `projector`
/// likewise for the projection head (must be nonempty).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub encoder: Vec<usize>,
    pub projector: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder: vec![64, 32],
            projector: vec![16],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Linear>,
    /// Number of leading layers that make up the encoder.
    pub encoder_layers: usize,
}

/// Activations saved by [`MlpModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation outputs of every layer.
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub h: Array2<f64>,
    /// Unnormalized projector output `z'`.
    pub z_raw: Array2<f64>,
    pub z: Array2<f64>,
    pub cache: ForwardCache,
}

/// Parameter gradients, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Linear>,
}

impl MlpModel {
    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, arch: &Architecture, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || arch.projector.is_empty() {
            return Err(Error::InvalidConfiguration(
                "input dimension and projector must be nonempty".into(),
            ));
        }
        if arch.encoder.iter().chain(&arch.projector).any(|&w| w == 0) {
            return Err(Error::InvalidConfiguration("layer widths must be >= 1".into()));
        }
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for &out in arch.encoder.iter().chain(&arch.projector) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((out, fan_in), |_| rng.random_range(-bound..bound));
            let bias = Array1::from_shape_fn(out, |_| rng.random_range(-bound..bound));
            layers.push(Linear { weight, bias });
            fan_in = out;
        }
        Ok(Self {
            layers,
            encoder_layers: arch.encoder.len(),
        })
    }

    pub fn from_layers(layers: Vec<Linear>, encoder_layers: usize) -> Result<Self> {
        if encoder_layers >= layers.len() {
            return Err(Error::InvalidInput("model needs at least one projector layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidInput("layer shapes do not chain".into()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::InvalidInput("bias length != layer width".into()));
            }
        }
        Ok(Self { layers, encoder_layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        match self.encoder_layers {
            0 => self.input_dim(),
            n => self.layers[n - 1].out_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every parameter, layer by layer (weights row-major, then biases).
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).cloned())
            .collect()
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut idx = index;
        for l in &mut self.layers {
            let (nw, nb) = (l.weight.len(), l.bias.len());
            if idx < nw {
                return l.weight.iter_mut().nth(idx).expect("in range");
            }
            idx -= nw;
            if idx < nb {
                return &mut l.bias[idx];
            }
            idx -= nb;
        }
        panic!("parameter index {index} out of range");
    }

    fn is_rectified(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input width {} != {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let mut h = if self.encoder_layers == 0 {
            Some(a.clone())
        } else {
            None
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let y = a.dot(&layer.weight.t()) + &layer.bias;
            let out = if self.is_rectified(l) {
                y.mapv(|v| v.max(0.0))
            } else {
                y.clone()
            };
            inputs.push(std::mem::replace(&mut a, out));
            pre.push(y);
            if l + 1 == self.encoder_layers {
                h = Some(a.clone());
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite activation".into()));
        }
        let z_raw = a;
        let mut z = z_raw.clone();
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n <= MIN_NORM {
                return Err(Error::DegenerateVector(n));
            }
            row.mapv_inplace(|v| v / n);
        }
        Ok(Forward {
            h: h.expect("feature layer visited"),
            z_raw,
            z,
            cache: ForwardCache { inputs, pre },
        })
    }

    /// Reverse mode from `∂L/∂z` (and optionally `∂L/∂h`) to every parameter.
    pub fn backward(
        &self,
        fwd: &Forward,
        grad_z: ArrayView2<f64>,
        grad_h: Option<ArrayView2<f64>>,
    ) -> Result<Gradients> {
        let cache = &fwd.cache;
        if cache.inputs.len() != self.layers.len() || grad_z.dim() != fwd.z.dim() {
            return Err(Error::InvalidInput(
                "cache or gradient shape does not match model".into(),
            ));
        }
        if let Some(gh) = grad_h {
            if gh.dim() != fwd.h.dim() {
                return Err(Error::InvalidInput("grad_h shape mismatch".into()));
            }
        }
        // Through the row normalization.
        let mut g = Array2::zeros(grad_z.dim());
        for (i, mut row) in g.rows_mut().into_iter().enumerate() {
            let zr = fwd.z_raw.row(i).to_vec();
            let gz = grad_z.row(i).to_vec();
            let back = normalize_vjp(&zr, &gz)?;
            row.iter_mut().zip(back).for_each(|(d, v)| *d = v);
        }

        let mut grads: Vec<Linear> = self.layers.iter().map(Linear::zeros_like).collect();
        for l in (0..self.layers.len()).rev() {
            if self.is_rectified(l) {
                Zip::from(&mut g).and(&cache.pre[l]).for_each(|gv, &p| {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            grads[l].weight = g.t().dot(&cache.inputs[l]);
            grads[l].bias = g.sum_axis(Axis(0));
            if l > 0 {
                let mut g_in = g.dot(&self.layers[l].weight);
                if l == self.encoder_layers {
                    if let Some(gh) = grad_h {
                        g_in += &gh;
                    }
                }
                g = g_in;
            }
        }
        Ok(Gradients { layers: grads })
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).cloned())
            .collect()
    }
}

/// `0.5·base·(1 + cos(π·epoch/total))`; `base` when `total == 0`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    0.5 * base_lr * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<Linear>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl OptimizerState {
    pub fn new(model: &MlpModel, base_lr: f64, momentum: f64, weight_decay: f64, total_epochs: usize) -> Self {
        Self {
            buffers: model.layers.iter().map(Linear::zeros_like).collect(),
            base_lr,
            momentum,
            weight_decay,
            epoch: 0,
            total_epochs,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.epoch, self.total_epochs)
    }
}

/// `buf ← m·buf + grad + wd·param; param ← param − lr·buf` with the learning
/// rate of the state's current epoch.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if grads.layers.len() != model.layers.len() || state.buffers.len() != model.layers.len() {
        return Err(Error::InvalidInput("gradient/buffer layer count mismatch".into()));
    }
    let lr = state.current_lr();
    let (m, wd) = (state.momentum, state.weight_decay);
    for ((layer, grad), buf) in model.layers.iter_mut().zip(&grads.layers).zip(&mut state.buffers) {
        if layer.weight.dim() != grad.weight.dim() || layer.weight.dim() != buf.weight.dim() {
            return Err(Error::InvalidInput("gradient shape mismatch".into()));
        }
        Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .and(&mut buf.weight)
            .for_each(|p, &g, b| {
                *b = m * *b + g + wd * *p;
                *p -= lr * *b;
            });
        Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut buf.bias)
            .for_each(|p, &g, b| {
                *b = m * *b + g + wd * *p;
                *p -= lr * *b;
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> MlpModel {
        let arch = Architecture {
            encoder: vec![5, 4],
            projector: vec![3],
        };
        MlpModel::new(4, &arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn forward_rows_are_unit_norm() {
        let m = model(1);
        let x = Array2::from_shape_fn((7, 4), |(i, j)| ((i * 4 + j) as f64).sin());
        let f = m.forward(x.view()).unwrap();
        assert_eq!(f.h.dim(), (7, 4));
        for row in f.z.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_is_degenerate() {
        let mut m = model(2);
        for l in &mut m.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = arr2(&[[1.0, 2.0, 3.0, 4.0]]);
        assert!(matches!(m.forward(x.view()), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn identity_layer_passes_unit_input() {
        let eye = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let m = MlpModel::from_layers(
            vec![Linear {
                weight: eye,
                bias: Array1::zeros(3),
            }],
            0,
        )
        .unwrap();
        let x = arr2(&[[0.0, 0.6, 0.8]]);
        let f = m.forward(x.view()).unwrap();
        assert_eq!(f.z, x);
        assert_eq!(f.h, x);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let m = model(3);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.3 - 0.5);
        let f = m.forward(x.view()).unwrap();
        let g = m
            .backward(
                &f,
                Array2::zeros(f.z.dim()).view(),
                Some(Array2::zeros(f.h.dim()).view()),
            )
            .unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_closed_form() {
        // Probe L = gᵀz with ‖z'‖ = 1 and g ⟂ z': then ∂L/∂z' = g, so
        // ∂L/∂W = g·xᵀ and ∂L/∂b = g.
        let w = arr2(&[[0.6, 0.0], [0.0, 0.8]]);
        let m = MlpModel::from_layers(
            vec![Linear {
                weight: w,
                bias: Array1::zeros(2),
            }],
            0,
        )
        .unwrap();
        let x = arr2(&[[1.0, 1.0]]);
        let f = m.forward(x.view()).unwrap();
        assert!((f.z_raw.row(0).dot(&f.z_raw.row(0)) - 1.0).abs() < 1e-15);
        let g = arr2(&[[0.8, -0.6]]);
        let grads = m.backward(&f, g.view(), None).unwrap();
        let expect_w = arr2(&[[0.8, 0.8], [-0.6, -0.6]]);
        for (a, b) in grads.layers[0].weight.iter().zip(expect_w.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((grads.layers[0].bias[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.5, 0, 10), 0.5);
        assert!(cosine_lr(0.5, 10, 10).abs() < 1e-17);
        assert!((cosine_lr(0.5, 5, 10) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sgd_examples() {
        let mut m = model(4);
        let before = m.clone();
        let grads = Gradients {
            layers: m
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.mapv(|_| 1.0),
                    bias: l.bias.mapv(|_| 1.0),
                })
                .collect(),
        };

        let mut frozen = OptimizerState::new(&m, 0.0, 0.9, 1e-6, 10);
        sgd_step(&mut m, &grads, &mut frozen).unwrap();
        assert_eq!(m, before);

        let mut plain = OptimizerState::new(&m, 0.1, 0.0, 0.0, 0);
        sgd_step(&mut m, &grads, &mut plain).unwrap();
        for (a, b) in m.params().iter().zip(before.params()) {
            assert!((a - (b - 0.1)).abs() < 1e-15);
        }

        let mut m2 = before.clone();
        let mut mom = OptimizerState::new(&m2, 0.1, 0.9, 0.0, 0);
        sgd_step(&mut m2, &grads, &mut mom).unwrap();
        sgd_step(&mut m2, &grads, &mut mom).unwrap();
        for (a, b) in m2.params().iter().zip(before.params()) {
            assert!((b - a - 0.1 * (1.0 + 1.9)).abs() < 1e-12);
        }
    }
}
