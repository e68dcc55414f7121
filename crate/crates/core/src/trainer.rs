//! Training loop: forward, assign, EMA update, loss, backward, SGD, detach.
//!
//! All randomness derives from `TrainConfig::seed`. Initialization draws from
//! stream 0 and epoch `e` draws its shuffle and noise from stream `e + 1`, so a
//! checkpoint needs no RNG state to resume bit-identically.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{assign_global, build_weight_table, AssignmentMode, AssignmentParams, WeightTable};
use crate::data::Dataset;
use crate::encoder::{sgd_step, Architecture, Forward, Gradients, MlpModel, OptimizerState};
use crate::error::{Error, Result};
use crate::losses::{palm_loss, unsup_swapped_loss, LossOutput};
use crate::prototypes::PrototypeBank;
use crate::scoring::{fit_gaussian, normalize_rows, GaussianFit, Shrinkage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Supervised,
    Unsupervised,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "unsupervised" => Ok(Self::Unsupervised),
            other => Err(Error::InvalidConfiguration(format!("unknown mode {other:?}"))),
        }
    }
}

/// Every training hyperparameter. Missing JSON keys take the defaults below;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Number of classes; inferred from the labels when absent.
    pub classes: Option<usize>,
    /// Prototypes per class (`K`); in unsupervised mode, the size of the global pool.
    pub prototypes_per_class: usize,
    pub k_top: usize,
    pub tau: f64,
    pub tau_p: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub epsilon: f64,
    /// `0` iterates Sinkhorn to convergence.
    pub sinkhorn_iters: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub assignment_mode: AssignmentMode,
    /// `false` replaces each assigned prototype by its normalized weighted batch mean.
    pub ema_enabled: bool,
    /// Std. dev. of the Gaussian input noise forming the second view (unsupervised mode).
    pub augment_sigma: f64,
    pub architecture: Architecture,
    pub shrinkage: Shrinkage,
    /// Fit and score Mahalanobis on unit-normalized penultimate features.
    pub normalize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Supervised,
            classes: None,
            prototypes_per_class: 6,
            k_top: 5,
            tau: 0.1,
            tau_p: 0.5,
            lambda: 1.0,
            alpha: 0.999,
            epsilon: 0.05,
            sinkhorn_iters: 3,
            batch_size: 128,
            epochs: 100,
            base_lr: 0.5,
            momentum: 0.9,
            weight_decay: 1e-6,
            seed: 0,
            assignment_mode: AssignmentMode::Soft,
            ema_enabled: true,
            augment_sigma: 0.1,
            architecture: Architecture::default(),
            shrinkage: Shrinkage::default(),
            normalize_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        let k = self.prototypes_per_class;
        if k == 0 {
            return bad("prototypes_per_class must be >= 1".into());
        }
        if self.k_top == 0 || self.k_top > k {
            return bad(format!("k_top must be in [1, {k}], got {}", self.k_top));
        }
        if self.classes == Some(0) {
            return bad("classes must be >= 1".into());
        }
        let positive = [("tau", self.tau), ("tau_p", self.tau_p), ("epsilon", self.epsilon)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        let nonneg = [
            ("lambda", self.lambda),
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("augment_sigma", self.augment_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.architecture.encoder.is_empty() || self.architecture.projector.is_empty() {
            return bad("encoder and projector need at least one layer each".into());
        }
        if self
            .architecture
            .encoder
            .iter()
            .chain(&self.architecture.projector)
            .any(|&w| w == 0)
        {
            return bad("layer widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn assignment_params(&self) -> AssignmentParams {
        AssignmentParams {
            epsilon: self.epsilon,
            iterations: self.sinkhorn_iters,
            k_top: self.k_top,
            mode: self.assignment_mode,
        }
    }

    /// `λ`, or `0` when the prototype-contrastive term is undefined
    /// (fewer than two classes or prototypes per class).
    pub fn effective_lambda(&self, classes: usize) -> f64 {
        if classes < 2 || self.prototypes_per_class < 2 {
            0.0
        } else {
            self.lambda
        }
    }

    fn ema_alpha(&self) -> f64 {
        if self.ema_enabled {
            self.alpha
        } else {
            0.0
        }
    }
}

/// Full resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: MlpModel,
    pub bank: PrototypeBank,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
}

/// One row of the per-step diagnostics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub epoch: usize,
    pub batch: usize,
    pub batch_len: usize,
    pub lr: f64,
    pub loss: f64,
    /// Per-term loss values (`mle`, `proto_contrast`, `swapped`).
    pub terms: BTreeMap<&'static str, f64>,
    /// Mean entropy of the own-class (or global) assignment rows, in nats.
    pub assignment_entropy: f64,
    /// Largest marginal residual among the batch's assignments.
    pub sinkhorn_residual: f64,
    /// Largest `‖p_new − p_old‖` over the bank.
    pub prototype_drift: f64,
}

/// Per-epoch means of the step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    pub mle: f64,
    pub proto_contrast: f64,
    pub swapped: f64,
    pub assignment_entropy: f64,
    pub prototype_drift: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,steps,loss,mle,proto_contrast,swapped,assignment_entropy,prototype_drift";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.steps,
            self.loss,
            self.mle,
            self.proto_contrast,
            self.swapped,
            self.assignment_entropy,
            self.prototype_drift
        )
    }

    fn summarize(epoch: usize, lr: f64, steps: &[StepDiagnostics]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&StepDiagnostics) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let term = |name: &'static str| mean(&|s: &StepDiagnostics| s.terms.get(name).copied().unwrap_or(0.0));
        Self {
            epoch,
            lr,
            steps: steps.len(),
            loss: mean(&|s| s.loss),
            mle: term("mle"),
            proto_contrast: term("proto_contrast"),
            swapped: term("swapped"),
            assignment_entropy: mean(&|s| s.assignment_entropy),
            prototype_drift: steps.iter().map(|s| s.prototype_drift).fold(0.0, f64::max),
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepDiagnostics>,
}

pub fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Layer-wise sum of two gradient sets of identical shape.
pub fn add_gradients(mut a: Gradients, b: &Gradients) -> Result<Gradients> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::InvalidInput("gradient layer count mismatch".into()));
    }
    for (x, y) in a.layers.iter_mut().zip(&b.layers) {
        x.weight += &y.weight;
        x.bias += &y.bias;
    }
    Ok(a)
}

/// Supervised objective for a fixed weight table: EMA-updates `bank` from the
/// embeddings of `x` and evaluates the combined loss against the updated,
/// still attached bank. Returns the forward pass, the updated bank and the loss.
pub fn supervised_objective(
    model: &MlpModel,
    bank: &PrototypeBank,
    x: ArrayView2<f64>,
    labels: &[usize],
    table: &WeightTable,
    config: &TrainConfig,
) -> Result<(Forward, PrototypeBank, LossOutput)> {
    let fwd = model.forward(x)?;
    let source = bank.detach().with_alpha(config.ema_alpha())?;
    let updated = source.ema_update(fwd.z.view(), labels, table)?;
    let lambda = config.effective_lambda(bank.classes());
    let loss = palm_loss(fwd.z.view(), labels, &updated, table, config.tau, config.tau_p, lambda)?;
    Ok((fwd, updated, loss))
}

fn check_detached(bank: &PrototypeBank) -> Result<()> {
    if bank.is_attached() {
        return Err(Error::Internal("prototype bank must be detached between steps".into()));
    }
    Ok(())
}

fn max_residual(table: &WeightTable) -> f64 {
    table.class_stats.iter().map(|s| s.residual).fold(0.0, f64::max)
}

/// One supervised iteration on the batch `(x, labels)`. Returns the detached
/// updated bank.
pub fn train_step(
    model: &mut MlpModel,
    bank: &PrototypeBank,
    x: ArrayView2<f64>,
    labels: &[usize],
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<(PrototypeBank, StepDiagnostics)> {
    check_detached(bank)?;
    let z0 = model.forward(x)?.z;
    let table = build_weight_table(z0.view(), labels, bank, &config.assignment_params())?;
    let (fwd, updated, loss) = supervised_objective(model, bank, x, labels, &table, config)?;
    let grads = model.backward(&fwd, loss.grad_z.view(), None)?;
    let lr = state.current_lr();
    sgd_step(model, &grads, state)?;
    let next = updated.detach().with_alpha(config.alpha)?;
    let diag = StepDiagnostics {
        epoch: state.epoch,
        batch: 0,
        batch_len: x.nrows(),
        lr,
        loss: loss.value,
        terms: loss.terms,
        assignment_entropy: table.mean_own_entropy(labels),
        sinkhorn_residual: max_residual(&table),
        prototype_drift: next.max_drift(bank),
    };
    check_detached(&next)?;
    Ok((next, diag))
}

/// Table over a single global pool: rows are the codes rescaled to the
/// supervised weight scale (each unpruned column sums to `1/B`).
fn global_table(codes: &Array2<f64>, k: usize) -> WeightTable {
    let b = codes.nrows() as f64;
    WeightTable {
        classes: 1,
        per_class: k,
        weights: codes.mapv(|v| v / b),
        class_stats: Vec::new(),
    }
}

fn row_entropy(codes: &Array2<f64>) -> f64 {
    let ent: f64 = codes
        .rows()
        .into_iter()
        .map(|r| {
            let s: f64 = r.sum();
            r.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| -(v / s) * (v / s).ln())
                .sum::<f64>()
        })
        .sum();
    ent / codes.nrows().max(1) as f64
}

/// Unsupervised objective for fixed views and codes: EMA-updates the global
/// pool from the raw view and evaluates the swapped loss.
pub fn unsupervised_objective(
    model: &MlpModel,
    bank: &PrototypeBank,
    x: ArrayView2<f64>,
    x_aug: ArrayView2<f64>,
    codes: &Array2<f64>,
    codes_aug: &Array2<f64>,
    config: &TrainConfig,
) -> Result<(Forward, Forward, PrototypeBank, LossOutput)> {
    let fwd = model.forward(x)?;
    let fwd_aug = model.forward(x_aug)?;
    let labels = vec![0; x.nrows()];
    let source = bank.detach().with_alpha(config.ema_alpha())?;
    let updated = source.ema_update(fwd.z.view(), &labels, &global_table(codes, bank.per_class()))?;
    let loss = unsup_swapped_loss(
        fwd.z.view(),
        fwd_aug.z.view(),
        codes.view(),
        codes_aug.view(),
        &updated,
        config.tau,
    )?;
    Ok((fwd, fwd_aug, updated, loss))
}

/// One unsupervised iteration on the raw batch `x` with its noisy view `x_aug`.
pub fn train_unsupervised_step(
    model: &mut MlpModel,
    bank: &PrototypeBank,
    x: ArrayView2<f64>,
    x_aug: ArrayView2<f64>,
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<(PrototypeBank, StepDiagnostics)> {
    check_detached(bank)?;
    if bank.classes() != 1 {
        return Err(Error::InvalidInput(
            "unsupervised training needs a single global pool".into(),
        ));
    }
    let params = config.assignment_params();
    let codes = assign_global(bank.rows(), model.forward(x)?.z.view(), &params)?;
    let codes_aug = assign_global(bank.rows(), model.forward(x_aug)?.z.view(), &params)?;
    let (fwd, fwd_aug, updated, loss) = unsupervised_objective(model, bank, x, x_aug, &codes, &codes_aug, config)?;
    let grad_aug = loss
        .grad_z_aug
        .as_ref()
        .ok_or_else(|| Error::Internal("swapped loss lacks the second-view gradient".into()))?;
    let grads = add_gradients(
        model.backward(&fwd, loss.grad_z.view(), None)?,
        &model.backward(&fwd_aug, grad_aug.view(), None)?,
    )?;
    let lr = state.current_lr();
    sgd_step(model, &grads, state)?;
    let next = updated.detach().with_alpha(config.alpha)?;
    let diag = StepDiagnostics {
        epoch: state.epoch,
        batch: 0,
        batch_len: x.nrows(),
        lr,
        loss: loss.value,
        terms: loss.terms,
        assignment_entropy: row_entropy(&codes),
        sinkhorn_residual: 0.0,
        prototype_drift: next.max_drift(bank),
    };
    Ok((next, diag))
}

/// Number of prototype-bank classes for `config` on `data`.
pub fn bank_classes(config: &TrainConfig, data: &Dataset) -> Result<usize> {
    match config.mode {
        TrainMode::Unsupervised => Ok(1),
        TrainMode::Supervised => {
            if !data.is_labeled() {
                return Err(Error::InvalidInput("supervised training needs labeled data".into()));
            }
            let inferred = data.num_classes();
            match config.classes {
                Some(c) if c < inferred => Err(Error::InvalidInput(format!(
                    "label {} exceeds classes = {c}",
                    inferred - 1
                ))),
                Some(c) => Ok(c),
                None => Ok(inferred),
            }
        }
    }
}

/// Initial model, bank and optimizer (epoch 0).
pub fn initialize(config: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    config.validate()?;
    let classes = bank_classes(config, data)?;
    let mut rng = epoch_rng(config.seed, 0);
    let model = MlpModel::new(data.dim(), &config.architecture, &mut rng)?;
    let bank = PrototypeBank::init_uniform(
        classes,
        config.prototypes_per_class,
        model.output_dim(),
        config.alpha,
        &mut rng,
    )?;
    let optimizer = OptimizerState::new(
        &model,
        config.base_lr,
        config.momentum,
        config.weight_decay,
        config.epochs,
    );
    Ok(Checkpoint {
        config: config.clone(),
        model,
        bank,
        optimizer,
        epoch: 0,
        config_hash: config.hash()?,
    })
}

fn locate(err: Error, epoch: usize, batch: usize) -> Error {
    if err.is_numerical() {
        Error::Numerical(format!("epoch {epoch}, batch {batch}: {err}"))
    } else {
        err
    }
}

/// Runs one epoch on `data`, advancing the checkpoint.
pub fn run_epoch(ckpt: &mut Checkpoint, data: &Dataset) -> Result<(EpochRecord, Vec<StepDiagnostics>)> {
    let config = ckpt.config.clone();
    let epoch = ckpt.epoch;
    let mut rng = epoch_rng(config.seed, epoch as u64 + 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    ckpt.optimizer.epoch = epoch;
    let lr = ckpt.optimizer.current_lr();
    let mut steps = Vec::new();
    for (batch, idx) in order.chunks(config.batch_size).enumerate() {
        let x = data.inputs.select(Axis(0), idx);
        let result = match config.mode {
            TrainMode::Supervised => {
                let labels: Vec<usize> = {
                    let all = data.labels.as_ref().expect("checked by bank_classes");
                    idx.iter().map(|&i| all[i]).collect()
                };
                train_step(
                    &mut ckpt.model,
                    &ckpt.bank,
                    x.view(),
                    &labels,
                    &config,
                    &mut ckpt.optimizer,
                )
            }
            TrainMode::Unsupervised => {
                let sigma = config.augment_sigma;
                let x_aug = x.mapv(|v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v + sigma * n
                });
                train_unsupervised_step(
                    &mut ckpt.model,
                    &ckpt.bank,
                    x.view(),
                    x_aug.view(),
                    &config,
                    &mut ckpt.optimizer,
                )
            }
        };
        let (bank, mut diag) = result.map_err(|e| locate(e, epoch, batch))?;
        ckpt.bank = bank;
        diag.batch = batch;
        steps.push(diag);
    }
    ckpt.epoch += 1;
    ckpt.optimizer.epoch = ckpt.epoch;
    Ok((EpochRecord::summarize(epoch, lr, &steps), steps))
}

/// Continues training from `ckpt` until `config.epochs` epochs are complete.
pub fn resume(mut ckpt: Checkpoint, data: &Dataset) -> Result<TrainOutcome> {
    if ckpt.config_hash != ckpt.config.hash()? {
        return Err(Error::InvalidInput("checkpoint config hash mismatch".into()));
    }
    if data.dim() != ckpt.model.input_dim() {
        return Err(Error::InvalidInput(format!(
            "data dimension {} != model input {}",
            data.dim(),
            ckpt.model.input_dim()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if ckpt.config.mode == TrainMode::Supervised && bank_classes(&ckpt.config, data)? != ckpt.bank.classes() {
        return Err(Error::InvalidInput(
            "data classes do not match the prototype bank".into(),
        ));
    }
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    while ckpt.epoch < ckpt.config.epochs {
        let (record, diag) = run_epoch(&mut ckpt, data)?;
        epochs.push(record);
        steps.extend(diag);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        epochs,
        steps,
    })
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    resume(initialize(config, data)?, data)
}

/// Penultimate features of `x`, unit-normalized when the config asks for it.
pub fn features(ckpt: &Checkpoint, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let h = ckpt.model.forward(x)?.h;
    Ok(if ckpt.config.normalize_features {
        normalize_rows(h.view())
    } else {
        h
    })
}

/// Class-conditional Gaussian over the training features. Unlabeled data
/// (or unsupervised mode) yields a single global Gaussian.
pub fn fit_features(ckpt: &Checkpoint, data: &Dataset) -> Result<GaussianFit> {
    let h = features(ckpt, data.inputs.view())?;
    let labels = match (&data.labels, ckpt.config.mode) {
        (Some(l), TrainMode::Supervised) => l.clone(),
        _ => vec![0; data.len()],
    };
    fit_gaussian(h.view(), &labels, ckpt.config.shrinkage)
}
