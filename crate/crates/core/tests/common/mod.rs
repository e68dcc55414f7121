#![allow(dead_code)]

use std::io::Write;
use std::time::{Duration, Instant};

use palm::geometry::{gen_synthetic, SyntheticData, SyntheticSpec};
use palm::metrics::auroc;
use palm::scoring::{compactness, knn_scores, mahalanobis_scores};
use palm::trainer::{features, fit_features, train, TrainConfig, TrainMode};

/// Neighbor rank for KNN scores at this data scale.
pub const KNN_K: usize = 10;

/// Library defaults with the two step-budget-dependent knobs rescaled for
/// ~800 SGD steps: learning rate and EMA momentum.
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 0.01,
        alpha: 0.95,
        seed,
        ..TrainConfig::default()
    }
}

/// Unsupervised desk configuration: a global pool of 16 prototypes.
pub fn desk_unsupervised_config(seed: u64) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Unsupervised,
        prototypes_per_class: 16,
        k_top: 5,
        batch_size: 32,
        augment_sigma: 0.2,
        epochs: 20,
        ..desk_config(seed)
    }
}

pub fn synthetic(seed: u64) -> SyntheticData {
    gen_synthetic(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .expect("default spec is feasible")
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub mahalanobis_auroc: f64,
    pub knn_auroc: f64,
    /// Degrees, ID test embeddings against the trained bank.
    pub compactness: f64,
    pub epoch_losses: Vec<f64>,
    pub all_losses_finite: bool,
    pub elapsed: Duration,
}

/// Trains on the ID train split and evaluates ID test against OOD test.
pub fn run_pipeline(data: &SyntheticData, config: &TrainConfig) -> RunResult {
    let start = Instant::now();
    let train_set = match config.mode {
        TrainMode::Supervised => data.id_train.clone(),
        TrainMode::Unsupervised => data.id_train.without_labels(),
    };
    let out = train(config, &train_set).expect("training succeeds");
    let elapsed = start.elapsed();
    let ck = &out.checkpoint;

    let fit = fit_features(ck, &train_set).expect("Gaussian fit");
    let h_id = features(ck, data.id_test.inputs.view()).unwrap();
    let h_ood = features(ck, data.ood_test.inputs.view()).unwrap();
    let m_id = mahalanobis_scores(&fit, h_id.view()).unwrap().values;
    let m_ood = mahalanobis_scores(&fit, h_ood.view()).unwrap().values;

    let z_train = ck.model.forward(train_set.inputs.view()).unwrap().z;
    let z_id = ck.model.forward(data.id_test.inputs.view()).unwrap().z;
    let z_ood = ck.model.forward(data.ood_test.inputs.view()).unwrap().z;
    let k_id = knn_scores(z_train.view(), z_id.view(), KNN_K).unwrap().values;
    let k_ood = knn_scores(z_train.view(), z_ood.view(), KNN_K).unwrap().values;

    RunResult {
        mahalanobis_auroc: auroc(&m_id, &m_ood).unwrap(),
        knn_auroc: auroc(&k_id, &k_ood).unwrap(),
        compactness: compactness(z_id.view(), &ck.bank).unwrap(),
        epoch_losses: out.epochs.iter().map(|e| e.loss).collect(),
        all_losses_finite: out.steps.iter().all(|s| s.loss.is_finite()),
        elapsed,
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Prints one verdict line straight to stdout so it shows without `--nocapture`.
pub fn verdict(criterion: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] criterion {criterion} ({name}): {detail}");
}
