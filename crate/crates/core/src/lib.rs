//! Prototypical learning with a class-conditional mixture of hyperspherical
//! prototypes, for distance-based out-of-distribution detection.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`geometry`] | unit vectors, normalization Jacobian, vMF sampling, synthetic data |
//! | [`assignment`] | Sinkhorn-Knopp soft assignment, top-k pruning, weight tables |
//! | [`prototypes`] | prototype bank, EMA update with gradient pathway, detach |
//! | [`losses`] | MLE loss, prototype contrastive loss, posterior, swapped loss |
//! | [`encoder`] | small MLP encoder/projector with manual backprop and SGD |
//! | [`trainer`] | per-iteration choreography and epoch loop |
//! | [`scoring`] | Mahalanobis, KNN and posterior scores, compactness |
//! | [`metrics`] | AUROC, FPR at 95% TPR, overlap area, evaluation report |
//! | [`io`] | binary embedding/model files and CSV formats |
//! | [`cli`] | command implementations behind the `palm` binary |

// Negated comparisons reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod prototypes;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
