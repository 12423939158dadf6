//! Shared-second-moment Adam at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, toy models that
//! carry a transformer's layer taxonomy, Adam with second moments shared
//! along chosen axes, SNR analysis of those moments, rule derivation and
//! savings accounting, synthetic data and the experiment harness behind the
//! `slimadam` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rules;
pub mod snr;
pub mod tensor;

pub use error::{Error, Result};
pub use harness::{train, train_with_rules, RuleSource, TrainConfig, TrainReport};
pub use model::{build_model, Batch, Census, LayerType, Model, ModelKind, ModelSpec};
pub use optim::{make_baseline_rules, Baseline, Hyper, Schedule, SharedMomentAdam};
pub use rules::{canonical_rules, derive_rules, savings_fraction, RuleSet};
pub use snr::{averaged_snr, snr_k, SnrTrajectory};
pub use tensor::{Axes, Tensor};
