//! Class-wise feature banks for filtering out-of-distribution pseudo-labels in
//! semi-supervised detection, plus a desk-scale teacher-student simulator.

pub mod bank;
pub mod config;
pub mod erf;
pub mod error;
pub mod experiment;
pub mod feature;
pub mod filter;
pub mod io;
pub mod metrics;
pub mod plot;
pub mod scoring;
pub mod sim;
pub mod threshold;

pub use bank::{BankSnapshot, ClassFeatureBank, ClassId, FeatureBankSet};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use feature::FeatureVector;
pub use filter::{FilterConfig, FilterDecision, OodFilter, Progress, PseudoPrediction, RejectReason};
pub use metrics::{auroc, filter_confusion, pseudo_purity, FilterConfusion};
pub use scoring::{ood_score, prototype_scores, DistanceMetric, OodScore};
pub use threshold::{BetaSchedule, ClassStats, ThresholdPolicy};
