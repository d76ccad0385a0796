//! Two-stage pseudo-label gate (confidence, then class-bank OOD score) and the
//! logit-based baseline scorers it is compared against.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{ClassId, FeatureBankSet};
use crate::error::{Error, Result};
use crate::feature::FeatureVector;
use crate::scoring::{ood_score, DistanceMetric, OodScore};
use crate::threshold::{ClassStats, StatsCache, ThresholdPolicy};

/// Evaluation-only ground truth. Never consulted by any filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroundTruth {
    #[default]
    Unknown,
    Id {
        class: Option<ClassId>,
    },
    Ood,
}

impl GroundTruth {
    pub fn is_ood(self) -> Option<bool> {
        match self {
            GroundTruth::Unknown => None,
            GroundTruth::Id { .. } => Some(false),
            GroundTruth::Ood => Some(true),
        }
    }
}

/// A teacher prediction on an unlabeled object, candidate for becoming a pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPrediction {
    pub record_id: String,
    pub feature: FeatureVector,
    pub pred_class: ClassId,
    pub confidence: f64,
    pub logits: Option<Vec<f64>>,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    None,
    LowConfidence,
    Ood,
    ColdBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub record_id: String,
    pub kept: bool,
    pub reject_reason: RejectReason,
    pub ood_score: Option<OodScore>,
    pub threshold_used: Option<f64>,
    pub beta: Option<f64>,
    pub warmup: bool,
}

impl FilterDecision {
    fn low_confidence(record_id: &str) -> Self {
        Self {
            record_id: record_id.to_string(),
            kept: false,
            reject_reason: RejectReason::LowConfidence,
            ood_score: None,
            threshold_used: None,
            beta: None,
            warmup: false,
        }
    }

    /// Whether the decision went through the OOD gate (a score was compared
    /// against a threshold).
    pub fn is_gated(&self) -> bool {
        self.ood_score.is_some() && self.threshold_used.is_some()
    }
}

/// What to do with confident predictions while some class bank is still filling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupBehavior {
    /// Skip the OOD gate and keep everything that passed the confidence gate.
    #[default]
    Bypass,
    /// Reject with `cold_bank`.
    Reject,
}

/// Position in the threshold schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub step: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub k: usize,
    pub metric: DistanceMetric,
    pub policy: ThresholdPolicy,
    pub conf_tau: f64,
    pub warmup: WarmupBehavior,
}

impl FilterConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_tau) {
            return Err(Error::Config(format!("conf_tau must be in [0, 1], got {}", self.conf_tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if let ThresholdPolicy::Fixed { tau } = self.policy {
            if !tau.is_finite() {
                return Err(Error::Config(format!("fixed threshold must be finite, got {tau}")));
            }
            if self.metric == DistanceMetric::Cosine && !(tau > 0.0 && tau <= 2.0) {
                return Err(Error::Config(format!(
                    "fixed cosine threshold must be in (0, 2], got {tau}"
                )));
            }
        }
        Ok(())
    }
}

/// Thresholds in force at one step of the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub beta: Option<f64>,
    pub stats: Vec<ClassStats>,
    pub taus: Vec<f64>,
}

/// The class-wise feature bank filter. Holds a statistics cache so repeated
/// calls against an unchanged bank do not rescore its prototypes.
#[derive(Debug, Clone)]
pub struct OodFilter {
    config: FilterConfig,
    cache: StatsCache,
}

impl OodFilter {
    pub fn new(config: FilterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            cache: StatsCache::new(),
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Thresholds for every class at `progress`. Requires a warm bank set.
    pub fn thresholds(&mut self, banks: &FeatureBankSet, progress: Progress) -> Result<ThresholdState> {
        match self.config.policy {
            ThresholdPolicy::Fixed { tau } => Ok(ThresholdState {
                beta: None,
                stats: Vec::new(),
                taus: vec![tau; banks.num_classes()],
            }),
            ThresholdPolicy::Adaptive(schedule) => {
                let beta = schedule.beta_at(progress.step, progress.total)?;
                let stats = self.cache.stats(banks, self.config.k, self.config.metric)?;
                let taus = stats.iter().map(|s| s.threshold(beta)).collect();
                Ok(ThresholdState {
                    beta: Some(beta),
                    stats,
                    taus,
                })
            }
        }
    }

    /// Gates `preds` in input order. Scoring fans out over `pool` when given;
    /// the output does not depend on it.
    pub fn filter(
        &mut self,
        preds: &[PseudoPrediction],
        banks: &FeatureBankSet,
        progress: Progress,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Vec<FilterDecision>> {
        validate_predictions(preds, banks)?;
        let conf_tau = self.config.conf_tau;

        if !banks.is_warm() {
            let warmup = self.config.warmup;
            return Ok(preds
                .iter()
                .map(|p| {
                    if p.confidence < conf_tau {
                        return FilterDecision::low_confidence(&p.record_id);
                    }
                    let (kept, reason, warm_flag) = match warmup {
                        WarmupBehavior::Bypass => (true, RejectReason::None, true),
                        WarmupBehavior::Reject => (false, RejectReason::ColdBank, false),
                    };
                    FilterDecision {
                        record_id: p.record_id.clone(),
                        kept,
                        reject_reason: reason,
                        ood_score: None,
                        threshold_used: None,
                        beta: None,
                        warmup: warm_flag,
                    }
                })
                .collect());
        }

        let state = self.thresholds(banks, progress)?;
        let k = self.config.k;
        let metric = self.config.metric;
        let decide = |p: &PseudoPrediction| -> Result<FilterDecision> {
            if p.confidence < conf_tau {
                return Ok(FilterDecision::low_confidence(&p.record_id));
            }
            let score = ood_score(&p.feature, banks.prototypes(p.pred_class)?, k, metric)?;
            let tau = state.taus[p.pred_class];
            let kept = score <= tau;
            Ok(FilterDecision {
                record_id: p.record_id.clone(),
                kept,
                reject_reason: if kept { RejectReason::None } else { RejectReason::Ood },
                ood_score: Some(score),
                threshold_used: Some(tau),
                beta: state.beta,
                warmup: false,
            })
        };
        match pool {
            Some(pool) => pool.install(|| preds.par_iter().map(decide).collect()),
            None => preds.iter().map(decide).collect(),
        }
    }
}

fn validate_predictions(preds: &[PseudoPrediction], banks: &FeatureBankSet) -> Result<()> {
    for p in preds {
        if p.pred_class >= banks.num_classes() {
            return Err(Error::Validation(format!(
                "record {}: predicted class {} is not a declared in-distribution class",
                p.record_id, p.pred_class
            )));
        }
        if !(0.0..=1.0).contains(&p.confidence) {
            return Err(Error::Validation(format!(
                "record {}: confidence {} outside [0, 1]",
                p.record_id, p.confidence
            )));
        }
        if p.feature.dim() != banks.dim() {
            return Err(Error::Validation(format!(
                "record {}: feature dimension {} does not match bank dimension {}",
                p.record_id,
                p.feature.dim(),
                banks.dim()
            )));
        }
    }
    Ok(())
}

/// One-shot convenience wrapper around [`OodFilter`].
pub fn filter_predictions(
    preds: &[PseudoPrediction],
    banks: &FeatureBankSet,
    config: FilterConfig,
    progress: Progress,
) -> Result<Vec<FilterDecision>> {
    OodFilter::new(config)?.filter(preds, banks, progress, None)
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Size("logits are empty".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Validation("logits contain non-finite values".into()));
    }
    Ok(())
}

fn max_logit(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax of `logits`, max-shifted.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let m = max_logit(logits);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Maximum softmax probability. Higher is more in-distribution.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    Ok(max_logit(&softmax(logits)?))
}

/// Shannon entropy of the softmax, in nats. Higher is more OOD.
pub fn entropy_score(logits: &[f64]) -> Result<f64> {
    Ok(softmax(logits)?
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum())
}

/// Free energy `-log sum exp(logits)`. Higher is more OOD.
pub fn energy_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let m = max_logit(logits);
    Ok(-(m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineScorer {
    Msp,
    Entropy,
    Energy,
}

impl BaselineScorer {
    pub fn score(self, logits: &[f64]) -> Result<f64> {
        match self {
            BaselineScorer::Msp => msp_score(logits),
            BaselineScorer::Entropy => entropy_score(logits),
            BaselineScorer::Energy => energy_score(logits),
        }
    }

    /// Whether `score` falls on the in-distribution side of `cutoff`. Boundary keeps.
    pub fn keeps(self, score: f64, cutoff: f64) -> bool {
        match self {
            BaselineScorer::Msp => score >= cutoff,
            BaselineScorer::Entropy | BaselineScorer::Energy => score <= cutoff,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineScorer::Msp => "msp",
            BaselineScorer::Entropy => "entropy",
            BaselineScorer::Energy => "energy",
        }
    }
}

impl fmt::Display for BaselineScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineScorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(BaselineScorer::Msp),
            "entropy" => Ok(BaselineScorer::Entropy),
            "energy" => Ok(BaselineScorer::Energy),
            other => Err(Error::Config(format!("unknown baseline scorer `{other}`"))),
        }
    }
}

/// Filters on a logit-based score alone.
pub fn baseline_filter(preds: &[PseudoPrediction], scorer: BaselineScorer, cutoff: f64) -> Result<Vec<FilterDecision>> {
    gated_baseline_filter(preds, scorer, cutoff, None)
}

/// [`baseline_filter`] behind an optional confidence gate, mirroring the two
/// stages of [`OodFilter`].
pub fn gated_baseline_filter(
    preds: &[PseudoPrediction],
    scorer: BaselineScorer,
    cutoff: f64,
    conf_tau: Option<f64>,
) -> Result<Vec<FilterDecision>> {
    preds
        .iter()
        .map(|p| {
            let logits = p.logits.as_deref().ok_or_else(|| {
                Error::Validation(format!("record {}: baseline scoring needs logits", p.record_id))
            })?;
            if conf_tau.is_some_and(|tau| p.confidence < tau) {
                return Ok(FilterDecision::low_confidence(&p.record_id));
            }
            let score = scorer.score(logits)?;
            let kept = scorer.keeps(score, cutoff);
            Ok(FilterDecision {
                record_id: p.record_id.clone(),
                kept,
                reject_reason: if kept { RejectReason::None } else { RejectReason::Ood },
                ood_score: Some(score),
                threshold_used: Some(cutoff),
                beta: None,
                warmup: false,
            })
        })
        .collect()
}
