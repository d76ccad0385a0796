//! Experiment configuration: one TOML document holding every knob of a run.
//!
//! Unknown keys are rejected. Every key has a default except `seed`.
//! `key=value` overrides address nested keys with dots (`bank.capacity=50`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{BaselineScorer, FilterConfig, WarmupBehavior};
use crate::scoring::{k_from_ratio, DistanceMetric};
use crate::sim::stream::StreamConfig;
use crate::threshold::{BetaSchedule, ThresholdPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub bank: BankConfig,
    #[serde(default)]
    pub threshold: ThresholdConfig,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankUpdate {
    /// FIFO updates with fresh labeled features throughout training.
    #[default]
    Dynamic,
    /// Frozen once warm after burn-in.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub capacity: usize,
    pub knn_ratio: f64,
    pub metric: DistanceMetric,
    pub update: BankUpdate,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 100,
            knn_ratio: 1.0 / 20.0,
            metric: DistanceMetric::Cosine,
            update: BankUpdate::Dynamic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    #[default]
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub kind: ThresholdKind,
    pub fixed_tau: f64,
    pub beta_init: f64,
    pub beta_final: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            kind: ThresholdKind::Adaptive,
            fixed_tau: 0.5,
            beta_init: 1.0,
            beta_final: 2.0,
        }
    }
}

impl ThresholdConfig {
    pub fn policy(&self) -> ThresholdPolicy {
        match self.kind {
            ThresholdKind::Fixed => ThresholdPolicy::Fixed { tau: self.fixed_tau },
            ThresholdKind::Adaptive if self.beta_init == self.beta_final => {
                ThresholdPolicy::Adaptive(BetaSchedule::Fixed { beta: self.beta_init })
            }
            ThresholdKind::Adaptive => ThresholdPolicy::Adaptive(BetaSchedule::Linear {
                beta_init: self.beta_init,
                beta_final: self.beta_final,
            }),
        }
    }
}

/// Which gate sits behind the confidence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Confidence threshold only.
    None,
    /// Class-wise feature bank k-NN score.
    #[default]
    Cfb,
    Msp,
    Entropy,
    Energy,
}

impl FilterMode {
    pub fn baseline(self) -> Option<BaselineScorer> {
        match self {
            FilterMode::Msp => Some(BaselineScorer::Msp),
            FilterMode::Entropy => Some(BaselineScorer::Entropy),
            FilterMode::Energy => Some(BaselineScorer::Energy),
            FilterMode::None | FilterMode::Cfb => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::None => "none",
            FilterMode::Cfb => "cfb",
            FilterMode::Msp => "msp",
            FilterMode::Entropy => "entropy",
            FilterMode::Energy => "energy",
        }
    }
}

/// Cutoffs used for the baseline scorers when `filter.baseline_cutoff` is unset.
pub fn default_baseline_cutoff(scorer: BaselineScorer) -> f64 {
    match scorer {
        BaselineScorer::Msp => 0.9,
        BaselineScorer::Entropy => 0.3,
        BaselineScorer::Energy => -0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub mode: FilterMode,
    pub conf_tau: f64,
    pub warmup: WarmupBehavior,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_cutoff: Option<f64>,
    /// Worker threads for batch scoring; 1 scores inline.
    pub workers: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            mode: FilterMode::Cfb,
            conf_tau: 0.7,
            warmup: WarmupBehavior::Bypass,
            baseline_cutoff: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub burnin_epochs: usize,
    pub burnin_batch: usize,
    pub lr: f64,
    /// Weight of the unlabeled term in the student objective.
    pub loss_weight: f64,
    pub ema_alpha: f64,
    pub temperature: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            burnin_epochs: 20,
            burnin_batch: 32,
            lr: 0.1,
            loss_weight: 1.0,
            ema_alpha: 0.999,
            temperature: 0.5,
            labeled_batch: 10,
            unlabeled_batch: 40,
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            stream: StreamConfig::default(),
            bank: BankConfig::default(),
            threshold: ThresholdConfig::default(),
            filter: FilterSection::default(),
            train: TrainConfig::default(),
        }
    }

    /// Parses a TOML document, applies `overrides` (`key=value`), and validates.
    pub fn from_toml_with_overrides(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_format_error(origin, text, &e))?;
        for raw in overrides {
            apply_override(&mut table, raw)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, "<config>", &[])
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_with_overrides(&text, &p.display().to_string(), overrides)
            }
            None => Self::from_toml_with_overrides("", "<defaults>", overrides),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn k(&self) -> Result<usize> {
        k_from_ratio(self.bank.capacity, self.bank.knn_ratio)
    }

    pub fn filter_config(&self) -> Result<FilterConfig> {
        Ok(FilterConfig {
            k: self.k()?,
            metric: self.bank.metric,
            policy: self.threshold.policy(),
            conf_tau: self.filter.conf_tau,
            warmup: self.filter.warmup,
        })
    }

    pub fn baseline_cutoff(&self) -> Option<f64> {
        self.filter
            .mode
            .baseline()
            .map(|s| self.filter.baseline_cutoff.unwrap_or_else(|| default_baseline_cutoff(s)))
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed, so larger seeds could not be echoed back.
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}, got {}", i64::MAX, self.seed)));
        }
        self.stream.validate()?;
        let k = self.k()?;
        if self.threshold.kind == ThresholdKind::Adaptive && self.bank.capacity <= k {
            return Err(Error::Config(format!(
                "adaptive thresholds need bank.capacity > K (capacity {}, K {k})",
                self.bank.capacity
            )));
        }
        for (name, v) in [
            ("threshold.beta_init", self.threshold.beta_init),
            ("threshold.beta_final", self.threshold.beta_final),
            ("threshold.fixed_tau", self.threshold.fixed_tau),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if !(0.0..=1.0).contains(&self.filter.conf_tau) {
            return Err(Error::Config(format!(
                "filter.conf_tau must be in [0, 1], got {}",
                self.filter.conf_tau
            )));
        }
        if self.filter.workers == 0 {
            return Err(Error::Config("filter.workers must be at least 1".into()));
        }
        let t = &self.train;
        if !(t.ema_alpha > 0.0 && t.ema_alpha < 1.0) {
            return Err(Error::Config(format!("train.ema_alpha must be in (0, 1), got {}", t.ema_alpha)));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if !(t.loss_weight >= 0.0 && t.loss_weight.is_finite()) {
            return Err(Error::Config(format!("train.loss_weight must be >= 0, got {}", t.loss_weight)));
        }
        if !(t.temperature > 0.0 && t.temperature.is_finite()) {
            return Err(Error::Config(format!("train.temperature must be positive, got {}", t.temperature)));
        }
        if t.burnin_batch == 0 || t.labeled_batch == 0 || t.unlabeled_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.stream.epochs == 0 || self.stream.unlabeled_per_epoch == 0 {
            return Err(Error::Config("stream.epochs and stream.unlabeled_per_epoch must be at least 1".into()));
        }
        // Validates the fixed threshold range through the filter's own checks.
        crate::filter::OodFilter::new(self.filter_config()?)?;
        Ok(())
    }
}

fn config_format_error(origin: &str, text: &str, e: &toml::de::Error) -> Error {
    let (line, column) = e
        .span()
        .map(|span| {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.rsplit('\n').next().map_or(0, str::len) + 1;
            (line, column)
        })
        .unwrap_or((1, 1));
    Error::format(origin, line, column, e.message())
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal when it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, raw: &str) -> Result<()> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{raw}` has an empty key segment")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));

    let segments: Vec<&str> = key.split('.').collect();
    let (last, parents) = segments.split_last().expect("non-empty key");
    let mut cursor = table;
    for seg in parents {
        let entry = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{raw}`: `{seg}` is not a table")))?;
    }
    cursor.insert(last.to_string(), parsed);
    Ok(())
}

/// Named contamination regimes: fraction of OOD objects among the unlabeled set
/// for each combination of unlabeled subsets and class split.
pub const CONTAMINATION_REGIMES: [(&str, f64); 5] = [
    ("clean", 0.0),
    ("split1-mixed", 0.286),
    ("split1-mixed-ood", 0.632),
    ("split2-mixed", 0.145),
    ("split2-mixed-ood", 0.368),
];

pub fn regime_contamination(name: &str) -> Result<f64> {
    CONTAMINATION_REGIMES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = CONTAMINATION_REGIMES.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown regime `{name}` (expected one of {})", names.join(", ")))
        })
}
