//! Per-class OOD cut-offs `tau_c = mu_c + beta * sigma_c`, where `mu_c` and
//! `sigma_c` summarise the leave-one-out scores of the class prototypes and
//! `beta` follows a linear schedule over training progress.

use serde::{Deserialize, Serialize};

use crate::bank::{ClassId, FeatureBankSet};
use crate::error::{Error, Result};
use crate::scoring::{prototype_scores, DistanceMetric, OodScore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: ClassId,
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub sample_count: usize,
}

impl ClassStats {
    pub fn threshold(&self, beta: f64) -> f64 {
        threshold(self, beta)
    }
}

/// Mean and population standard deviation of `scores`.
pub fn class_stats(class_id: ClassId, scores: &[OodScore]) -> Result<ClassStats> {
    if scores.is_empty() {
        return Err(Error::Size("cannot summarise an empty score set".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("score set contains non-finite values".into()));
    }
    let n = scores.len() as f64;
    // Shifted by the first score so a constant set yields its value exactly.
    let origin = scores[0];
    let mu = origin + scores.iter().map(|s| s - origin).sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    Ok(ClassStats {
        class_id,
        mu,
        sigma: var.sqrt(),
        sample_count: scores.len(),
    })
}

pub fn threshold(stats: &ClassStats, beta: f64) -> f64 {
    stats.mu + beta * stats.sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BetaSchedule {
    Fixed { beta: f64 },
    Linear { beta_init: f64, beta_final: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Linear {
            beta_init: 1.0,
            beta_final: 2.0,
        }
    }
}

impl BetaSchedule {
    /// `beta` at step `t` of `total` (continuous progress `t / total`).
    pub fn beta_at(&self, t: u64, total: u64) -> Result<f64> {
        if total == 0 {
            return Err(Error::Range("schedule length must be positive".into()));
        }
        if t > total {
            return Err(Error::Range(format!("step {t} outside [0, {total}]")));
        }
        Ok(match *self {
            BetaSchedule::Fixed { beta } => beta,
            BetaSchedule::Linear { beta_init, beta_final } => {
                if t == total {
                    beta_final
                } else {
                    beta_init + (beta_final - beta_init) * (t as f64 / total as f64)
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThresholdPolicy {
    Adaptive(BetaSchedule),
    Fixed { tau: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Adaptive(BetaSchedule::default())
    }
}

/// Per-class statistics and thresholds derived from the live bank.
pub fn thresholds_for_bank(
    banks: &FeatureBankSet,
    k: usize,
    metric: DistanceMetric,
    beta: f64,
) -> Result<Vec<f64>> {
    banks
        .banks()
        .iter()
        .map(|bank| {
            if !bank.is_full() {
                return Err(Error::ColdBank {
                    class: bank.class_id(),
                    len: bank.len(),
                    capacity: bank.capacity(),
                });
            }
            let scores = prototype_scores(bank.prototypes(), k, metric)?;
            Ok(threshold(&class_stats(bank.class_id(), &scores)?, beta))
        })
        .collect()
}

/// Caches [`ClassStats`] per class, keyed on the bank's insert counter so a
/// push invalidates exactly the class it touched.
#[derive(Debug, Clone, Default)]
pub struct StatsCache {
    entries: Vec<Option<(u64, ClassStats)>>,
}

impl StatsCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Statistics for every class, recomputing only classes whose bank changed.
    pub fn stats(&mut self, banks: &FeatureBankSet, k: usize, metric: DistanceMetric) -> Result<Vec<ClassStats>> {
        if self.entries.len() != banks.num_classes() {
            self.entries = vec![None; banks.num_classes()];
        }
        let mut out = Vec::with_capacity(banks.num_classes());
        for bank in banks.banks() {
            if !bank.is_full() {
                return Err(Error::ColdBank {
                    class: bank.class_id(),
                    len: bank.len(),
                    capacity: bank.capacity(),
                });
            }
            let slot = &mut self.entries[bank.class_id()];
            let stats = match slot {
                Some((counter, stats)) if *counter == bank.insert_counter() => *stats,
                _ => {
                    let scores = prototype_scores(bank.prototypes(), k, metric)?;
                    let stats = class_stats(bank.class_id(), &scores)?;
                    *slot = Some((bank.insert_counter(), stats));
                    stats
                }
            };
            out.push(stats);
        }
        Ok(out)
    }

    pub fn invalidate(&mut self) {
        self.entries.clear();
    }
}
