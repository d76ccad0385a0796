//! Filter quality against evaluation-only ground truth. OOD is the positive
//! class; a rejection is a positive prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterDecision, GroundTruth, PseudoPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterConfusion {
    /// OOD rejected.
    pub tp: u64,
    /// ID rejected.
    pub fp: u64,
    /// ID kept.
    pub tn: u64,
    /// OOD kept.
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Records without usable ground truth, excluded from every count.
    pub unknown: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl FilterConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn id_retention(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn ood_leakage(&self) -> Option<f64> {
        ratio(self.fn_, self.tp + self.fn_)
    }

    pub fn record(&mut self, kept: bool, gt: GroundTruth) {
        match (gt.is_ood(), kept) {
            (None, _) => self.unknown += 1,
            (Some(true), false) => self.tp += 1,
            (Some(true), true) => self.fn_ += 1,
            (Some(false), false) => self.fp += 1,
            (Some(false), true) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &FilterConfusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.unknown += other.unknown;
    }
}

fn check_join(decisions: &[FilterDecision], preds: &[PseudoPrediction]) -> Result<()> {
    if decisions.len() != preds.len() {
        return Err(Error::Join(format!(
            "{} decisions but {} ground-truth records",
            decisions.len(),
            preds.len()
        )));
    }
    if let Some((d, p)) = decisions
        .iter()
        .zip(preds)
        .find(|(d, p)| d.record_id != p.record_id)
    {
        return Err(Error::Join(format!(
            "decision `{}` lines up with record `{}`",
            d.record_id, p.record_id
        )));
    }
    Ok(())
}

/// Confusion counts of `decisions` against the ground truth carried by the
/// matching (same order, same ids) predictions.
pub fn filter_confusion(decisions: &[FilterDecision], preds: &[PseudoPrediction]) -> Result<FilterConfusion> {
    check_join(decisions, preds)?;
    let mut out = FilterConfusion::default();
    for (d, p) in decisions.iter().zip(preds) {
        out.record(d.kept, p.gt);
    }
    Ok(out)
}

/// Fraction of kept pseudo-labels that are in-distribution and carry the
/// right class. Records with unknown truth are left out. `None` when nothing
/// usable was kept, or when a kept in-distribution record has no true class:
/// counting its OOD neighbours alone would bias the ratio toward zero.
pub fn pseudo_purity(decisions: &[FilterDecision], preds: &[PseudoPrediction]) -> Result<Option<f64>> {
    check_join(decisions, preds)?;
    let (mut correct, mut total) = (0u64, 0u64);
    for (d, p) in decisions.iter().zip(preds) {
        if !d.kept {
            continue;
        }
        match p.gt {
            GroundTruth::Unknown => {}
            GroundTruth::Id { class: None } => return Ok(None),
            GroundTruth::Ood => total += 1,
            GroundTruth::Id { class: Some(c) } => {
                total += 1;
                if c == p.pred_class {
                    correct += 1;
                }
            }
        }
    }
    Ok(ratio(correct, total))
}

/// Probability that a random OOD sample scores above a random ID sample,
/// ties counting one half (Mann-Whitney U / (n_ood * n_id)).
pub fn auroc(samples: &[(f64, bool)]) -> Result<f64> {
    let n_ood = samples.iter().filter(|(_, ood)| *ood).count();
    let n_id = samples.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::Size(format!(
            "AUROC needs both classes, got {n_id} ID and {n_ood} OOD"
        )));
    }
    if samples.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Validation("AUROC input contains NaN scores".into()));
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of mid-ranks of the OOD samples, with ranks doubled to stay integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j, mean (i + 1 + j) / 2.
        let mid_x2 = (i + 1 + j) as u128;
        let oods = sorted[i..j].iter().filter(|(_, ood)| *ood).count() as u128;
        rank_sum_x2 += mid_x2 * oods;
        i = j;
    }
    let n_ood = n_ood as u128;
    let u_x2 = rank_sum_x2 - n_ood * (n_ood + 1);
    Ok(u_x2 as f64 / (2 * n_ood * n_id as u128) as f64)
}
