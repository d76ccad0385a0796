//! Run summaries, one-axis ablation sweeps and the text tables that compare them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BankUpdate, ExperimentConfig, FilterMode, ThresholdKind};
use crate::error::{Error, Result};
use crate::metrics::FilterConfusion;
use crate::scoring::DistanceMetric;
use crate::sim::{simulate, HistoryEvent};

/// Whole-run aggregates of one simulation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    /// Gate confusion summed over every epoch.
    pub confusion: FilterConfusion,
    pub f1: Option<f64>,
    pub id_retention: Option<f64>,
    pub ood_leakage: Option<f64>,
    /// Kept pseudo-labels that are correct, over all kept.
    pub purity: Option<f64>,
    pub kept: u64,
    pub ood_kept: u64,
    pub final_id_retention: Option<f64>,
    pub burn_in_accuracy: Option<f64>,
    pub final_teacher_accuracy: Option<f64>,
    /// First epoch in which the OOD gate was active.
    pub first_warm_epoch: Option<usize>,
}

impl RunSummary {
    pub fn from_events(events: &[HistoryEvent]) -> Result<Self> {
        let mut confusion = FilterConfusion::default();
        let (mut kept, mut kept_correct, mut ood_kept) = (0u64, 0u64, 0u64);
        let mut epochs = 0;
        let mut last = None;
        let mut burn_in_accuracy = None;
        let mut first_warm_epoch = None;
        for e in events {
            match e {
                HistoryEvent::BurnIn(b) => burn_in_accuracy = b.teacher_accuracy,
                HistoryEvent::Epoch(m) => {
                    epochs += 1;
                    confusion.merge(&m.confusion);
                    kept += m.kept;
                    kept_correct += m.kept_correct;
                    ood_kept += m.ood_kept;
                    if m.warm && first_warm_epoch.is_none() {
                        first_warm_epoch = Some(m.epoch);
                    }
                    last = Some(m);
                }
                _ => {}
            }
        }
        let last = last.ok_or_else(|| Error::Validation("history has no epoch records".into()))?;
        Ok(Self {
            epochs,
            f1: confusion.f1(),
            id_retention: confusion.id_retention(),
            ood_leakage: confusion.ood_leakage(),
            confusion,
            purity: (kept > 0).then(|| kept_correct as f64 / kept as f64),
            kept,
            ood_kept,
            final_id_retention: last.id_retention,
            burn_in_accuracy,
            final_teacher_accuracy: last.teacher_accuracy,
            first_warm_epoch,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Bank capacity over {20, 50, 100, 200, 500}.
    BankLength,
    /// Distance metric over {l1, l2, cosine}.
    Metric,
    /// Fixed cutoffs {0.4, 0.5, 0.6, 0.7} against adaptive beta settings.
    Threshold,
    /// Bank frozen after burn-in against FIFO updates.
    Bank,
    /// The class-bank score against the logit baselines and against no OOD gate.
    Scorer,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::BankLength,
        AblationAxis::Metric,
        AblationAxis::Threshold,
        AblationAxis::Bank,
        AblationAxis::Scorer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::BankLength => "bank_length",
            AblationAxis::Metric => "metric",
            AblationAxis::Threshold => "threshold",
            AblationAxis::Bank => "bank",
            AblationAxis::Scorer => "scorer",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationAxis::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!("unknown ablation axis `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

pub const BANK_LENGTHS: [usize; 5] = [20, 50, 100, 200, 500];
pub const FIXED_CUTOFFS: [f64; 4] = [0.4, 0.5, 0.6, 0.7];
/// `(beta_init, beta_final)` rows of the adaptive-threshold sweep.
pub const BETA_ROWS: [(f64, f64); 5] = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (1.0, 2.0), (0.0, 2.0)];

/// One configuration in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

/// The configurations an axis sweeps, derived from `base`.
///
/// Bank-length variants raise the labeled burn-in set to at least one bank's
/// worth per class so every length starts warm.
pub fn variants(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    let mut add = |label: String, cfg: ExperimentConfig| -> Result<()> {
        cfg.validate()?;
        out.push(Variant { label, config: cfg });
        Ok(())
    };
    match axis {
        AblationAxis::BankLength => {
            for l in BANK_LENGTHS {
                let mut cfg = base.clone();
                cfg.bank.capacity = l;
                cfg.stream.labeled_per_class = cfg.stream.labeled_per_class.max(l);
                add(format!("L={l}"), cfg)?;
            }
        }
        AblationAxis::Metric => {
            for m in [DistanceMetric::L1, DistanceMetric::L2, DistanceMetric::Cosine] {
                let mut cfg = base.clone();
                cfg.bank.metric = m;
                add(m.as_str().to_string(), cfg)?;
            }
        }
        AblationAxis::Threshold => {
            for tau in FIXED_CUTOFFS {
                let mut cfg = base.clone();
                cfg.threshold.kind = ThresholdKind::Fixed;
                cfg.threshold.fixed_tau = tau;
                add(format!("fixed {tau}"), cfg)?;
            }
            for (b0, b1) in BETA_ROWS {
                let mut cfg = base.clone();
                cfg.threshold.kind = ThresholdKind::Adaptive;
                cfg.threshold.beta_init = b0;
                cfg.threshold.beta_final = b1;
                let label = if b0 == b1 {
                    format!("beta={b0}")
                } else {
                    format!("beta in [{b0}, {b1}]")
                };
                add(label, cfg)?;
            }
        }
        AblationAxis::Bank => {
            for (label, update) in [("static", BankUpdate::Static), ("dynamic", BankUpdate::Dynamic)] {
                let mut cfg = base.clone();
                cfg.bank.update = update;
                add(label.to_string(), cfg)?;
            }
        }
        AblationAxis::Scorer => {
            for mode in [
                FilterMode::None,
                FilterMode::Msp,
                FilterMode::Entropy,
                FilterMode::Energy,
                FilterMode::Cfb,
            ] {
                let mut cfg = base.clone();
                cfg.filter.mode = mode;
                add(mode.as_str().to_string(), cfg)?;
            }
        }
    }
    Ok(out)
}

/// Median of per-seed values, ignoring absent ones; `None` if all are absent.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// One row of a comparison table: medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub runs: usize,
    pub f1: Option<f64>,
    pub id_retention: Option<f64>,
    pub ood_leakage: Option<f64>,
    pub purity: Option<f64>,
    pub final_teacher_accuracy: Option<f64>,
    pub ood_kept: Option<f64>,
}

impl TableRow {
    pub fn from_runs(label: impl Into<String>, runs: &[RunSummary]) -> Self {
        Self {
            label: label.into(),
            runs: runs.len(),
            f1: median(runs.iter().map(|r| r.f1)),
            id_retention: median(runs.iter().map(|r| r.id_retention)),
            ood_leakage: median(runs.iter().map(|r| r.ood_leakage)),
            purity: median(runs.iter().map(|r| r.purity)),
            final_teacher_accuracy: median(runs.iter().map(|r| r.final_teacher_accuracy)),
            ood_kept: median(runs.iter().map(|r| Some(r.ood_kept as f64))),
        }
    }
}

/// Runs every variant of `axis` for `seeds` consecutive seeds starting at the
/// base seed. Runs execute on `workers` threads; results do not depend on it.
pub fn ablate(base: &ExperimentConfig, axis: AblationAxis, seeds: u64, workers: usize) -> Result<Vec<TableRow>> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let variants = variants(base, axis)?;
    let jobs: Vec<(usize, ExperimentConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            (0..seeds).map(move |s| {
                let mut cfg = v.config.clone();
                cfg.seed = base.seed.wrapping_add(s);
                (i, cfg)
            })
        })
        .collect();
    let run = |(i, cfg): &(usize, ExperimentConfig)| -> Result<(usize, RunSummary)> {
        Ok((*i, RunSummary::from_events(&simulate(cfg)?)?))
    };
    let results: Vec<(usize, RunSummary)> = if workers > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?
            .install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let runs: Vec<RunSummary> = results.iter().filter(|(j, _)| *j == i).map(|(_, r)| r.clone()).collect();
            TableRow::from_runs(v.label.clone(), &runs)
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Fixed-width text table, one line per row.
pub fn render_table(title: &str, rows: &[TableRow]) -> String {
    let header = ["variant", "runs", "f1", "id_ret", "ood_leak", "purity", "teacher_acc", "ood_kept"];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.runs.to_string(),
                cell(r.f1),
                cell(r.id_retention),
                cell(r.ood_leakage),
                cell(r.purity),
                cell(r.final_teacher_accuracy),
                r.ood_kept.map_or_else(|| "-".into(), |x| format!("{x:.1}")),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "# {title}");
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    for row in &body {
        let _ = writeln!(out, "{}", line(row.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_row_sets() {
        let base = ExperimentConfig::with_seed(1);
        let labels = |axis| -> Vec<String> { variants(&base, axis).unwrap().into_iter().map(|v| v.label).collect() };
        assert_eq!(labels(AblationAxis::BankLength), ["L=20", "L=50", "L=100", "L=200", "L=500"]);
        assert_eq!(labels(AblationAxis::Metric), ["l1", "l2", "cosine"]);
        assert_eq!(labels(AblationAxis::Bank), ["static", "dynamic"]);
        assert_eq!(labels(AblationAxis::Threshold).len(), 9);
        assert_eq!(labels(AblationAxis::Scorer).len(), 5);
        let l500 = &variants(&base, AblationAxis::BankLength).unwrap()[4].config;
        assert_eq!(l500.k().unwrap(), 25);
        assert_eq!(l500.stream.labeled_per_class, 500);
    }

    #[test]
    fn medians() {
        assert_eq!(median([Some(3.0), None, Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median([Some(4.0), Some(1.0)]), Some(2.5));
        assert_eq!(median([None]), None);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let rows = vec![
            TableRow {
                label: "a".into(),
                runs: 1,
                f1: Some(0.5),
                id_retention: None,
                ood_leakage: Some(0.25),
                purity: Some(1.0),
                final_teacher_accuracy: Some(0.9),
                ood_kept: Some(3.0),
            };
            3
        ];
        let t = render_table("demo", &rows);
        assert_eq!(t.lines().count(), 5);
        assert!(t.lines().nth(2).unwrap().contains("0.5000"));
    }
}
