//! Desk-scale teacher-student loop: burn-in on labeled data, class-bank
//! warm-up, then mutual learning with gated pseudo-labels and an EMA teacher.

pub mod detector;
pub mod stream;

use serde::{Deserialize, Serialize};

use crate::bank::{ClassId, FeatureBankSet};
use crate::config::{BankUpdate, ExperimentConfig, FilterMode};
use crate::error::{Error, Result};
use crate::feature::FeatureVector;
use crate::filter::{
    gated_baseline_filter, BaselineScorer, FilterDecision, GroundTruth, OodFilter, Progress,
    PseudoPrediction, RejectReason,
};
use crate::metrics::{auroc, pseudo_purity, FilterConfusion};
use crate::scoring::{ood_score, DistanceMetric};

use detector::SurrogateDetector;
use stream::{gen_stream, Record, Source, StreamDataset};

/// Moves every student centroid toward the batch means of its class:
/// `delta = lr * [w_l (m_l - c) + loss_weight * w_p (m_p - c)]`, where `m_l`, `m_p`
/// are the labeled and pseudo-label means for the class and `w_l`, `w_p` are 1
/// when the class appears in that batch and 0 otherwise.
pub fn student_update(
    student: &mut SurrogateDetector,
    labeled: &[(ClassId, &FeatureVector)],
    pseudo: &[(ClassId, &FeatureVector)],
    lr: f64,
    loss_weight: f64,
) -> Result<()> {
    let dim = student.dim();
    let classes = student.num_classes();
    let means = |batch: &[(ClassId, &FeatureVector)]| -> Result<Vec<Option<Vec<f64>>>> {
        let mut sums = vec![vec![0.0f64; dim]; classes];
        let mut counts = vec![0usize; classes];
        for &(c, f) in batch {
            if c >= classes {
                return Err(Error::UnknownClass(c));
            }
            if f.dim() != dim {
                return Err(Error::Validation(format!(
                    "feature dimension {} does not match detector dimension {dim}",
                    f.dim()
                )));
            }
            for (s, &x) in sums[c].iter_mut().zip(f.as_slice()) {
                *s += f64::from(x);
            }
            counts[c] += 1;
        }
        Ok(sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect())
    };
    let lab = means(labeled)?;
    let pse = means(pseudo)?;
    for (c, centroid) in student.centroids_mut().iter_mut().enumerate() {
        if lab[c].is_none() && pse[c].is_none() {
            continue;
        }
        for (d, value) in centroid.iter_mut().enumerate() {
            let mut pull = 0.0;
            if let Some(m) = &lab[c] {
                pull += m[d] - *value;
            }
            if let Some(m) = &pse[c] {
                pull += loss_weight * (m[d] - *value);
            }
            *value += lr * pull;
        }
    }
    Ok(())
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update(teacher: &mut SurrogateDetector, student: &SurrogateDetector, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("EMA alpha must be in (0, 1), got {alpha}")));
    }
    if teacher.num_classes() != student.num_classes() || teacher.dim() != student.dim() {
        return Err(Error::Validation("teacher and student shapes differ".into()));
    }
    for (t, s) in teacher.centroids_mut().iter_mut().zip(student.centroids()) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Models and banks carried through a run.
#[derive(Debug, Clone)]
pub struct SimState {
    pub teacher: SurrogateDetector,
    pub student: SurrogateDetector,
    pub banks: FeatureBankSet,
}

impl SimState {
    pub fn new(num_classes: usize, dim: usize, capacity: usize, temperature: f64) -> Result<Self> {
        let student = SurrogateDetector::zeros(num_classes, dim, temperature)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            banks: FeatureBankSet::new(num_classes, capacity, dim)?,
        })
    }
}

fn labeled_pairs(records: &[Record]) -> Vec<(ClassId, &FeatureVector)> {
    records
        .iter()
        .filter_map(|r| r.class().map(|c| (c, &r.feature)))
        .collect()
}

/// Trains the student on `labeled` for `epochs` passes of `batch`-sized steps,
/// copies it into the teacher, then pushes every labeled feature through the
/// teacher side into the banks once, in order.
pub fn run_burn_in(
    state: &mut SimState,
    labeled: &[Record],
    epochs: usize,
    batch: usize,
    lr: f64,
) -> Result<()> {
    let classes = state.student.num_classes();
    let mut seen = vec![false; classes];
    for r in labeled {
        match r.source {
            Source::Id(c) if c < classes => seen[c] = true,
            Source::Id(c) => return Err(Error::UnknownClass(c)),
            Source::Ood(_) => {
                return Err(Error::Validation(format!("labeled record {} is OOD", r.id)));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!(
            "class {missing} has no labeled burn-in data, so its bank can never warm up"
        )));
    }
    if batch == 0 {
        return Err(Error::Config("burn-in batch size must be at least 1".into()));
    }
    for _ in 0..epochs {
        for chunk in labeled.chunks(batch) {
            student_update(&mut state.student, &labeled_pairs(chunk), &[], lr, 0.0)?;
        }
    }
    state.teacher = state.student.clone();
    for r in labeled {
        if let Some(c) = r.class() {
            state.banks.push(c, r.feature.clone())?;
        }
    }
    Ok(())
}

/// Fraction of in-distribution `records` the detector classifies correctly.
pub fn accuracy(detector: &SurrogateDetector, records: &[Record]) -> Result<Option<f64>> {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in records {
        if let Some(c) = r.class() {
            total += 1;
            if detector.predict(&r.feature)?.0.class == c {
                hit += 1;
            }
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// Teacher predictions on `records`, with evaluation-only ground truth attached.
pub fn predict_records(teacher: &SurrogateDetector, records: &[Record]) -> Result<Vec<PseudoPrediction>> {
    records
        .iter()
        .map(|r| {
            let (p, logits) = teacher.predict(&r.feature)?;
            Ok(PseudoPrediction {
                record_id: r.id.clone(),
                feature: r.feature.clone(),
                pred_class: p.class,
                confidence: p.confidence,
                logits: Some(logits),
                gt: match r.source {
                    Source::Id(c) => GroundTruth::Id { class: Some(c) },
                    Source::Ood(_) => GroundTruth::Ood,
                },
            })
        })
        .collect()
}

/// `(bank score against the predicted class, is_ood)` for every record.
pub fn bank_scores(
    state: &SimState,
    records: &[Record],
    k: usize,
    metric: DistanceMetric,
) -> Result<Vec<(f64, bool)>> {
    records
        .iter()
        .map(|r| {
            let (p, _) = state.teacher.predict(&r.feature)?;
            let score = ood_score(&r.feature, state.banks.prototypes(p.class)?, k, metric)?;
            Ok((score, r.is_ood()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurnInSummary {
    pub labeled: usize,
    pub epochs: usize,
    pub train_accuracy: Option<f64>,
    pub teacher_accuracy: Option<f64>,
    pub bank_lengths: Vec<usize>,
    pub warm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThreshold {
    pub class: ClassId,
    /// Absent under a fixed threshold.
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub tau: f64,
}

/// Thresholds recomputed after one mutual-learning iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub epoch: usize,
    pub step: u64,
    pub total: u64,
    pub beta: Option<f64>,
    pub classes: Vec<ClassThreshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub warm: bool,
    pub beta: Option<f64>,
    pub predictions: u64,
    /// Predictions that passed the confidence gate.
    pub confident: u64,
    pub kept: u64,
    /// Kept pseudo-labels that are in-distribution with the right class.
    pub kept_correct: u64,
    pub ood_kept: u64,
    /// Confusion of the OOD gate over confident predictions.
    pub confusion: FilterConfusion,
    pub id_retention: Option<f64>,
    pub ood_leakage: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub pseudo_purity: Option<f64>,
    /// AUROC of the gate score over gated decisions, oriented so higher means OOD.
    pub gate_auroc: Option<f64>,
    pub teacher_accuracy: Option<f64>,
    pub student_accuracy: Option<f64>,
    pub taus: Vec<f64>,
}

/// One line of a run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryEvent {
    Config { config: ExperimentConfig },
    BurnIn(BurnInSummary),
    Threshold(ThresholdRecord),
    Epoch(EpochMetrics),
}

impl HistoryEvent {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("history events serialize");
        s.push('\n');
        s
    }
}

/// Everything one iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub epoch: usize,
    /// Schedule position the gate used.
    pub step: u64,
    /// Whether every bank was full when the gate ran.
    pub warm: bool,
    pub predictions: Vec<PseudoPrediction>,
    pub decisions: Vec<FilterDecision>,
    pub thresholds: Option<ThresholdRecord>,
}

/// A configured run over a generated (or supplied) dataset.
pub struct Simulation {
    config: ExperimentConfig,
    data: StreamDataset,
    state: SimState,
    filter: OodFilter,
    pool: Option<rayon::ThreadPool>,
    step: u64,
    total: u64,
    frozen: bool,
    burned_in: bool,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = gen_stream(&config.stream, config.seed)?;
        Self::with_dataset(config, data)
    }

    pub fn with_dataset(config: ExperimentConfig, data: StreamDataset) -> Result<Self> {
        config.validate()?;
        let state = SimState::new(
            config.stream.num_id_classes,
            config.stream.dimension,
            config.bank.capacity,
            config.train.temperature,
        )?;
        let filter = OodFilter::new(config.filter_config()?)?;
        let pool = if config.filter.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.filter.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start scoring workers: {e}")))?,
            )
        } else {
            None
        };
        let total = (1..data.unlabeled.len())
            .map(|e| data.unlabeled[e].len().div_ceil(config.train.unlabeled_batch) as u64)
            .sum();
        Ok(Self {
            config,
            data,
            state,
            filter,
            pool,
            step: 0,
            total,
            frozen: false,
            burned_in: false,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &StreamDataset {
        &self.data
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Iterations completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Iterations in the whole mutual-learning stage.
    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn epochs(&self) -> usize {
        self.data.unlabeled.len().saturating_sub(1)
    }

    pub fn batches_in_epoch(&self, epoch: usize) -> usize {
        self.data.unlabeled[epoch].len().div_ceil(self.config.train.unlabeled_batch)
    }

    fn update_frozen(&mut self) {
        if self.config.bank.update == BankUpdate::Static && self.state.banks.is_warm() {
            self.frozen = true;
        }
    }

    pub fn burn_in(&mut self) -> Result<BurnInSummary> {
        let t = self.config.train.clone();
        run_burn_in(&mut self.state, &self.data.burn_in, t.burnin_epochs, t.burnin_batch, t.lr)?;
        self.burned_in = true;
        self.update_frozen();
        Ok(BurnInSummary {
            labeled: self.data.burn_in.len(),
            epochs: t.burnin_epochs,
            train_accuracy: accuracy(&self.state.teacher, &self.data.burn_in)?,
            teacher_accuracy: accuracy(&self.state.teacher, &self.data.test[0])?,
            bank_lengths: (0..self.state.banks.num_classes())
                .map(|c| self.state.banks.bank(c).map(|b| b.len()))
                .collect::<Result<_>>()?,
            warm: self.state.banks.is_warm(),
        })
    }

    fn gate(&mut self, preds: &[PseudoPrediction], progress: Progress) -> Result<Vec<FilterDecision>> {
        let conf_tau = self.config.filter.conf_tau;
        match self.config.filter.mode {
            FilterMode::None => Ok(preds
                .iter()
                .map(|p| {
                    let kept = p.confidence >= conf_tau;
                    FilterDecision {
                        record_id: p.record_id.clone(),
                        kept,
                        reject_reason: if kept { RejectReason::None } else { RejectReason::LowConfidence },
                        ood_score: None,
                        threshold_used: None,
                        beta: None,
                        warmup: false,
                    }
                })
                .collect()),
            FilterMode::Cfb => self.filter.filter(preds, &self.state.banks, progress, self.pool.as_ref()),
            FilterMode::Msp | FilterMode::Entropy | FilterMode::Energy => {
                let scorer = self.config.filter.mode.baseline().expect("baseline mode");
                let cutoff = self.config.baseline_cutoff().expect("baseline cutoff");
                gated_baseline_filter(preds, scorer, cutoff, Some(conf_tau))
            }
        }
    }

    fn threshold_record(&mut self, epoch: usize) -> Result<Option<ThresholdRecord>> {
        if self.config.filter.mode != FilterMode::Cfb || !self.state.banks.is_warm() {
            return Ok(None);
        }
        let progress = Progress {
            step: self.step,
            total: self.total,
        };
        let ts = self.filter.thresholds(&self.state.banks, progress)?;
        let classes = ts
            .taus
            .iter()
            .enumerate()
            .map(|(c, &tau)| {
                let stats = ts.stats.get(c);
                ClassThreshold {
                    class: c,
                    mu: stats.map(|s| s.mu),
                    sigma: stats.map(|s| s.sigma),
                    tau,
                }
            })
            .collect();
        Ok(Some(ThresholdRecord {
            epoch,
            step: self.step,
            total: self.total,
            beta: ts.beta,
            classes,
        }))
    }

    /// Runs mutual-learning iteration `batch` of `epoch`: teacher predicts,
    /// the gate filters, the student learns from the labeled batch and kept
    /// pseudo-labels, the teacher follows by EMA, labeled features enter the
    /// banks, and thresholds are recomputed for the next step.
    pub fn run_iteration(&mut self, epoch: usize, batch: usize) -> Result<IterationReport> {
        if !self.burned_in {
            return Err(Error::Config("mutual learning needs burn-in first".into()));
        }
        let ub = self.config.train.unlabeled_batch;
        let lb = self.config.train.labeled_batch;
        let unl_all = &self.data.unlabeled[epoch];
        let unlabeled = &unl_all[batch * ub..((batch + 1) * ub).min(unl_all.len())];
        let lab_all = &self.data.labeled[epoch];
        let lab_chunks = lab_all.len().div_ceil(lb);
        let labeled: &[Record] = if lab_chunks == 0 {
            &[]
        } else {
            let i = batch % lab_chunks;
            &lab_all[i * lb..((i + 1) * lb).min(lab_all.len())]
        };
        // Labeled batches cycle when unlabeled batches outnumber them, but each
        // labeled feature enters the bank once: a duplicated prototype would be
        // its own nearest neighbour and shrink the class statistics.
        let fresh = batch < lab_chunks;

        let preds = predict_records(&self.state.teacher, unlabeled)?;
        let warm = self.state.banks.is_warm();
        let progress = Progress {
            step: self.step,
            total: self.total,
        };
        let labeled_owned: Vec<Record> = labeled.to_vec();
        let decisions = self.gate(&preds, progress)?;

        let kept: Vec<(ClassId, &FeatureVector)> = decisions
            .iter()
            .zip(&preds)
            .filter(|(d, _)| d.kept)
            .map(|(_, p)| (p.pred_class, &p.feature))
            .collect();
        let t = &self.config.train;
        student_update(
            &mut self.state.student,
            &labeled_pairs(&labeled_owned),
            &kept,
            t.lr,
            t.loss_weight,
        )?;
        ema_update(&mut self.state.teacher, &self.state.student, t.ema_alpha)?;
        if !self.frozen && fresh {
            for r in &labeled_owned {
                if let Some(c) = r.class() {
                    self.state.banks.push(c, r.feature.clone())?;
                }
            }
            self.update_frozen();
        }
        self.step += 1;
        let thresholds = self.threshold_record(epoch)?;
        Ok(IterationReport {
            epoch,
            step: progress.step,
            warm,
            predictions: preds,
            decisions,
            thresholds,
        })
    }

    /// Runs every iteration of `epoch`, handing threshold records to `sink`.
    pub fn run_epoch(&mut self, epoch: usize, sink: &mut dyn FnMut(HistoryEvent) -> Result<()>) -> Result<EpochMetrics> {
        let mut confusion = FilterConfusion::default();
        let (mut predictions, mut confident, mut kept, mut kept_correct, mut ood_kept) = (0u64, 0u64, 0u64, 0u64, 0u64);
        let mut all_decisions = Vec::new();
        let mut all_preds = Vec::new();
        let mut gated_scores = Vec::new();
        let mut last_beta = None;
        let mut last_taus = Vec::new();
        let mut warm = false;
        let scorer = self.config.filter.mode.baseline();

        for batch in 0..self.batches_in_epoch(epoch) {
            let report = self.run_iteration(epoch, batch)?;
            warm = report.warm;
            for (d, p) in report.decisions.iter().zip(&report.predictions) {
                predictions += 1;
                if d.reject_reason != RejectReason::LowConfidence {
                    confident += 1;
                    confusion.record(d.kept, p.gt);
                }
                if d.kept {
                    kept += 1;
                    match p.gt {
                        GroundTruth::Ood => ood_kept += 1,
                        GroundTruth::Id { class: Some(c) } if c == p.pred_class => kept_correct += 1,
                        _ => {}
                    }
                }
                if let (Some(score), Some(ood)) = (d.ood_score, p.gt.is_ood()) {
                    let oriented = if scorer == Some(BaselineScorer::Msp) { -score } else { score };
                    gated_scores.push((oriented, ood));
                }
                if d.beta.is_some() {
                    last_beta = d.beta;
                }
            }
            if let Some(rec) = report.thresholds {
                last_beta = rec.beta.or(last_beta);
                last_taus = rec.classes.iter().map(|c| c.tau).collect();
                sink(HistoryEvent::Threshold(rec))?;
            }
            all_decisions.extend(report.decisions);
            all_preds.extend(report.predictions);
        }

        let gate_auroc = match auroc(&gated_scores) {
            Ok(v) => Some(v),
            Err(Error::Size(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(EpochMetrics {
            epoch,
            step: self.step,
            warm,
            beta: last_beta,
            predictions,
            confident,
            kept,
            kept_correct,
            ood_kept,
            id_retention: confusion.id_retention(),
            ood_leakage: confusion.ood_leakage(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            confusion,
            pseudo_purity: pseudo_purity(&all_decisions, &all_preds)?,
            gate_auroc,
            teacher_accuracy: accuracy(&self.state.teacher, &self.data.test[epoch])?,
            student_accuracy: accuracy(&self.state.student, &self.data.test[epoch])?,
            taus: last_taus,
        })
    }

    /// Burn-in plus every mutual-learning epoch. Events reach `sink` in order,
    /// starting with the resolved configuration.
    pub fn run(&mut self, sink: &mut dyn FnMut(HistoryEvent) -> Result<()>) -> Result<()> {
        sink(HistoryEvent::Config {
            config: self.config.clone(),
        })?;
        let summary = self.burn_in()?;
        sink(HistoryEvent::BurnIn(summary))?;
        for epoch in 1..=self.epochs() {
            let m = self.run_epoch(epoch, sink)?;
            sink(HistoryEvent::Epoch(m))?;
        }
        Ok(())
    }
}

/// Runs a full simulation and returns its history events.
pub fn simulate(config: &ExperimentConfig) -> Result<Vec<HistoryEvent>> {
    let mut events = Vec::new();
    Simulation::new(config.clone())?.run(&mut |e| {
        events.push(e);
        Ok(())
    })?;
    Ok(events)
}

/// Serializes events as JSON lines.
pub fn history_jsonl(events: &[HistoryEvent]) -> String {
    events.iter().map(HistoryEvent::to_json_line).collect()
}

/// Parses a JSON-lines history, reporting the first bad line.
pub fn parse_history(text: &str, origin: &str) -> Result<Vec<HistoryEvent>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(origin, i + 1, e.column(), e.to_string()))
        })
        .collect()
}

/// The per-epoch metrics of a history, in order.
pub fn epoch_metrics(events: &[HistoryEvent]) -> Vec<&EpochMetrics> {
    events
        .iter()
        .filter_map(|e| match e {
            HistoryEvent::Epoch(m) => Some(m),
            _ => None,
        })
        .collect()
}
