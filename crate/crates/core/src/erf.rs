//! Embedding record files: one header line `erf v1 dim=D`, then one record per
//! line as `id,role,class_id,confidence,gt_ood,v1,...,vD`.
//!
//! `role` is `labeled` or `pseudo`; `class_id` is the true class for labeled
//! rows and the predicted class for pseudo rows, `-1` for none; `gt_ood` is
//! `0` (in-distribution), `1` (OOD) or `-1` (unknown). Floats are 32-bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::bank::{parse_float_row, push_float_row, ClassId};
use crate::error::{Error, Result};
use crate::feature::FeatureVector;
use crate::filter::{GroundTruth, PseudoPrediction};
use crate::io::write_atomic;
use crate::sim::stream::{Record, Source};

const MAGIC: &str = "erf";
const VERSION: &str = "v1";
const FIXED_FIELDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Labeled,
    Pseudo,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Pseudo => "pseudo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErfRecord {
    pub id: String,
    pub role: Role,
    pub class_id: Option<ClassId>,
    pub confidence: f32,
    pub gt_ood: Option<bool>,
    pub feature: FeatureVector,
}

impl ErfRecord {
    /// Ground truth as far as this row can tell: pseudo rows carry only the
    /// OOD flag, labeled rows also their class.
    pub fn ground_truth(&self) -> GroundTruth {
        match (self.role, self.gt_ood) {
            (_, None) => GroundTruth::Unknown,
            (_, Some(true)) => GroundTruth::Ood,
            (Role::Labeled, Some(false)) => GroundTruth::Id { class: self.class_id },
            (Role::Pseudo, Some(false)) => GroundTruth::Id { class: None },
        }
    }

    pub fn to_prediction(&self) -> Result<PseudoPrediction> {
        let pred_class = self.class_id.ok_or_else(|| {
            Error::Validation(format!("record {}: pseudo prediction has no class (-1)", self.id))
        })?;
        Ok(PseudoPrediction {
            record_id: self.id.clone(),
            feature: self.feature.clone(),
            pred_class,
            confidence: f64::from(self.confidence),
            logits: None,
            gt: self.ground_truth(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErfDataset {
    pub dim: usize,
    pub records: Vec<ErfRecord>,
}

impl ErfDataset {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("ERF dimension must be at least 1".into()));
        }
        Ok(Self {
            dim,
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: ErfRecord) -> Result<()> {
        check_record(&record, self.dim)?;
        self.records.push(record);
        Ok(())
    }

    /// Labeled rows for stream records with a class, pseudo rows with no
    /// prediction (`-1`, confidence 0) for everything else.
    pub fn from_stream(records: &[Record], labeled: bool) -> Result<Self> {
        let dim = records.first().map_or(1, |r| r.feature.dim());
        let mut out = Self::new(dim)?;
        for r in records {
            let (class_id, gt_ood) = match r.source {
                Source::Id(c) => (Some(c), false),
                Source::Ood(_) => (None, true),
            };
            out.push(if labeled {
                ErfRecord {
                    id: r.id.clone(),
                    role: Role::Labeled,
                    class_id,
                    confidence: 1.0,
                    gt_ood: Some(gt_ood),
                    feature: r.feature.clone(),
                }
            } else {
                ErfRecord {
                    id: r.id.clone(),
                    role: Role::Pseudo,
                    class_id: None,
                    confidence: 0.0,
                    gt_ood: Some(gt_ood),
                    feature: r.feature.clone(),
                }
            })?;
        }
        Ok(out)
    }

    pub fn from_predictions(preds: &[PseudoPrediction]) -> Result<Self> {
        let dim = preds.first().map_or(1, |p| p.feature.dim());
        let mut out = Self::new(dim)?;
        for p in preds {
            out.push(ErfRecord {
                id: p.record_id.clone(),
                role: Role::Pseudo,
                class_id: Some(p.pred_class),
                confidence: p.confidence as f32,
                gt_ood: p.gt.is_ood(),
                feature: p.feature.clone(),
            })?;
        }
        Ok(out)
    }

    /// Labeled rows as stream records (for burn-in from a file).
    pub fn labeled_records(&self) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| r.role == Role::Labeled)
            .filter_map(|r| {
                r.class_id.map(|c| Record {
                    id: r.id.clone(),
                    epoch: 0,
                    source: Source::Id(c),
                    feature: r.feature.clone(),
                })
            })
            .collect()
    }

    pub fn predictions(&self) -> Result<Vec<PseudoPrediction>> {
        self.records
            .iter()
            .filter(|r| r.role == Role::Pseudo)
            .map(ErfRecord::to_prediction)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION} dim={}\n", self.dim);
        for r in &self.records {
            let class = r.class_id.map_or(-1i64, |c| c as i64);
            let gt = match r.gt_ood {
                None => -1,
                Some(false) => 0,
                Some(true) => 1,
            };
            let _ = write!(out, "{},{},{class},{:?},{gt},", r.id, r.role.as_str(), r.confidence);
            push_float_row(&mut out, r.feature.as_slice());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(origin, 1, 1, "empty file, expected `erf v1 dim=D` header"))?;
        let dim = parse_header(header, origin)?;
        let mut out = Self::new(dim)?;
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.is_empty() {
                return Err(Error::format(origin, line_no, 1, "blank line"));
            }
            let record = parse_row(line, dim, origin, line_no)?;
            if !seen.insert(record.id.clone()) {
                return Err(Error::format(origin, line_no, 1, format!("duplicate record id `{}`", record.id)));
            }
            out.records.push(record);
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

fn check_record(r: &ErfRecord, dim: usize) -> Result<()> {
    if r.feature.dim() != dim {
        return Err(Error::Validation(format!(
            "record {}: {} feature values, dataset dimension is {dim}",
            r.id,
            r.feature.dim()
        )));
    }
    if r.id.is_empty() || r.id.contains([',', '\n', '\r']) {
        return Err(Error::Validation(format!("record id `{}` is empty or contains a separator", r.id)));
    }
    if !(0.0..=1.0).contains(&r.confidence) {
        return Err(Error::Validation(format!("record {}: confidence {} outside [0, 1]", r.id, r.confidence)));
    }
    if r.role == Role::Labeled && (r.class_id.is_none() || r.gt_ood != Some(false)) {
        return Err(Error::Validation(format!(
            "record {}: labeled rows need a class and gt_ood 0",
            r.id
        )));
    }
    Ok(())
}

fn parse_header(header: &str, origin: &str) -> Result<usize> {
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::format(origin, 1, 1, format!("expected `{MAGIC}` header, found `{header}`")));
    }
    match parts.next() {
        Some(VERSION) => {}
        other => {
            return Err(Error::format(
                origin,
                1,
                MAGIC.len() + 2,
                format!("unsupported version `{}`, expected `{VERSION}`", other.unwrap_or("")),
            ));
        }
    }
    let column = MAGIC.len() + VERSION.len() + 3;
    let dim = parts
        .next()
        .and_then(|p| p.strip_prefix("dim="))
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::format(origin, 1, column, "expected `dim=D` with D >= 1"))?;
    if parts.next().is_some() {
        return Err(Error::format(origin, 1, column, "trailing fields in header"));
    }
    Ok(dim)
}

fn parse_row(line: &str, dim: usize, origin: &str, line_no: usize) -> Result<ErfRecord> {
    let mut fields = Vec::with_capacity(FIXED_FIELDS);
    let mut rest = line;
    let mut column = 1;
    for _ in 0..FIXED_FIELDS {
        let (field, tail) = rest.split_once(',').ok_or_else(|| {
            Error::format(
                origin,
                line_no,
                column,
                format!("expected {} fields, row ends early", FIXED_FIELDS + dim),
            )
        })?;
        fields.push((field, column));
        column += field.len() + 1;
        rest = tail;
    }
    let at = |i: usize, msg: String| Error::format(origin, line_no, fields[i].1, msg);

    let id = fields[0].0;
    if id.is_empty() {
        return Err(at(0, "empty record id".into()));
    }
    let role = match fields[1].0 {
        "labeled" => Role::Labeled,
        "pseudo" => Role::Pseudo,
        other => return Err(at(1, format!("role must be `labeled` or `pseudo`, found `{other}`"))),
    };
    let class_raw: i64 = fields[2]
        .0
        .parse()
        .map_err(|_| at(2, format!("invalid class id `{}`", fields[2].0)))?;
    let class_id = match class_raw {
        -1 => None,
        c if c >= 0 => Some(c as ClassId),
        c => return Err(at(2, format!("class id must be >= 0 or -1, found {c}"))),
    };
    let confidence: f32 = fields[3]
        .0
        .parse()
        .map_err(|_| at(3, format!("invalid confidence `{}`", fields[3].0)))?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(at(3, format!("confidence {confidence} outside [0, 1]")));
    }
    let gt_ood = match fields[4].0 {
        "0" => Some(false),
        "1" => Some(true),
        "-1" => None,
        other => return Err(at(4, format!("gt_ood must be 0, 1 or -1, found `{other}`"))),
    };
    if role == Role::Labeled && class_id.is_none() {
        return Err(at(2, "labeled rows need a class id >= 0".into()));
    }
    if role == Role::Labeled && gt_ood != Some(false) {
        return Err(at(4, "labeled rows must have gt_ood 0".into()));
    }

    let values = parse_float_row(rest, dim, origin, line_no).map_err(|e| match e {
        Error::Format {
            origin,
            line,
            column: c,
            message,
        } => Error::Format {
            origin,
            line,
            column: c + column - 1,
            message,
        },
        other => other,
    })?;
    let feature = FeatureVector::new(values).map_err(|e| Error::format(origin, line_no, column, e.to_string()))?;
    Ok(ErfRecord {
        id: id.to_string(),
        role,
        class_id,
        confidence,
        gt_ood,
        feature,
    })
}
