//! Class-wise feature banks: one fixed-capacity FIFO queue of prototypes per
//! in-distribution class.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature::FeatureVector;
use crate::io::write_atomic;

pub type ClassId = usize;

/// FIFO queue of prototypes for a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureBank {
    class_id: ClassId,
    capacity: usize,
    queue: VecDeque<FeatureVector>,
    insert_counter: u64,
}

impl ClassFeatureBank {
    fn new(class_id: ClassId, capacity: usize) -> Self {
        Self {
            class_id,
            capacity,
            queue: VecDeque::new(),
            insert_counter: 0,
        }
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.queue.len() == self.capacity
    }

    /// Total number of pushes ever applied to this bank.
    pub fn insert_counter(&self) -> u64 {
        self.insert_counter
    }

    /// Current prototypes, oldest first.
    pub fn prototypes(&self) -> &[FeatureVector] {
        let (front, back) = self.queue.as_slices();
        debug_assert!(back.is_empty());
        front
    }

    // Enqueue, then drop the front if the queue overflowed. The queue is kept
    // contiguous so `prototypes` can hand out a slice.
    fn push(&mut self, feature: FeatureVector) {
        self.queue.push_back(feature);
        if self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        self.queue.make_contiguous();
        self.insert_counter += 1;
    }
}

/// The full set of class banks, `M = {M_c}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBankSet {
    dim: usize,
    capacity: usize,
    banks: Vec<ClassFeatureBank>,
}

impl FeatureBankSet {
    pub fn new(num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("number of classes must be at least 1".into()));
        }
        if capacity == 0 {
            return Err(Error::Config("bank capacity must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        Ok(Self {
            dim,
            capacity,
            banks: (0..num_classes)
                .map(|c| ClassFeatureBank::new(c, capacity))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.banks.len()
    }

    pub fn banks(&self) -> &[ClassFeatureBank] {
        &self.banks
    }

    pub fn bank(&self, class_id: ClassId) -> Result<&ClassFeatureBank> {
        self.banks.get(class_id).ok_or(Error::UnknownClass(class_id))
    }

    /// Appends a labeled feature to its class queue, evicting the oldest
    /// prototype once the queue is at capacity.
    pub fn push(&mut self, class_id: ClassId, feature: FeatureVector) -> Result<()> {
        if feature.dim() != self.dim {
            return Err(Error::Validation(format!(
                "feature has dimension {}, bank expects {}",
                feature.dim(),
                self.dim
            )));
        }
        let bank = self
            .banks
            .get_mut(class_id)
            .ok_or(Error::UnknownClass(class_id))?;
        bank.push(feature);
        Ok(())
    }

    /// True once every class queue holds exactly `capacity` prototypes.
    pub fn is_warm(&self) -> bool {
        self.banks.iter().all(ClassFeatureBank::is_full)
    }

    /// Classes whose queue is still below capacity.
    pub fn cold_classes(&self) -> Vec<ClassId> {
        self.banks
            .iter()
            .filter(|b| !b.is_full())
            .map(ClassFeatureBank::class_id)
            .collect()
    }

    pub fn prototypes(&self, class_id: ClassId) -> Result<&[FeatureVector]> {
        Ok(self.bank(class_id)?.prototypes())
    }

    pub fn snapshot(&self) -> BankSnapshot {
        BankSnapshot {
            dim: self.dim,
            capacity: self.capacity,
            classes: self
                .banks
                .iter()
                .map(|b| ClassSnapshot {
                    class_id: b.class_id,
                    pushes: b.insert_counter,
                    prototypes: b.queue.iter().map(|f| f.as_slice().to_vec()).collect(),
                })
                .collect(),
        }
    }

    pub fn restore(snapshot: &BankSnapshot) -> Result<Self> {
        let mut set = Self::new(snapshot.classes.len(), snapshot.capacity, snapshot.dim)?;
        for (expected, class) in snapshot.classes.iter().enumerate() {
            if class.class_id != expected {
                return Err(Error::Validation(format!(
                    "snapshot class ids must be 0..{} in order, found {} at position {expected}",
                    snapshot.classes.len(),
                    class.class_id
                )));
            }
            if class.prototypes.len() > snapshot.capacity {
                return Err(Error::Validation(format!(
                    "class {} holds {} prototypes, capacity is {}",
                    class.class_id,
                    class.prototypes.len(),
                    snapshot.capacity
                )));
            }
            if class.pushes < class.prototypes.len() as u64 {
                return Err(Error::Validation(format!(
                    "class {} reports {} pushes but holds {} prototypes",
                    class.class_id,
                    class.pushes,
                    class.prototypes.len()
                )));
            }
            let bank = &mut set.banks[expected];
            for values in &class.prototypes {
                bank.queue
                    .push_back(FeatureVector::with_dim(values.clone(), snapshot.dim)?);
            }
            bank.insert_counter = class.pushes;
        }
        Ok(set)
    }
}

/// Serializable image of a [`FeatureBankSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    pub dim: usize,
    pub capacity: usize,
    pub classes: Vec<ClassSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSnapshot {
    pub class_id: ClassId,
    pub pushes: u64,
    pub prototypes: Vec<Vec<f32>>,
}

const SNAPSHOT_MAGIC: &str = "cfb";
const SNAPSHOT_VERSION: &str = "v1";

impl BankSnapshot {
    /// Renders the `cfb v1` text format. Floats use the shortest
    /// representation that parses back to the same `f32`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION} dim={} capacity={} classes={}",
            self.dim,
            self.capacity,
            self.classes.len()
        );
        for class in &self.classes {
            let _ = writeln!(
                out,
                "class {} len={} pushes={}",
                class.class_id,
                class.prototypes.len(),
                class.pushes
            );
            for row in &class.prototypes {
                push_float_row(&mut out, row);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::format(origin, 1, 1, "empty snapshot"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 5 || fields[0] != SNAPSHOT_MAGIC {
            return Err(Error::format(
                origin,
                line_no,
                1,
                "expected header `cfb v1 dim=<D> capacity=<L> classes=<C>`",
            ));
        }
        if fields[1] != SNAPSHOT_VERSION {
            return Err(Error::format(
                origin,
                line_no,
                5,
                format!("unsupported snapshot version `{}`", fields[1]),
            ));
        }
        let dim = parse_key(fields[2], "dim", origin, line_no, header)?;
        let capacity = parse_key(fields[3], "capacity", origin, line_no, header)?;
        let num_classes: usize = parse_key(fields[4], "classes", origin, line_no, header)?;

        let mut classes = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let (line_no, line) = lines.next().ok_or_else(|| {
                Error::format(origin, text.lines().count() + 1, 1, "truncated snapshot: missing class block")
            })?;
            let parts: Vec<&str> = line.split(' ').collect();
            if !(parts.len() == 3 || parts.len() == 4) || parts[0] != "class" {
                return Err(Error::format(
                    origin,
                    line_no,
                    1,
                    "expected `class <id> len=<n> [pushes=<k>]`",
                ));
            }
            let class_id: ClassId = parts[1].parse().map_err(|_| {
                Error::format(origin, line_no, 7, format!("invalid class id `{}`", parts[1]))
            })?;
            let len: usize = parse_key(parts[2], "len", origin, line_no, line)?;
            let pushes = match parts.get(3) {
                Some(p) => parse_key(p, "pushes", origin, line_no, line)?,
                None => len as u64,
            };
            let mut prototypes = Vec::with_capacity(len);
            for _ in 0..len {
                let (line_no, row) = lines.next().ok_or_else(|| {
                    Error::format(
                        origin,
                        text.lines().count() + 1,
                        1,
                        format!("truncated snapshot: class {class_id} declares {len} prototypes"),
                    )
                })?;
                prototypes.push(parse_float_row(row, dim, origin, line_no)?);
            }
            classes.push(ClassSnapshot {
                class_id,
                pushes,
                prototypes,
            });
        }
        if let Some((line_no, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(Error::format(
                origin,
                line_no,
                1,
                format!("unexpected trailing content `{extra}`"),
            ));
        }
        Ok(Self {
            dim,
            capacity,
            classes,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

fn parse_key<T: std::str::FromStr>(
    field: &str,
    key: &str,
    origin: &str,
    line_no: usize,
    line: &str,
) -> Result<T> {
    let column = line.find(field).map_or(1, |c| c + 1);
    field
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(origin, line_no, column, format!("expected `{key}=<integer>`")))
}

/// Writes `row` as comma-separated shortest round-trip `f32` literals.
pub(crate) fn push_float_row(out: &mut String, row: &[f32]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:?}");
    }
}

pub(crate) fn parse_float_row(row: &str, dim: usize, origin: &str, line_no: usize) -> Result<Vec<f32>> {
    let mut values = Vec::with_capacity(dim);
    let mut column = 1;
    for token in row.split(',') {
        let v: f32 = token.parse().map_err(|_| {
            Error::format(origin, line_no, column, format!("invalid float `{token}`"))
        })?;
        if !v.is_finite() {
            return Err(Error::format(origin, line_no, column, format!("non-finite value `{token}`")));
        }
        values.push(v);
        column += token.len() + 1;
    }
    if values.len() != dim {
        return Err(Error::format(
            origin,
            line_no,
            1,
            format!("expected {dim} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f32]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn contents(set: &FeatureBankSet, class: ClassId) -> Vec<Vec<f32>> {
        set.prototypes(class)
            .unwrap()
            .iter()
            .map(|f| f.as_slice().to_vec())
            .collect()
    }

    #[test]
    fn new_bank_set_sizes() {
        let set = FeatureBankSet::new(10, 100, 1024).unwrap();
        assert_eq!(set.num_classes(), 10);
        assert!(set.banks().iter().all(ClassFeatureBank::is_empty));
        assert!(!set.is_warm());

        let set = FeatureBankSet::new(1, 1, 2).unwrap();
        assert!(!set.is_warm());

        assert!(matches!(FeatureBankSet::new(2, 0, 4), Err(Error::Config(_))));
        assert!(matches!(FeatureBankSet::new(0, 2, 4), Err(Error::Config(_))));
        assert!(matches!(FeatureBankSet::new(2, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fifo_eviction() {
        let mut set = FeatureBankSet::new(1, 3, 1).unwrap();
        for v in 1..=4 {
            set.push(0, fv(&[v as f32])).unwrap();
        }
        assert_eq!(contents(&set, 0), vec![vec![2.0], vec![3.0], vec![4.0]]);
        assert_eq!(set.bank(0).unwrap().insert_counter(), 4);
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let mut set = FeatureBankSet::new(1, 3, 1).unwrap();
        set.push(0, fv(&[1.0])).unwrap();
        set.push(0, fv(&[2.0])).unwrap();
        assert_eq!(contents(&set, 0), vec![vec![1.0], vec![2.0]]);
    }

    #[test]
    fn duplicates_are_allowed() {
        let mut set = FeatureBankSet::new(1, 2, 2).unwrap();
        for _ in 0..3 {
            set.push(0, fv(&[1.0, 0.5])).unwrap();
        }
        assert_eq!(contents(&set, 0), vec![vec![1.0, 0.5], vec![1.0, 0.5]]);
    }

    #[test]
    fn push_errors() {
        let mut set = FeatureBankSet::new(2, 2, 2).unwrap();
        assert!(matches!(set.push(2, fv(&[1.0, 0.0])), Err(Error::UnknownClass(2))));
        assert!(matches!(set.push(0, fv(&[1.0])), Err(Error::Validation(_))));
        assert!(matches!(set.prototypes(5), Err(Error::UnknownClass(5))));
    }

    #[test]
    fn warm_only_when_every_bank_full() {
        let mut set = FeatureBankSet::new(2, 2, 1).unwrap();
        set.push(0, fv(&[1.0])).unwrap();
        set.push(0, fv(&[1.0])).unwrap();
        set.push(1, fv(&[1.0])).unwrap();
        assert!(!set.is_warm());
        assert_eq!(set.cold_classes(), vec![1]);
        set.push(1, fv(&[1.0])).unwrap();
        assert!(set.is_warm());

        let mut single = FeatureBankSet::new(1, 1, 2).unwrap();
        single.push(0, fv(&[0.0, 1.0])).unwrap();
        assert!(single.is_warm());
    }

    #[test]
    fn snapshot_round_trip_preserves_counters() {
        let mut set = FeatureBankSet::new(2, 2, 3).unwrap();
        for i in 0..5 {
            set.push(i % 2, fv(&[0.1 * i as f32, 1.0 / 3.0, -2.5e-8])).unwrap();
        }
        let text = set.snapshot().to_text();
        let restored = FeatureBankSet::restore(&BankSnapshot::parse(&text, "mem").unwrap()).unwrap();
        assert_eq!(restored, set);
        assert_eq!(restored.snapshot().to_text(), text);
    }

    #[test]
    fn empty_snapshot_round_trip() {
        let set = FeatureBankSet::new(3, 4, 2).unwrap();
        let text = set.snapshot().to_text();
        assert!(text.starts_with("cfb v1 dim=2 capacity=4 classes=3\n"));
        let restored = FeatureBankSet::restore(&BankSnapshot::parse(&text, "mem").unwrap()).unwrap();
        assert_eq!(restored, set);
    }

    #[test]
    fn truncated_snapshot_is_a_format_error() {
        let mut set = FeatureBankSet::new(1, 3, 2).unwrap();
        for _ in 0..3 {
            set.push(0, fv(&[1.0, 2.0])).unwrap();
        }
        let text = set.snapshot().to_text();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(BankSnapshot::parse(&cut, "mem"), Err(Error::Format { .. })));
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let err = BankSnapshot::parse("cfb v2 dim=2 capacity=1 classes=0\n", "mem").unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
    }

    #[test]
    fn legacy_class_line_without_pushes() {
        let snap = BankSnapshot::parse("cfb v1 dim=2 capacity=2 classes=1\nclass 0 len=1\n1.0,0.0\n", "mem").unwrap();
        assert_eq!(snap.classes[0].pushes, 1);
    }
}
