//! Synthetic drifting Gaussian-cluster streams standing in for RoI features.
//!
//! Every cluster centroid (in-distribution and OOD alike) sits on its own
//! coordinate axis at radius `separation / sqrt(2)`, so all centroids are
//! pairwise exactly `separation` apart. This needs `C + O <= D`. Each centroid
//! drifts along a fixed random unit direction by `drift_rate` per epoch. The
//! direction has no component along the centroid itself, since moving a
//! cluster radially only rescales its features and leaves cosine geometry alone.
//!
//! With `ood_offset` set, OOD cluster `o` instead sits that far from
//! in-distribution centroid `o mod C`, displaced along its own axis, which makes
//! it confusable with that one class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bank::ClassId;
use crate::error::{Error, Result};
use crate::feature::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub num_id_classes: usize,
    pub num_ood_classes: usize,
    pub dimension: usize,
    /// Distance between any two centroids, in units of the base within-cluster std.
    pub cluster_separation: f64,
    /// Centroid displacement per epoch, same units.
    pub drift_rate: f64,
    /// Fraction of unlabeled records drawn from OOD clusters.
    pub contamination: f64,
    /// Distance from each OOD centroid to the in-distribution centroid it is
    /// anchored to. Unset places OOD centroids like the others.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_offset: Option<f64>,
    /// In-distribution class stds are log-spaced over `[1/spread, spread]`.
    pub class_std_spread: f64,
    /// Labeled records per class available for burn-in (epoch 0).
    pub labeled_per_class: usize,
    /// Fresh labeled records per mutual-learning epoch.
    pub labeled_per_epoch: usize,
    pub unlabeled_per_epoch: usize,
    /// In-distribution evaluation records per epoch (epoch 0 included).
    pub test_per_epoch: usize,
    pub epochs: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_id_classes: 5,
            num_ood_classes: 2,
            dimension: 16,
            cluster_separation: 4.0,
            drift_rate: 0.0,
            contamination: 0.632,
            ood_offset: None,
            class_std_spread: 1.0,
            labeled_per_class: 100,
            labeled_per_epoch: 100,
            unlabeled_per_epoch: 800,
            test_per_epoch: 500,
            epochs: 12,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_id_classes == 0 {
            return bad("stream.num_id_classes must be at least 1".into());
        }
        if self.dimension == 0 {
            return bad("stream.dimension must be at least 1".into());
        }
        if self.num_id_classes + self.num_ood_classes > self.dimension {
            return bad(format!(
                "cannot place {} centroids pairwise {} apart in {} dimensions (need C + O <= D)",
                self.num_id_classes + self.num_ood_classes,
                self.cluster_separation,
                self.dimension
            ));
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation > 0.0) {
            return bad(format!("stream.cluster_separation must be positive, got {}", self.cluster_separation));
        }
        if !(self.drift_rate.is_finite() && self.drift_rate >= 0.0) {
            return bad(format!("stream.drift_rate must be >= 0, got {}", self.drift_rate));
        }
        if !(0.0..=1.0).contains(&self.contamination) {
            return bad(format!("stream.contamination must be in [0, 1], got {}", self.contamination));
        }
        if self.contamination > 0.0 && self.num_ood_classes == 0 {
            return bad("stream.contamination > 0 needs at least one OOD class".into());
        }
        if let Some(off) = self.ood_offset {
            if !(off.is_finite() && off > 0.0) {
                return bad(format!("stream.ood_offset must be positive, got {off}"));
            }
        }
        if !(self.class_std_spread.is_finite() && self.class_std_spread >= 1.0) {
            return bad(format!("stream.class_std_spread must be >= 1, got {}", self.class_std_spread));
        }
        Ok(())
    }

    /// Within-cluster std of in-distribution class `class`.
    pub fn class_std(&self, class: ClassId) -> f64 {
        if self.num_id_classes == 1 {
            return 1.0;
        }
        let frac = class as f64 / (self.num_id_classes - 1) as f64;
        self.class_std_spread.powf(2.0 * frac - 1.0)
    }
}

/// Where a record was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Id(ClassId),
    Ood(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub epoch: usize,
    pub source: Source,
    pub feature: FeatureVector,
}

impl Record {
    pub fn class(&self) -> Option<ClassId> {
        match self.source {
            Source::Id(c) => Some(c),
            Source::Ood(_) => None,
        }
    }

    pub fn is_ood(&self) -> bool {
        matches!(self.source, Source::Ood(_))
    }
}

/// Generated dataset. Per-epoch vectors are indexed by epoch; index 0 of
/// `labeled` and `unlabeled` is empty (epoch 0 is burn-in).
#[derive(Debug, Clone, PartialEq)]
pub struct StreamDataset {
    pub burn_in: Vec<Record>,
    pub labeled: Vec<Vec<Record>>,
    pub unlabeled: Vec<Vec<Record>>,
    pub test: Vec<Vec<Record>>,
}

struct Geometry {
    id_centroids: Vec<Vec<f64>>,
    ood_centroids: Vec<Vec<f64>>,
    id_drift: Vec<Vec<f64>>,
    ood_drift: Vec<Vec<f64>>,
}

/// Random unit vector orthogonal to coordinate axis `skip`; the zero vector
/// when there is no such direction (one dimension).
fn unit_direction(rng: &mut ChaCha8Rng, dim: usize, skip: usize) -> Vec<f64> {
    if dim < 2 {
        return vec![0.0; dim];
    }
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        v[skip] = 0.0;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn axis_point(dim: usize, axis: usize, radius: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis] = radius;
    v
}

struct Sampler<'a> {
    cfg: &'a StreamConfig,
    geo: Geometry,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn draw(&mut self, source: Source, epoch: usize) -> FeatureVector {
        let (center, drift, std) = match source {
            Source::Id(c) => (&self.geo.id_centroids[c], &self.geo.id_drift[c], self.cfg.class_std(c)),
            Source::Ood(o) => (&self.geo.ood_centroids[o], &self.geo.ood_drift[o], 1.0),
        };
        let shift = self.cfg.drift_rate * epoch as f64;
        loop {
            let values: Vec<f32> = center
                .iter()
                .zip(drift)
                .map(|(&c, &d)| {
                    let z: f64 = self.rng.sample(StandardNormal);
                    (c + shift * d + std * z) as f32
                })
                .collect();
            if let Ok(f) = FeatureVector::new(values) {
                return f;
            }
        }
    }

    fn record(&mut self, prefix: &str, epoch: usize, index: usize, source: Source) -> Record {
        Record {
            id: format!("{prefix}{epoch}-{index}"),
            epoch,
            source,
            feature: self.draw(source, epoch),
        }
    }

    fn balanced(&mut self, prefix: &str, epoch: usize, count: usize) -> Vec<Record> {
        let c = self.cfg.num_id_classes;
        (0..count)
            .map(|i| self.record(prefix, epoch, i, Source::Id(i % c)))
            .collect()
    }

    fn unlabeled(&mut self, epoch: usize) -> Vec<Record> {
        let n = self.cfg.unlabeled_per_epoch;
        let n_ood = (self.cfg.contamination * n as f64).round() as usize;
        let mut sources: Vec<Source> = (0..n)
            .map(|i| {
                if i < n_ood {
                    Source::Ood(self.rng.random_range(0..self.cfg.num_ood_classes))
                } else {
                    Source::Id(self.rng.random_range(0..self.cfg.num_id_classes))
                }
            })
            .collect();
        sources.shuffle(&mut self.rng);
        sources
            .into_iter()
            .enumerate()
            .map(|(i, s)| self.record("u", epoch, i, s))
            .collect()
    }
}

/// Draws a full dataset. Output is a pure function of `(config, seed)`.
pub fn gen_stream(cfg: &StreamConfig, seed: u64) -> Result<StreamDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = cfg.cluster_separation / std::f64::consts::SQRT_2;
    let c = cfg.num_id_classes;
    let geo = Geometry {
        id_centroids: (0..c).map(|i| axis_point(cfg.dimension, i, radius)).collect(),
        ood_centroids: (0..cfg.num_ood_classes)
            .map(|o| match cfg.ood_offset {
                None => axis_point(cfg.dimension, c + o, radius),
                Some(off) => {
                    let mut p = axis_point(cfg.dimension, o % c, radius);
                    p[c + o] = off;
                    p
                }
            })
            .collect(),
        id_drift: (0..c).map(|i| unit_direction(&mut rng, cfg.dimension, i)).collect(),
        ood_drift: (0..cfg.num_ood_classes)
            .map(|o| unit_direction(&mut rng, cfg.dimension, c + o))
            .collect(),
    };
    let mut s = Sampler { cfg, geo, rng };

    let burn_in = s.balanced("l", 0, cfg.labeled_per_class * c);
    let mut labeled = vec![Vec::new()];
    let mut unlabeled = vec![Vec::new()];
    let mut test = vec![s.balanced("t", 0, cfg.test_per_epoch)];
    for epoch in 1..=cfg.epochs {
        labeled.push(s.balanced("l", epoch, cfg.labeled_per_epoch));
        unlabeled.push(s.unlabeled(epoch));
        test.push(s.balanced("t", epoch, cfg.test_per_epoch));
    }
    Ok(StreamDataset {
        burn_in,
        labeled,
        unlabeled,
        test,
    })
}
