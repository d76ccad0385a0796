//! Non-parametric OOD scores: mean distance of a query to its K nearest
//! prototypes in the bank of its predicted class.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{dot, FeatureVector};

/// Scalar dissimilarity; higher means more likely out-of-distribution.
pub type OodScore = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Cosine,
    L1,
    L2,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [DistanceMetric::L1, DistanceMetric::L2, DistanceMetric::Cosine];

    /// Distance between two validated features of equal dimension.
    ///
    /// Dimensions are assumed equal; the public entry points check them.
    pub fn distance(self, a: &FeatureVector, b: &FeatureVector) -> f64 {
        match self {
            DistanceMetric::Cosine => cosine_kernel(a, b),
            DistanceMetric::L1 => a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
                .sum(),
            DistanceMetric::L2 => a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| {
                    let d = f64::from(x) - f64::from(y);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "l1" => Ok(DistanceMetric::L1),
            "l2" => Ok(DistanceMetric::L2),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected cosine, l1 or l2)"
            ))),
        }
    }
}

// 1 - cos(a, b), with the similarity clamped to [-1, 1]. Dividing by
// sqrt(|a|^2 |b|^2) makes identical vectors come out at exactly 0.
fn cosine_kernel(a: &FeatureVector, b: &FeatureVector) -> f64 {
    let sim = dot(a, b) / (a.norm_sq() * b.norm_sq()).sqrt();
    1.0 - sim.clamp(-1.0, 1.0)
}

fn check_dims(a: &FeatureVector, b: &FeatureVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `1 - a·b / (|a||b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(cosine_kernel(a, b))
}

/// Number of neighbours for a bank of capacity `capacity`: `max(1, floor(ratio * capacity))`.
pub fn k_from_ratio(capacity: usize, ratio: f64) -> Result<usize> {
    if capacity == 0 {
        return Err(Error::Config("bank capacity must be at least 1".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("knn_ratio must be in (0, 1], got {ratio}")));
    }
    Ok(((ratio * capacity as f64).floor() as usize).max(1))
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

// Keeps the k smallest (distance, index) pairs, sorted ascending.
fn k_smallest(mut pairs: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, by_distance_then_index);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(by_distance_then_index);
    pairs
}

fn validate_query(query: &FeatureVector, prototypes: &[FeatureVector], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Size("K must be at least 1".into()));
    }
    if prototypes.len() < k {
        return Err(Error::Size(format!(
            "bank holds {} prototypes, K = {k} (warm-up incomplete)",
            prototypes.len()
        )));
    }
    if let Some(p) = prototypes.first() {
        check_dims(query, p)?;
    }
    Ok(())
}

fn nearest(query: &FeatureVector, prototypes: &[FeatureVector], k: usize, metric: DistanceMetric) -> Vec<(f64, usize)> {
    let pairs = prototypes
        .iter()
        .enumerate()
        .map(|(i, p)| (metric.distance(query, p), i))
        .collect();
    k_smallest(pairs, k)
}

/// Positions (oldest = 0) of the `k` prototypes closest to `query`, nearest
/// first. Equal distances go to the older prototype.
pub fn knn_indices(
    query: &FeatureVector,
    prototypes: &[FeatureVector],
    k: usize,
    metric: DistanceMetric,
) -> Result<Vec<usize>> {
    validate_query(query, prototypes, k)?;
    Ok(nearest(query, prototypes, k, metric)
        .into_iter()
        .map(|(_, i)| i)
        .collect())
}

/// Mean distance from `query` to its `k` nearest prototypes.
///
/// For cosine this is `1 - mean cosine similarity` over the neighbours.
pub fn ood_score(
    query: &FeatureVector,
    prototypes: &[FeatureVector],
    k: usize,
    metric: DistanceMetric,
) -> Result<OodScore> {
    validate_query(query, prototypes, k)?;
    let nn = nearest(query, prototypes, k, metric);
    Ok(mean_distance(&nn))
}

fn mean_distance(nn: &[(f64, usize)]) -> f64 {
    nn.iter().map(|(d, _)| d).sum::<f64>() / nn.len() as f64
}

/// Leave-one-out score of every prototype against the rest of its bank.
pub fn prototype_scores(prototypes: &[FeatureVector], k: usize, metric: DistanceMetric) -> Result<Vec<OodScore>> {
    let n = prototypes.len();
    if k == 0 {
        return Err(Error::Size("K must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::Size(format!(
            "leave-one-out scoring needs more than K = {k} prototypes, bank holds {n}"
        )));
    }
    let dim = prototypes[0].dim();
    if let Some(p) = prototypes.iter().find(|p| p.dim() != dim) {
        return Err(Error::Validation(format!(
            "dimension mismatch inside bank: {} vs {dim}",
            p.dim()
        )));
    }

    // Pairwise distances are symmetric, so fill the upper triangle once.
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.distance(&prototypes[i], &prototypes[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let pairs = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &d)| (d, j))
                .collect();
            mean_distance(&k_smallest(pairs, k))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f32]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn three_bank() -> Vec<FeatureVector> {
        vec![fv(&[1.0, 0.0]), fv(&[0.6, 0.8]), fv(&[0.0, 1.0])]
    }

    #[test]
    fn cosine_reference_points() {
        let e1 = fv(&[1.0, 0.0]);
        assert_eq!(cosine_distance(&e1, &fv(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&e1, &fv(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(cosine_distance(&e1, &fv(&[-1.0, 0.0])).unwrap(), 2.0);
        assert!(matches!(cosine_distance(&e1, &fv(&[1.0, 0.0, 0.0])), Err(Error::Validation(_))));
    }

    #[test]
    fn identical_vectors_have_zero_cosine_distance() {
        let v = fv(&[0.3, -1.7, 2.2, 1e-3]);
        assert_eq!(cosine_distance(&v, &v.clone()).unwrap(), 0.0);
    }

    #[test]
    fn k_resolution() {
        assert_eq!(k_from_ratio(100, 1.0 / 20.0).unwrap(), 5);
        assert_eq!(k_from_ratio(20, 1.0 / 20.0).unwrap(), 1);
        assert_eq!(k_from_ratio(10, 1.0 / 20.0).unwrap(), 1);
        assert_eq!(k_from_ratio(7, 1.0).unwrap(), 7);
        assert!(matches!(k_from_ratio(100, 0.0), Err(Error::Config(_))));
        assert!(matches!(k_from_ratio(100, 1.5), Err(Error::Config(_))));
        assert!(matches!(k_from_ratio(100, f64::NAN), Err(Error::Config(_))));
    }

    #[test]
    fn knn_on_three_prototypes() {
        let bank = three_bank();
        let q = fv(&[1.0, 0.0]);
        assert_eq!(knn_indices(&q, &bank, 2, DistanceMetric::Cosine).unwrap(), vec![0, 1]);
        let mut all = knn_indices(&q, &bank, 3, DistanceMetric::Cosine).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(
            knn_indices(&q, &bank, 4, DistanceMetric::Cosine),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn knn_ties_prefer_older() {
        let v = fv(&[0.2, 0.9]);
        let mut bank = vec![v.clone()];
        bank.extend((0..4).map(|i| fv(&[1.0, i as f32])));
        bank.push(v.clone());
        assert_eq!(knn_indices(&v, &bank, 1, DistanceMetric::Cosine).unwrap(), vec![0]);
        assert_eq!(knn_indices(&v, &bank, 2, DistanceMetric::L2).unwrap(), vec![0, 5]);
    }

    #[test]
    fn ood_score_examples() {
        let v = fv(&[0.5, 2.0, -1.0]);
        let copies = vec![v.clone(); 4];
        assert!(ood_score(&v, &copies, 4, DistanceMetric::Cosine).unwrap().abs() < 1e-15);

        let score = ood_score(&fv(&[1.0, 0.0]), &three_bank(), 2, DistanceMetric::Cosine).unwrap();
        assert!((score - 0.2).abs() < 1e-7, "{score}");

        let orth = vec![fv(&[0.0, 1.0, 0.0]), fv(&[0.0, 0.0, 2.0]), fv(&[0.0, -3.0, 1.0])];
        let score = ood_score(&fv(&[1.0, 0.0, 0.0]), &orth, 2, DistanceMetric::Cosine).unwrap();
        assert_eq!(score, 1.0);

        assert!(matches!(
            ood_score(&v, &copies[..2], 3, DistanceMetric::Cosine),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn l1_l2_scores_are_mean_distances() {
        let bank = vec![fv(&[0.0, 1.0]), fv(&[3.0, 4.0]), fv(&[10.0, 10.0])];
        let q = fv(&[0.0, 1.0]);
        assert_eq!(ood_score(&q, &bank, 2, DistanceMetric::L1).unwrap(), 3.0);
        assert_eq!(ood_score(&q, &bank, 2, DistanceMetric::L2).unwrap(), (18.0f64).sqrt() / 2.0);
    }

    #[test]
    fn prototype_score_examples() {
        let v = fv(&[1.0, 1.0]);
        assert_eq!(
            prototype_scores(&[v.clone(), v.clone(), v], 1, DistanceMetric::Cosine).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
        assert_eq!(
            prototype_scores(&[fv(&[1.0, 0.0]), fv(&[0.0, 1.0])], 1, DistanceMetric::Cosine).unwrap(),
            vec![1.0, 1.0]
        );
        let scores = prototype_scores(&three_bank(), 1, DistanceMetric::Cosine).unwrap();
        for (got, want) in scores.iter().zip([0.4, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-7, "{scores:?}");
        }
        assert!(matches!(
            prototype_scores(&three_bank(), 3, DistanceMetric::Cosine),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in DistanceMetric::ALL {
            assert_eq!(m.as_str().parse::<DistanceMetric>().unwrap(), m);
        }
        assert!("mahalanobis".parse::<DistanceMetric>().is_err());
    }
}
