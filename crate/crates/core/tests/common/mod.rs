//! Brute-force oracles shared by the integration tests. Written from the
//! definitions alone; nothing here calls into the scoring code.

#![allow(dead_code)]

use cfb::{DistanceMetric, FeatureVector};

pub fn fv(values: &[f32]) -> FeatureVector {
    FeatureVector::new(values.to_vec()).expect("valid feature")
}

pub fn oracle_distance(a: &[f32], b: &[f32], metric: DistanceMetric) -> f64 {
    let pairs = a.iter().zip(b).map(|(&x, &y)| (x as f64, y as f64));
    match metric {
        DistanceMetric::L1 => pairs.map(|(x, y)| (x - y).abs()).sum(),
        DistanceMetric::L2 => pairs.map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        DistanceMetric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in pairs {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        }
    }
}

/// Sort every distance, average the smallest `k`.
pub fn oracle_score(query: &[f32], bank: &[Vec<f32>], k: usize, metric: DistanceMetric) -> f64 {
    let mut d: Vec<f64> = bank.iter().map(|p| oracle_distance(query, p, metric)).collect();
    d.sort_by(f64::total_cmp);
    d[..k].iter().sum::<f64>() / k as f64
}

/// Leave-one-out self scores by rebuilding the bank without each prototype.
pub fn oracle_self_scores(bank: &[Vec<f32>], k: usize, metric: DistanceMetric) -> Vec<f64> {
    (0..bank.len())
        .map(|i| {
            let rest: Vec<Vec<f32>> = bank
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| p.clone())
                .collect();
            oracle_score(&bank[i], &rest, k, metric)
        })
        .collect()
}

/// Two-pass mean and population standard deviation.
pub fn oracle_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pairwise count: P(OOD score > ID score) + half the ties.
pub fn oracle_auroc(samples: &[(f64, bool)]) -> f64 {
    let ood: Vec<f64> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    let id: Vec<f64> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut num = 0.0;
    for &o in &ood {
        for &i in &id {
            if o > i {
                num += 1.0;
            } else if o == i {
                num += 0.5;
            }
        }
    }
    num / (ood.len() * id.len()) as f64
}

pub fn relative_error(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
