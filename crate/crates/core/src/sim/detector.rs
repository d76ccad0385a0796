//! Nearest-centroid Gaussian classifier used as a stand-in for the detector's
//! classification head.

use crate::bank::ClassId;
use crate::error::{Error, Result};
use crate::filter::softmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: ClassId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDetector {
    centroids: Vec<Vec<f64>>,
    temperature: f64,
}

impl SurrogateDetector {
    pub fn new(centroids: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        let dim = centroids[0].len();
        if dim == 0 || centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::Config("centroids must share a positive dimension".into()));
        }
        if centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("centroids must be finite".into()));
        }
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
        }
        Ok(Self {
            centroids,
            temperature,
        })
    }

    /// All centroids at the origin.
    pub fn zeros(num_classes: usize, dim: usize, temperature: f64) -> Result<Self> {
        Self::new(vec![vec![0.0; dim]; num_classes], temperature)
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub(crate) fn centroids_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.centroids
    }

    fn check_dim(&self, feature: &[f32]) -> Result<()> {
        if feature.len() != self.dim() {
            return Err(Error::Validation(format!(
                "feature dimension {} does not match detector dimension {}",
                feature.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `-temperature * |x - centroid_c|^2` for every class.
    pub fn logits(&self, feature: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(feature)?;
        Ok(self
            .centroids
            .iter()
            .map(|c| {
                let d2: f64 = c
                    .iter()
                    .zip(feature)
                    .map(|(&m, &x)| {
                        let d = f64::from(x) - m;
                        d * d
                    })
                    .sum();
                -self.temperature * d2
            })
            .collect())
    }

    /// Argmax class (lowest index on ties), its softmax probability and the logits.
    pub fn predict(&self, feature: &[f32]) -> Result<(Prediction, Vec<f64>)> {
        let logits = self.logits(feature)?;
        let probs = softmax(&logits)?;
        let mut best = 0;
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p > probs[best] {
                best = c;
            }
        }
        Ok((
            Prediction {
                class: best,
                confidence: probs[best],
            },
            logits,
        ))
    }

    /// Largest Euclidean distance between matching centroids of two detectors.
    pub fn max_centroid_gap(&self, other: &SurrogateDetector) -> f64 {
        self.centroids
            .iter()
            .zip(&other.centroids)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> SurrogateDetector {
        SurrogateDetector::new(
            vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn feature_on_a_centroid() {
        let (p, logits) = three().predict(&[0.0, 10.0]).unwrap();
        assert_eq!(p.class, 2);
        assert!(p.confidence > 0.999_999);
        assert_eq!(logits[2], 0.0);
    }

    #[test]
    fn equidistant_tie_goes_to_lower_class() {
        let det = SurrogateDetector::new(vec![vec![-1.0, 0.0], vec![1.0, 0.0]], 2.0).unwrap();
        let (p, _) = det.predict(&[0.0, 3.0]).unwrap();
        assert_eq!(p.class, 0);
        assert_eq!(p.confidence, 0.5);
    }

    #[test]
    fn zero_temperature_is_uniform() {
        let det = SurrogateDetector::new(three().centroids().to_vec(), 0.0).unwrap();
        let (p, _) = det.predict(&[9.0, 1.0]).unwrap();
        assert!((p.confidence - 1.0 / 3.0).abs() < 1e-15);
        let tiny = SurrogateDetector::new(three().centroids().to_vec(), 1e-12).unwrap();
        assert!((tiny.predict(&[9.0, 1.0]).unwrap().0.confidence - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(three().predict(&[1.0]), Err(Error::Validation(_))));
    }
}
