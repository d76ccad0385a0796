//! Validated embedding vectors.

use std::ops::Deref;

use crate::error::{Error, Result};

/// A finite, nonzero embedding of fixed dimension.
///
/// Components are stored at 32-bit width (the width used by every on-disk
/// format); the squared norm is cached in 64-bit so distance kernels never
/// recompute it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
    norm_sq: f64,
}

impl FeatureVector {
    /// Validates and wraps `values`. Rejects empty, non-finite and zero-norm input.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("feature vector is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "feature component {i} is not finite ({})",
                values[i]
            )));
        }
        let norm_sq = squared_norm(&values);
        if norm_sq == 0.0 {
            return Err(Error::Validation("feature vector has zero norm".into()));
        }
        Ok(Self { values, norm_sq })
    }

    /// Like [`FeatureVector::new`], additionally checking the dimension.
    pub fn with_dim(values: Vec<f32>, dim: usize) -> Result<Self> {
        if values.len() != dim {
            return Err(Error::Validation(format!(
                "feature has dimension {}, expected {dim}",
                values.len()
            )));
        }
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq.sqrt()
    }

    /// Returns `self * factor`, or an error if the result is not a valid feature.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }
}

impl Deref for FeatureVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.values
    }
}

impl TryFrom<Vec<f32>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

pub(crate) fn squared_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_vectors() {
        assert!(matches!(FeatureVector::new(vec![]), Err(Error::Validation(_))));
        assert!(matches!(FeatureVector::new(vec![0.0, 0.0]), Err(Error::Validation(_))));
        assert!(matches!(FeatureVector::new(vec![1.0, f32::NAN]), Err(Error::Validation(_))));
        assert!(matches!(
            FeatureVector::new(vec![f32::INFINITY, 1.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn checks_dimension() {
        assert!(FeatureVector::with_dim(vec![1.0, 2.0], 2).is_ok());
        assert!(matches!(
            FeatureVector::with_dim(vec![1.0, 2.0, 3.0], 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn caches_norm() {
        let f = FeatureVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(f.norm_sq(), 25.0);
        assert_eq!(f.norm(), 5.0);
        assert_eq!(f.dim(), 2);
    }
}
