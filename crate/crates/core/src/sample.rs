//! Flat real-valued samples: images in `[-1, 1]` or low-dimensional points.

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Image { height: usize, width: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(d) => d,
            Shape::Image { height, width } => height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A point in `R^D` with an optional image layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    values: Vec<f64>,
    shape: Shape,
}

impl Sample {
    pub fn vector(values: Vec<f64>) -> Self {
        let shape = Shape::Vector(values.len());
        Self { values, shape }
    }

    pub fn image(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        check_dim(height * width, values.len())?;
        Ok(Self { values, shape: Shape::Image { height, width } })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { values: vec![0.0; shape.len()], shape }
    }

    /// Same layout as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_dim(self.dim(), values.len())?;
        Ok(Self { values, shape: self.shape })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn ensure_finite(&self, step: usize, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { step, what: what.to_string() })
        }
    }

    /// Mean squared difference per coordinate.
    pub fn mse(&self, other: &Sample) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        let n = self.dim().max(1) as f64;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

/// Every sample in `items` has dimension `dim`.
pub(crate) fn check_collection(items: &[Sample], dim: usize) -> Result<()> {
    for s in items {
        check_dim(dim, s.dim())?;
    }
    Ok(())
}
