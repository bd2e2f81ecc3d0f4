use nalgebra::Vector3;

use super::GeometryError;

/// A set of 3D points in meters, with optional per-point weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    weights: Option<Vec<f64>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting NaN/Inf coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinitePoint);
        }
        Ok(Self {
            points,
            weights: None,
        })
    }

    pub fn with_weights(
        points: Vec<Vector3<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        if weights.len() != points.len() || weights.iter().any(|w| !w.is_finite()) {
            return Err(GeometryError::NonFinitePoint);
        }
        let mut cloud = Self::new(points)?;
        cloud.weights = Some(weights);
        Ok(cloud)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Arithmetic mean of the points.
    pub fn centroid(&self) -> Vector3<f64> {
        let mut sum = Vector3::zeros();
        for p in &self.points {
            sum += p;
        }
        sum / self.points.len().max(1) as f64
    }

    /// Applies `map` to every point, keeping weights.
    pub fn map(&self, map: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Self {
        Self {
            points: self.points.iter().map(map).collect(),
            weights: self.weights.clone(),
        }
    }
}
