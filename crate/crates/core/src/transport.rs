//! Perspective-guided transport cost between density cells and annotation
//! points, `C_ij = exp(|x_i - y_j| / eta)` with a fixed bandwidth.
//!
//! Cell centres and points share one frame: grid coordinates divided by
//! `D = max(height, width)`, so the whole grid sits inside the unit square
//! and the cost stays within `[1, exp(sqrt(2) / eta)]`.

use crate::error::{Error, Result};
use crate::types::{Point, PointSet};

/// Default cost bandwidth.
pub const DEFAULT_ETA: f64 = 0.6;

/// Normalized cell-centre locations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordList {
    coords: Vec<Point>,
    scale: f64,
}

impl CoordList {
    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The normalizer `D`, in grid cells.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Maps points given in grid cells into this list's normalized frame.
    pub fn normalize_points(&self, grid_points: &PointSet) -> Result<PointSet> {
        let s = self.scale;
        grid_points.map(|p| Point::new(p.x / s, p.y / s))
    }
}

/// Cell centres `((c + 0.5) / D, (r + 0.5) / D)` for a `height x width` grid.
pub fn grid_coords(height: usize, width: usize) -> Result<CoordList> {
    if height == 0 || width == 0 {
        return Err(Error::param("height/width", "grid must have at least one cell"));
    }
    let d = height.max(width) as f64;
    let coords = (0..height)
        .flat_map(|r| (0..width).map(move |c| Point::new((c as f64 + 0.5) / d, (r as f64 + 0.5) / d)))
        .collect();
    Ok(CoordList { coords, scale: d })
}

/// Dense `n x m` cost matrix, row-major (rows are cells, columns points).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    /// Wraps precomputed costs. Entries must be finite and nonnegative.
    pub fn from_values(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::dims(format!("{n}x{m} = {} entries", n * m), values.len().to_string()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("cost entries must be finite and nonnegative".into()));
        }
        Ok(CostMatrix { n, m, values })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }
}

/// Builds `C_ij = exp(|x_i - y_j|_2 / eta)`.
///
/// `points` must already be in the normalized frame of `cells`.
pub fn cost_matrix(cells: &CoordList, points: &PointSet, eta: f64) -> Result<CostMatrix> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::param("eta", format!("must be positive, got {eta}")));
    }
    let (n, m) = (cells.len(), points.len());
    let mut values = Vec::with_capacity(n * m);
    for x in cells.coords() {
        values.extend(points.iter().map(|y| (x.distance(y) / eta).exp()));
    }
    Ok(CostMatrix { n, m, values })
}
