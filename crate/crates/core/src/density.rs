//! Density-map arithmetic: counting, Gaussian ground-truth rendering and
//! moving annotations into the grid frame.

use crate::error::{Error, Result};
use crate::types::{DensityGrid, Point, PointSet};

/// Default ground-truth kernel width, in grid cells.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Estimated object count of a density map.
pub fn total_count(grid: &DensityGrid) -> f64 {
    grid.values().iter().sum()
}

/// Divides every coordinate by `stride`, mapping source pixels onto grid cells.
pub fn points_to_grid_frame(points: &PointSet, stride: u32) -> Result<PointSet> {
    if stride == 0 {
        return Err(Error::param("stride", "must be positive"));
    }
    let s = f64::from(stride);
    points.map(|p| Point::new(p.x / s, p.y / s))
}

/// Renders one isotropic Gaussian per point onto a `height x width` grid.
///
/// Points are given in source pixels. Each kernel is renormalized over the
/// cells it reaches, so every point contributes exactly one unit of mass even
/// when it sits on the border.
pub fn render_gaussian_density(
    points: &PointSet,
    height: usize,
    width: usize,
    stride: u32,
    sigma: f64,
) -> Result<DensityGrid> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
    }
    let mut values = vec![0.0; height * width];
    let grid = DensityGrid::zeros(height, width, stride)?;
    let (ext_x, ext_y) = (
        (width as f64) * f64::from(stride),
        (height as f64) * f64::from(stride),
    );
    for p in points.iter() {
        if p.x > ext_x || p.y > ext_y {
            return Err(Error::InvalidInput(format!(
                "point ({}, {}) lies outside the {ext_x}x{ext_y} source extent",
                p.x, p.y
            )));
        }
    }
    let local = points_to_grid_frame(points, stride)?;

    // Cells farther than this contribute below exp(-18) of the peak.
    let reach = (6.0 * sigma).ceil() as isize + 1;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::new();
    for p in local.iter() {
        let col0 = (p.x.floor() as isize).min(width as isize - 1);
        let row0 = (p.y.floor() as isize).min(height as isize - 1);
        let rows = (row0 - reach).max(0)..=(row0 + reach).min(height as isize - 1);
        let cols = (col0 - reach).max(0)..=(col0 + reach).min(width as isize - 1);

        weights.clear();
        let mut max_exponent = f64::NEG_INFINITY;
        for r in rows.clone() {
            for c in cols.clone() {
                let dx = c as f64 + 0.5 - p.x;
                let dy = r as f64 + 0.5 - p.y;
                let e = -(dx * dx + dy * dy) * inv_two_var;
                max_exponent = max_exponent.max(e);
                weights.push((r as usize * width + c as usize, e));
            }
        }
        // Shifting by the largest exponent keeps narrow kernels from underflowing.
        let mut norm = 0.0;
        for (_, e) in weights.iter_mut() {
            *e = (*e - max_exponent).exp();
            norm += *e;
        }
        for &(idx, w) in &weights {
            values[idx] += w / norm;
        }
    }
    DensityGrid::new(grid.height(), grid.width(), stride, values)
}
