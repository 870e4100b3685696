//! Three-parameter matched-filter counter:
//! `density = softplus(gain * ncc(query, blur(template, bandwidth)) + bias)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::DensityGrid;

use super::scene::{normalized, BlobScene};

/// Added to every window norm so flat regions correlate to ~0 instead of noise.
pub const WINDOW_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub gain: f64,
    pub bias: f64,
    /// Width of the Gaussian that smooths the reference template, in cells.
    pub bandwidth: f64,
}

impl ToyModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain.is_finite() && self.bias.is_finite()) {
            return Err(Error::Numerical(format!("non-finite parameters {self:?}")));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::param("bandwidth", format!("must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }
}

/// Normalized query windows, one `(2r + 1)^2` patch per cell, zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    height: usize,
    width: usize,
    side: usize,
    windows: Vec<f64>,
}

impl Query {
    pub fn new(height: usize, width: usize, intensity: &[f64], radius: usize) -> Result<Self> {
        if intensity.len() != height * width {
            return Err(Error::dims(format!("{height}x{width} intensities"), intensity.len().to_string()));
        }
        let side = 2 * radius + 1;
        if side >= height || side >= width {
            return Err(Error::InvalidInput(format!("{side}x{side} template does not fit a {height}x{width} query")));
        }
        let k = side * side;
        let r = radius as isize;
        let mut windows = Vec::with_capacity(height * width * k);
        let mut patch = vec![0.0; k];
        for row in 0..height as isize {
            for col in 0..width as isize {
                for (j, slot) in patch.iter_mut().enumerate() {
                    let (y, x) = (row + j as isize / side as isize - r, col + j as isize % side as isize - r);
                    let inside = y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width;
                    *slot = if inside { intensity[y as usize * width + x as usize] } else { 0.0 };
                }
                let mean = patch.iter().sum::<f64>() / k as f64;
                let norm = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt() + WINDOW_FLOOR;
                windows.extend(patch.iter().map(|v| (v - mean) / norm));
            }
        }
        Ok(Query { height, width, side, windows })
    }

    pub fn from_scene(scene: &BlobScene, radius: usize) -> Result<Self> {
        Query::new(scene.height, scene.width, &scene.intensity, radius)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn window(&self, i: usize) -> &[f64] {
        let k = self.side * self.side;
        &self.windows[i * k..(i + 1) * k]
    }
}

/// Blurred, normalized template and its derivative in the bandwidth.
fn smoothed_template(raw: &[f64], side: usize, bandwidth: f64) -> (Vec<f64>, Vec<f64>) {
    let r = (side / 2) as isize;
    let b3 = bandwidth.powi(3);
    let mut e = Vec::with_capacity(side * side);
    let mut de = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            let v = (-d2 / (2.0 * bandwidth * bandwidth)).exp();
            e.push(v);
            de.push(v * d2 / b3);
        }
    }
    let (s, ds) = (e.iter().sum::<f64>(), de.iter().sum::<f64>());
    let k: Vec<f64> = e.iter().map(|v| v / s).collect();
    let dk: Vec<f64> = e.iter().zip(&de).map(|(v, dv)| dv / s - v * ds / (s * s)).collect();

    let conv = |kernel: &[f64]| {
        let mut out = vec![0.0; side * side];
        for py in 0..side as isize {
            for px in 0..side as isize {
                let mut acc = 0.0;
                for uy in -r..=r {
                    for ux in -r..=r {
                        let (sy, sx) = (py - uy, px - ux);
                        if sy >= 0 && sx >= 0 && sy < side as isize && sx < side as isize {
                            acc += raw[(sy as usize) * side + sx as usize]
                                * kernel[((uy + r) as usize) * side + (ux + r) as usize];
                        }
                    }
                }
                out[(py as usize) * side + px as usize] = acc;
            }
        }
        out
    };
    let (t_raw, dt_raw) = (conv(&k), conv(&dk));

    let n = t_raw.len() as f64;
    let mean = t_raw.iter().sum::<f64>() / n;
    let norm = t_raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    let t = normalized(&t_raw);
    let dmean = dt_raw.iter().sum::<f64>() / n;
    let dc: Vec<f64> = dt_raw.iter().map(|v| v - dmean).collect();
    let proj = t.iter().zip(&dc).map(|(a, b)| a * b).sum::<f64>();
    let dt = dc.iter().zip(&t).map(|(d, ti)| (d - ti * proj) / norm).collect();
    (t, dt)
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Model output with everything needed for the chain rule.
#[derive(Debug, Clone)]
pub struct Prediction {
    params: ToyModelParams,
    height: usize,
    width: usize,
    density: Vec<f64>,
    corr: Vec<f64>,
    dcorr: Vec<f64>,
    slope: Vec<f64>,
}

impl Prediction {
    pub fn values(&self) -> &[f64] {
        &self.density
    }

    pub fn count(&self) -> f64 {
        self.density.iter().sum()
    }

    pub fn grid(&self) -> DensityGrid {
        DensityGrid::new(self.height, self.width, 1, self.density.clone())
            .expect("softplus output is finite and nonnegative")
    }

    /// `J^T g`: gradient of a loss with `dL/d density = g` w.r.t. (gain, bias, bandwidth).
    pub fn vjp(&self, g: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..self.density.len() {
            let s = g[i] * self.slope[i];
            out[0] += s * self.corr[i];
            out[1] += s;
            out[2] += s * self.params.gain * self.dcorr[i];
        }
        out
    }

    /// `J v` for a parameter direction `v`.
    pub fn jvp(&self, v: [f64; 3]) -> Vec<f64> {
        (0..self.density.len())
            .map(|i| self.slope[i] * (v[0] * self.corr[i] + v[1] + v[2] * self.params.gain * self.dcorr[i]))
            .collect()
    }
}

/// Density for `query` given the raw reference `template` (same window size).
pub fn predict(params: &ToyModelParams, query: &Query, template: &[f64]) -> Result<Prediction> {
    params.validate()?;
    if template.len() != query.side * query.side {
        return Err(Error::dims(format!("{0}x{0} template", query.side), template.len().to_string()));
    }
    let (t, dt) = smoothed_template(template, query.side, params.bandwidth);
    let n = query.cells();
    let (mut density, mut corr, mut dcorr, mut slope) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let w = query.window(i);
        let c = w.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
        let dc = w.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>();
        let z = params.gain * c + params.bias;
        density.push(softplus(z));
        corr.push(c);
        dcorr.push(dc);
        slope.push(sigmoid(z));
    }
    Ok(Prediction {
        params: *params,
        height: query.height,
        width: query.width,
        density,
        corr,
        dcorr,
        slope,
    })
}
