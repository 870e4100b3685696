//! Synthetic two-class blob scenes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Point, PointSet};

/// Placement attempts per blob before a scene is declared infeasible.
pub const PLACEMENT_RETRIES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSceneSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Templates are `(2r + 1) x (2r + 1)`.
    pub template_radius: usize,
    /// Gaussian width of each class's blob, in cells.
    pub class_widths: [f64; 2],
    /// Inclusive blob-count range per class.
    pub counts: [(u32, u32); 2],
    /// Minimum distance from a blob centre to the grid border.
    pub margin: f64,
    /// Minimum distance between any two blob centres.
    pub min_separation: f64,
}

impl BlobSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let side = 2 * self.template_radius + 1;
        if self.grid_h <= side || self.grid_w <= side {
            return Err(Error::param("grid_h/grid_w", format!("grid must exceed the {side}x{side} template")));
        }
        if !self.class_widths.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(Error::param("class_widths", "must be positive"));
        }
        if self.counts.iter().any(|(lo, hi)| lo > hi) {
            return Err(Error::param("counts", "each range needs min <= max"));
        }
        if !(self.margin >= 0.0 && self.margin < self.grid_w as f64 / 2.0 && 2.0 * self.margin < self.grid_h as f64) {
            return Err(Error::param("margin", "must leave room inside each half of the grid"));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(Error::param("min_separation", "must be nonnegative"));
        }
        let (a, b) = (normalized(&self.template(0)), normalized(&self.template(1)));
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if dist <= 0.1 {
            return Err(Error::param("class_widths", format!("templates too similar (distance {dist:.3})")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Raw blob profile of `class`, centred in a `(2r + 1)^2` window.
    pub fn template(&self, class: usize) -> Vec<f64> {
        let r = self.template_radius as isize;
        let s = self.class_widths[class];
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| blob(s, dx as f64, dy as f64)))
            .collect()
    }
}

fn blob(width: f64, dx: f64, dy: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * width * width)).exp()
}

/// Zero mean, unit norm.
pub(crate) fn normalized(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let centred: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = centred.iter().map(|x| x * x).sum::<f64>().sqrt();
    centred.iter().map(|x| x / norm).collect()
}

/// Query intensity, blob centres per class (grid cells) and the reference class.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobScene {
    pub height: usize,
    pub width: usize,
    pub intensity: Vec<f64>,
    pub points: [PointSet; 2],
    pub reference: usize,
}

impl BlobScene {
    pub fn gt_count(&self) -> usize {
        self.points[self.reference].len()
    }

    pub fn with_reference(&self, reference: usize) -> BlobScene {
        BlobScene { reference, ..self.clone() }
    }

    pub fn is_multi_class(&self) -> bool {
        self.points.iter().all(|p| !p.is_empty())
    }

    /// Little-endian dump of the intensity field and points, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in &self.intensity {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for set in &self.points {
            out.extend_from_slice(&(set.len() as u64).to_le_bytes());
            for p in set.iter() {
                out.extend_from_slice(&p.x.to_le_bytes());
                out.extend_from_slice(&p.y.to_le_bytes());
            }
        }
        out.push(self.reference as u8);
        out
    }
}

/// Draws counts from the spec: a single-class scene holds one random class,
/// a multi-class scene both, each confined to one half of the grid.
pub fn synth_scene<R: Rng + ?Sized>(spec: &BlobSceneSpec, multi_class: bool, rng: &mut R) -> Result<BlobScene> {
    let draw = |class: usize, rng: &mut R| {
        let (lo, hi) = spec.counts[class];
        rng.gen_range(lo..=hi)
    };
    let (counts, reference) = if multi_class {
        let counts = [draw(0, rng), draw(1, rng)];
        (counts, rng.gen_range(0..2))
    } else {
        let class = rng.gen_range(0..2);
        let mut counts = [0, 0];
        counts[class] = draw(class, rng);
        (counts, class)
    };
    synth_scene_with_counts(spec, counts, reference, rng)
}

/// Scene with exact per-class counts. When both classes are present their
/// centres fall in opposite halves (left/right, order drawn at random).
pub fn synth_scene_with_counts<R: Rng + ?Sized>(
    spec: &BlobSceneSpec,
    counts: [u32; 2],
    reference: usize,
    rng: &mut R,
) -> Result<BlobScene> {
    spec.validate()?;
    if reference > 1 {
        return Err(Error::param("reference", "must be 0 or 1"));
    }
    let (h, w) = (spec.grid_h as f64, spec.grid_w as f64);
    let m = spec.margin;
    let both = counts.iter().all(|&c| c > 0);
    let left_first = rng.gen_bool(0.5);
    let mut placed: Vec<Point> = Vec::new();
    let mut points: [Vec<Point>; 2] = [Vec::new(), Vec::new()];
    for class in 0..2 {
        let (x0, x1) = if !both {
            (m, w - m)
        } else if (class == 0) == left_first {
            (m, w / 2.0)
        } else {
            (w / 2.0, w - m)
        };
        for _ in 0..counts[class] {
            let p = (0..PLACEMENT_RETRIES)
                .map(|_| Point::new(rng.gen_range(x0..=x1), rng.gen_range(m..=h - m)))
                .find(|p| placed.iter().all(|q| p.distance(q) >= spec.min_separation))
                .ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "could not place {} blobs of class {class} after {PLACEMENT_RETRIES} tries",
                        counts[class]
                    ))
                })?;
            placed.push(p);
            points[class].push(p);
        }
    }

    let mut intensity = vec![0.0; spec.cells()];
    for (class, pts) in points.iter().enumerate() {
        let s = spec.class_widths[class];
        for p in pts {
            for (i, v) in intensity.iter_mut().enumerate() {
                let (r, c) = (i / spec.grid_w, i % spec.grid_w);
                *v += blob(s, c as f64 + 0.5 - p.x, r as f64 + 0.5 - p.y);
            }
        }
    }
    let [a, b] = points;
    Ok(BlobScene {
        height: spec.grid_h,
        width: spec.grid_w,
        intensity,
        points: [PointSet::new(a)?, PointSet::new(b)?],
        reference,
    })
}
