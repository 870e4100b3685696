//! Domain types shared by every module: point annotations, density grids,
//! reference boxes and annotated image records, plus their JSON forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of source pixels per density cell.
pub const DEFAULT_STRIDE: u32 = 4;

/// A continuous 2-D location in pixels (or in whatever frame the owning
/// [`PointSet`] is expressed in).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Point annotations, one per object. Coordinates are finite and
/// nonnegative; the order of points carries no meaning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_label: Option<String>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "point {i} ({}, {}) must be finite and nonnegative",
                    p.x, p.y
                )));
            }
        }
        Ok(PointSet {
            points,
            class_label: None,
        })
    }

    pub fn empty() -> Self {
        PointSet::default()
    }

    pub fn with_class(mut self, class_label: impl Into<String>) -> Self {
        self.class_label = Some(class_label.into());
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn class_label(&self) -> Option<&str> {
        self.class_label.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point> {
        self.points.iter()
    }

    /// Applies `f` to every point. The result is validated again.
    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<PointSet> {
        let mut out = PointSet::new(self.points.iter().copied().map(f).collect())?;
        out.class_label = self.class_label.clone();
        Ok(out)
    }
}

/// Nonnegative mass grid stored row-major. Each value is the object mass of
/// one cell, so the predicted count is the plain sum at any stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct DensityGrid {
    height: usize,
    width: usize,
    stride: u32,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGrid {
    height: usize,
    width: usize,
    #[serde(default = "default_stride")]
    stride: u32,
    values: Vec<f64>,
}

fn default_stride() -> u32 {
    DEFAULT_STRIDE
}

impl TryFrom<RawGrid> for DensityGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        DensityGrid::new(raw.height, raw.width, raw.stride, raw.values)
    }
}

impl DensityGrid {
    pub fn new(height: usize, width: usize, stride: u32, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("height/width", "grid must have at least one cell"));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::dims(
                format!("{} values for a {height}x{width} grid", height * width),
                format!("{} values", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "density value at index {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        Ok(DensityGrid {
            height,
            width,
            stride,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, stride: u32) -> Result<Self> {
        DensityGrid::new(height, width, stride, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, other: &DensityGrid) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Axis-aligned reference box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidInput(format!(
                "box [{x1}, {y1}, {x2}, {y2}] must be finite with x2 > x1 and y2 > y1"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from([x1, y1, x2, y2]: [f64; 4]) -> Result<Self> {
        BoundingBox::new(x1, y1, x2, y2)
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// One annotated query image: its extent, category, object points and the
/// K reference boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(with = "point_list")]
    pub points: PointSet,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
}

impl AnnotatedImage {
    pub fn gt_count(&self) -> usize {
        self.points.len()
    }

    /// Checks that every point and box lies inside `[0, width] x [0, height]`.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput(format!(
                "image `{}` has an empty extent",
                self.id
            )));
        }
        for p in self.points.iter() {
            if p.x > w || p.y > h {
                return Err(Error::InvalidInput(format!(
                    "image `{}`: point ({}, {}) lies outside {}x{}",
                    self.id, p.x, p.y, self.width, self.height
                )));
            }
        }
        for b in &self.boxes {
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::InvalidInput(format!(
                    "image `{}`: box [{}, {}, {}, {}] lies outside {}x{}",
                    self.id, b.x1, b.y1, b.x2, b.y2, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

mod point_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{Point, PointSet};

    pub fn serialize<S: Serializer>(set: &PointSet, s: S) -> Result<S::Ok, S::Error> {
        set.points().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PointSet, D::Error> {
        let points = Vec::<Point>::deserialize(d)?;
        PointSet::new(points).map_err(serde::de::Error::custom)
    }
}

/// Annotation manifest: `{"images": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<AnnotatedImage>,
}

impl Manifest {
    /// Parses and validates a manifest; the error names the offending record.
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for image in &self.images {
            if !seen.insert(image.id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate image id `{}`",
                    image.id
                )));
            }
            image.validate()?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedImage> {
        self.images.iter().find(|img| img.id == id)
    }
}
