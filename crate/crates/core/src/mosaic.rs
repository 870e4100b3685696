//! Mosaic collages: four random crops arranged 2x2, used both as a training
//! augmentation and to build the multi-class evaluation set in which every
//! collage is expanded into four (reference class, count) pairs.
//!
//! Only annotations are composited; pixels are out of scope, the tile
//! provenance is enough to recount every pair.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotatedImage, BoundingBox, Manifest, Point, PointSet};

pub const TRAIN_TILE_SIZE: u32 = 192;
pub const EVAL_TILE_SIZE: u32 = 384;
/// Fresh crops tried for a tile whose class keeps no reference box.
pub const MAX_CROP_RETRIES: usize = 64;

/// Crop of a source image, in source pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub source_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    /// Strict interior test; points on the crop border are dropped.
    pub fn contains_point(&self, p: &Point) -> bool {
        let (x0, y0) = (f64::from(self.x), f64::from(self.y));
        p.x > x0 && p.x < x0 + f64::from(self.w) && p.y > y0 && p.y < y0 + f64::from(self.h)
    }

    /// Closed containment: a box may touch the crop border.
    pub fn contains_box(&self, b: &BoundingBox) -> bool {
        let (x0, y0) = (f64::from(self.x), f64::from(self.y));
        b.x1 >= x0 && b.y1 >= y0 && b.x2 <= x0 + f64::from(self.w) && b.y2 <= y0 + f64::from(self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosaicConfig {
    pub tile_size: u32,
    pub tiles_per_side: u32,
    pub distinct_classes_required: bool,
}

impl MosaicConfig {
    pub fn training() -> Self {
        MosaicConfig {
            tile_size: TRAIN_TILE_SIZE,
            tiles_per_side: 2,
            distinct_classes_required: false,
        }
    }

    pub fn evaluation() -> Self {
        MosaicConfig {
            tile_size: EVAL_TILE_SIZE,
            tiles_per_side: 2,
            distinct_classes_required: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::param("tile_size", "must be at least 1"));
        }
        if self.tiles_per_side != 2 {
            return Err(Error::param(
                "tiles_per_side",
                format!("only 2x2 collages are supported, got {}", self.tiles_per_side),
            ));
        }
        Ok(())
    }

    /// Pixel offset of tile `k` in TL, TR, BL, BR order.
    pub fn offset(&self, k: usize) -> (u32, u32) {
        let t = self.tile_size;
        [(0, 0), (t, 0), (0, t), (t, t)][k]
    }
}

/// Points and boxes of one image that survive a crop, in crop coordinates.
pub fn crop_with_annotations(
    image: &AnnotatedImage,
    rect: &CropRect,
) -> Result<(PointSet, Vec<BoundingBox>)> {
    if rect.source_id != image.id {
        return Err(Error::InvalidInput(format!(
            "crop refers to `{}` but image is `{}`",
            rect.source_id, image.id
        )));
    }
    if rect.w == 0
        || rect.h == 0
        || u64::from(rect.x) + u64::from(rect.w) > u64::from(image.width)
        || u64::from(rect.y) + u64::from(rect.h) > u64::from(image.height)
    {
        return Err(Error::InvalidInput(format!(
            "crop {}x{}+{}+{} does not fit inside `{}` ({}x{})",
            rect.w, rect.h, rect.x, rect.y, image.id, image.width, image.height
        )));
    }
    let (dx, dy) = (-f64::from(rect.x), -f64::from(rect.y));
    let points = image
        .points
        .iter()
        .filter(|p| rect.contains_point(p))
        .map(|p| Point::new(p.x + dx, p.y + dy))
        .collect();
    let boxes = image
        .boxes
        .iter()
        .filter(|b| rect.contains_box(b))
        .map(|b| b.translate(dx, dy))
        .collect();
    Ok((PointSet::new(points)?, boxes))
}

/// A 2x2 collage with its merged annotations and the current target class.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicSample {
    pub width: u32,
    pub height: u32,
    /// TL, TR, BL, BR.
    pub tiles: Vec<CropRect>,
    pub tile_classes: Vec<String>,
    /// Points retained by each tile before merging.
    pub tile_point_counts: Vec<usize>,
    pub per_class_points: BTreeMap<String, PointSet>,
    pub per_class_boxes: BTreeMap<String, Vec<BoundingBox>>,
    pub target_class: String,
    pub target_count: usize,
    pub reference_boxes: Vec<BoundingBox>,
}

impl MosaicSample {
    /// A pair without a single reference box cannot be used for counting.
    pub fn is_valid(&self) -> bool {
        !self.reference_boxes.is_empty()
    }

    /// Points of the target class, in mosaic coordinates.
    pub fn target_points(&self) -> &PointSet {
        &self.per_class_points[&self.target_class]
    }

    /// Points over all classes; equals the sum of `tile_point_counts`.
    pub fn total_points(&self) -> usize {
        self.per_class_points.values().map(PointSet::len).sum()
    }

    /// Re-targets the sample; errors when no tile carries `class`.
    pub fn with_target(mut self, class: &str) -> Result<Self> {
        let points = self
            .per_class_points
            .get(class)
            .ok_or_else(|| Error::InvalidInput(format!("class `{class}` is not in the mosaic")))?;
        self.target_count = points.len();
        self.reference_boxes = self.per_class_boxes[class].clone();
        self.target_class = class.to_string();
        Ok(self)
    }
}

fn random_crop<R: Rng + ?Sized>(image: &AnnotatedImage, tile: u32, rng: &mut R) -> Result<CropRect> {
    if image.width < tile || image.height < tile {
        return Err(Error::InvalidInput(format!(
            "image `{}` ({}x{}) is smaller than the {tile}px tile",
            image.id, image.width, image.height
        )));
    }
    Ok(CropRect {
        source_id: image.id.clone(),
        x: rng.gen_range(0..=image.width - tile),
        y: rng.gen_range(0..=image.height - tile),
        w: tile,
        h: tile,
    })
}

/// Merges four pre-chosen crops into a collage targeting the TL class.
fn assemble(images: &[&AnnotatedImage], tiles: Vec<CropRect>, config: &MosaicConfig) -> Result<MosaicSample> {
    let mut per_class_points: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    let mut per_class_boxes: BTreeMap<String, Vec<BoundingBox>> = BTreeMap::new();
    let mut tile_point_counts = Vec::with_capacity(4);
    for (k, (image, rect)) in images.iter().zip(&tiles).enumerate() {
        let (points, boxes) = crop_with_annotations(image, rect)?;
        let (ox, oy) = config.offset(k);
        let (ox, oy) = (f64::from(ox), f64::from(oy));
        tile_point_counts.push(points.len());
        per_class_points
            .entry(image.class_label.clone())
            .or_default()
            .extend(points.iter().map(|p| Point::new(p.x + ox, p.y + oy)));
        per_class_boxes
            .entry(image.class_label.clone())
            .or_default()
            .extend(boxes.iter().map(|b| b.translate(ox, oy)));
    }
    let per_class_points = per_class_points
        .into_iter()
        .map(|(class, pts)| Ok((class.clone(), PointSet::new(pts)?.with_class(class))))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let side = 2 * config.tile_size;
    let sample = MosaicSample {
        width: side,
        height: side,
        tiles,
        tile_classes: images.iter().map(|img| img.class_label.clone()).collect(),
        tile_point_counts,
        per_class_points,
        per_class_boxes,
        target_class: String::new(),
        target_count: 0,
        reference_boxes: Vec::new(),
    };
    let first = images[0].class_label.clone();
    sample.with_target(&first)
}

/// Crops each of the four images at a uniform origin and tiles them TL, TR,
/// BL, BR. The target starts as the TL class; see [`select_target`].
pub fn build_mosaic<R: Rng + ?Sized>(
    images: &[&AnnotatedImage],
    config: &MosaicConfig,
    rng: &mut R,
) -> Result<MosaicSample> {
    config.validate()?;
    if images.len() != 4 {
        return Err(Error::dims("4 images", images.len().to_string()));
    }
    if config.distinct_classes_required {
        for (i, a) in images.iter().enumerate() {
            if images[..i].iter().any(|b| b.class_label == a.class_label) {
                return Err(Error::InvalidInput(format!(
                    "class `{}` appears twice but distinct classes are required",
                    a.class_label
                )));
            }
        }
    }
    let tiles = images
        .iter()
        .map(|img| random_crop(img, config.tile_size, rng))
        .collect::<Result<Vec<_>>>()?;
    assemble(images, tiles, config)
}

/// Picks one of the four tiles uniformly and targets its class.
pub fn select_target<R: Rng + ?Sized>(mosaic: MosaicSample, rng: &mut R) -> MosaicSample {
    let k = rng.gen_range(0..mosaic.tile_classes.len());
    let class = mosaic.tile_classes[k].clone();
    mosaic
        .with_target(&class)
        .expect("tile classes are always present in the merged annotations")
}

/// One (collage, reference class) pair of the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub pair_id: String,
    pub mosaic_id: u64,
    pub tiles: Vec<CropRect>,
    pub target_class: String,
    pub boxes: Vec<BoundingBox>,
    pub gt_count: u64,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub seed: u64,
    pub config: MosaicConfig,
    pub pairs: Vec<EvalPair>,
}

impl EvalManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Companion table `pair_id,target_class,gt_count` for metric joins.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["pair_id", "target_class", "gt_count"])?;
        for p in &self.pairs {
            out.write_record([p.pair_id.as_str(), p.target_class.as_str(), &p.gt_count.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Generator for collage `index`: independent of every other index, so the
/// set can be built in parallel and still match a sequential run.
pub fn child_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds `n_queries` collages of four distinct classes and expands each
/// into four pairs, one per class.
pub fn generate_fsc_mosaic(
    manifest: &Manifest,
    n_queries: usize,
    config: &MosaicConfig,
    seed: u64,
) -> Result<EvalManifest> {
    config.validate()?;
    if !config.distinct_classes_required {
        return Err(Error::param(
            "distinct_classes_required",
            "the evaluation set needs four distinct classes per collage",
        ));
    }
    let mut by_class: BTreeMap<&str, Vec<&AnnotatedImage>> = BTreeMap::new();
    for img in &manifest.images {
        if img.width >= config.tile_size && img.height >= config.tile_size {
            by_class.entry(img.class_label.as_str()).or_default().push(img);
        }
    }
    if by_class.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "need at least 4 classes with images of at least {0}x{0}, found {1}",
            config.tile_size,
            by_class.len()
        )));
    }
    let classes: Vec<&Vec<&AnnotatedImage>> = by_class.values().collect();

    let mosaics = (0..n_queries as u64)
        .into_par_iter()
        .map(|index| {
            let mut rng = child_rng(seed, index);
            let picked = sample(&mut rng, classes.len(), 4);
            let mut images = Vec::with_capacity(4);
            let mut tiles = Vec::with_capacity(4);
            for c in picked.iter() {
                let (image, rect) = crop_with_boxes(classes[c], config.tile_size, &mut rng)?;
                images.push(image);
                tiles.push(rect);
            }
            assemble(&images, tiles, config).map(|m| (index, m))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pairs = Vec::with_capacity(4 * n_queries);
    for (index, mosaic) in mosaics {
        for (k, class) in mosaic.tile_classes.clone().iter().enumerate() {
            let pair = mosaic.clone().with_target(class)?;
            pairs.push(EvalPair {
                pair_id: format!("{index:06}-{k}"),
                mosaic_id: index,
                tiles: pair.tiles.clone(),
                target_class: class.clone(),
                boxes: pair.reference_boxes.clone(),
                gt_count: pair.target_count as u64,
                points: pair.target_points().points().to_vec(),
            });
        }
    }
    Ok(EvalManifest { seed, config: *config, pairs })
}

/// One augmented training collage with its randomly chosen target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub mosaic_id: u64,
    pub tiles: Vec<CropRect>,
    pub target_class: String,
    pub boxes: Vec<BoundingBox>,
    pub gt_count: u64,
    pub points: Vec<Point>,
    /// False when the target kept no reference box.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub seed: u64,
    pub config: MosaicConfig,
    pub samples: Vec<TrainingSample>,
}

/// Training-time augmentation: `n` collages of four uniformly drawn images
/// (classes may repeat unless the config forbids it), each with a random
/// target. Samples without exemplars are kept but flagged invalid.
pub fn generate_training_mosaics(
    manifest: &Manifest,
    n: usize,
    config: &MosaicConfig,
    seed: u64,
) -> Result<TrainingSet> {
    config.validate()?;
    let pool: Vec<&AnnotatedImage> = manifest
        .images
        .iter()
        .filter(|img| img.width >= config.tile_size && img.height >= config.tile_size)
        .collect();
    let classes: std::collections::BTreeSet<&str> = pool.iter().map(|i| i.class_label.as_str()).collect();
    if pool.is_empty() || (config.distinct_classes_required && classes.len() < 4) {
        return Err(Error::InvalidInput(format!(
            "not enough images of at least {0}x{0} ({1} images, {2} classes)",
            config.tile_size,
            pool.len(),
            classes.len()
        )));
    }
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|index| {
            let mut rng = child_rng(seed, index);
            let images: Vec<&AnnotatedImage> = if config.distinct_classes_required {
                let names: Vec<&str> = classes.iter().copied().collect();
                sample(&mut rng, names.len(), 4)
                    .iter()
                    .map(|c| {
                        let of_class: Vec<&AnnotatedImage> =
                            pool.iter().copied().filter(|i| i.class_label == names[c]).collect();
                        of_class[rng.gen_range(0..of_class.len())]
                    })
                    .collect()
            } else {
                (0..4).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            };
            let mosaic = select_target(build_mosaic(&images, config, &mut rng)?, &mut rng);
            Ok(TrainingSample {
                mosaic_id: index,
                valid: mosaic.is_valid(),
                points: mosaic.target_points().points().to_vec(),
                tiles: mosaic.tiles,
                target_class: mosaic.target_class,
                boxes: mosaic.reference_boxes,
                gt_count: mosaic.target_count as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet { seed, config: *config, samples })
}

/// Draws image and crop until the crop keeps at least one reference box.
fn crop_with_boxes<'a, R: Rng + ?Sized>(
    pool: &[&'a AnnotatedImage],
    tile: u32,
    rng: &mut R,
) -> Result<(&'a AnnotatedImage, CropRect)> {
    for _ in 0..MAX_CROP_RETRIES {
        let image = pool[rng.gen_range(0..pool.len())];
        let rect = random_crop(image, tile, rng)?;
        if image.boxes.iter().any(|b| rect.contains_box(b)) {
            return Ok((image, rect));
        }
    }
    Err(Error::InvalidInput(format!(
        "class `{}`: no crop kept a reference box after {MAX_CROP_RETRIES} tries",
        pool[0].class_label
    )))
}

/// Random annotated manifest for tests and demos: `n_images` images spread
/// round-robin over `n_classes` classes, sides in `[min_side, 2 * min_side]`,
/// 5 to 150 points each and three reference boxes around random points.
pub fn synthetic_manifest(n_images: usize, n_classes: usize, min_side: u32, seed: u64) -> Result<Manifest> {
    if n_classes == 0 || min_side < 32 {
        return Err(Error::InvalidInput("need at least one class and sides of 32 px or more".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n_images)
        .map(|i| {
            let (w, h) = (rng.gen_range(min_side..=2 * min_side), rng.gen_range(min_side..=2 * min_side));
            let n_points = rng.gen_range(5..=150);
            let points: Vec<Point> = (0..n_points)
                .map(|_| Point::new(rng.gen_range(0.0..f64::from(w)), rng.gen_range(0.0..f64::from(h))))
                .collect();
            let boxes = (0..3)
                .map(|_| {
                    let half = rng.gen_range(4.0..16.0);
                    let p = points[rng.gen_range(0..points.len())];
                    let x = p.x.clamp(half, f64::from(w) - half);
                    let y = p.y.clamp(half, f64::from(h) - half);
                    BoundingBox::new(x - half, y - half, x + half, y + half)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AnnotatedImage {
                id: format!("img{i:05}"),
                width: w,
                height: h,
                class_label: format!("class{:02}", i % n_classes),
                points: PointSet::new(points)?,
                boxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { images };
    manifest.validate()?;
    Ok(manifest)
}

/// Independent ground-truth recount of a pair from its tile provenance.
pub fn recount_pair(manifest: &Manifest, pair: &EvalPair) -> Result<u64> {
    let mut total = 0;
    for rect in &pair.tiles {
        let image = manifest
            .get(&rect.source_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown source `{}`", rect.source_id)))?;
        if image.class_label == pair.target_class {
            total += image.points.iter().filter(|p| rect.contains_point(p)).count() as u64;
        }
    }
    Ok(total)
}
