//! Test-time normalization: when the reference boxes are tiny relative to
//! the query, split the query into an `M x M` grid of tiles, count each tile
//! (after resizing it to the query size) and sum the tile counts.
//!
//! Only planning and aggregation live here; counting a tile is the caller's
//! job.

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::types::BoundingBox;

pub const DEFAULT_TILES_PER_SIDE: u32 = 8;
pub const DEFAULT_AREA_THRESHOLD: f64 = 0.0002;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtnConfig {
    /// Tiles per side (`M`).
    pub tiles_per_side: u32,
    /// Mean box area over query area below which tiling kicks in (`T`).
    pub area_threshold: f64,
}

impl Default for TtnConfig {
    fn default() -> Self {
        TtnConfig {
            tiles_per_side: DEFAULT_TILES_PER_SIDE,
            area_threshold: DEFAULT_AREA_THRESHOLD,
        }
    }
}

impl TtnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_per_side == 0 {
            return Err(Error::param("tiles_per_side", "must be at least 1"));
        }
        if !(self.area_threshold > 0.0 && self.area_threshold.is_finite()) {
            return Err(Error::param(
                "area_threshold",
                format!("must be positive, got {}", self.area_threshold),
            ));
        }
        Ok(())
    }
}

/// Pixel rectangle of one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tile {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Tile {
    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    /// Horizontal and vertical factors that resize this tile to the query.
    pub fn scale_to(&self, query_w: u32, query_h: u32) -> (f64, f64) {
        (
            f64::from(query_w) / f64::from(self.w),
            f64::from(query_h) / f64::from(self.h),
        )
    }

    pub fn intersects(&self, other: &Tile) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// Tiling decision plus the tiles themselves, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TtnPlan {
    pub normalize: bool,
    pub query_w: u32,
    pub query_h: u32,
    pub tiles: Vec<Tile>,
}

impl TtnPlan {
    /// Scale factor for each tile, in tile order.
    pub fn scales(&self) -> Vec<(f64, f64)> {
        self.tiles
            .iter()
            .map(|t| t.scale_to(self.query_w, self.query_h))
            .collect()
    }
}

/// Serialized as `{"normalize": bool, "tiles": [[x, y, w, h], ...]}`.
impl Serialize for TtnPlan {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let tiles: Vec<[u32; 4]> = self.tiles.iter().map(|t| [t.x, t.y, t.w, t.h]).collect();
        let mut st = s.serialize_struct("TtnPlan", 2)?;
        st.serialize_field("normalize", &self.normalize)?;
        st.serialize_field("tiles", &tiles)?;
        st.end()
    }
}

/// True iff the mean reference-box area over the query area is strictly
/// below the threshold.
pub fn should_normalize(
    boxes: &[BoundingBox],
    query_w: u32,
    query_h: u32,
    config: &TtnConfig,
) -> Result<bool> {
    config.validate()?;
    if boxes.is_empty() {
        return Err(Error::InvalidInput("at least one reference box is required".into()));
    }
    if query_w == 0 || query_h == 0 {
        return Err(Error::InvalidInput("query has zero area".into()));
    }
    let mean_area = boxes.iter().map(BoundingBox::area).sum::<f64>() / boxes.len() as f64;
    let ratio = mean_area / (f64::from(query_w) * f64::from(query_h));
    Ok(ratio < config.area_threshold)
}

/// Balanced split of `len` pixels into `parts` spans: `[k*len/parts, (k+1)*len/parts)`.
fn spans(len: u32, parts: u32) -> impl Iterator<Item = (u32, u32)> {
    let edge = move |k: u32| (u64::from(k) * u64::from(len) / u64::from(parts)) as u32;
    (0..parts).map(move |k| (edge(k), edge(k + 1) - edge(k)))
}

/// `M x M` tiling of the query. Tile sizes differ by at most one pixel along
/// each axis when `M` does not divide the dimension.
pub fn plan_tiles(query_w: u32, query_h: u32, config: &TtnConfig) -> Result<TtnPlan> {
    config.validate()?;
    let m = config.tiles_per_side;
    if query_w < m || query_h < m {
        return Err(Error::InvalidInput(format!(
            "query {query_w}x{query_h} is smaller than {m} tiles per side"
        )));
    }
    let tiles = spans(query_h, m)
        .flat_map(|(y, h)| spans(query_w, m).map(move |(x, w)| Tile { x, y, w, h }))
        .collect();
    Ok(TtnPlan {
        normalize: m > 1,
        query_w,
        query_h,
        tiles,
    })
}

/// Single full-frame tile: no normalization.
pub fn full_frame(query_w: u32, query_h: u32) -> TtnPlan {
    TtnPlan {
        normalize: false,
        query_w,
        query_h,
        tiles: vec![Tile { x: 0, y: 0, w: query_w, h: query_h }],
    }
}

/// Decides whether to tile and returns the matching plan.
pub fn plan_query(
    boxes: &[BoundingBox],
    query_w: u32,
    query_h: u32,
    config: &TtnConfig,
) -> Result<TtnPlan> {
    if should_normalize(boxes, query_w, query_h, config)? {
        plan_tiles(query_w, query_h, config)
    } else {
        Ok(full_frame(query_w, query_h))
    }
}

/// Query count as the sum of per-tile counts, in tile order.
pub fn aggregate_counts(plan: &TtnPlan, tile_counts: &[f64]) -> Result<f64> {
    if tile_counts.len() != plan.tiles.len() {
        return Err(Error::dims(
            format!("{} tile counts", plan.tiles.len()),
            tile_counts.len().to_string(),
        ));
    }
    if let Some(c) = tile_counts.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("tile count {c} is not finite")));
    }
    Ok(tile_counts.iter().sum())
}
