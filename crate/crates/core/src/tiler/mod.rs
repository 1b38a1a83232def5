//! Slide ingestion, tile grids, and the white-background rule.
//!
//! A slide is read through a [`SlideSource`] at its stored resolution and
//! tiled at a coarser working resolution. Residual strips narrower than a
//! tile on the right and bottom edges are dropped.

mod source;
mod store;

use std::fmt;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use source::{RasterSlide, Region, SlideSource};
pub use store::{patch_file_name, read_grid, read_patch, write_grid, write_patch};

pub const DEFAULT_TILE_SIZE: u32 = 256;
pub const DEFAULT_WORKING_MPP: f64 = 1.0;
pub const DEFAULT_BRIGHTNESS_THRESHOLD: u8 = 230;
pub const DEFAULT_FRACTION_THRESHOLD: f64 = 0.95;

/// A slide fails as a whole once more than this fraction of tiles is unreadable.
pub const MAX_UNREADABLE_FRACTION: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum TilerError {
    #[error("cannot ingest slide `{uri}`: {reason}")]
    Ingestion { uri: PathBuf, reason: String },
    #[error("working resolution {working_mpp} mpp is finer than the stored {base_mpp} mpp; upscaling is not supported")]
    UnsupportedUpscale { base_mpp: f64, working_mpp: f64 },
    #[error("slide `{slide_id}` yields an empty {rows}x{cols} grid at tile size {tile_size_px}")]
    EmptyGrid { slide_id: String, rows: u32, cols: u32, tile_size_px: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("region {region:?} lies outside the {width}x{height} slide")]
    RegionOutOfBounds { region: Region, width: u32, height: u32 },
    #[error("grid belongs to slide `{grid}`, not `{slide}`")]
    SlideMismatch { grid: String, slide: String },
    #[error("{failed} of {total} tiles of `{slide_id}` were unreadable")]
    SlideUnreadable { slide_id: String, failed: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Identifies a slide and the physical scale of its stored pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRef {
    pub slide_id: String,
    pub uri: PathBuf,
    pub base_mpp: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl SlideRef {
    pub fn new(
        slide_id: impl Into<String>,
        uri: impl Into<PathBuf>,
        base_mpp: f64,
        width_px: u32,
        height_px: u32,
    ) -> Result<Self, TilerError> {
        let slide_id = slide_id.into();
        if slide_id.is_empty() {
            return Err(TilerError::InvalidArgument("slide_id must not be empty".into()));
        }
        if !(base_mpp.is_finite() && base_mpp > 0.0) {
            return Err(TilerError::InvalidArgument(format!("base_mpp must be positive, got {base_mpp}")));
        }
        if width_px == 0 || height_px == 0 {
            return Err(TilerError::InvalidArgument("slide dimensions must be positive".into()));
        }
        Ok(Self { slide_id, uri: uri.into(), base_mpp, width_px, height_px })
    }

    /// Reads the dimensions of a raster image on disk without decoding it.
    pub fn probe(slide_id: impl Into<String>, uri: impl AsRef<Path>, base_mpp: f64) -> Result<Self, TilerError> {
        let uri = uri.as_ref();
        let (w, h) = image::image_dimensions(uri)
            .map_err(|e| TilerError::Ingestion { uri: uri.to_path_buf(), reason: e.to_string() })?;
        Self::new(slide_id, uri, base_mpp, w, h)
    }

    /// Base-level pixels per working-level pixel.
    pub fn base_per_working(&self, working_mpp: f64) -> f64 {
        working_mpp / self.base_mpp
    }
}

/// Row/column address of a tile in its grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileAddress {
    pub row: u32,
    pub col: u32,
}

impl TileAddress {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for TileAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}_c{}", self.row, self.col)
    }
}

/// Regular tiling of a slide at the working resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub slide_id: String,
    pub tile_size_px: u32,
    pub working_mpp: f64,
    pub rows: u32,
    pub cols: u32,
    /// Row-major background flags; all false until [`extract_patches`] runs.
    #[serde(with = "bitstring")]
    pub background_flags: Vec<bool>,
    #[serde(default)]
    pub extracted: bool,
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn contains(&self, addr: TileAddress) -> bool {
        addr.row < self.rows && addr.col < self.cols
    }

    pub fn index_of(&self, addr: TileAddress) -> Option<usize> {
        self.contains(addr)
            .then(|| addr.row as usize * self.cols as usize + addr.col as usize)
    }

    pub fn address_at(&self, index: usize) -> TileAddress {
        let cols = self.cols as usize;
        TileAddress::new((index / cols) as u32, (index % cols) as u32)
    }

    /// All addresses in row-major order.
    pub fn addresses(&self) -> impl Iterator<Item = TileAddress> + '_ {
        (0..self.tile_count()).map(|i| self.address_at(i))
    }

    pub fn is_background(&self, addr: TileAddress) -> bool {
        self.index_of(addr).map(|i| self.background_flags[i]).unwrap_or(false)
    }

    /// Tiles that survived the white filter, row-major.
    pub fn foreground(&self) -> Vec<TileAddress> {
        self.addresses().filter(|a| !self.is_background(*a)).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.background_flags.iter().filter(|b| !**b).count()
    }
}

/// One tile's pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub slide_id: String,
    pub address: TileAddress,
    pub pixels: RgbImage,
}

impl Patch {
    pub fn new(slide_id: impl Into<String>, address: TileAddress, pixels: RgbImage) -> Self {
        Self { slide_id: slide_id.into(), address, pixels }
    }
}

fn floor_tiles(extent_px: u32, scale: f64, tile: u32) -> u32 {
    // Guard against representable-but-inexact products such as 0.1 * 30.
    let scaled = (extent_px as f64 * scale + 1e-9).floor();
    (scaled / tile as f64).floor() as u32
}

/// Lays a floor grid of `tile_size_px` tiles over the slide rescaled to `working_mpp`.
pub fn build_tile_grid(slide: &SlideRef, tile_size_px: u32, working_mpp: f64) -> Result<TileGrid, TilerError> {
    if tile_size_px == 0 {
        return Err(TilerError::InvalidArgument("tile_size_px must be positive".into()));
    }
    if !(working_mpp.is_finite() && working_mpp > 0.0) {
        return Err(TilerError::InvalidArgument(format!("working_mpp must be positive, got {working_mpp}")));
    }
    if working_mpp < slide.base_mpp {
        return Err(TilerError::UnsupportedUpscale { base_mpp: slide.base_mpp, working_mpp });
    }
    let scale = slide.base_mpp / working_mpp;
    let rows = floor_tiles(slide.height_px, scale, tile_size_px);
    let cols = floor_tiles(slide.width_px, scale, tile_size_px);
    if rows == 0 || cols == 0 {
        return Err(TilerError::EmptyGrid { slide_id: slide.slide_id.clone(), rows, cols, tile_size_px });
    }
    Ok(TileGrid {
        slide_id: slide.slide_id.clone(),
        tile_size_px,
        working_mpp,
        rows,
        cols,
        background_flags: vec![false; rows as usize * cols as usize],
        extracted: false,
    })
}

/// True when strictly more than `fraction_threshold` of the pixels have an
/// RGB mean strictly above `brightness_threshold`.
pub fn is_background(patch: &Patch, brightness_threshold: u8, fraction_threshold: f64) -> bool {
    is_background_pixels(&patch.pixels, brightness_threshold, fraction_threshold)
}

pub fn is_background_pixels(pixels: &RgbImage, brightness_threshold: u8, fraction_threshold: f64) -> bool {
    let total = pixels.width() as u64 * pixels.height() as u64;
    if total == 0 {
        return false;
    }
    // mean(r, g, b) > t  <=>  r + g + b > 3t, with no rounding.
    let limit = 3 * brightness_threshold as u32;
    let bright = pixels
        .pixels()
        .filter(|p| p[0] as u32 + p[1] as u32 + p[2] as u32 > limit)
        .count() as u64;
    bright as f64 / total as f64 > fraction_threshold
}

/// Base-level rectangle covered by a working-level tile.
pub fn tile_region(slide: &SlideRef, grid: &TileGrid, addr: TileAddress) -> Region {
    let f = slide.base_per_working(grid.working_mpp);
    let t = grid.tile_size_px as f64;
    let edge = |i: u32, limit: u32| (((i as f64) * t * f + 1e-9).floor() as u32).min(limit);
    let x0 = edge(addr.col, slide.width_px);
    let x1 = edge(addr.col + 1, slide.width_px);
    let y0 = edge(addr.row, slide.height_px);
    let y1 = edge(addr.row + 1, slide.height_px);
    Region { x: x0, y: y0, width: x1 - x0, height: y1 - y0 }
}

#[derive(Debug, Clone)]
pub struct ExtractedTile {
    pub patch: Patch,
    pub background: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileReadError {
    pub address: TileAddress,
    pub message: String,
}

/// Outcome of reading every tile of a grid. `tiles.len() + errors.len()`
/// always equals the grid's tile count.
#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub tiles: Vec<ExtractedTile>,
    pub errors: Vec<TileReadError>,
}

impl Extraction {
    pub fn foreground(&self) -> impl Iterator<Item = &Patch> {
        self.tiles.iter().filter(|t| !t.background).map(|t| &t.patch)
    }

    pub fn into_foreground(self) -> Vec<Patch> {
        self.tiles.into_iter().filter(|t| !t.background).map(|t| t.patch).collect()
    }
}

/// Thresholds for the white filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhiteRule {
    pub brightness_threshold: u8,
    pub fraction_threshold: f64,
}

impl Default for WhiteRule {
    fn default() -> Self {
        Self {
            brightness_threshold: DEFAULT_BRIGHTNESS_THRESHOLD,
            fraction_threshold: DEFAULT_FRACTION_THRESHOLD,
        }
    }
}

/// Reads every tile of `grid` once, sets its background flags, and returns
/// the patches in row-major order. Unreadable tiles are reported, flagged as
/// background, and left out of the foreground pool.
pub fn extract_patches(
    source: &dyn SlideSource,
    slide: &SlideRef,
    grid: &mut TileGrid,
    rule: WhiteRule,
) -> Result<Extraction, TilerError> {
    if grid.slide_id != slide.slide_id {
        return Err(TilerError::SlideMismatch { grid: grid.slide_id.clone(), slide: slide.slide_id.clone() });
    }
    let t = grid.tile_size_px;
    let addresses: Vec<TileAddress> = grid.addresses().collect();
    let grid_view: &TileGrid = grid;
    let results: Vec<Result<ExtractedTile, TileReadError>> = addresses
        .par_iter()
        .map(|&address| {
            let region = tile_region(slide, grid_view, address);
            source
                .read_region(region, t, t)
                .map(|pixels| {
                    let background = is_background_pixels(&pixels, rule.brightness_threshold, rule.fraction_threshold);
                    ExtractedTile { patch: Patch::new(slide.slide_id.clone(), address, pixels), background }
                })
                .map_err(|e| TileReadError { address, message: e.to_string() })
        })
        .collect();

    let mut extraction = Extraction::default();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok(tile) => {
                grid.background_flags[i] = tile.background;
                extraction.tiles.push(tile);
            }
            Err(err) => {
                tracing::warn!(slide = %slide.slide_id, tile = %err.address, "tile read failed: {}", err.message);
                grid.background_flags[i] = true;
                extraction.errors.push(err);
            }
        }
    }
    grid.extracted = true;
    let total = grid.tile_count();
    if extraction.errors.len() as f64 > MAX_UNREADABLE_FRACTION * total as f64 {
        return Err(TilerError::SlideUnreadable {
            slide_id: slide.slide_id.clone(),
            failed: extraction.errors.len(),
            total,
        });
    }
    Ok(extraction)
}

mod bitstring {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(flags: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let text: String = flags.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(D::Error::custom(format!("invalid flag character `{other}`"))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn slide(w: u32, h: u32, mpp: f64) -> SlideRef {
        SlideRef::new("s1", "mem://s1", mpp, w, h).unwrap()
    }

    #[test]
    fn grid_dimensions_follow_scaled_floor() {
        let g = build_tile_grid(&slide(5120, 2560, 0.5), 256, 1.0).unwrap();
        assert_eq!((g.rows, g.cols), (5, 10));
        assert_eq!(g.background_flags.len(), 50);
        assert!(g.background_flags.iter().all(|b| !b));

        let g = build_tile_grid(&slide(256, 256, 1.0), 256, 1.0).unwrap();
        assert_eq!((g.rows, g.cols), (1, 1));
    }

    #[test]
    fn degenerate_and_upscale_grids_are_rejected() {
        assert!(matches!(
            build_tile_grid(&slide(255, 255, 1.0), 256, 1.0),
            Err(TilerError::EmptyGrid { rows: 0, cols: 0, .. })
        ));
        assert!(matches!(
            build_tile_grid(&slide(1024, 1024, 1.0), 256, 0.5),
            Err(TilerError::UnsupportedUpscale { .. })
        ));
        assert!(build_tile_grid(&slide(1024, 1024, 1.0), 0, 1.0).is_err());
    }

    #[test]
    fn invalid_slide_refs_are_rejected() {
        assert!(SlideRef::new("", "x", 1.0, 1, 1).is_err());
        assert!(SlideRef::new("a", "x", 0.0, 1, 1).is_err());
        assert!(SlideRef::new("a", "x", 1.0, 0, 1).is_err());
    }

    #[test]
    fn probe_reports_ingestion_errors() {
        let err = SlideRef::probe("x", "/definitely/not/here.png", 1.0).unwrap_err();
        assert!(matches!(err, TilerError::Ingestion { .. }));
    }

    fn patch_with(bright: u32, bright_value: u8, total_side: u32) -> Patch {
        let mut img = RgbImage::from_pixel(total_side, total_side, Rgb([0, 0, 0]));
        for (i, p) in img.pixels_mut().enumerate() {
            if (i as u32) < bright {
                *p = Rgb([bright_value; 3]);
            }
        }
        Patch::new("s", TileAddress::new(0, 0), img)
    }

    #[test]
    fn white_rule_extremes() {
        let white = Patch::new("s", TileAddress::new(0, 0), RgbImage::from_pixel(8, 8, Rgb([255; 3])));
        let black = Patch::new("s", TileAddress::new(0, 0), RgbImage::from_pixel(8, 8, Rgb([0; 3])));
        assert!(is_background(&white, 230, 0.95));
        assert!(!is_background(&black, 230, 0.95));
    }

    #[test]
    fn white_rule_boundary_is_strict() {
        // 62,259 / 65,536 is exactly 0.950000..., one short of the 0.95 * 65,536 = 62,259.2 line.
        assert!(!is_background(&patch_with(62_259, 231, 256), 230, 0.95));
        assert!(is_background(&patch_with(62_260, 231, 256), 230, 0.95));
    }

    #[test]
    fn white_rule_uses_untruncated_mean() {
        // (231 + 231 + 229) / 3 = 230.33 > 230, would truncate to 230.
        let img = RgbImage::from_pixel(4, 4, Rgb([231, 231, 229]));
        assert!(is_background_pixels(&img, 230, 0.95));
        // Exactly 230 is not "greater than".
        let img = RgbImage::from_pixel(4, 4, Rgb([230, 230, 230]));
        assert!(!is_background_pixels(&img, 230, 0.95));
    }

    #[test]
    fn extraction_flags_white_half() {
        let mut img = RgbImage::from_pixel(512, 256, Rgb([255, 255, 255]));
        for y in 0..256 {
            for x in 0..256 {
                let v = ((x * 7 + y * 13) % 200) as u8;
                img.put_pixel(x, y, Rgb([v, v / 2, 120]));
            }
        }
        let src = RasterSlide::from_image(img);
        let s = slide(512, 256, 1.0);
        let mut grid = build_tile_grid(&s, 128, 1.0).unwrap();
        let ex = extract_patches(&src, &s, &mut grid, WhiteRule::default()).unwrap();
        assert_eq!(ex.tiles.len(), 8);
        assert!(ex.errors.is_empty());
        for addr in grid.addresses() {
            assert_eq!(grid.is_background(addr), addr.col >= 2, "{addr}");
        }
        assert_eq!(grid.foreground_count(), 4);
        assert!(grid.extracted);
    }

    #[test]
    fn downscaled_regions_partition_the_slide() {
        let s = slide(1000, 600, 0.25);
        let grid = build_tile_grid(&s, 64, 1.0).unwrap();
        // scaled 250x150 -> 3 cols x 2 rows
        assert_eq!((grid.rows, grid.cols), (2, 3));
        let mut covered = 0u64;
        let regions: Vec<Region> = grid.addresses().map(|a| tile_region(&s, &grid, a)).collect();
        for (i, a) in regions.iter().enumerate() {
            assert_eq!((a.width, a.height), (256, 256));
            covered += a.width as u64 * a.height as u64;
            for b in &regions[i + 1..] {
                let overlap_x = a.x < b.x + b.width && b.x < a.x + a.width;
                let overlap_y = a.y < b.y + b.height && b.y < a.y + a.height;
                assert!(!(overlap_x && overlap_y));
            }
        }
        assert_eq!(covered, 6 * 256 * 256);
    }

    #[test]
    fn grid_manifest_uses_bitstring_flags() {
        let mut g = build_tile_grid(&slide(256, 128, 1.0), 128, 1.0).unwrap();
        g.background_flags[1] = true;
        let json = serde_json::to_value(&g).unwrap();
        assert_eq!(json["background_flags"], "01");
        let back: TileGrid = serde_json::from_value(json).unwrap();
        assert_eq!(back, g);
    }
}
