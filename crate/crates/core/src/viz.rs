//! Visual exports of prediction maps: QuPath-style GeoJSON, per-class
//! heatmaps and blended overlay thumbnails.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::class::{TissueClass, CLASS_COUNT};
use crate::classifier::PredictionMap;
use crate::tiler::{Region, SlideRef, SlideSource, TileAddress, TileGrid, TilerError};

pub const MIN_THUMBNAIL_DIM: u32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("max_dim must be at least {MIN_THUMBNAIL_DIM}, got {0}")]
    ThumbnailTooSmall(u32),
    #[error(transparent)]
    Slide(#[from] TilerError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-class display colors. Defaults to [`TissueClass::color`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorTable(pub [[u8; 3]; CLASS_COUNT]);

impl Default for ColorTable {
    fn default() -> Self {
        Self(TissueClass::ALL.map(TissueClass::color))
    }
}

impl ColorTable {
    pub fn get(&self, class: TissueClass) -> [u8; 3] {
        self.0[class.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCollection {
    #[serde(rename = "type")]
    pub kind: String,
    pub features: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    #[serde(rename = "type")]
    pub kind: String,
    pub geometry: Geometry,
    pub properties: FeatureProperties,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(rename = "type")]
    pub kind: String,
    /// One closed exterior ring.
    pub coordinates: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureProperties {
    pub object_type: String,
    pub classification: Classification,
    pub tile: TileAddress,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub name: String,
    pub color: [u8; 3],
}

fn check_map(pmap: &PredictionMap, grid: &TileGrid) -> Result<(), VizError> {
    if pmap.slide_id != grid.slide_id {
        return Err(VizError::Inconsistent(format!(
            "prediction map is for `{}` but the grid is for `{}`",
            pmap.slide_id, grid.slide_id
        )));
    }
    if let Some(p) = pmap.predictions.iter().find(|p| !grid.contains(p.address)) {
        return Err(VizError::Inconsistent(format!("tile {} lies outside the {}x{} grid", p.address, grid.rows, grid.cols)));
    }
    Ok(())
}

/// One rectangle per predicted tile, in base-level pixel coordinates.
pub fn export_geojson(
    pmap: &PredictionMap,
    grid: &TileGrid,
    slide: &SlideRef,
    colors: &ColorTable,
) -> Result<FeatureCollection, VizError> {
    check_map(pmap, grid)?;
    if slide.slide_id != grid.slide_id {
        return Err(VizError::Inconsistent(format!("slide `{}` does not own grid `{}`", slide.slide_id, grid.slide_id)));
    }
    let side = grid.tile_size_px as f64 * slide.base_per_working(grid.working_mpp);
    let features = pmap
        .predictions
        .iter()
        .map(|p| {
            let (x0, y0) = (p.address.col as f64 * side, p.address.row as f64 * side);
            let (x1, y1) = (x0 + side, y0 + side);
            Feature {
                kind: "Feature".into(),
                geometry: Geometry {
                    kind: "Polygon".into(),
                    coordinates: vec![vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]],
                },
                properties: FeatureProperties {
                    object_type: "annotation".into(),
                    classification: Classification { name: p.class.name().into(), color: colors.get(p.class) },
                    tile: p.address,
                    probability: p.confidence(),
                },
            }
        })
        .collect();
    Ok(FeatureCollection { kind: "FeatureCollection".into(), features })
}

/// 255·p rounded half up.
pub fn probability_to_gray(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0) + 0.5).floor() as u8
}

/// `cols × rows` grayscale image of P(class); unpredicted tiles are 0.
pub fn export_heatmap(pmap: &PredictionMap, grid: &TileGrid, class: TissueClass) -> Result<GrayImage, VizError> {
    check_map(pmap, grid)?;
    let mut img = GrayImage::new(grid.cols, grid.rows);
    for p in &pmap.predictions {
        img.put_pixel(p.address.col, p.address.row, Luma([probability_to_gray(p.probabilities[class.index()])]));
    }
    Ok(img)
}

/// Alpha 0.5 blend, rounded half up.
pub fn blend(pixel: [u8; 3], color: [u8; 3]) -> [u8; 3] {
    std::array::from_fn(|i| (pixel[i] as u16 + color[i] as u16).div_ceil(2) as u8)
}

/// Largest size within `max_dim` on both axes with the slide's aspect
/// ratio. Never upscales.
pub fn thumbnail_dims(width: u32, height: u32, max_dim: u32) -> (u32, u32) {
    let scale = (max_dim as f64 / width as f64).min(max_dim as f64 / height as f64).min(1.0);
    let fit = |v: u32| ((v as f64 * scale).floor() as u32).clamp(1, max_dim);
    (fit(width), fit(height))
}

/// Slide thumbnail with predicted tiles tinted by class color.
pub fn export_overlay_thumbnail(
    source: &dyn SlideSource,
    slide: &SlideRef,
    grid: &TileGrid,
    pmap: &PredictionMap,
    max_dim: u32,
    colors: &ColorTable,
) -> Result<RgbImage, VizError> {
    if max_dim < MIN_THUMBNAIL_DIM {
        return Err(VizError::ThumbnailTooSmall(max_dim));
    }
    check_map(pmap, grid)?;
    let (tw, th) = thumbnail_dims(slide.width_px, slide.height_px, max_dim);
    let full = Region { x: 0, y: 0, width: slide.width_px, height: slide.height_px };
    let mut thumb = source.read_region(full, tw, th)?;
    if thumb.dimensions() != (tw, th) {
        thumb = image::imageops::resize(&thumb, tw, th, FilterType::Triangle);
    }
    let classes = pmap.by_address();
    let tile_base = grid.tile_size_px as f64 * slide.base_per_working(grid.working_mpp);
    let (sx, sy) = (slide.width_px as f64 / tw as f64, slide.height_px as f64 / th as f64);
    for (x, y, px) in thumb.enumerate_pixels_mut() {
        let bx = (x as f64 + 0.5) * sx;
        let by = (y as f64 + 0.5) * sy;
        let addr = TileAddress::new((by / tile_base).floor() as u32, (bx / tile_base).floor() as u32);
        if let Some(p) = classes.get(&addr) {
            px.0 = blend(px.0, colors.get(p.class));
        }
    }
    Ok(thumb)
}

pub fn geojson_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.geojson"))
}

pub fn heatmap_path(dir: &Path, slide_id: &str, class: TissueClass) -> PathBuf {
    dir.join(format!("{slide_id}_{}.png", class.name()))
}

pub fn overlay_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}_overlay.png"))
}

pub fn write_geojson(path: &Path, fc: &FeatureCollection) -> Result<(), VizError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec(fc)?)?;
    Ok(())
}

/// Writes the GeoJSON and all six heatmaps for one slide into `dir`.
pub fn export_map_files(
    dir: &Path,
    pmap: &PredictionMap,
    grid: &TileGrid,
    slide: &SlideRef,
    colors: &ColorTable,
) -> Result<Vec<PathBuf>, VizError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let geo = geojson_path(dir, &slide.slide_id);
    write_geojson(&geo, &export_geojson(pmap, grid, slide, colors)?)?;
    written.push(geo);
    for class in TissueClass::ALL {
        let path = heatmap_path(dir, &slide.slide_id, class);
        export_heatmap(pmap, grid, class)?.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::TilePrediction;
    use crate::tiler::{build_tile_grid, RasterSlide};

    fn prediction(row: u32, col: u32, class: TissueClass) -> TilePrediction {
        let mut p = [0.0; CLASS_COUNT];
        p[class.index()] = 1.0;
        TilePrediction::new(TileAddress::new(row, col), p)
    }

    fn slide(w: u32, h: u32, mpp: f64) -> SlideRef {
        SlideRef::new("s", "mem", mpp, w, h).unwrap()
    }

    #[test]
    fn one_tile_at_double_scale() {
        let s = slide(512, 512, 0.5);
        let grid = build_tile_grid(&s, 256, 1.0).unwrap();
        let pmap = PredictionMap { slide_id: "s".into(), predictions: vec![prediction(0, 0, TissueClass::Stroma)] };
        let fc = export_geojson(&pmap, &grid, &s, &ColorTable::default()).unwrap();
        assert_eq!(fc.features[0].geometry.coordinates[0], vec![[0.0, 0.0], [512.0, 0.0], [512.0, 512.0], [0.0, 512.0], [0.0, 0.0]]);
        assert_eq!(fc.features[0].properties.classification.name, "Stroma");
    }

    #[test]
    fn geojson_round_trip_and_empty_map() {
        let s = slide(1024, 768, 1.0);
        let grid = build_tile_grid(&s, 256, 1.0).unwrap();
        let empty = PredictionMap { slide_id: "s".into(), predictions: vec![] };
        assert!(export_geojson(&empty, &grid, &s, &ColorTable::default()).unwrap().features.is_empty());
        let pmap = PredictionMap {
            slide_id: "s".into(),
            predictions: vec![prediction(0, 1, TissueClass::Adipose), prediction(2, 3, TissueClass::Artifact)],
        };
        let fc = export_geojson(&pmap, &grid, &s, &ColorTable::default()).unwrap();
        let text = serde_json::to_string(&fc).unwrap();
        let parsed: FeatureCollection = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&parsed).unwrap(), text);
        assert_eq!(parsed.features.len(), 2);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["type"], "FeatureCollection");
        assert_eq!(value["features"][1]["properties"]["classification"]["name"], "Artifact");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let s = slide(512, 512, 1.0);
        let grid = build_tile_grid(&s, 256, 1.0).unwrap();
        let other = PredictionMap { slide_id: "t".into(), predictions: vec![] };
        assert!(matches!(export_geojson(&other, &grid, &s, &ColorTable::default()), Err(VizError::Inconsistent(_))));
        let outside = PredictionMap { slide_id: "s".into(), predictions: vec![prediction(5, 0, TissueClass::Stroma)] };
        assert!(matches!(export_heatmap(&outside, &grid, TissueClass::Stroma), Err(VizError::Inconsistent(_))));
    }

    #[test]
    fn heatmap_rounding() {
        assert_eq!(probability_to_gray(1.0), 255);
        assert_eq!(probability_to_gray(0.0), 0);
        assert_eq!(probability_to_gray(0.5), 128);
        let s = slide(512, 256, 1.0);
        let grid = build_tile_grid(&s, 256, 1.0).unwrap();
        let probs = [0.1, 0.2, 0.3, 0.15, 0.05, 0.2];
        let pmap = PredictionMap { slide_id: "s".into(), predictions: vec![TilePrediction::new(TileAddress::new(0, 1), probs)] };
        let stack: u32 = TissueClass::ALL
            .iter()
            .map(|c| export_heatmap(&pmap, &grid, *c).unwrap().get_pixel(1, 0).0[0] as u32)
            .sum();
        assert!(stack.abs_diff(255) <= 6);
        assert_eq!(export_heatmap(&pmap, &grid, TissueClass::Stroma).unwrap().dimensions(), (2, 1));
    }

    #[test]
    fn overlay_blends_and_fits() {
        assert_eq!(blend([100, 0, 255], [200, 50, 255]), [150, 25, 255]);
        let s = slide(1024, 512, 1.0);
        let grid = build_tile_grid(&s, 256, 1.0).unwrap();
        let source = RasterSlide::from_image(RgbImage::from_pixel(1024, 512, image::Rgb([100, 100, 100])));
        let pmap = PredictionMap {
            slide_id: "s".into(),
            predictions: grid.addresses().map(|a| prediction(a.row, a.col, TissueClass::Lymphocytes)).collect(),
        };
        let thumb = export_overlay_thumbnail(&source, &s, &grid, &pmap, 128, &ColorTable::default()).unwrap();
        assert_eq!(thumb.dimensions(), (128, 64));
        let want = blend([100, 100, 100], TissueClass::Lymphocytes.color());
        assert!(thumb.pixels().all(|p| p.0 == want));
        assert!(matches!(
            export_overlay_thumbnail(&source, &s, &grid, &pmap, 63, &ColorTable::default()),
            Err(VizError::ThumbnailTooSmall(63))
        ));
    }

    #[test]
    fn thumbnail_dims_respect_bounds() {
        for (w, h, m) in [(5000, 3000, 256), (300, 9000, 64), (100, 50, 512), (64, 64, 64)] {
            let (tw, th) = thumbnail_dims(w, h, m);
            assert!(tw <= m && th <= m);
            let aspect = w as f64 / h as f64;
            assert!((tw as f64 - th as f64 * aspect).abs() <= aspect.max(1.0));
            assert_eq!(tw.max(th), m.min(w.max(h)));
        }
    }
}
