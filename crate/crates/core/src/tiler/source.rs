use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::TilerError;

/// Axis-aligned rectangle in base-level pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Anything that can hand back an RGB region of a slide at a requested
/// output size. Pyramidal readers implement this by picking the closest
/// level; [`RasterSlide`] resamples a single in-memory image.
pub trait SlideSource: Send + Sync {
    /// (width, height) of the stored level.
    fn dimensions(&self) -> (u32, u32);

    fn read_region(&self, region: Region, out_width: u32, out_height: u32) -> Result<RgbImage, TilerError>;
}

/// A plain raster image used as a single-level slide.
#[derive(Debug, Clone)]
pub struct RasterSlide {
    image: RgbImage,
}

impl RasterSlide {
    pub fn from_image(image: RgbImage) -> Self {
        Self { image }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, TilerError> {
        let path = path.as_ref();
        let image = image::open(path)
            .map_err(|e| TilerError::Ingestion { uri: path.to_path_buf(), reason: e.to_string() })?
            .to_rgb8();
        Ok(Self { image })
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }
}

impl SlideSource for RasterSlide {
    fn dimensions(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    fn read_region(&self, region: Region, out_width: u32, out_height: u32) -> Result<RgbImage, TilerError> {
        let (w, h) = self.image.dimensions();
        let fits = region.width > 0
            && region.height > 0
            && region.x.checked_add(region.width).is_some_and(|e| e <= w)
            && region.y.checked_add(region.height).is_some_and(|e| e <= h);
        if !fits {
            return Err(TilerError::RegionOutOfBounds { region, width: w, height: h });
        }
        let crop = imageops::crop_imm(&self.image, region.x, region.y, region.width, region.height).to_image();
        if crop.dimensions() == (out_width, out_height) {
            Ok(crop)
        } else {
            Ok(imageops::resize(&crop, out_width, out_height, FilterType::Triangle))
        }
    }
}
