//! Deterministic texture statistics, 40 values per patch:
//!
//! | range  | feature                                               |
//! |--------|-------------------------------------------------------|
//! | 0..3   | per-channel mean (R, G, B) / 255                      |
//! | 3..6   | per-channel population std / 255                      |
//! | 6..14  | 8-bin grayscale histogram, bins of 32 levels          |
//! | 14..22 | 8-bin gradient magnitude histogram, bins of 8, last open |
//! | 22..38 | 16-bin magnitude-weighted gradient orientation histogram |
//! | 38     | mean gradient magnitude / 255                         |
//! | 39     | Shannon entropy (bits) of the grayscale histogram     |
//!
//! Grayscale is the unrounded mean of R, G, B. Gradients are central
//! differences with clamped borders. The magnitude histogram counts only
//! pixels with non-zero gradient; both gradient histograms are all-zero on a
//! flat patch.

use image::RgbImage;

use super::{EmbedError, EmbedderBackend, EMBEDDING_DIM};

const INTENSITY_BINS: usize = 8;
const MAGNITUDE_BINS: usize = 8;
const MAGNITUDE_BIN_WIDTH: f64 = 8.0;
const ORIENTATION_BINS: usize = 16;

#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineTexture;

impl EmbedderBackend for BaselineTexture {
    fn name(&self) -> &str {
        "baseline"
    }

    fn output_dim(&self) -> usize {
        EMBEDDING_DIM
    }

    fn features(&self, pixels: &RgbImage) -> Result<Vec<f64>, EmbedError> {
        let (w, h) = pixels.dimensions();
        if w == 0 || h == 0 {
            return Err(EmbedError::BackendFault { backend: "baseline".into(), message: "empty patch".into() });
        }
        Ok(texture_features(pixels))
    }
}

fn texture_features(pixels: &RgbImage) -> Vec<f64> {
    let (w, h) = pixels.dimensions();
    let (w, h) = (w as usize, h as usize);
    let n = (w * h) as f64;
    let raw = pixels.as_raw();

    let mut sum = [0f64; 3];
    let mut sum_sq = [0f64; 3];
    let mut gray = Vec::with_capacity(w * h);
    for px in raw.chunks_exact(3) {
        for c in 0..3 {
            let v = px[c] as f64;
            sum[c] += v;
            sum_sq[c] += v * v;
        }
        gray.push((px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0);
    }

    let mut out = Vec::with_capacity(EMBEDDING_DIM);
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    out.extend(means.iter().map(|m| m / 255.0));
    for c in 0..3 {
        let var = (sum_sq[c] / n - means[c] * means[c]).max(0.0);
        out.push(var.sqrt() / 255.0);
    }

    let mut intensity = [0f64; INTENSITY_BINS];
    for &g in &gray {
        intensity[((g / 32.0) as usize).min(INTENSITY_BINS - 1)] += 1.0;
    }
    for v in intensity.iter_mut() {
        *v /= n;
    }
    out.extend_from_slice(&intensity);

    let at = |x: usize, y: usize| gray[y * w + x];
    let mut magnitude_hist = [0f64; MAGNITUDE_BINS];
    let mut orientation_hist = [0f64; ORIENTATION_BINS];
    let mut moving = 0f64;
    let mut magnitude_sum = 0f64;
    for y in 0..h {
        let (up, down) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (left, right) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let gx = (at(right, y) - at(left, y)) / 2.0;
            let gy = (at(x, down) - at(x, up)) / 2.0;
            let m = (gx * gx + gy * gy).sqrt();
            if m > 0.0 {
                moving += 1.0;
                magnitude_sum += m;
                magnitude_hist[((m / MAGNITUDE_BIN_WIDTH) as usize).min(MAGNITUDE_BINS - 1)] += 1.0;
                let theta = gy.atan2(gx) + std::f64::consts::PI;
                let bin = (theta / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize;
                orientation_hist[bin.min(ORIENTATION_BINS - 1)] += m;
            }
        }
    }
    if moving > 0.0 {
        magnitude_hist.iter_mut().for_each(|v| *v /= moving);
        orientation_hist.iter_mut().for_each(|v| *v /= magnitude_sum);
    }
    out.extend_from_slice(&magnitude_hist);
    out.extend_from_slice(&orientation_hist);
    out.push(magnitude_sum / n / 255.0);

    let entropy = intensity
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.log2())
        .sum::<f64>();
    out.push(entropy);
    out
}
