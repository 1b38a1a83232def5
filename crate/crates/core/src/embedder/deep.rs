//! Adapter for pretrained CNN feature extractors.
//!
//! The adapter owns the pieces that are independent of any particular
//! inference runtime: ImageNet input normalisation and channel-wise global
//! average pooling of the chosen intermediate activation. The network itself
//! is supplied through [`ActivationExtractor`].

use std::path::PathBuf;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{EmbedError, EmbedderBackend, EMBEDDING_DIM};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepBackendConfig {
    /// Location of the network weights, interpreted by the extractor.
    pub weights: PathBuf,
    /// Name of the intermediate layer whose activation is pooled.
    #[serde(default = "default_layer")]
    pub layer: String,
    #[serde(default = "default_dim")]
    pub output_dim: usize,
}

fn default_layer() -> String {
    "blocks.2".to_string()
}

fn default_dim() -> usize {
    EMBEDDING_DIM
}

/// A channels x height x width activation tensor, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub trait ActivationExtractor: Send + Sync {
    /// Runs the network on a normalised CHW input up to `layer`.
    fn activation(&self, input: &Activation, layer: &str) -> Result<Activation, String>;
}

pub struct DeepEmbedder {
    config: DeepBackendConfig,
    extractor: Option<Box<dyn ActivationExtractor>>,
}

impl DeepEmbedder {
    /// An adapter with no network attached; every call fails with a
    /// configuration error until [`DeepEmbedder::with_extractor`] is used.
    pub fn unloaded(config: DeepBackendConfig) -> Self {
        Self { config, extractor: None }
    }

    pub fn with_extractor(config: DeepBackendConfig, extractor: Box<dyn ActivationExtractor>) -> Self {
        Self { config, extractor: Some(extractor) }
    }

    pub fn config(&self) -> &DeepBackendConfig {
        &self.config
    }
}

/// Scales to [0, 1] and applies ImageNet mean/std per channel.
pub fn normalize_input(pixels: &RgbImage) -> Activation {
    let (w, h) = pixels.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in pixels.as_raw().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = (px[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Activation { channels: 3, height: h, width: w, data }
}

pub fn global_average_pool(act: &Activation) -> Vec<f64> {
    let plane = act.height * act.width;
    (0..act.channels)
        .map(|c| {
            let s: f64 = act.data[c * plane..(c + 1) * plane].iter().map(|v| *v as f64).sum();
            if plane == 0 { 0.0 } else { s / plane as f64 }
        })
        .collect()
}

impl EmbedderBackend for DeepEmbedder {
    fn name(&self) -> &str {
        "deep"
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn features(&self, pixels: &RgbImage) -> Result<Vec<f64>, EmbedError> {
        let extractor = self.extractor.as_ref().ok_or_else(|| {
            EmbedError::Configuration(format!(
                "deep backend not loaded (weights: {})",
                self.config.weights.display()
            ))
        })?;
        let input = normalize_input(pixels);
        let act = extractor
            .activation(&input, &self.config.layer)
            .map_err(|message| EmbedError::BackendFault { backend: "deep".into(), message })?;
        if act.data.len() != act.channels * act.height * act.width {
            return Err(EmbedError::BackendFault {
                backend: "deep".into(),
                message: "activation shape does not match its data".into(),
            });
        }
        Ok(global_average_pool(&act))
    }
}
