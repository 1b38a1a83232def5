//! Patch embeddings used for clustering and classification.
//!
//! Backends map a patch to a fixed-length feature vector. The default
//! pipeline consumes 40-dimensional vectors; [`BaselineTexture`] produces
//! them from hand-built texture statistics and [`DeepEmbedder`] adapts a
//! pretrained network's intermediate activations.

mod baseline;
mod deep;
mod store;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tiler::{Patch, TileAddress};

pub use baseline::BaselineTexture;
pub use deep::{Activation, ActivationExtractor, DeepBackendConfig, DeepEmbedder};
pub use store::{read_embeddings, write_embeddings, EmbeddingIndex, EMBEDDINGS_CSV, EMBEDDINGS_INDEX};

pub const EMBEDDING_DIM: usize = 40;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("embedder configuration: {0}")]
    Configuration(String),
    #[error("backend `{backend}` produced a non-finite value at index {index}")]
    NonFinite { backend: String, index: usize },
    #[error("backend `{backend}` returned {got} values, declared {expected}")]
    DimensionMismatch { backend: String, expected: usize, got: usize },
    #[error("backend `{backend}` failed: {message}")]
    BackendFault { backend: String, message: String },
    #[error("embedding store: {0}")]
    Store(String),
}

/// Feature vector for one tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub slide_id: String,
    pub address: TileAddress,
    pub vector: Vec<f64>,
}

pub trait EmbedderBackend: Send + Sync {
    fn name(&self) -> &str;

    fn output_dim(&self) -> usize;

    /// False for backends that must not be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }

    fn features(&self, pixels: &RgbImage) -> Result<Vec<f64>, EmbedError>;
}

/// Refuses backends whose output dimension differs from [`EMBEDDING_DIM`].
pub fn require_default_dim(backend: &dyn EmbedderBackend) -> Result<(), EmbedError> {
    if backend.output_dim() != EMBEDDING_DIM {
        return Err(EmbedError::Configuration(format!(
            "backend `{}` declares {} dimensions; the clustering pipeline needs {EMBEDDING_DIM}",
            backend.name(),
            backend.output_dim()
        )));
    }
    Ok(())
}

pub fn embed(backend: &dyn EmbedderBackend, patch: &Patch) -> Result<Embedding, EmbedError> {
    let vector = backend.features(&patch.pixels)?;
    if vector.len() != backend.output_dim() {
        return Err(EmbedError::DimensionMismatch {
            backend: backend.name().to_string(),
            expected: backend.output_dim(),
            got: vector.len(),
        });
    }
    if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite { backend: backend.name().to_string(), index });
    }
    Ok(Embedding { slide_id: patch.slide_id.clone(), address: patch.address, vector })
}

/// Embeds each patch, preserving order. Failures are returned in place so a
/// bad tile does not abort the batch.
pub fn embed_batch(backend: &dyn EmbedderBackend, patches: &[Patch]) -> Vec<Result<Embedding, EmbedError>> {
    if backend.concurrent() {
        patches.par_iter().map(|p| embed(backend, p)).collect()
    } else {
        patches.iter().map(|p| embed(backend, p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    struct Broken(Vec<f64>);

    impl EmbedderBackend for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn output_dim(&self) -> usize {
            3
        }
        fn features(&self, _: &RgbImage) -> Result<Vec<f64>, EmbedError> {
            Ok(self.0.clone())
        }
    }

    fn patch(v: u8) -> Patch {
        Patch::new("s", TileAddress::new(0, v as u32), RgbImage::from_pixel(4, 4, Rgb([v, v, v])))
    }

    #[test]
    fn non_finite_output_is_a_backend_fault() {
        let err = embed(&Broken(vec![0.0, f64::NAN, 1.0]), &patch(1)).unwrap_err();
        assert_eq!(err, EmbedError::NonFinite { backend: "broken".into(), index: 1 });
        let err = embed(&Broken(vec![0.0]), &patch(1)).unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { expected: 3, got: 1, .. }));
    }

    #[test]
    fn default_pipeline_refuses_other_dimensions() {
        assert!(require_default_dim(&Broken(vec![])).is_err());
        assert!(require_default_dim(&BaselineTexture).is_ok());
    }

    #[test]
    fn batch_matches_singles() {
        let patches: Vec<Patch> = (0..3).map(|i| patch(i * 40)).collect();
        assert!(embed_batch(&BaselineTexture, &[]).is_empty());
        let batch: Vec<Embedding> = embed_batch(&BaselineTexture, &patches).into_iter().map(Result::unwrap).collect();
        let singles: Vec<Embedding> = patches.iter().map(|p| embed(&BaselineTexture, p).unwrap()).collect();
        assert_eq!(batch, singles);
    }
}
