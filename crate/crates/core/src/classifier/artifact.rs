//! Model container: an 8-byte magic, a little-endian u64 metadata length,
//! the metadata JSON and then all parameters as little-endian f64 in the
//! order weights (row-major), bias, mean, scale.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierError, LinearParams, ModelArtifact, TrainReport};
use crate::class::{TissueClass, CLASS_COUNT};

const MAGIC: &[u8; 8] = b"HLMODEL1";

#[derive(Serialize, Deserialize)]
struct Metadata {
    id: String,
    backend: String,
    class_order: Vec<TissueClass>,
    feature_dim: usize,
    report: TrainReport,
}

pub fn save_artifact(path: &Path, model: &ModelArtifact) -> Result<(), ClassifierError> {
    let meta = Metadata {
        id: model.id.clone(),
        backend: model.backend.clone(),
        class_order: model.class_order.clone(),
        feature_dim: model.feature_dim(),
        report: model.report.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let p = &model.params;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (p.dim() * (CLASS_COUNT + 2) + CLASS_COUNT));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let values = p.weights.iter().flatten().chain(&p.bias).chain(&p.mean).chain(&p.scale);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<ModelArtifact, ClassifierError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| ClassifierError::Artifact(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a model file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated metadata"))?;
    let meta: Metadata = serde_json::from_slice(body)?;
    if meta.class_order != TissueClass::ALL {
        return Err(bad("unsupported class order"));
    }
    let dim = meta.feature_dim;
    let blob = &bytes[16 + len..];
    let expected = dim * CLASS_COUNT + CLASS_COUNT + 2 * dim;
    if blob.len() != expected * 8 {
        return Err(bad("parameter blob has the wrong length"));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
    let weights = take(dim * CLASS_COUNT).chunks_exact(CLASS_COUNT).map(|c| c.try_into().unwrap()).collect();
    let bias = take(CLASS_COUNT).try_into().unwrap();
    let mean = take(dim);
    let scale = take(dim);
    Ok(ModelArtifact {
        id: meta.id,
        backend: meta.backend,
        class_order: meta.class_order,
        params: LinearParams { weights, bias, mean, scale },
        report: meta.report,
    })
}
