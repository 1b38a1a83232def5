//! On-disk embedding matrices: `embeddings.csv` holds one row per tile in
//! row-major tile order, `embeddings.json` maps row index to tile address.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbedError, Embedding};
use crate::tiler::TileAddress;

pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const EMBEDDINGS_INDEX: &str = "embeddings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub slide_id: String,
    pub backend: String,
    pub dim: usize,
    pub tiles: Vec<TileAddress>,
}

fn store_err(e: impl std::fmt::Display) -> EmbedError {
    EmbedError::Store(e.to_string())
}

/// Writes the embeddings of one slide into `dir`, sorted by tile address.
pub fn write_embeddings(dir: &Path, backend: &str, embeddings: &[Embedding]) -> Result<EmbeddingIndex, EmbedError> {
    let slide_id = embeddings.first().map(|e| e.slide_id.clone()).unwrap_or_default();
    if let Some(other) = embeddings.iter().find(|e| e.slide_id != slide_id) {
        return Err(EmbedError::Store(format!("mixed slides `{slide_id}` and `{}` in one store", other.slide_id)));
    }
    let dim = embeddings.first().map(|e| e.vector.len()).unwrap_or(0);
    let mut sorted: Vec<&Embedding> = embeddings.iter().collect();
    sorted.sort_by_key(|e| e.address);
    fs::create_dir_all(dir).map_err(store_err)?;

    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(EMBEDDINGS_CSV)).map_err(store_err)?;
    for e in &sorted {
        if e.vector.len() != dim {
            return Err(EmbedError::Store(format!("tile {} has {} values, expected {dim}", e.address, e.vector.len())));
        }
        writer.write_record(e.vector.iter().map(|v| v.to_string())).map_err(store_err)?;
    }
    writer.flush().map_err(store_err)?;

    let index = EmbeddingIndex {
        slide_id,
        backend: backend.to_string(),
        dim,
        tiles: sorted.iter().map(|e| e.address).collect(),
    };
    fs::write(dir.join(EMBEDDINGS_INDEX), serde_json::to_vec_pretty(&index).map_err(store_err)?).map_err(store_err)?;
    Ok(index)
}

pub fn read_embeddings(dir: &Path) -> Result<(EmbeddingIndex, Vec<Embedding>), EmbedError> {
    let index: EmbeddingIndex =
        serde_json::from_slice(&fs::read(dir.join(EMBEDDINGS_INDEX)).map_err(store_err)?).map_err(store_err)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(dir.join(EMBEDDINGS_CSV)).map_err(store_err)?;
    let mut out = Vec::with_capacity(index.tiles.len());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(store_err)?;
        let address = *index
            .tiles
            .get(row)
            .ok_or_else(|| EmbedError::Store(format!("matrix has more rows than the index ({})", index.tiles.len())))?;
        let vector = record.iter().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(store_err)?;
        if vector.len() != index.dim {
            return Err(EmbedError::Store(format!("row {row} has {} values, expected {}", vector.len(), index.dim)));
        }
        out.push(Embedding { slide_id: index.slide_id.clone(), address, vector });
    }
    if out.len() != index.tiles.len() {
        return Err(EmbedError::Store(format!("matrix has {} rows, index lists {}", out.len(), index.tiles.len())));
    }
    Ok((index, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn store_round_trips_exactly(values in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 4), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let embeddings: Vec<Embedding> = values
                .into_iter()
                .enumerate()
                .map(|(i, vector)| Embedding { slide_id: "s".into(), address: TileAddress::new(i as u32 / 5, i as u32 % 5), vector })
                .collect();
            write_embeddings(dir.path(), "baseline", &embeddings).unwrap();
            let (index, back) = read_embeddings(dir.path()).unwrap();
            prop_assert_eq!(index.tiles.len(), embeddings.len());
            if !embeddings.is_empty() {
                prop_assert_eq!(back, embeddings);
            }
        }
    }
}
