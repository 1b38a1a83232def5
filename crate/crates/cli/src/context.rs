//! Reading slide artifacts out of a data root.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use histoloop_core::classifier::{read_prediction_map, PredictionMap};
use histoloop_core::embedder::{read_embeddings, Embedding};
use histoloop_core::tiler::RasterSlide;
use histoloop_core::{SlideRef, TileGrid};
use histoloop_service::ingest::read_slide_grid;
use histoloop_service::DataRoot;

pub fn slide(root: &DataRoot, slide_id: &str) -> Result<SlideRef> {
    root.read_slide(slide_id)
        .with_context(|| format!("slide `{slide_id}` is not in {}; run `histoloop tile` first", root.path().display()))
}

pub fn grid(root: &DataRoot, slide_id: &str) -> Result<TileGrid> {
    Ok(read_slide_grid(root, slide_id)?)
}

pub fn embeddings(root: &DataRoot, slide_id: &str) -> Result<Vec<Embedding>> {
    let (index, embeddings) = read_embeddings(&root.slide_dir(slide_id))
        .with_context(|| format!("no embeddings for `{slide_id}`; run `histoloop embed` first"))?;
    if index.slide_id != slide_id {
        bail!("embedding store of `{slide_id}` belongs to `{}`", index.slide_id);
    }
    Ok(embeddings)
}

pub fn embeddings_for<'a>(root: &DataRoot, ids: impl IntoIterator<Item = &'a String>) -> Result<BTreeMap<String, Vec<Embedding>>> {
    ids.into_iter().map(|id| Ok((id.clone(), embeddings(root, id)?))).collect()
}

pub fn predictions(root: &DataRoot, slide_id: &str) -> Result<PredictionMap> {
    let path = root.prediction_file(slide_id);
    read_prediction_map(&path, slide_id).with_context(|| format!("no predictions for `{slide_id}` at {}; run `histoloop predict`", path.display()))
}

/// Pixels of a slide whose source is a raster file. Synthetic or pyramidal
/// sources give `None`.
pub fn raster(slide: &SlideRef) -> Option<RasterSlide> {
    if !slide.uri.is_file() {
        return None;
    }
    match RasterSlide::open(&slide.uri) {
        Ok(r) => Some(r),
        Err(e) => {
            tracing::warn!(slide = %slide.slide_id, error = %e, "cannot read slide pixels");
            None
        }
    }
}

pub fn print_json(value: &impl Serialize) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Splits comma-separated id lists given as one or more arguments.
pub fn id_list(values: &[String]) -> Vec<String> {
    values.iter().flat_map(|v| v.split(',')).map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
