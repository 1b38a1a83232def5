//! Filling a data root: tiling a slide and embedding its foreground.

use std::path::Path;

use histoloop_core::embedder::{embed_batch, write_embeddings, EmbedError, EmbedderBackend, EMBEDDINGS_INDEX};
use histoloop_core::tiler::{
    build_tile_grid, extract_patches, read_grid, read_patch, write_grid, write_patch, SlideRef, SlideSource, TileGrid, TilerError,
    WhiteRule,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::layout::{valid_id, DataRoot, GRID_FILE, PATCHES_DIR};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("`{0}` is not a valid slide id (letters, digits, `-`, `_`, `.`)")]
    InvalidId(String),
    #[error(transparent)]
    Tiler(#[from] TilerError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("slide `{0}` has not been tiled")]
    NotTiled(String),
    #[error("{failed} of {total} foreground tiles of `{slide_id}` failed to embed; first error: {first}")]
    EmbedFailures { slide_id: String, failed: usize, total: usize, first: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct TileSummary {
    pub slide_id: String,
    pub rows: u32,
    pub cols: u32,
    pub foreground: usize,
    pub background: usize,
    pub unreadable: usize,
}

/// Grids the slide, classifies every tile, and stores the grid manifest,
/// the slide record and the foreground patches.
pub fn tile_slide(
    root: &DataRoot,
    slide: &SlideRef,
    source: &dyn SlideSource,
    tile_size: u32,
    working_mpp: f64,
    rule: WhiteRule,
) -> Result<TileSummary, IngestError> {
    if !valid_id(&slide.slide_id) {
        return Err(IngestError::InvalidId(slide.slide_id.clone()));
    }
    let mut grid = build_tile_grid(slide, tile_size, working_mpp)?;
    let extraction = extract_patches(source, slide, &mut grid, rule)?;
    let unreadable = extraction.errors.len();
    let patches_dir = root.patches_dir(&slide.slide_id);
    if patches_dir.exists() {
        std::fs::remove_dir_all(&patches_dir)?;
    }
    let patches = extraction.into_foreground();
    patches.par_iter().try_for_each(|p| write_patch(&patches_dir, p).map(|_| ()))?;
    write_grid(&root.grid_file(&slide.slide_id), &grid)?;
    root.write_slide(slide)?;
    // Embeddings of an earlier tiling no longer match the grid.
    let stale = root.slide_dir(&slide.slide_id).join(EMBEDDINGS_INDEX);
    if stale.exists() {
        std::fs::remove_file(stale)?;
    }
    Ok(TileSummary {
        slide_id: slide.slide_id.clone(),
        rows: grid.rows,
        cols: grid.cols,
        foreground: grid.foreground_count(),
        background: grid.tile_count() - grid.foreground_count() - unreadable,
        unreadable,
    })
}

pub fn read_slide_grid(root: &DataRoot, slide_id: &str) -> Result<TileGrid, IngestError> {
    read_dir_grid(&root.slide_dir(slide_id))
}

fn read_dir_grid(slide_dir: &Path) -> Result<TileGrid, IngestError> {
    let path = slide_dir.join(GRID_FILE);
    if !path.is_file() {
        return Err(IngestError::NotTiled(slide_dir.display().to_string()));
    }
    Ok(read_grid(&path)?)
}

/// Embeds the stored foreground patches of a tiled slide. Any failing tile
/// aborts the slide, since sessions need an embedding for every pool tile.
pub fn embed_slide(root: &DataRoot, slide_id: &str, backend: &dyn EmbedderBackend) -> Result<usize, IngestError> {
    let dir = root.slide_dir(slide_id);
    embed_slide_dir(&dir, &dir, backend)
}

/// [`embed_slide`] for a slide directory laid out by [`tile_slide`], writing
/// the embedding store to `out`.
pub fn embed_slide_dir(slide_dir: &Path, out: &Path, backend: &dyn EmbedderBackend) -> Result<usize, IngestError> {
    let grid = read_dir_grid(slide_dir)?;
    let slide_id = grid.slide_id.as_str();
    let dir = slide_dir.join(PATCHES_DIR);
    let patches = grid
        .foreground()
        .par_iter()
        .map(|a| read_patch(&dir, slide_id, *a))
        .collect::<Result<Vec<_>, _>>()?;
    let results = embed_batch(backend, &patches);
    let total = results.len();
    let mut embeddings = Vec::with_capacity(total);
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(e) => embeddings.push(e),
            Err(e) => errors.push(e),
        }
    }
    if let Some(first) = errors.first() {
        return Err(IngestError::EmbedFailures { slide_id: slide_id.to_string(), failed: errors.len(), total, first: first.to_string() });
    }
    write_embeddings(out, backend.name(), &embeddings)?;
    Ok(embeddings.len())
}
