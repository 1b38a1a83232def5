//! Grid manifests and the per-tile PNG patch store.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Patch, TileAddress, TileGrid, TilerError};

pub fn patch_file_name(slide_id: &str, addr: TileAddress) -> String {
    format!("{slide_id}__r{}_c{}.png", addr.row, addr.col)
}

pub fn write_patch(dir: &Path, patch: &Patch) -> Result<PathBuf, TilerError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(patch_file_name(&patch.slide_id, patch.address));
    patch.pixels.save(&path)?;
    Ok(path)
}

pub fn read_patch(dir: &Path, slide_id: &str, addr: TileAddress) -> Result<Patch, TilerError> {
    let path = dir.join(patch_file_name(slide_id, addr));
    let pixels = image::open(&path)?.to_rgb8();
    Ok(Patch::new(slide_id, addr, pixels))
}

pub fn write_grid(path: &Path, grid: &TileGrid) -> Result<(), TilerError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(grid)?)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<TileGrid, TilerError> {
    let grid: TileGrid = serde_json::from_slice(&fs::read(path)?)?;
    if grid.background_flags.len() != grid.tile_count() {
        return Err(TilerError::InvalidArgument(format!(
            "grid manifest {} holds {} flags for {} tiles",
            path.display(),
            grid.background_flags.len(),
            grid.tile_count()
        )));
    }
    Ok(grid)
}
