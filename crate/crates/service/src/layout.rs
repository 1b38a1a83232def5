//! On-disk layout of a data root:
//!
//! ```text
//! slides/<id>/slide.json grid.json embeddings.csv embeddings.json patches/
//! sessions/<session>/session.json journal.jsonl
//! rounds/round-NNNN.json journal.jsonl
//! overlays/<id>_overlay.png
//! predictions/<id>.jsonl
//! dataset/ models/ exports/ qc/
//! ```

use std::path::{Path, PathBuf};

use histoloop_core::tiler::{patch_file_name, SlideRef, TileAddress};
use histoloop_core::viz;

pub const SLIDE_FILE: &str = "slide.json";
pub const GRID_FILE: &str = "grid.json";
pub const PATCHES_DIR: &str = "patches";
pub const SESSION_FILE: &str = "session.json";
pub const SESSION_JOURNAL: &str = "journal.jsonl";

/// Ids become directory names, so only a conservative character set is allowed.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone)]
pub struct DataRoot {
    root: PathBuf,
}

impl DataRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn slides_dir(&self) -> PathBuf {
        self.root.join("slides")
    }

    pub fn slide_dir(&self, slide_id: &str) -> PathBuf {
        self.slides_dir().join(slide_id)
    }

    pub fn slide_file(&self, slide_id: &str) -> PathBuf {
        self.slide_dir(slide_id).join(SLIDE_FILE)
    }

    pub fn grid_file(&self, slide_id: &str) -> PathBuf {
        self.slide_dir(slide_id).join(GRID_FILE)
    }

    pub fn patches_dir(&self, slide_id: &str) -> PathBuf {
        self.slide_dir(slide_id).join(PATCHES_DIR)
    }

    pub fn patch_file(&self, slide_id: &str, addr: TileAddress) -> PathBuf {
        self.patches_dir(slide_id).join(patch_file_name(slide_id, addr))
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.sessions_dir().join(session_id)
    }

    pub fn rounds_dir(&self) -> PathBuf {
        self.root.join("rounds")
    }

    pub fn overlays_dir(&self) -> PathBuf {
        self.root.join("overlays")
    }

    pub fn overlay_file(&self, slide_id: &str) -> PathBuf {
        viz::overlay_path(&self.overlays_dir(), slide_id)
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn prediction_file(&self, slide_id: &str) -> PathBuf {
        self.predictions_dir().join(format!("{slide_id}.jsonl"))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn write_slide(&self, slide: &SlideRef) -> std::io::Result<()> {
        let path = self.slide_file(&slide.slide_id);
        std::fs::create_dir_all(path.parent().expect("slide dir"))?;
        std::fs::write(path, serde_json::to_vec_pretty(slide)?)
    }

    pub fn read_slide(&self, slide_id: &str) -> std::io::Result<SlideRef> {
        Ok(serde_json::from_slice(&std::fs::read(self.slide_file(slide_id))?)?)
    }

    /// Slide ids with a `slide.json`, sorted.
    pub fn slide_ids(&self) -> std::io::Result<Vec<String>> {
        let mut out = Vec::new();
        let dir = self.slides_dir();
        if !dir.is_dir() {
            return Ok(out);
        }
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().join(SLIDE_FILE).is_file() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Parses the `r{row}_c{col}.png` file names used in patch URLs.
pub fn parse_patch_name(name: &str) -> Option<TileAddress> {
    let rest = name.strip_prefix('r')?.strip_suffix(".png")?;
    let (row, col) = rest.split_once("_c")?;
    Some(TileAddress::new(row.parse().ok()?, col.parse().ok()?))
}
