use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use histoloop_core::embedder::{BaselineTexture, DeepBackendConfig, DeepEmbedder, EmbedderBackend};
use histoloop_core::tiler::{RasterSlide, WhiteRule, DEFAULT_BRIGHTNESS_THRESHOLD, DEFAULT_FRACTION_THRESHOLD};
use histoloop_core::SlideRef;
use histoloop_service::ingest::{embed_slide_dir, tile_slide};
use histoloop_service::DataRoot;

use crate::context::print_json;

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Raster image of the slide.
    #[arg(long)]
    slide: PathBuf,
    /// Slide id; defaults to the file stem.
    #[arg(long)]
    slide_id: Option<String>,
    /// Working resolution in µm per pixel.
    #[arg(long, default_value_t = 1.0)]
    mpp: f64,
    /// Resolution of the stored image; defaults to `--mpp`.
    #[arg(long)]
    base_mpp: Option<f64>,
    /// Tile edge in working-level pixels.
    #[arg(long, default_value_t = 256)]
    tile: u32,
    #[arg(long, default_value_t = DEFAULT_BRIGHTNESS_THRESHOLD)]
    brightness_threshold: u8,
    #[arg(long, default_value_t = DEFAULT_FRACTION_THRESHOLD)]
    fraction_threshold: f64,
    /// Data root to write into; defaults to `--root`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn tile(root: &Path, args: TileArgs) -> Result<()> {
    let root = DataRoot::new(args.out.as_deref().unwrap_or(root));
    let slide_id = match args.slide_id {
        Some(id) => id,
        None => args
            .slide
            .file_stem()
            .and_then(|s| s.to_str())
            .map(String::from)
            .context("cannot derive a slide id from the path; pass --slide-id")?,
    };
    let uri = args.slide.canonicalize().with_context(|| format!("cannot open {}", args.slide.display()))?;
    let slide = SlideRef::probe(slide_id, &uri, args.base_mpp.unwrap_or(args.mpp))?;
    let source = RasterSlide::open(&uri)?;
    let rule = WhiteRule { brightness_threshold: args.brightness_threshold, fraction_threshold: args.fraction_threshold };
    let summary = tile_slide(&root, &slide, &source, args.tile, args.mpp, rule)?;
    if summary.foreground == 0 {
        tracing::warn!(slide = %summary.slide_id, "no foreground tiles; the slide contributes nothing downstream");
    }
    print_json(&summary)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Backend {
    Baseline,
    Deep,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Slide directory written by `histoloop tile` (`<root>/slides/<id>`).
    #[arg(long)]
    slide_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Backend::Baseline)]
    backend: Backend,
    /// Weights for the deep backend.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Where to write the embedding store; defaults to the slide directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn embed(args: EmbedArgs) -> Result<()> {
    let backend: Box<dyn EmbedderBackend> = match args.backend {
        Backend::Baseline => Box::new(BaselineTexture),
        Backend::Deep => {
            let Some(weights) = args.weights else {
                bail!("the deep backend needs --weights");
            };
            let config = DeepBackendConfig { weights, layer: "blocks.2".into(), output_dim: 40 };
            Box::new(DeepEmbedder::unloaded(config))
        }
    };
    let out = args.out.unwrap_or_else(|| args.slide_dir.clone());
    let count = embed_slide_dir(&args.slide_dir, &out, backend.as_ref())?;
    print_json(&serde_json::json!({ "backend": backend.name(), "embeddings": count, "out": out }))
}
