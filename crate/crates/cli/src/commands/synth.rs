use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use image::{GrayImage, Luma};
use serde::Serialize;

use histoloop_core::synthetic::{random_slide, unseen_slide, Content, SyntheticConfig, SyntheticSlide};
use histoloop_core::TissueClass;

use crate::context::print_json;

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of slides drawn from the six known textures.
    #[arg(long, default_value_t = 4)]
    slides: usize,
    /// Additional slides whose tissue is a texture the classes never show.
    #[arg(long, default_value_t = 0)]
    unseen: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "syn")]
    prefix: String,
    #[arg(long, default_value_t = 8)]
    rows: u32,
    #[arg(long, default_value_t = 8)]
    cols: u32,
    #[arg(long, default_value_t = 256)]
    tile: u32,
}

#[derive(Serialize)]
struct TileTruth {
    row: u32,
    col: u32,
    /// Class name, `background` or `unseen`.
    content: String,
}

#[derive(Serialize)]
struct SlideTruth {
    slide_id: String,
    image: PathBuf,
    foreground_mask: PathBuf,
    tile_size: u32,
    base_mpp: f64,
    tiles: Vec<TileTruth>,
}

fn content_name(c: &Content) -> String {
    match c {
        Content::Background => "background".into(),
        Content::Tissue(t) => t.name().into(),
        Content::Unseen => "unseen".into(),
    }
}

/// Pixel mask of tissue that is neither background nor artifact.
fn foreground_mask(s: &SyntheticSlide) -> GrayImage {
    let mut mask = GrayImage::new(s.image.width(), s.image.height());
    for (x, y, px) in mask.enumerate_pixels_mut() {
        let addr = histoloop_core::TileAddress::new(y / s.tile_size, x / s.tile_size);
        let fg = !matches!(s.layout.get(&addr), None | Some(Content::Background) | Some(Content::Tissue(TissueClass::Artifact)));
        *px = Luma([if fg { 255 } else { 0 }]);
    }
    mask
}

pub fn run(args: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let config = SyntheticConfig { rows: args.rows, cols: args.cols, tile_size: args.tile, ..SyntheticConfig::default() };
    let mut slides = Vec::new();
    for i in 0..args.slides + args.unseen {
        let id = format!("{}-{i:03}", args.prefix);
        let seed = args.seed.wrapping_add(i as u64);
        let s = if i < args.slides { random_slide(&id, &config, seed) } else { unseen_slide(&id, &config, seed) };
        let image = args.out.join(format!("{id}.png"));
        s.image.save(&image)?;
        let mask = args.out.join(format!("{id}_foreground.png"));
        foreground_mask(&s).save(&mask)?;
        let truth = SlideTruth {
            slide_id: id.clone(),
            image,
            foreground_mask: mask,
            tile_size: s.tile_size,
            base_mpp: s.base_mpp,
            tiles: s.layout.iter().map(|(a, c)| TileTruth { row: a.row, col: a.col, content: content_name(c) }).collect(),
        };
        std::fs::write(args.out.join(format!("{id}.truth.json")), serde_json::to_vec_pretty(&truth)?)?;
        slides.push(truth.slide_id);
    }
    print_json(&slides)
}
