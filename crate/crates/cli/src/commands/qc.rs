use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use serde::Deserialize;

use histoloop_core::classifier::{argmax, load_artifact};
use histoloop_core::embedder::{embed, BaselineTexture};
use histoloop_core::qc::{
    downsample_pixel_mask, evaluate_qc, filter_bag, mapped_accuracy, predictions_to_foreground_mask, read_mask, write_bag_manifests, write_mask,
    write_qc_report, BagStrategy, ForegroundMask, LabelMapping,
};
use histoloop_core::{Patch, TileAddress};
use histoloop_service::DataRoot;

use crate::context::{self, id_list, print_json};

#[derive(Debug, Subcommand)]
pub enum QcCommand {
    /// Tile-resolution foreground masks from predictions.
    Mask {
        /// Defaults to every slide with predictions.
        #[arg(long)]
        slide: Vec<String>,
        /// Defaults to `<root>/qc/predicted`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reduce a pixel-level ground-truth mask to tile resolution.
    Truth {
        #[arg(long)]
        slide: String,
        /// Grayscale image at the slide's base resolution; non-zero is foreground.
        #[arg(long)]
        mask: PathBuf,
        /// Defaults to `<root>/qc/truth`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice of predicted against ground-truth masks, optionally against a comparator.
    Dice {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        comparator: Option<PathBuf>,
        /// Report directory; defaults to `<root>/qc`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filtered bag manifests for multiple-instance learning.
    Bags {
        /// `All`, `QC` or `QCFat-`.
        #[arg(long, default_value = "All")]
        strategy: String,
        #[arg(long)]
        slide: Vec<String>,
        /// JSONL output; defaults to `<root>/qc/bags-<strategy>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy on an externally labeled patch set through a label mapping.
    Mapped {
        #[arg(long)]
        model: PathBuf,
        /// CSV with `path,label` columns; relative paths resolve against the CSV's directory.
        #[arg(long)]
        labels: PathBuf,
        /// JSON object `{"EXT": ["Class", ...]}`; defaults to the CRC mapping.
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct LabelRow {
    path: PathBuf,
    label: String,
}

fn predicted_ids(root: &DataRoot, given: &[String]) -> Result<Vec<String>> {
    let ids = id_list(given);
    if !ids.is_empty() {
        return Ok(ids);
    }
    let dir = root.predictions_dir();
    let mut ids = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".jsonl") {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no predictions under {}; run `histoloop predict` or `histoloop round apply`", dir.display());
    }
    Ok(ids)
}

fn read_masks(dir: &Path) -> Result<Vec<ForegroundMask>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_mask.json") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.iter().map(|id| Ok(read_mask(dir, id)?)).collect()
}

pub fn run(root: &Path, command: QcCommand) -> Result<()> {
    let root = DataRoot::new(root);
    let qc_dir = root.path().join("qc");
    match command {
        QcCommand::Mask { slide, out } => {
            let out = out.unwrap_or_else(|| qc_dir.join("predicted"));
            let mut written = Vec::new();
            for id in predicted_ids(&root, &slide)? {
                let mask = predictions_to_foreground_mask(&context::predictions(&root, &id)?, &context::grid(&root, &id)?)?;
                written.push(write_mask(&out, &mask)?);
            }
            print_json(&written)
        }
        QcCommand::Truth { slide, mask, out } => {
            let grid = context::grid(&root, &slide)?;
            let slide_ref = context::slide(&root, &slide)?;
            let pixels = image::open(&mask).with_context(|| format!("cannot read {}", mask.display()))?.to_luma8();
            if pixels.dimensions() != (slide_ref.width_px, slide_ref.height_px) {
                bail!(
                    "mask is {}x{} but the slide is {}x{}",
                    pixels.width(),
                    pixels.height(),
                    slide_ref.width_px,
                    slide_ref.height_px
                );
            }
            let reduced = downsample_pixel_mask(&pixels, &slide_ref, &grid);
            print_json(&write_mask(&out.unwrap_or_else(|| qc_dir.join("truth")), &reduced)?)
        }
        QcCommand::Dice { pred, truth, comparator, out } => {
            let comparator = comparator.as_deref().map(read_masks).transpose()?;
            let report = evaluate_qc(&read_masks(&pred)?, &read_masks(&truth)?, comparator.as_deref())?;
            let (json, csv) = write_qc_report(&out.unwrap_or(qc_dir), "qc_report", &report)?;
            print_json(&serde_json::json!({
                "mean_dice": report.mean_dice,
                "comparator_mean_dice": report.comparator_mean_dice,
                "wins": report.wins, "losses": report.losses, "ties": report.ties,
                "missing": report.missing,
                "report": json, "table": csv,
            }))
        }
        QcCommand::Bags { strategy, slide, out } => {
            let strategy: BagStrategy = strategy.parse()?;
            let manifests = predicted_ids(&root, &slide)?
                .iter()
                .map(|id| Ok(filter_bag(&context::predictions(&root, id)?, strategy)))
                .collect::<Result<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| qc_dir.join(format!("bags-{}.jsonl", strategy.name())));
            write_bag_manifests(&out, &manifests)?;
            let rows: Vec<_> = manifests
                .iter()
                .map(|m| serde_json::json!({ "slide_id": m.slide_id, "included": m.included.len(), "excluded": m.excluded }))
                .collect();
            print_json(&serde_json::json!({ "strategy": strategy.name(), "out": out, "slides": rows }))
        }
        QcCommand::Mapped { model, labels, mapping } => {
            let model = load_artifact(&model)?;
            let mapping = match mapping {
                Some(p) => LabelMapping(serde_json::from_slice(&std::fs::read(&p)?).with_context(|| format!("invalid mapping {}", p.display()))?),
                None => LabelMapping::crc(),
            };
            let base = labels.parent().map(Path::to_path_buf).unwrap_or_default();
            let mut reader = csv::Reader::from_path(&labels).with_context(|| format!("cannot read {}", labels.display()))?;
            let mut items = Vec::new();
            for row in reader.deserialize() {
                let row: LabelRow = row?;
                let path = if row.path.is_absolute() { row.path } else { base.join(row.path) };
                let pixels = image::open(&path).with_context(|| format!("cannot read {}", path.display()))?.to_rgb8();
                let e = embed(&BaselineTexture, &Patch::new("external", TileAddress::new(0, 0), pixels))?;
                items.push((row.label, argmax(&model.probabilities(&e.vector)?)));
            }
            let result = mapped_accuracy(items.iter().map(|(l, c)| (l.as_str(), *c)), &mapping)?;
            print_json(&result)
        }
    }
}
