use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Subcommand;
use serde::Serialize;

use histoloop_core::labels::{merge, read_dataset, split_by_slide, write_dataset, LabeledDataset};
use histoloop_core::TissueClass;
use histoloop_service::DataRoot;

use crate::context::print_json;

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Merge label stores; the newest finalization of a slide wins.
    Merge {
        /// Store directories to merge.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory; defaults to the data root's store.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded slide-level train/validation split.
    Split {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the two stores under `<out>/train` and `<out>/val`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Slide and class counts.
    Stats {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Stats {
    slides: usize,
    records: u64,
    class_counts: Vec<(&'static str, u64)>,
    supersessions: usize,
    per_slide: Vec<SlideStats>,
}

#[derive(Serialize)]
struct SlideStats {
    slide_id: String,
    labeled: usize,
    discarded: usize,
    discard_fraction: f64,
    annotator: String,
}

fn load(path: &Path) -> Result<LabeledDataset> {
    read_dataset(path).with_context(|| format!("cannot read the label store at {}", path.display()))
}

fn stats(ds: &LabeledDataset) -> Stats {
    let counts = ds.class_counts();
    Stats {
        slides: ds.len(),
        records: ds.record_count(),
        class_counts: TissueClass::ALL.iter().map(|c| (c.name(), counts[*c])).collect(),
        supersessions: ds.supersessions().len(),
        per_slide: ds
            .slides()
            .map(|s| SlideStats {
                slide_id: s.slide_id.clone(),
                labeled: s.records.len(),
                discarded: s.discarded.len(),
                discard_fraction: s.discard_fraction(),
                annotator: s.provenance.annotator.clone(),
            })
            .collect(),
    }
}

pub fn run(root: &Path, command: DatasetCommand) -> Result<()> {
    let root = DataRoot::new(root);
    match command {
        DatasetCommand::Merge { inputs, out } => {
            let stores = inputs.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let merged = merge(&stores)?;
            for s in merged.supersessions() {
                tracing::info!(?s, "superseded an older finalization");
            }
            let out = out.unwrap_or_else(|| root.dataset_dir());
            write_dataset(&out, &merged)?;
            print_json(&stats(&merged))
        }
        DatasetCommand::Split { dataset, train_fraction, seed, out } => {
            let ds = load(&dataset.unwrap_or_else(|| root.dataset_dir()))?;
            let (train, val) = split_by_slide(&ds, train_fraction, seed)?;
            if let Some(out) = &out {
                write_dataset(&out.join("train"), &train)?;
                write_dataset(&out.join("val"), &val)?;
            }
            print_json(&serde_json::json!({ "train": train.slide_ids(), "val": val.slide_ids() }))
        }
        DatasetCommand::Stats { dataset } => print_json(&stats(&load(&dataset.unwrap_or_else(|| root.dataset_dir()))?)),
    }
}
