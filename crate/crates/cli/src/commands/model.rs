use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use histoloop_core::active::{load_current_round, SlideReport};
use histoloop_core::classifier::{
    dataset_examples, evaluate, load_artifact, Evaluation, ModelArtifact, predict_map, save_artifact, train as fit, write_prediction_map, TrainConfig,
};
use histoloop_core::labels::{read_dataset, split_by_slide, LabeledDataset};
use histoloop_core::viz::{self, ColorTable};
use histoloop_service::DataRoot;

use crate::context::{self, print_json};

pub const MODEL_EXTENSION: &str = "hlmodel";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSet {
    /// Every slide in the label store.
    #[default]
    All,
    /// The training slides of the current review round.
    Round,
}

/// Contents of the `--config` TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub data_root: Option<PathBuf>,
    /// Artifact path; defaults to `<root>/models/<model id>.hlmodel`.
    pub out: Option<PathBuf>,
    pub training_set: TrainingSet,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub training: TrainConfig,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            data_root: None,
            out: None,
            training_set: TrainingSet::All,
            train_fraction: 0.75,
            split_seed: 0,
            training: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML job file. Without one every setting takes its default.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainSummary {
    model_id: String,
    path: PathBuf,
    train_slides: Vec<String>,
    val_slides: Vec<String>,
    train_examples: usize,
    val_examples: usize,
    selected_epoch: usize,
    selected_val_loss: f64,
    val_accuracy: f64,
    missing_classes: Vec<String>,
}

fn training_dataset(root: &DataRoot, set: TrainingSet) -> Result<LabeledDataset> {
    let store = read_dataset(&root.dataset_dir()).with_context(|| format!("no label store under {}", root.path().display()))?;
    match set {
        TrainingSet::All => Ok(store),
        TrainingSet::Round => {
            let round = load_current_round(&root.rounds_dir())?;
            let missing: Vec<&String> = round.training_slide_ids.iter().filter(|id| store.slide(id).is_none()).collect();
            if !missing.is_empty() {
                bail!("training slides of round {} have no labels: {missing:?}", round.round_index);
            }
            Ok(LabeledDataset::from_slides(round.training_slide_ids.iter().map(|id| store.slide(id).unwrap().clone()))?)
        }
    }
}

pub struct Trained {
    pub model: ModelArtifact,
    pub path: PathBuf,
    pub validation: Evaluation,
}

pub fn train_job(root: &Path, job: &TrainJob) -> Result<Trained> {
    let root = DataRoot::new(job.data_root.as_deref().unwrap_or(root));
    let dataset = training_dataset(&root, job.training_set)?;
    let (train_set, val_set) = split_by_slide(&dataset, job.train_fraction, job.split_seed)?;
    let ids: BTreeSet<String> = dataset.slide_ids().into_iter().collect();
    let embeddings = context::embeddings_for(&root, &ids)?;
    let train_examples = dataset_examples(&train_set, &embeddings)?;
    let val_examples = dataset_examples(&val_set, &embeddings)?;
    let model = fit(&train_examples, &val_examples, &job.training)?;
    let validation = evaluate(&model, &val_examples)?;
    let path = job.out.clone().unwrap_or_else(|| root.models_dir().join(format!("{}.{MODEL_EXTENSION}", model.id)));
    save_artifact(&path, &model)?;
    Ok(Trained { model, path, validation })
}

pub fn train(root: &Path, args: TrainArgs) -> Result<()> {
    let job: TrainJob = match &args.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)
            .with_context(|| format!("invalid job file {}", p.display()))?,
        None => TrainJob::default(),
    };
    let Trained { model, path, validation } = train_job(root, &job)?;
    let r = &model.report;
    print_json(&TrainSummary {
        model_id: model.id.clone(),
        path,
        train_slides: r.train_slides.clone(),
        val_slides: r.val_slides.clone(),
        train_examples: r.train_examples,
        val_examples: r.val_examples,
        selected_epoch: r.selected_epoch,
        selected_val_loss: r.selected_val_loss(),
        val_accuracy: validation.accuracy,
        missing_classes: r.missing_classes.iter().map(|c| c.name().to_string()).collect(),
    })
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Slide ids (repeat or comma-separate).
    #[arg(long, required = true)]
    slide: Vec<String>,
    /// Also write GeoJSON, heatmaps and an overlay under `<root>/exports`.
    #[arg(long)]
    export: bool,
}

pub fn predict(root: &Path, args: PredictArgs) -> Result<()> {
    let root = DataRoot::new(root);
    let model = load_artifact(&args.model)?;
    let mut reports = Vec::new();
    for id in context::id_list(&args.slide) {
        let embeddings = context::embeddings(&root, &id)?;
        let map = predict_map(&model, &id, &embeddings)?;
        write_prediction_map(&root.prediction_file(&id), &map)?;
        if args.export {
            export_slide(&root, &id, &root.path().join("exports"), 1024)?;
        }
        reports.push(SlideReport::from_map(&map));
    }
    print_json(&serde_json::json!({ "model_id": model.id, "reports": reports }))
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, required = true)]
    slide: Vec<String>,
    /// Defaults to `<root>/exports`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Longest edge of the overlay thumbnail.
    #[arg(long, default_value_t = 1024)]
    overlay_size: u32,
}

/// Writes the map files of one slide into `<dir>/<slide>/`.
pub fn export_slide(root: &DataRoot, slide_id: &str, dir: &Path, overlay_size: u32) -> Result<Vec<PathBuf>> {
    let slide = context::slide(root, slide_id)?;
    let grid = context::grid(root, slide_id)?;
    let map = context::predictions(root, slide_id)?;
    let dir = dir.join(slide_id);
    let colors = ColorTable::default();
    let mut written = viz::export_map_files(&dir, &map, &grid, &slide, &colors)?;
    match context::raster(&slide) {
        Some(source) => {
            let img = viz::export_overlay_thumbnail(&source, &slide, &grid, &map, overlay_size, &colors)?;
            let path = viz::overlay_path(&dir, slide_id);
            img.save(&path)?;
            written.push(path);
        }
        None => tracing::warn!(slide = slide_id, "slide pixels unavailable; overlay skipped"),
    }
    Ok(written)
}

pub fn export(root: &Path, args: ExportArgs) -> Result<()> {
    let root = DataRoot::new(root);
    let out = args.out.unwrap_or_else(|| root.path().join("exports"));
    let mut written = Vec::new();
    for id in context::id_list(&args.slide) {
        written.extend(export_slide(&root, &id, &out, args.overlay_size)?);
    }
    print_json(&written)
}
