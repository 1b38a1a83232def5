use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Subcommand;
use serde::Serialize;

use histoloop_core::active::{
    apply_to_pool, load_current_round, rank_slides_for_review, save_round, OverlaySettings, OverlaySource, PoolSlide, RoundConfig, RoundState,
    RoundStatus, SlideFailure,
};
use histoloop_core::classifier::{load_artifact, write_prediction_map};
use histoloop_core::labels::read_dataset;
use histoloop_core::tiler::RasterSlide;
use histoloop_core::viz::ColorTable;
use histoloop_core::EventMeta;
use histoloop_service::DataRoot;

use crate::context::{self, id_list, print_json};

type OverlayInput = (RasterSlide, histoloop_core::SlideRef, histoloop_core::TileGrid);

#[derive(Debug, Subcommand)]
pub enum RoundCommand {
    /// Start round 0. Training defaults to the labeled slides; the pool to
    /// every other tiled slide.
    Init {
        #[arg(long)]
        training: Vec<String>,
        #[arg(long)]
        pool: Vec<String>,
        #[arg(long, default_value_t = RoundConfig::default().initial_training)]
        initial_training: usize,
        #[arg(long, default_value_t = RoundConfig::default().per_round)]
        per_round: usize,
    },
    /// Summary of the current round, with the advisory review order.
    Status,
    /// Predict the pool with a model and record the slide reports.
    Apply {
        #[arg(long)]
        model: PathBuf,
        /// Longest edge of the overlay thumbnails.
        #[arg(long, default_value_t = 1024)]
        overlay_size: u32,
    },
    /// Flag pool slides for annotation.
    Flag {
        #[arg(required = true)]
        slides: Vec<String>,
    },
    Unflag {
        #[arg(required = true)]
        slides: Vec<String>,
    },
    /// Move the flagged slides, annotated in the meantime, into training.
    Close,
}

#[derive(Serialize)]
struct Status<'a> {
    round_index: u32,
    status: RoundStatus,
    model_ref: Option<&'a str>,
    training: usize,
    pool: usize,
    flagged: &'a BTreeSet<String>,
    review_order: Vec<ReviewRow<'a>>,
}

#[derive(Serialize)]
struct ReviewRow<'a> {
    slide_id: &'a str,
    confidence: f64,
    tile_count: usize,
    flagged: bool,
}

fn status(round: &RoundState) -> Status<'_> {
    let ranking = rank_slides_for_review(&round.reports);
    Status {
        round_index: round.round_index,
        status: round.status,
        model_ref: round.model_ref.as_deref(),
        training: round.training_slide_ids.len(),
        pool: round.pool_slide_ids.len(),
        flagged: &round.flagged,
        review_order: ranking
            .iter()
            .map(|id| {
                let r = round.reports.iter().find(|r| &r.slide_id == id).expect("ranked from reports");
                ReviewRow { slide_id: &r.slide_id, confidence: r.confidence, tile_count: r.tile_count, flagged: round.is_flagged(id) }
            })
            .collect(),
    }
}

fn meta() -> EventMeta {
    EventMeta::now(std::env::var("USER").unwrap_or_else(|_| "cli".into()))
}

pub fn run(root: &Path, command: RoundCommand) -> Result<()> {
    let root = DataRoot::new(root);
    let dir = root.rounds_dir();
    match command {
        RoundCommand::Init { training, pool, initial_training, per_round } => {
            if load_current_round(&dir).is_ok() {
                bail!("rounds already exist under {}", dir.display());
            }
            let mut training: BTreeSet<String> = id_list(&training).into_iter().collect();
            if training.is_empty() {
                training = read_dataset(&root.dataset_dir())?.slide_ids().into_iter().collect();
            }
            let mut pool: BTreeSet<String> = id_list(&pool).into_iter().collect();
            if pool.is_empty() {
                pool = root.slide_ids()?.into_iter().filter(|id| !training.contains(id)).collect();
            }
            let round = RoundState::initial(training, pool, RoundConfig { initial_training, per_round }, meta())?;
            save_round(&dir, &round)?;
            print_json(&status(&round))
        }
        RoundCommand::Status => print_json(&status(&load_current_round(&dir)?)),
        RoundCommand::Apply { model, overlay_size } => {
            let mut round = load_current_round(&dir)?;
            let model = load_artifact(&model)?;
            let mut failures = Vec::new();
            let mut inputs: Vec<(String, Vec<_>, Option<OverlayInput>)> = Vec::new();
            for id in &round.pool_slide_ids {
                let loaded = context::embeddings(&root, id).and_then(|e| {
                    let slide = context::slide(&root, id)?;
                    let grid = context::grid(&root, id)?;
                    let raster = context::raster(&slide).map(|r| (r, slide, grid));
                    Ok((e, raster))
                });
                match loaded {
                    Ok((e, raster)) => inputs.push((id.clone(), e, raster)),
                    Err(e) => failures.push(SlideFailure { slide_id: id.clone(), message: format!("{e:#}") }),
                }
            }
            let pool: Vec<PoolSlide> = inputs
                .iter()
                .map(|(id, e, raster)| PoolSlide {
                    slide_id: id.clone(),
                    embeddings: e.clone(),
                    overlay: raster.as_ref().map(|(r, s, g)| OverlaySource { source: r, slide: s.clone(), grid: g.clone() }),
                })
                .collect();
            let settings = OverlaySettings { dir: root.overlays_dir(), max_dim: overlay_size, colors: ColorTable::default() };
            let mut application = if pool.is_empty() { Default::default() } else { apply_to_pool(&model, &pool, Some(&settings))? };
            for map in &application.maps {
                write_prediction_map(&root.prediction_file(&map.slide_id), map)?;
            }
            application.failures.extend(failures);
            for f in &application.failures {
                tracing::warn!(slide = %f.slide_id, "{}", f.message);
            }
            round.record_application(&model.id, &application, meta())?;
            save_round(&dir, &round)?;
            print_json(&serde_json::json!({ "status": status(&round), "failures": application.failures }))
        }
        RoundCommand::Flag { slides } => set_flags(&dir, &slides, true),
        RoundCommand::Unflag { slides } => set_flags(&dir, &slides, false),
        RoundCommand::Close => {
            let mut round = load_current_round(&dir)?;
            let store = read_dataset(&root.dataset_dir())?;
            let unlabeled: Vec<&String> = round.flagged.iter().filter(|id| store.slide(id).is_none()).collect();
            if !unlabeled.is_empty() {
                bail!("flagged slides without finalized labels: {unlabeled:?}; annotate them with `histoloop annotate` first");
            }
            let labeled: Vec<_> = round.flagged.iter().map(|id| store.slide(id).unwrap().clone()).collect();
            let next = round.close(&labeled, meta())?;
            save_round(&dir, &round)?;
            save_round(&dir, &next)?;
            print_json(&status(&next))
        }
    }
}

fn set_flags(dir: &Path, slides: &[String], flagged: bool) -> Result<()> {
    let mut round = load_current_round(dir)?;
    for id in id_list(slides) {
        round.set_flag(&id, flagged, meta())?;
    }
    save_round(dir, &round)?;
    print_json(&status(&round))
}
