//! Expansion rounds: apply the current model to the unlabeled pool, let a
//! human flag poorly handled slides, and move the flagged slides into the
//! training set once they have been annotated.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::{TissueClass, CLASS_COUNT};
use crate::classifier::{predict_map, ModelArtifact, PredictionMap};
use crate::embedder::Embedding;
use crate::event::{EventMeta, Timestamp};
use crate::journal;
use crate::labels::LabeledSlide;
use crate::tiler::{SlideRef, SlideSource, TileGrid};
use crate::viz::{self, ColorTable};

pub const ROUND_JOURNAL: &str = "journal.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ActiveError {
    #[error("round {0} is closed")]
    Closed(u32),
    #[error("slide `{0}` is not in the pool")]
    NotInPool(String),
    #[error("slides {0:?} are in both the training set and the pool")]
    Overlap(Vec<String>),
    #[error("the pool is empty")]
    EmptyPool,
    #[error("labeled slides do not match the flags: missing {missing:?}, unexpected {unexpected:?}")]
    Mismatch { missing: Vec<String>, unexpected: Vec<String> },
    #[error("no round state under {0}")]
    NoRound(PathBuf),
    #[error(transparent)]
    Journal(#[from] journal::JournalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub initial_training: usize,
    pub per_round: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self { initial_training: 20, per_round: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RoundAction {
    Opened { training: usize, pool: usize },
    ModelApplied { model_ref: String, reports: usize, failures: usize },
    Flagged { slide_id: String },
    Unflagged { slide_id: String },
    Closed { added: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEvent {
    pub round: u32,
    pub at: Timestamp,
    pub actor: String,
    pub action: RoundAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideReport {
    pub slide_id: String,
    /// Fraction of foreground tiles predicted as each class.
    pub class_fractions: [f64; CLASS_COUNT],
    /// Mean over tiles of the top class probability.
    pub confidence: f64,
    pub tile_count: usize,
    /// Path of the exported overlay thumbnail, if one was written.
    pub overlay: Option<PathBuf>,
}

impl SlideReport {
    pub fn from_map(map: &PredictionMap) -> Self {
        let mut counts = [0usize; CLASS_COUNT];
        let mut confidence = 0.0;
        for p in &map.predictions {
            counts[p.class.index()] += 1;
            confidence += p.confidence();
        }
        let n = map.len().max(1) as f64;
        Self {
            slide_id: map.slide_id.clone(),
            class_fractions: counts.map(|c| c as f64 / n),
            confidence: confidence / n,
            tile_count: map.len(),
            overlay: None,
        }
    }

    pub fn fraction(&self, class: TissueClass) -> f64 {
        self.class_fractions[class.index()]
    }
}

/// What the overlay exporter needs to render one slide.
pub struct OverlaySource<'a> {
    pub source: &'a dyn SlideSource,
    pub slide: SlideRef,
    pub grid: TileGrid,
}

pub struct PoolSlide<'a> {
    pub slide_id: String,
    pub embeddings: Vec<Embedding>,
    pub overlay: Option<OverlaySource<'a>>,
}

#[derive(Debug, Clone)]
pub struct OverlaySettings {
    pub dir: PathBuf,
    pub max_dim: u32,
    pub colors: ColorTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideFailure {
    pub slide_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct PoolApplication {
    pub reports: Vec<SlideReport>,
    pub maps: Vec<PredictionMap>,
    pub failures: Vec<SlideFailure>,
}

/// Predicts every pool slide in parallel. A failing slide is recorded and
/// the rest continue. Reports come back in slide order.
pub fn apply_to_pool(
    model: &ModelArtifact,
    pool: &[PoolSlide<'_>],
    overlays: Option<&OverlaySettings>,
) -> Result<PoolApplication, ActiveError> {
    if pool.is_empty() {
        return Err(ActiveError::EmptyPool);
    }
    let results: Vec<Result<(SlideReport, PredictionMap), SlideFailure>> = pool
        .par_iter()
        .map(|slide| {
            let fail = |message: String| SlideFailure { slide_id: slide.slide_id.clone(), message };
            if slide.embeddings.is_empty() {
                return Err(fail("no foreground tiles".into()));
            }
            let map = predict_map(model, &slide.slide_id, &slide.embeddings).map_err(|e| fail(e.to_string()))?;
            let mut report = SlideReport::from_map(&map);
            if let (Some(settings), Some(o)) = (overlays, &slide.overlay) {
                let img = viz::export_overlay_thumbnail(o.source, &o.slide, &o.grid, &map, settings.max_dim, &settings.colors)
                    .map_err(|e| fail(e.to_string()))?;
                let path = viz::overlay_path(&settings.dir, &slide.slide_id);
                std::fs::create_dir_all(&settings.dir).map_err(|e| fail(e.to_string()))?;
                img.save(&path).map_err(|e| fail(e.to_string()))?;
                report.overlay = Some(path);
            }
            Ok((report, map))
        })
        .collect();
    let mut out = PoolApplication::default();
    for r in results {
        match r {
            Ok((report, map)) => {
                out.reports.push(report);
                out.maps.push(map);
            }
            Err(f) => {
                tracing::warn!(slide = %f.slide_id, error = %f.message, "pool slide failed");
                out.failures.push(f);
            }
        }
    }
    out.reports.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    out.maps.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(out)
}

/// Least confident first, ties by slide id. Advisory only.
pub fn rank_slides_for_review(reports: &[SlideReport]) -> Vec<String> {
    let mut order: Vec<&SlideReport> = reports.iter().collect();
    order.sort_by(|a, b| a.confidence.total_cmp(&b.confidence).then_with(|| a.slide_id.cmp(&b.slide_id)));
    order.into_iter().map(|r| r.slide_id.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round_index: u32,
    pub training_slide_ids: BTreeSet<String>,
    pub pool_slide_ids: BTreeSet<String>,
    pub model_ref: Option<String>,
    pub flagged: BTreeSet<String>,
    pub status: RoundStatus,
    pub reports: Vec<SlideReport>,
    pub config: RoundConfig,
    pub log: Vec<RoundEvent>,
}

impl RoundState {
    pub fn initial(
        training: impl IntoIterator<Item = String>,
        pool: impl IntoIterator<Item = String>,
        config: RoundConfig,
        meta: EventMeta,
    ) -> Result<Self, ActiveError> {
        let training: BTreeSet<String> = training.into_iter().collect();
        let pool: BTreeSet<String> = pool.into_iter().collect();
        let overlap: Vec<String> = training.intersection(&pool).cloned().collect();
        if !overlap.is_empty() {
            return Err(ActiveError::Overlap(overlap));
        }
        if training.len() != config.initial_training {
            tracing::warn!(have = training.len(), configured = config.initial_training, "initial training set size differs from configuration");
        }
        let mut state = Self {
            round_index: 0,
            training_slide_ids: training,
            pool_slide_ids: pool,
            model_ref: None,
            flagged: BTreeSet::new(),
            status: RoundStatus::Open,
            reports: Vec::new(),
            config,
            log: Vec::new(),
        };
        state.push_opened(meta);
        Ok(state)
    }

    fn push_opened(&mut self, meta: EventMeta) {
        let action = RoundAction::Opened { training: self.training_slide_ids.len(), pool: self.pool_slide_ids.len() };
        self.push(meta, action);
    }

    fn push(&mut self, meta: EventMeta, action: RoundAction) {
        self.log.push(RoundEvent { round: self.round_index, at: meta.at, actor: meta.actor, action });
    }

    fn ensure_open(&self) -> Result<(), ActiveError> {
        match self.status {
            RoundStatus::Open => Ok(()),
            RoundStatus::Closed => Err(ActiveError::Closed(self.round_index)),
        }
    }

    pub fn is_flagged(&self, slide_id: &str) -> bool {
        self.flagged.contains(slide_id)
    }

    /// Records the model applied in this round and its reports. Reports for
    /// slides outside the pool are rejected.
    pub fn record_application(&mut self, model_ref: &str, application: &PoolApplication, meta: EventMeta) -> Result<(), ActiveError> {
        self.ensure_open()?;
        if let Some(r) = application.reports.iter().find(|r| !self.pool_slide_ids.contains(&r.slide_id)) {
            return Err(ActiveError::NotInPool(r.slide_id.clone()));
        }
        self.model_ref = Some(model_ref.to_string());
        self.reports = application.reports.clone();
        let action = RoundAction::ModelApplied {
            model_ref: model_ref.to_string(),
            reports: application.reports.len(),
            failures: application.failures.len(),
        };
        self.push(meta, action);
        Ok(())
    }

    pub fn flag(&mut self, slide_id: &str, meta: EventMeta) -> Result<(), ActiveError> {
        self.set_flag(slide_id, true, meta)
    }

    pub fn unflag(&mut self, slide_id: &str, meta: EventMeta) -> Result<(), ActiveError> {
        self.set_flag(slide_id, false, meta)
    }

    /// Sets a flag. Setting it to its current value changes nothing, but the
    /// request is still logged.
    pub fn set_flag(&mut self, slide_id: &str, flagged: bool, meta: EventMeta) -> Result<(), ActiveError> {
        self.ensure_open()?;
        if !self.pool_slide_ids.contains(slide_id) {
            return Err(ActiveError::NotInPool(slide_id.to_string()));
        }
        let slide_id = slide_id.to_string();
        if flagged {
            self.flagged.insert(slide_id.clone());
            self.push(meta, RoundAction::Flagged { slide_id });
        } else {
            self.flagged.remove(&slide_id);
            self.push(meta, RoundAction::Unflagged { slide_id });
        }
        Ok(())
    }

    /// Closes this round and opens the next one. `newly_labeled` must cover
    /// exactly the flagged slides.
    pub fn close(&mut self, newly_labeled: &[LabeledSlide], meta: EventMeta) -> Result<RoundState, ActiveError> {
        self.ensure_open()?;
        let labeled: BTreeSet<String> = newly_labeled.iter().map(|s| s.slide_id.clone()).collect();
        if labeled != self.flagged {
            return Err(ActiveError::Mismatch {
                missing: self.flagged.difference(&labeled).cloned().collect(),
                unexpected: labeled.difference(&self.flagged).cloned().collect(),
            });
        }
        if self.flagged.is_empty() {
            tracing::info!(round = self.round_index, "closing round without flags; training set unchanged");
        } else if self.flagged.len() != self.config.per_round {
            tracing::warn!(flagged = self.flagged.len(), configured = self.config.per_round, "round adds a different number of slides than configured");
        }
        let added: Vec<String> = self.flagged.iter().cloned().collect();
        self.push(meta.clone(), RoundAction::Closed { added: added.clone() });
        self.status = RoundStatus::Closed;

        let mut training = self.training_slide_ids.clone();
        training.extend(added.iter().cloned());
        let pool = self.pool_slide_ids.iter().filter(|s| !self.flagged.contains(*s)).cloned().collect();
        let mut next = RoundState {
            round_index: self.round_index + 1,
            training_slide_ids: training,
            pool_slide_ids: pool,
            model_ref: None,
            flagged: BTreeSet::new(),
            status: RoundStatus::Open,
            reports: Vec::new(),
            config: self.config,
            log: Vec::new(),
        };
        next.push_opened(meta);
        Ok(next)
    }
}

fn round_file(dir: &Path, index: u32) -> PathBuf {
    dir.join(format!("round-{index:04}.json"))
}

/// Writes the round snapshot and appends its not yet journaled events.
pub fn save_round(dir: &Path, state: &RoundState) -> Result<(), ActiveError> {
    std::fs::create_dir_all(dir)?;
    let journal_path = dir.join(ROUND_JOURNAL);
    let logged = journal::read::<RoundEvent>(&journal_path)?
        .into_iter()
        .filter(|e| e.round == state.round_index)
        .count();
    for e in state.log.iter().skip(logged) {
        journal::append(&journal_path, e)?;
    }
    let tmp = dir.join(format!(".round-{:04}.tmp", state.round_index));
    std::fs::write(&tmp, serde_json::to_vec_pretty(state)?)?;
    std::fs::rename(tmp, round_file(dir, state.round_index))?;
    Ok(())
}

pub fn load_round(dir: &Path, index: u32) -> Result<RoundState, ActiveError> {
    let path = round_file(dir, index);
    match std::fs::read(&path) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ActiveError::NoRound(path)),
        Err(e) => Err(e.into()),
    }
}

/// The highest-numbered round saved under `dir`.
pub fn load_current_round(dir: &Path) -> Result<RoundState, ActiveError> {
    let mut best = None;
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(i) = name.strip_prefix("round-").and_then(|s| s.strip_suffix(".json")).and_then(|s| s.parse::<u32>().ok()) {
                best = best.max(Some(i));
            }
        }
    }
    match best {
        Some(i) => load_round(dir, i),
        None => Err(ActiveError::NoRound(dir.to_path_buf())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::TilePrediction;
    use crate::labels::Provenance;
    use crate::tiler::TileAddress;
    use proptest::prelude::*;

    fn meta() -> EventMeta {
        EventMeta::new("tester", Timestamp(0))
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:03}")).collect()
    }

    fn labeled(id: &str) -> LabeledSlide {
        LabeledSlide {
            slide_id: id.into(),
            records: Default::default(),
            discarded: Default::default(),
            provenance: Provenance { session_id: "x".into(), annotator: "a".into(), round_started: vec![], finalized_at: Timestamp(0) },
        }
    }

    fn report(id: &str, confidence: f64) -> SlideReport {
        SlideReport { slide_id: id.into(), class_fractions: [0.0; CLASS_COUNT], confidence, tile_count: 1, overlay: None }
    }

    #[test]
    fn twenty_plus_three_rounds_of_ten_reach_fifty() {
        let mut state = RoundState::initial(ids("t", 20), ids("p", 100), RoundConfig::default(), meta()).unwrap();
        for _ in 0..3 {
            let pick: Vec<String> = state.pool_slide_ids.iter().take(10).cloned().collect();
            for s in &pick {
                state.flag(s, meta()).unwrap();
            }
            let done: Vec<LabeledSlide> = pick.iter().map(|s| labeled(s)).collect();
            state = state.close(&done, meta()).unwrap();
        }
        assert_eq!(state.training_slide_ids.len(), 50);
        assert_eq!(state.pool_slide_ids.len(), 70);
        assert_eq!(state.round_index, 3);
    }

    #[test]
    fn flag_then_unflag_restores_flags_and_logs_twice() {
        let mut state = RoundState::initial(ids("t", 2), ids("p", 3), RoundConfig::default(), meta()).unwrap();
        let before = state.flagged.clone();
        let logged = state.log.len();
        state.flag("p001", meta()).unwrap();
        state.unflag("p001", meta()).unwrap();
        assert_eq!(state.flagged, before);
        assert_eq!(state.log.len(), logged + 2);
        assert!(matches!(state.flag("t000", meta()), Err(ActiveError::NotInPool(_))));
        assert!(matches!(state.flag("zzz", meta()), Err(ActiveError::NotInPool(_))));
    }

    #[test]
    fn close_requires_exactly_the_flagged_slides() {
        let mut state = RoundState::initial(ids("t", 2), ids("p", 12), RoundConfig::default(), meta()).unwrap();
        for s in ids("p", 10) {
            state.flag(&s, meta()).unwrap();
        }
        let wrong: Vec<LabeledSlide> = ids("p", 9).iter().chain(["p011".to_string()].iter()).map(|s| labeled(s)).collect();
        match state.close(&wrong, meta()) {
            Err(ActiveError::Mismatch { missing, unexpected }) => {
                assert_eq!(missing, vec!["p009"]);
                assert_eq!(unexpected, vec!["p011"]);
            }
            other => panic!("{other:?}"),
        }
        let right: Vec<LabeledSlide> = ids("p", 10).iter().map(|s| labeled(s)).collect();
        let next = state.close(&right, meta()).unwrap();
        assert_eq!(next.training_slide_ids.len(), 12);
        assert!(ids("p", 10).iter().all(|s| next.training_slide_ids.contains(s)));
        assert_eq!(state.status, RoundStatus::Closed);
        assert!(matches!(state.flag("p011", meta()), Err(ActiveError::Closed(0))));
        assert!(matches!(state.close(&[], meta()), Err(ActiveError::Closed(0))));
    }

    #[test]
    fn closing_without_flags_keeps_the_training_set() {
        let mut state = RoundState::initial(ids("t", 3), ids("p", 3), RoundConfig::default(), meta()).unwrap();
        let next = state.close(&[], meta()).unwrap();
        assert_eq!(next.training_slide_ids, state.training_slide_ids);
        assert_eq!(next.pool_slide_ids, state.pool_slide_ids);
    }

    #[test]
    fn overlapping_sets_are_rejected() {
        assert!(matches!(
            RoundState::initial(ids("a", 2), ids("a", 3), RoundConfig::default(), meta()),
            Err(ActiveError::Overlap(v)) if v.len() == 2
        ));
    }

    #[test]
    fn ranking_examples() {
        let r = [report("A", 0.9), report("B", 0.5), report("C", 0.7)];
        assert_eq!(rank_slides_for_review(&r), ["B", "C", "A"]);
        let tied = [report("z", 0.5), report("a", 0.5), report("m", 0.5)];
        assert_eq!(rank_slides_for_review(&tied), ["a", "m", "z"]);
    }

    #[test]
    fn report_fractions() {
        let mut p = [0.0; CLASS_COUNT];
        p[TissueClass::Stroma.index()] = 0.8;
        p[TissueClass::Epithelium.index()] = 0.2;
        let map = PredictionMap {
            slide_id: "s".into(),
            predictions: (0..4).map(|i| TilePrediction::new(TileAddress::new(0, i), p)).collect(),
        };
        let r = SlideReport::from_map(&map);
        assert_eq!(r.fraction(TissueClass::Stroma), 1.0);
        assert!((r.class_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((r.confidence - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rounds_persist_and_journal_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = RoundState::initial(ids("t", 1), ids("p", 2), RoundConfig::default(), meta()).unwrap();
        save_round(dir.path(), &state).unwrap();
        state.flag("p000", meta()).unwrap();
        save_round(dir.path(), &state).unwrap();
        save_round(dir.path(), &state).unwrap();
        let next = state.close(&[labeled("p000")], meta()).unwrap();
        save_round(dir.path(), &state).unwrap();
        save_round(dir.path(), &next).unwrap();
        assert_eq!(load_current_round(dir.path()).unwrap(), next);
        assert_eq!(load_round(dir.path(), 0).unwrap(), state);
        let events: Vec<RoundEvent> = journal::read(&dir.path().join(ROUND_JOURNAL)).unwrap();
        assert_eq!(events.len(), state.log.len() + next.log.len());
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force(confs in prop::collection::vec((0u8..20, 0u32..1000), 50)) {
            let reports: Vec<SlideReport> = confs.iter().enumerate()
                .map(|(i, (c, _))| report(&format!("s{i:02}"), *c as f64 / 20.0)).collect();
            let ranked = rank_slides_for_review(&reports);
            let mut oracle: Vec<(u8, String)> = confs.iter().enumerate().map(|(i, (c, _))| (*c, format!("s{i:02}"))).collect();
            oracle.sort();
            prop_assert_eq!(ranked, oracle.into_iter().map(|(_, s)| s).collect::<Vec<_>>());
        }

        #[test]
        fn training_grows_and_the_universe_is_conserved(
            rounds in prop::collection::vec(prop::collection::vec(any::<bool>(), 40), 1..6),
        ) {
            let mut state = RoundState::initial(ids("t", 5), ids("p", 40), RoundConfig::default(), meta()).unwrap();
            let universe: BTreeSet<String> = state.training_slide_ids.union(&state.pool_slide_ids).cloned().collect();
            for flags in rounds {
                let pool: Vec<String> = state.pool_slide_ids.iter().cloned().collect();
                for (s, f) in pool.iter().zip(flags) {
                    if f {
                        state.flag(s, meta()).unwrap();
                    }
                }
                let done: Vec<LabeledSlide> = state.flagged.iter().map(|s| labeled(s)).collect();
                let next = state.close(&done, meta()).unwrap();
                prop_assert!(next.training_slide_ids.is_superset(&state.training_slide_ids));
                prop_assert!(next.training_slide_ids.is_disjoint(&next.pool_slide_ids));
                let u: BTreeSet<String> = next.training_slide_ids.union(&next.pool_slide_ids).cloned().collect();
                prop_assert_eq!(&u, &universe);
                state = next;
            }
        }
    }
}
