//! Labeled patch datasets: per-slide results of annotation sessions, merged
//! across rounds and split into train/validation sets at slide granularity.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{ClassCounts, TissueClass};
use crate::event::Timestamp;
use crate::tiler::TileAddress;

pub const LABELS_FILE: &str = "labels.jsonl";
pub const DISCARDED_FILE: &str = "discarded.jsonl";
pub const SUMMARY_FILE: &str = "dataset.json";

#[derive(Debug, thiserror::Error)]
pub enum LabelStoreError {
    #[error("slide `{slide_id}` was finalized twice at {at:?} with different labels")]
    MergeConflict { slide_id: String, at: Timestamp },
    #[error("need at least 2 slides to split, have {0}")]
    CannotSplit(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("slide `{0}` has tiles that are both labeled and discarded")]
    Overlap(String),
    #[error("dataset store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    HeterogeneousAfterRecluster,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub session_id: String,
    pub annotator: String,
    pub round_started: Vec<Timestamp>,
    pub finalized_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSlide {
    pub slide_id: String,
    #[serde(with = "address_map")]
    pub records: BTreeMap<TileAddress, TissueClass>,
    #[serde(with = "address_map")]
    pub discarded: BTreeMap<TileAddress, DiscardReason>,
    pub provenance: Provenance,
}

impl LabeledSlide {
    pub fn pool_size(&self) -> usize {
        self.records.len() + self.discarded.len()
    }

    pub fn discard_fraction(&self) -> f64 {
        match self.pool_size() {
            0 => 0.0,
            n => self.discarded.len() as f64 / n as f64,
        }
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        self.records.values().for_each(|c| counts.add(*c));
        counts
    }

    fn validate(&self) -> Result<(), LabelStoreError> {
        if self.records.keys().any(|a| self.discarded.contains_key(a)) {
            return Err(LabelStoreError::Overlap(self.slide_id.clone()));
        }
        Ok(())
    }
}

/// A newer annotation of a slide replacing an older one during merge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supersession {
    pub slide_id: String,
    pub kept_session: String,
    pub kept_at: Timestamp,
    pub dropped_session: String,
    pub dropped_at: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    slides: BTreeMap<String, LabeledSlide>,
    class_counts: ClassCounts,
    #[serde(default)]
    supersessions: Vec<Supersession>,
}

impl LabeledDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a dataset, resolving repeated slide ids as [`merge`] does.
    pub fn from_slides(slides: impl IntoIterator<Item = LabeledSlide>) -> Result<Self, LabelStoreError> {
        let mut ds = Self::new();
        for slide in slides {
            ds.insert(slide)?;
        }
        Ok(ds)
    }

    fn insert(&mut self, slide: LabeledSlide) -> Result<(), LabelStoreError> {
        slide.validate()?;
        match self.slides.get(&slide.slide_id) {
            None => {}
            Some(existing) if existing == &slide => return Ok(()),
            Some(existing) => {
                let (old_at, new_at) = (existing.provenance.finalized_at, slide.provenance.finalized_at);
                if old_at == new_at {
                    return Err(LabelStoreError::MergeConflict { slide_id: slide.slide_id.clone(), at: new_at });
                }
                let (kept, dropped) = if new_at > old_at { (&slide, existing) } else { (existing, &slide) };
                tracing::info!(slide = %slide.slide_id, kept = %kept.provenance.session_id, "newer annotation supersedes older one");
                self.supersessions.push(Supersession {
                    slide_id: slide.slide_id.clone(),
                    kept_session: kept.provenance.session_id.clone(),
                    kept_at: kept.provenance.finalized_at,
                    dropped_session: dropped.provenance.session_id.clone(),
                    dropped_at: dropped.provenance.finalized_at,
                });
                if new_at < old_at {
                    return Ok(());
                }
            }
        }
        self.slides.insert(slide.slide_id.clone(), slide);
        self.class_counts = self.recount();
        Ok(())
    }

    fn recount(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for slide in self.slides.values() {
            counts += slide.class_counts();
        }
        counts
    }

    pub fn slides(&self) -> impl Iterator<Item = &LabeledSlide> {
        self.slides.values()
    }

    pub fn slide(&self, slide_id: &str) -> Option<&LabeledSlide> {
        self.slides.get(slide_id)
    }

    pub fn slide_ids(&self) -> Vec<String> {
        self.slides.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    pub fn class_counts(&self) -> ClassCounts {
        self.class_counts
    }

    pub fn supersessions(&self) -> &[Supersession] {
        &self.supersessions
    }

    pub fn record_count(&self) -> u64 {
        self.slides.values().map(|s| s.records.len() as u64).sum()
    }
}

/// Unions datasets in order. A slide present more than once keeps its most
/// recently finalized annotation; the replaced one is logged.
pub fn merge<'a>(datasets: impl IntoIterator<Item = &'a LabeledDataset>) -> Result<LabeledDataset, LabelStoreError> {
    let mut out = LabeledDataset::new();
    for ds in datasets {
        out.supersessions.extend(ds.supersessions.iter().cloned());
        for slide in ds.slides.values() {
            out.insert(slide.clone())?;
        }
    }
    Ok(out)
}

/// Per-class totals over every labeled record.
pub fn class_histogram(dataset: &LabeledDataset) -> ClassCounts {
    dataset.recount()
}

/// Seeded slide-level split. The train side gets `round(fraction * n)`
/// slides, clamped so that each side keeps at least one.
pub fn split_by_slide(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), LabelStoreError> {
    let n = dataset.len();
    if n < 2 {
        return Err(LabelStoreError::CannotSplit(n));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LabelStoreError::InvalidFraction(train_fraction));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids = dataset.slide_ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ids: &[String]| {
        LabeledDataset::from_slides(ids.iter().map(|id| dataset.slides[id].clone())).expect("slides are unique")
    };
    Ok((pick(&ids[..n_train]), pick(&ids[n_train..])))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub slide_id: String,
    pub row: u32,
    pub col: u32,
    pub class: TissueClass,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardRecord {
    pub slide_id: String,
    pub row: u32,
    pub col: u32,
    pub reason: DiscardReason,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SlideSummary {
    slide_id: String,
    labeled: usize,
    discarded: usize,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DatasetSummary {
    total_records: u64,
    class_counts: BTreeMap<String, u64>,
    slides: Vec<SlideSummary>,
    supersessions: Vec<Supersession>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), LabelStoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, LabelStoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes `labels.jsonl`, `discarded.jsonl` and the `dataset.json` summary.
pub fn write_dataset(dir: &Path, dataset: &LabeledDataset) -> Result<(), LabelStoreError> {
    fs::create_dir_all(dir)?;
    write_jsonl(
        &dir.join(LABELS_FILE),
        dataset.slides().flat_map(|s| {
            s.records.iter().map(move |(a, c)| LabelRecord {
                slide_id: s.slide_id.clone(),
                row: a.row,
                col: a.col,
                class: *c,
                session_id: s.provenance.session_id.clone(),
            })
        }),
    )?;
    write_jsonl(
        &dir.join(DISCARDED_FILE),
        dataset.slides().flat_map(|s| {
            s.discarded.iter().map(move |(a, r)| DiscardRecord {
                slide_id: s.slide_id.clone(),
                row: a.row,
                col: a.col,
                reason: *r,
                session_id: s.provenance.session_id.clone(),
            })
        }),
    )?;
    let counts = dataset.class_counts();
    let summary = DatasetSummary {
        total_records: counts.total(),
        class_counts: counts.iter().map(|(c, n)| (c.name().to_string(), n)).collect(),
        slides: dataset
            .slides()
            .map(|s| SlideSummary {
                slide_id: s.slide_id.clone(),
                labeled: s.records.len(),
                discarded: s.discarded.len(),
                provenance: s.provenance.clone(),
            })
            .collect(),
        supersessions: dataset.supersessions.clone(),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<LabeledDataset, LabelStoreError> {
    let summary: DatasetSummary = serde_json::from_slice(&fs::read(dir.join(SUMMARY_FILE))?)?;
    let mut slides: BTreeMap<String, LabeledSlide> = summary
        .slides
        .iter()
        .map(|s| {
            (
                s.slide_id.clone(),
                LabeledSlide {
                    slide_id: s.slide_id.clone(),
                    records: BTreeMap::new(),
                    discarded: BTreeMap::new(),
                    provenance: s.provenance.clone(),
                },
            )
        })
        .collect();
    let unknown = |id: &str| LabelStoreError::Corrupt(format!("record for slide `{id}` missing from {SUMMARY_FILE}"));
    for r in read_jsonl::<LabelRecord>(&dir.join(LABELS_FILE))? {
        let slide = slides.get_mut(&r.slide_id).ok_or_else(|| unknown(&r.slide_id))?;
        slide.records.insert(TileAddress::new(r.row, r.col), r.class);
    }
    for r in read_jsonl::<DiscardRecord>(&dir.join(DISCARDED_FILE))? {
        let slide = slides.get_mut(&r.slide_id).ok_or_else(|| unknown(&r.slide_id))?;
        slide.discarded.insert(TileAddress::new(r.row, r.col), r.reason);
    }
    for s in &summary.slides {
        let slide = &slides[&s.slide_id];
        if slide.records.len() != s.labeled || slide.discarded.len() != s.discarded {
            return Err(LabelStoreError::Corrupt(format!("record counts for `{}` disagree with the summary", s.slide_id)));
        }
    }
    let mut ds = LabeledDataset::from_slides(slides.into_values())?;
    ds.supersessions = summary.supersessions;
    Ok(ds)
}

/// Merges one slide into the store under `dir`, creating the store if
/// needed. Re-adding an identical slide is a no-op.
pub fn upsert_slide(dir: &Path, slide: LabeledSlide) -> Result<LabeledDataset, LabelStoreError> {
    let existing = if dir.join(SUMMARY_FILE).exists() { read_dataset(dir)? } else { LabeledDataset::new() };
    let merged = merge([&existing, &LabeledDataset::from_slides([slide])?])?;
    if merged != existing {
        write_dataset(dir, &merged)?;
    }
    Ok(merged)
}

mod address_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tiler::TileAddress;

    #[derive(Serialize, Deserialize)]
    struct Entry<V> {
        row: u32,
        col: u32,
        value: V,
    }

    pub fn serialize<V: Serialize + Copy, S: Serializer>(map: &BTreeMap<TileAddress, V>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry<V>> = map.iter().map(|(a, v)| Entry { row: a.row, col: a.col, value: *v }).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<TileAddress, V>, D::Error> {
        let entries: Vec<Entry<V>> = Vec::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (TileAddress::new(e.row, e.col), e.value)).collect())
    }
}
