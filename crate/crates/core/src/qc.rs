//! Slide quality control from prediction maps: tile-resolution foreground
//! masks, Dice against ground truth, filtered MIL bag manifests and
//! accuracy on externally labeled datasets through a class mapping.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::class::{TissueClass, CLASS_COUNT};
use crate::classifier::PredictionMap;
use crate::tiler::{tile_region, SlideRef, TileAddress, TileGrid};

#[derive(Debug, thiserror::Error)]
pub enum QcError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("unknown bag strategy `{0}` (expected All, QC or QCFat-)")]
    UnknownStrategy(String),
    #[error("the label mapping does not cover {0:?}")]
    IncompleteMapping(Vec<String>),
    #[error("mask file {path}: {reason}")]
    MaskFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Binary tile-resolution mask, 1 = foreground tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForegroundMask {
    pub slide_id: String,
    pub rows: u32,
    pub cols: u32,
    pub working_mpp: f64,
    #[serde(skip)]
    pub values: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(slide_id: impl Into<String>, rows: u32, cols: u32, working_mpp: f64, values: Vec<bool>) -> Result<Self, QcError> {
        if values.len() != rows as usize * cols as usize {
            return Err(QcError::Validation(format!("{} values for a {rows}x{cols} mask", values.len())));
        }
        Ok(Self { slide_id: slide_id.into(), rows, cols, working_mpp, values })
    }

    pub fn filled(slide_id: impl Into<String>, rows: u32, cols: u32, working_mpp: f64, value: bool) -> Self {
        Self { slide_id: slide_id.into(), rows, cols, working_mpp, values: vec![value; rows as usize * cols as usize] }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.rows, self.cols)
    }

    pub fn get(&self, addr: TileAddress) -> bool {
        self.values[addr.row as usize * self.cols as usize + addr.col as usize]
    }

    pub fn set(&mut self, addr: TileAddress, value: bool) {
        let i = addr.row as usize * self.cols as usize + addr.col as usize;
        self.values[i] = value;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }
}

/// Tile is 0 when white-filtered or predicted Artifact, 1 otherwise.
pub fn predictions_to_foreground_mask(pmap: &PredictionMap, grid: &TileGrid) -> Result<ForegroundMask, QcError> {
    if pmap.slide_id != grid.slide_id {
        return Err(QcError::Validation(format!("prediction map `{}` does not belong to grid `{}`", pmap.slide_id, grid.slide_id)));
    }
    let by_addr = pmap.by_address();
    if let Some(a) = by_addr.keys().find(|a| !grid.contains(**a)) {
        return Err(QcError::Validation(format!("prediction for {a} lies outside the {}x{} grid", grid.rows, grid.cols)));
    }
    let mut mask = ForegroundMask::filled(&grid.slide_id, grid.rows, grid.cols, grid.working_mpp, false);
    let mut uncovered = 0usize;
    for addr in grid.foreground() {
        match by_addr.get(&addr) {
            Some(p) => mask.set(addr, p.class != TissueClass::Artifact),
            None => uncovered += 1,
        }
    }
    if uncovered > 0 {
        return Err(QcError::Validation(format!("{uncovered} foreground tiles of `{}` have no prediction", grid.slide_id)));
    }
    Ok(mask)
}

/// 2|a∧b| / (|a| + |b|); two empty masks score 1.
pub fn dice(a: &ForegroundMask, b: &ForegroundMask) -> Result<f64, QcError> {
    if a.dims() != b.dims() {
        return Err(QcError::DimensionMismatch(a.dims(), b.dims()));
    }
    let (mut both, mut total) = (0u64, 0u64);
    for (x, y) in a.values.iter().zip(&b.values) {
        both += (*x && *y) as u64;
        total += *x as u64 + *y as u64;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

/// Reduces a pixel mask (nonzero = foreground) to the grid. A tile is
/// foreground when at least half the mask pixels under it are. The mask may
/// be any size; it is assumed to cover the whole slide.
pub fn downsample_pixel_mask(mask: &GrayImage, slide: &SlideRef, grid: &TileGrid) -> ForegroundMask {
    let (mw, mh) = mask.dimensions();
    let sx = mw as f64 / slide.width_px as f64;
    let sy = mh as f64 / slide.height_px as f64;
    let mut out = ForegroundMask::filled(&grid.slide_id, grid.rows, grid.cols, grid.working_mpp, false);
    for addr in grid.addresses() {
        let r = tile_region(slide, grid, addr);
        let x0 = ((r.x as f64 * sx).round() as u32).min(mw);
        let x1 = (((r.x + r.width) as f64 * sx).round() as u32).min(mw);
        let y0 = ((r.y as f64 * sy).round() as u32).min(mh);
        let y1 = (((r.y + r.height) as f64 * sy).round() as u32).min(mh);
        let area = (x1 - x0) as u64 * (y1 - y0) as u64;
        if area == 0 {
            continue;
        }
        let mut fg = 0u64;
        for y in y0..y1 {
            for x in x0..x1 {
                fg += (mask.get_pixel(x, y).0[0] != 0) as u64;
            }
        }
        out.set(addr, 2 * fg >= area);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideQc {
    pub slide_id: String,
    pub dice: f64,
    pub comparator_dice: Option<f64>,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QcReport {
    pub slides: Vec<SlideQc>,
    /// `None` when no slide could be scored.
    pub mean_dice: Option<f64>,
    pub comparator_mean_dice: Option<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Slides present on one side only.
    pub missing: Vec<String>,
    /// Scored slides the comparator has no mask for.
    pub missing_comparator: Vec<String>,
}

fn index_masks<'a>(masks: &'a [ForegroundMask], what: &str) -> Result<BTreeMap<&'a str, &'a ForegroundMask>, QcError> {
    let mut out = BTreeMap::new();
    for m in masks {
        if out.insert(m.slide_id.as_str(), m).is_some() {
            return Err(QcError::Validation(format!("duplicate {what} mask for `{}`", m.slide_id)));
        }
    }
    Ok(out)
}

/// Scores `predicted` against `truth` per slide, and against a comparator
/// method when given. Unmatched slides are listed and left out of the mean.
pub fn evaluate_qc(
    predicted: &[ForegroundMask],
    truth: &[ForegroundMask],
    comparator: Option<&[ForegroundMask]>,
) -> Result<QcReport, QcError> {
    let pred = index_masks(predicted, "predicted")?;
    let gt = index_masks(truth, "ground-truth")?;
    let cmp = comparator.map(|c| index_masks(c, "comparator")).transpose()?;
    let mut report = QcReport::default();
    let ids: BTreeSet<&str> = pred.keys().chain(gt.keys()).copied().collect();
    for id in ids {
        let (Some(p), Some(t)) = (pred.get(id), gt.get(id)) else {
            report.missing.push(id.to_string());
            continue;
        };
        let d = dice(p, t)?;
        let mut row = SlideQc { slide_id: id.to_string(), dice: d, comparator_dice: None, outcome: None };
        if let Some(cmp) = &cmp {
            match cmp.get(id) {
                Some(c) => {
                    let cd = dice(c, t)?;
                    let outcome = match d.partial_cmp(&cd) {
                        Some(std::cmp::Ordering::Greater) => Outcome::Win,
                        Some(std::cmp::Ordering::Less) => Outcome::Loss,
                        _ => Outcome::Tie,
                    };
                    match outcome {
                        Outcome::Win => report.wins += 1,
                        Outcome::Loss => report.losses += 1,
                        Outcome::Tie => report.ties += 1,
                    }
                    row.comparator_dice = Some(cd);
                    row.outcome = Some(outcome);
                }
                None => report.missing_comparator.push(id.to_string()),
            }
        }
        report.slides.push(row);
    }
    if !report.missing.is_empty() {
        tracing::warn!(missing = ?report.missing, "slides without a matching mask were excluded from the mean");
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    report.mean_dice = mean(report.slides.iter().map(|s| s.dice).collect());
    report.comparator_mean_dice = mean(report.slides.iter().filter_map(|s| s.comparator_dice).collect());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BagStrategy {
    All,
    Qc,
    QcFatMinus,
}

impl BagStrategy {
    pub const ALL: [BagStrategy; 3] = [BagStrategy::All, BagStrategy::Qc, BagStrategy::QcFatMinus];

    pub fn name(self) -> &'static str {
        match self {
            BagStrategy::All => "All",
            BagStrategy::Qc => "QC",
            BagStrategy::QcFatMinus => "QCFat-",
        }
    }

    fn excludes(self, class: TissueClass) -> bool {
        match self {
            BagStrategy::All => false,
            BagStrategy::Qc => class == TissueClass::Artifact,
            BagStrategy::QcFatMinus => matches!(class, TissueClass::Artifact | TissueClass::Adipose),
        }
    }
}

impl fmt::Display for BagStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BagStrategy {
    type Err = QcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(BagStrategy::All),
            "qc" => Ok(BagStrategy::Qc),
            "qcfat-" | "qc-fat-" | "qcfatminus" => Ok(BagStrategy::QcFatMinus),
            _ => Err(QcError::UnknownStrategy(s.to_string())),
        }
    }
}

impl Serialize for BagStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for BagStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub artifact: usize,
    pub adipose: usize,
}

impl ExclusionCounts {
    pub fn total(&self) -> usize {
        self.artifact + self.adipose
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagManifest {
    pub slide_id: String,
    pub strategy: BagStrategy,
    pub included: Vec<TileAddress>,
    pub excluded: ExclusionCounts,
}

/// All keeps every predicted tile; QC drops argmax-Artifact tiles; QCFat-
/// drops Artifact and Adipose.
pub fn filter_bag(pmap: &PredictionMap, strategy: BagStrategy) -> BagManifest {
    let mut included = Vec::new();
    let mut excluded = ExclusionCounts::default();
    for p in &pmap.predictions {
        if strategy.excludes(p.class) {
            match p.class {
                TissueClass::Artifact => excluded.artifact += 1,
                _ => excluded.adipose += 1,
            }
        } else {
            included.push(p.address);
        }
    }
    included.sort();
    if included.is_empty() {
        tracing::warn!(slide = %pmap.slide_id, strategy = %strategy, "bag is empty after filtering");
    }
    BagManifest { slide_id: pmap.slide_id.clone(), strategy, included, excluded }
}

pub fn write_bag_manifests(path: &Path, manifests: &[BagManifest]) -> Result<(), QcError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for m in manifests {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bag_manifests(path: &Path) -> Result<Vec<BagManifest>, QcError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// External dataset label -> set of acceptable internal classes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMapping(pub BTreeMap<String, BTreeSet<TissueClass>>);

impl LabelMapping {
    pub fn insert(&mut self, external: &str, classes: impl IntoIterator<Item = TissueClass>) {
        self.0.entry(external.to_string()).or_default().extend(classes);
    }

    pub fn get(&self, external: &str) -> Option<&BTreeSet<TissueClass>> {
        self.0.get(external)
    }

    /// The nine-class colorectal tissue benchmark.
    pub fn crc() -> Self {
        use TissueClass::*;
        let mut m = Self::default();
        for (ext, class) in [
            ("ADI", Adipose),
            ("NORM", Epithelium),
            ("BACK", Artifact),
            ("LYM", Lymphocytes),
            ("TUM", Epithelium),
            ("MUC", Miscellaneous),
            ("DEB", Miscellaneous),
            ("STR", Stroma),
            ("MUS", Stroma),
        ] {
            m.insert(ext, [class]);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedAccuracy {
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    /// External label -> counts of predicted internal classes.
    pub confusion: BTreeMap<String, [u64; CLASS_COUNT]>,
}

/// A prediction is correct when it lies in the mapped set of its external label.
pub fn mapped_accuracy<'a>(
    items: impl IntoIterator<Item = (&'a str, TissueClass)>,
    mapping: &LabelMapping,
) -> Result<MappedAccuracy, QcError> {
    let items: Vec<(&str, TissueClass)> = items.into_iter().collect();
    let unmapped: BTreeSet<String> = items.iter().filter(|(e, _)| mapping.get(e).is_none()).map(|(e, _)| e.to_string()).collect();
    if !unmapped.is_empty() {
        return Err(QcError::IncompleteMapping(unmapped.into_iter().collect()));
    }
    let mut confusion: BTreeMap<String, [u64; CLASS_COUNT]> = BTreeMap::new();
    let mut correct = 0;
    let cache: HashMap<&str, &BTreeSet<TissueClass>> = items.iter().map(|(e, _)| (*e, mapping.get(e).unwrap())).collect();
    for (ext, pred) in &items {
        confusion.entry(ext.to_string()).or_default()[pred.index()] += 1;
        correct += cache[ext].contains(pred) as u64;
    }
    let total = items.len() as u64;
    Ok(MappedAccuracy { accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 }, correct, total, confusion })
}

pub fn mask_png_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}_mask.png"))
}

pub fn mask_sidecar_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}_mask.json"))
}

/// Writes `<slide>_mask.png` (1-bit grayscale, one pixel per tile) and the
/// `<slide>_mask.json` sidecar.
pub fn write_mask(dir: &Path, mask: &ForegroundMask) -> Result<PathBuf, QcError> {
    std::fs::create_dir_all(dir)?;
    let path = mask_png_path(dir, &mask.slide_id);
    let stride = (mask.cols as usize).div_ceil(8);
    let mut packed = vec![0u8; stride * mask.rows as usize];
    for r in 0..mask.rows as usize {
        for c in 0..mask.cols as usize {
            if mask.values[r * mask.cols as usize + c] {
                packed[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    let png_err = |e: png::EncodingError| QcError::MaskFile { path: path.clone(), reason: e.to_string() };
    let mut encoder = png::Encoder::new(BufWriter::new(File::create(&path)?), mask.cols, mask.rows);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&packed).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    std::fs::write(mask_sidecar_path(dir, &mask.slide_id), serde_json::to_vec_pretty(mask)?)?;
    Ok(path)
}

pub fn read_mask(dir: &Path, slide_id: &str) -> Result<ForegroundMask, QcError> {
    let meta: ForegroundMask = serde_json::from_slice(&std::fs::read(mask_sidecar_path(dir, slide_id))?)?;
    let path = mask_png_path(dir, slide_id);
    let fail = |reason: String| QcError::MaskFile { path: path.clone(), reason };
    let mut decoder = png::Decoder::new(BufReader::new(File::open(&path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(fail("expected a 1-bit grayscale image".into()));
    }
    if (info.height, info.width) != (meta.rows, meta.cols) {
        return Err(fail(format!("image is {}x{} but the sidecar says {}x{}", info.height, info.width, meta.rows, meta.cols)));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| fail("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let stride = frame.line_size;
    let mut values = Vec::with_capacity(meta.rows as usize * meta.cols as usize);
    for r in 0..meta.rows as usize {
        for c in 0..meta.cols as usize {
            values.push(buf[r * stride + c / 8] & (0x80 >> (c % 8)) != 0);
        }
    }
    ForegroundMask::new(meta.slide_id, meta.rows, meta.cols, meta.working_mpp, values)
}

#[derive(Serialize)]
struct ReportRow<'a> {
    slide_id: &'a str,
    dice: f64,
    comparator_dice: Option<f64>,
    outcome: Option<Outcome>,
}

/// Writes `<stem>.json` and `<stem>.csv`.
pub fn write_qc_report(dir: &Path, stem: &str, report: &QcReport) -> Result<(PathBuf, PathBuf), QcError> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, serde_json::to_vec_pretty(report)?)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for s in &report.slides {
        w.serialize(ReportRow { slide_id: &s.slide_id, dice: s.dice, comparator_dice: s.comparator_dice, outcome: s.outcome })?;
    }
    w.flush()?;
    Ok((json, csv_path))
}
