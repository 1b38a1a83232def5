//! Six-class patch classifier.
//!
//! The baseline backend is multinomial logistic regression over embedder
//! features, standardised with training-set statistics. Training records
//! per-epoch train/validation cross-entropy and keeps the parameters of the
//! epoch with the lowest validation loss.

mod artifact;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{TissueClass, CLASS_COUNT};
use crate::embedder::Embedding;
use crate::labels::{LabeledDataset, LabeledSlide};
use crate::tiler::TileAddress;

pub use artifact::{load_artifact, save_artifact};
pub use metrics::{evaluate, evaluate_predictions, Evaluation};

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("slides {0:?} appear in both the training and validation sets")]
    DataLeak(Vec<String>),
    #[error("classifier configuration: {0}")]
    Configuration(String),
    #[error("feature dimension {got} does not match the model's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backend `{0}` is not available in this build")]
    BackendUnavailable(String),
    #[error("slide `{slide}` has {missing} labeled tiles without embeddings")]
    MissingEmbeddings { slide: String, missing: usize },
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Baseline,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
    GradientDescent { learning_rate: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { learning_rate: 0.02, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: Optimizer,
    /// L2 penalty on the weights (not the biases).
    pub weight_decay: f64,
    pub seed: u64,
    pub backend: BackendKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 60,
            optimizer: Optimizer::default(),
            weight_decay: 1e-4,
            seed: 0,
            backend: BackendKind::Baseline,
        }
    }
}

/// A feature vector with its label and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub slide_id: String,
    pub address: TileAddress,
    pub features: Vec<f64>,
    pub class: TissueClass,
}

/// Joins a labeled slide with its embeddings. Every labeled tile must have one.
pub fn slide_examples(slide: &LabeledSlide, embeddings: &[Embedding]) -> Result<Vec<LabeledExample>, ClassifierError> {
    let by_address: BTreeMap<TileAddress, &Embedding> = embeddings.iter().map(|e| (e.address, e)).collect();
    let mut out = Vec::with_capacity(slide.records.len());
    let mut missing = 0;
    for (addr, class) in &slide.records {
        match by_address.get(addr) {
            Some(e) => out.push(LabeledExample {
                slide_id: slide.slide_id.clone(),
                address: *addr,
                features: e.vector.clone(),
                class: *class,
            }),
            None => missing += 1,
        }
    }
    if missing > 0 {
        return Err(ClassifierError::MissingEmbeddings { slide: slide.slide_id.clone(), missing });
    }
    Ok(out)
}

pub fn dataset_examples(
    dataset: &LabeledDataset,
    embeddings: &BTreeMap<String, Vec<Embedding>>,
) -> Result<Vec<LabeledExample>, ClassifierError> {
    let mut out = Vec::new();
    for slide in dataset.slides() {
        let emb = embeddings.get(&slide.slide_id).map(Vec::as_slice).unwrap_or(&[]);
        out.extend(slide_examples(slide, emb)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    /// 1-based epoch whose parameters the artifact holds.
    pub selected_epoch: usize,
    pub missing_classes: Vec<TissueClass>,
    pub train_slides: Vec<String>,
    pub val_slides: Vec<String>,
    pub train_examples: usize,
    pub val_examples: usize,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn selected_val_loss(&self) -> f64 {
        self.epochs[self.selected_epoch - 1].val_loss
    }
}

/// Index (1-based) of the smallest loss; the earliest wins ties.
pub fn select_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Softmax-regression parameters. Inputs are standardised with `mean` and
/// `scale` before the affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weights: Vec<[f64; CLASS_COUNT]>,
    pub bias: [f64; CLASS_COUNT],
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearParams {
    fn zeros(mean: Vec<f64>, scale: Vec<f64>) -> Self {
        Self { weights: vec![[0.0; CLASS_COUNT]; mean.len()], bias: [0.0; CLASS_COUNT], mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logits_standardized(&self, z: &[f64]) -> [f64; CLASS_COUNT] {
        let mut out = self.bias;
        for (zj, w) in z.iter().zip(&self.weights) {
            for c in 0..CLASS_COUNT {
                out[c] += zj * w[c];
            }
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> [f64; CLASS_COUNT] {
        self.logits_standardized(&self.standardize(x))
    }
}

pub fn softmax(logits: &[f64; CLASS_COUNT]) -> [f64; CLASS_COUNT] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; CLASS_COUNT];
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    out
}

/// Highest-probability class, lowest index on ties.
pub fn argmax(probabilities: &[f64; CLASS_COUNT]) -> TissueClass {
    let mut best = 0;
    for i in 1..CLASS_COUNT {
        if probabilities[i] > probabilities[best] {
            best = i;
        }
    }
    TissueClass::ALL[best]
}

/// A trained model plus everything needed to reproduce its predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub id: String,
    pub backend: String,
    pub class_order: Vec<TissueClass>,
    pub params: LinearParams,
    pub report: TrainReport,
}

impl ModelArtifact {
    pub fn feature_dim(&self) -> usize {
        self.params.dim()
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<[f64; CLASS_COUNT], ClassifierError> {
        if features.len() != self.feature_dim() {
            return Err(ClassifierError::DimensionMismatch { expected: self.feature_dim(), got: features.len() });
        }
        Ok(softmax(&self.params.logits(features)))
    }

    /// Mean cross-entropy over `examples`.
    pub fn loss(&self, examples: &[LabeledExample]) -> Result<f64, ClassifierError> {
        let mut total = 0.0;
        for e in examples {
            let p = self.probabilities(&e.features)?;
            total -= p[e.class.index()].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / examples.len().max(1) as f64)
    }
}

struct AdamState {
    m_w: Vec<[f64; CLASS_COUNT]>,
    v_w: Vec<[f64; CLASS_COUNT]>,
    m_b: [f64; CLASS_COUNT],
    v_b: [f64; CLASS_COUNT],
    step: i32,
}

fn cross_entropy(params: &LinearParams, standardized: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in standardized.iter().zip(labels) {
        let p = softmax(&params.logits_standardized(z));
        total -= p[y].max(f64::MIN_POSITIVE).ln();
    }
    total / standardized.len() as f64
}

fn validate_sets(train: &[LabeledExample], val: &[LabeledExample], config: &TrainConfig) -> Result<usize, ClassifierError> {
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(ClassifierError::Configuration("batch_size and max_epochs must be at least 1".into()));
    }
    let first = train.first().ok_or(ClassifierError::EmptySet("training"))?;
    if val.is_empty() {
        return Err(ClassifierError::EmptySet("validation"));
    }
    let dim = first.features.len();
    if let Some(e) = train.iter().chain(val).find(|e| e.features.len() != dim) {
        return Err(ClassifierError::DimensionMismatch { expected: dim, got: e.features.len() });
    }
    let train_slides: BTreeSet<&str> = train.iter().map(|e| e.slide_id.as_str()).collect();
    let leaked: BTreeSet<String> = val
        .iter()
        .filter(|e| train_slides.contains(e.slide_id.as_str()))
        .map(|e| e.slide_id.clone())
        .collect();
    if !leaked.is_empty() {
        return Err(ClassifierError::DataLeak(leaked.into_iter().collect()));
    }
    Ok(dim)
}

/// Trains the baseline backend. Deterministic for a given seed.
pub fn train(train: &[LabeledExample], val: &[LabeledExample], config: &TrainConfig) -> Result<ModelArtifact, ClassifierError> {
    if config.backend != BackendKind::Baseline {
        return Err(ClassifierError::BackendUnavailable("deep".into()));
    }
    let dim = validate_sets(train, val, config)?;

    let present: BTreeSet<TissueClass> = train.iter().map(|e| e.class).collect();
    let missing_classes: Vec<TissueClass> = TissueClass::ALL.into_iter().filter(|c| !present.contains(c)).collect();
    if !missing_classes.is_empty() {
        tracing::warn!(?missing_classes, "training set lacks some classes; the model cannot predict them reliably");
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for e in train {
        mean.iter_mut().zip(&e.features).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; dim];
    for e in train {
        scale.iter_mut().zip(&e.features).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let scale: Vec<f64> = scale.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();

    let mut params = LinearParams::zeros(mean, scale);
    let train_z: Vec<Vec<f64>> = train.iter().map(|e| params.standardize(&e.features)).collect();
    let train_y: Vec<usize> = train.iter().map(|e| e.class.index()).collect();
    let val_z: Vec<Vec<f64>> = val.iter().map(|e| params.standardize(&e.features)).collect();
    let val_y: Vec<usize> = val.iter().map(|e| e.class.index()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = AdamState {
        m_w: vec![[0.0; CLASS_COUNT]; dim],
        v_w: vec![[0.0; CLASS_COUNT]; dim],
        m_b: [0.0; CLASS_COUNT],
        v_b: [0.0; CLASS_COUNT],
        step: 0,
    };
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, LinearParams)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad_w = vec![[0.0; CLASS_COUNT]; dim];
            let mut grad_b = [0.0; CLASS_COUNT];
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let z = &train_z[i];
                let mut p = softmax(&params.logits_standardized(z));
                p[train_y[i]] -= 1.0;
                for c in 0..CLASS_COUNT {
                    grad_b[c] += p[c] * inv;
                }
                for (gw, zj) in grad_w.iter_mut().zip(z) {
                    for c in 0..CLASS_COUNT {
                        gw[c] += p[c] * zj * inv;
                    }
                }
            }
            for (gw, w) in grad_w.iter_mut().zip(&params.weights) {
                for c in 0..CLASS_COUNT {
                    gw[c] += config.weight_decay * w[c];
                }
            }
            apply_step(&mut params, &grad_w, &grad_b, &config.optimizer, &mut adam);
        }
        let train_loss = cross_entropy(&params, &train_z, &train_y);
        let val_loss = cross_entropy(&params, &val_z, &val_y);
        epochs.push(EpochLoss { epoch, train_loss, val_loss });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
        }
    }

    let losses: Vec<f64> = epochs.iter().map(|e| e.val_loss).collect();
    let selected_epoch = select_epoch(&losses).expect("at least one epoch");
    let (_, params) = best.expect("at least one epoch");
    let slide_set = |xs: &[LabeledExample]| xs.iter().map(|e| e.slide_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let report = TrainReport {
        epochs,
        selected_epoch,
        missing_classes,
        train_slides: slide_set(train),
        val_slides: slide_set(val),
        train_examples: train.len(),
        val_examples: val.len(),
        config: config.clone(),
    };
    Ok(ModelArtifact {
        id: format!("baseline-{:016x}", params_fingerprint(&params)),
        backend: "baseline".into(),
        class_order: TissueClass::ALL.to_vec(),
        params,
        report,
    })
}

fn apply_step(
    params: &mut LinearParams,
    grad_w: &[[f64; CLASS_COUNT]],
    grad_b: &[f64; CLASS_COUNT],
    optimizer: &Optimizer,
    state: &mut AdamState,
) {
    match *optimizer {
        Optimizer::GradientDescent { learning_rate } => {
            for (w, g) in params.weights.iter_mut().zip(grad_w) {
                for c in 0..CLASS_COUNT {
                    w[c] -= learning_rate * g[c];
                }
            }
            for c in 0..CLASS_COUNT {
                params.bias[c] -= learning_rate * grad_b[c];
            }
        }
        Optimizer::Adam { learning_rate, beta1, beta2, epsilon } => {
            state.step += 1;
            let c1 = 1.0 - beta1.powi(state.step);
            let c2 = 1.0 - beta2.powi(state.step);
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            };
            for j in 0..grad_w.len() {
                for c in 0..CLASS_COUNT {
                    update(&mut params.weights[j][c], grad_w[j][c], &mut state.m_w[j][c], &mut state.v_w[j][c]);
                }
            }
            for c in 0..CLASS_COUNT {
                update(&mut params.bias[c], grad_b[c], &mut state.m_b[c], &mut state.v_b[c]);
            }
        }
    }
}

fn params_fingerprint(params: &LinearParams) -> u64 {
    // FNV-1a over the parameter bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    params.weights.iter().flatten().for_each(|v| eat(*v));
    params.bias.iter().for_each(|v| eat(*v));
    params.mean.iter().chain(&params.scale).for_each(|v| eat(*v));
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub address: TileAddress,
    pub probabilities: [f64; CLASS_COUNT],
    pub class: TissueClass,
}

impl TilePrediction {
    pub fn new(address: TileAddress, probabilities: [f64; CLASS_COUNT]) -> Self {
        Self { address, class: argmax(&probabilities), probabilities }
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.class.index()]
    }
}

/// Class probabilities for the foreground tiles of one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMap {
    pub slide_id: String,
    pub predictions: Vec<TilePrediction>,
}

impl PredictionMap {
    pub fn get(&self, addr: TileAddress) -> Option<&TilePrediction> {
        self.predictions.iter().find(|p| p.address == addr)
    }

    pub fn by_address(&self) -> BTreeMap<TileAddress, &TilePrediction> {
        self.predictions.iter().map(|p| (p.address, p)).collect()
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

pub fn predict(model: &ModelArtifact, embeddings: &[Embedding]) -> Result<Vec<TilePrediction>, ClassifierError> {
    embeddings
        .iter()
        .map(|e| model.probabilities(&e.vector).map(|p| TilePrediction::new(e.address, p)))
        .collect()
}

pub fn predict_map(model: &ModelArtifact, slide_id: &str, embeddings: &[Embedding]) -> Result<PredictionMap, ClassifierError> {
    let mut predictions = predict(model, embeddings)?;
    predictions.sort_by_key(|p| p.address);
    Ok(PredictionMap { slide_id: slide_id.to_string(), predictions })
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    slide_id: String,
    row: u32,
    col: u32,
    class: TissueClass,
    probabilities: [f64; CLASS_COUNT],
}

pub fn write_prediction_map(path: &Path, map: &PredictionMap) -> Result<(), ClassifierError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for p in &map.predictions {
        let line = PredictionLine {
            slide_id: map.slide_id.clone(),
            row: p.address.row,
            col: p.address.col,
            class: p.class,
            probabilities: p.probabilities,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a per-slide prediction file. An empty file yields an empty map
/// named `slide_id`.
pub fn read_prediction_map(path: &Path, slide_id: &str) -> Result<PredictionMap, ClassifierError> {
    let mut predictions = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: PredictionLine = serde_json::from_str(&line)?;
        if l.slide_id != slide_id {
            return Err(ClassifierError::Artifact(format!("prediction for `{}` in the file of `{slide_id}`", l.slide_id)));
        }
        predictions.push(TilePrediction { address: TileAddress::new(l.row, l.col), probabilities: l.probabilities, class: l.class });
    }
    Ok(PredictionMap { slide_id: slide_id.to_string(), predictions })
}
