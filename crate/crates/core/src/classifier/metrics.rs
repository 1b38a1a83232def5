use serde::{Deserialize, Serialize};

use super::{ClassifierError, LabeledExample, ModelArtifact};
use crate::class::{TissueClass, CLASS_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_recall: [Option<f64>; CLASS_COUNT],
    /// `confusion[truth][predicted]`.
    pub confusion: [[u64; CLASS_COUNT]; CLASS_COUNT],
    pub total: u64,
}

/// Scores `(truth, predicted)` pairs.
pub fn evaluate_predictions(pairs: impl IntoIterator<Item = (TissueClass, TissueClass)>) -> Evaluation {
    let mut confusion = [[0u64; CLASS_COUNT]; CLASS_COUNT];
    for (t, p) in pairs {
        confusion[t.index()][p.index()] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..CLASS_COUNT).map(|i| confusion[i][i]).sum();
    let per_class_recall = std::array::from_fn(|i| {
        let support: u64 = confusion[i].iter().sum();
        (support > 0).then(|| confusion[i][i] as f64 / support as f64)
    });
    Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_class_recall,
        confusion,
        total,
    }
}

pub fn evaluate(model: &ModelArtifact, examples: &[LabeledExample]) -> Result<Evaluation, ClassifierError> {
    let mut pairs = Vec::with_capacity(examples.len());
    for e in examples {
        let p = model.probabilities(&e.features)?;
        pairs.push((e.class, super::argmax(&p)));
    }
    Ok(evaluate_predictions(pairs))
}
