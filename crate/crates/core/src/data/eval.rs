use serde::{Deserialize, Serialize};

use super::{examples_to_tensor, IncrementStream};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Anything that maps a batch of images to class predictions.
pub trait Predictor {
    fn predict(&mut self, images: &Tensor<f32>) -> Result<Vec<usize>>;
}

/// Accuracy after one increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub task: usize,
    pub accuracy: f64,
    /// `(class id, accuracy)` for every class seen so far.
    pub per_class: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn push(&mut self, entry: EvalEntry) {
        self.entries.push(entry);
    }

    pub fn per_increment(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.accuracy).collect()
    }

    /// Row per increment, column per class id; `None` for classes not yet seen.
    pub fn class_matrix(&self, num_classes: usize) -> Vec<Vec<Option<f64>>> {
        self.entries
            .iter()
            .map(|e| {
                let mut row = vec![None; num_classes];
                for &(c, a) in &e.per_class {
                    if c < num_classes {
                        row[c] = Some(a);
                    }
                }
                row
            })
            .collect()
    }

    pub fn average_incremental_accuracy(&self) -> Result<f64> {
        average_incremental_accuracy(&self.per_increment())
    }
}

/// Arithmetic mean of the per-increment accuracies, first increment included.
pub fn average_incremental_accuracy(per_increment: &[f64]) -> Result<f64> {
    if per_increment.is_empty() {
        return Err(Error::Argument("average of zero increments".into()));
    }
    Ok(per_increment.iter().sum::<f64>() / per_increment.len() as f64)
}

/// Accuracy over the union of test sets of every class in tasks `1..=through`.
/// The predictor receives no task identity.
pub fn single_headed_eval<P: Predictor + ?Sized>(
    predictor: &mut P,
    stream: &IncrementStream,
    through: usize,
) -> Result<EvalEntry> {
    let classes = stream.classes_through(through)?;
    let mut correct_total = 0usize;
    let mut total = 0usize;
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let examples = &stream.data.test[c];
        if examples.is_empty() {
            continue;
        }
        let mut correct = 0usize;
        for chunk in examples.chunks(512) {
            let (images, labels) = examples_to_tensor(stream.shape(), chunk)?;
            let pred = predictor.predict(&images)?;
            correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        per_class.push((c, correct as f64 / examples.len() as f64));
        correct_total += correct;
        total += examples.len();
    }
    if total == 0 {
        return Err(Error::Argument("no test examples for the evaluated classes".into()));
    }
    Ok(EvalEntry {
        task: through,
        accuracy: correct_total as f64 / total as f64,
        per_class,
    })
}
