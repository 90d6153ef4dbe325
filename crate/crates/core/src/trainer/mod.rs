//! Classifier training on real, reconstructed and pseudo data with sample
//! decay weights, and the end-to-end incremental experiment.

mod decay;
mod experiment;

pub use decay::{
    measure_synthetic_accuracy, sample_decay_coefficient, sample_decay_weight, total_loss,
    DecayState, TaskDecay,
};
pub use experiment::{
    prepare_stream, run_experiment, Ablation, ExperimentConfig, ExperimentOutcome, IncrementRecord, Variant,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::nn::{cross_entropy_grad, cross_entropy_terms, Mode, OptimizerConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    Real,
    Reconstructed,
    Pseudo,
}

/// Images of one task from one source. `labels` are head indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSource {
    pub task: usize,
    pub kind: SourceKind,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Trains the classifier for one increment. Every batch is drawn from the
/// shuffled union of all sources; sample `i` of source `s` contributes
/// `Gamma_s / B * CE_i`, so each source's term is its share of the batch-mean
/// cross-entropy scaled by its decay weight. Returns the weighted loss per epoch.
pub fn train_increment(
    classifier: &mut Classifier<f32>,
    sources: &[TrainingSource],
    decay: &DecayState,
    optim: &OptimizerConfig,
    increment: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    optim.validate()?;
    let mut weights = Vec::with_capacity(sources.len());
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (s, src) in sources.iter().enumerate() {
        if src.images.batch() != src.labels.len() {
            return Err(Error::Argument(format!(
                "source {s}: {} images but {} labels",
                src.images.batch(),
                src.labels.len()
            )));
        }
        if src.labels.iter().any(|&y| y >= classifier.num_classes()) {
            return Err(Error::Argument(format!("source {s} has labels outside the head")));
        }
        weights.push(decay.weight(src.task, src.kind)? as f32);
        index.extend((0..src.labels.len()).map(|i| (s, i)));
    }
    if index.is_empty() {
        return Err(Error::Argument("no training samples for the classifier".into()));
    }
    let sample_shape = sources.iter().find(|s| s.images.batch() > 0).unwrap().images.sample_shape().to_vec();
    let sample_len: usize = sample_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = optim.build::<f32>();
    let epochs = optim.epochs_for(increment);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        opt.set_learning_rate(optim.learning_rate_at(epoch));
        index.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in index.chunks(optim.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * sample_len);
            let mut labels = Vec::with_capacity(batch.len());
            let mut w = Vec::with_capacity(batch.len());
            let inv = 1.0 / batch.len() as f32;
            for &(s, i) in batch {
                data.extend_from_slice(sources[s].images.row(i));
                labels.push(sources[s].labels[i]);
                w.push(weights[s] * inv);
            }
            let mut shape = vec![batch.len()];
            shape.extend_from_slice(&sample_shape);
            let x = Tensor::from_vec(&shape, data)?;
            let logits = classifier.forward(&x, Mode::Train)?;
            let (terms, probs) = cross_entropy_terms(&logits, &labels)?;
            let loss: f32 = terms.iter().zip(&w).map(|(l, w)| l * w).sum();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("classifier loss {loss} at increment {increment}"),
                });
            }
            classifier.backward(&cross_entropy_grad(&probs, &labels, &w))?;
            opt.step(&mut classifier.params_mut());
            classifier.zero_grad();
            epoch_loss += loss as f64 * batch.len() as f64;
        }
        let mean = epoch_loss / index.len() as f64;
        log::debug!("increment {increment} classifier epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    classifier.clear_cache();
    Ok(history)
}

/// Fraction of images the classifier assigns to their head index.
pub fn accuracy(classifier: &mut Classifier<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    let (pred, _) = classifier.classify(images)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}
