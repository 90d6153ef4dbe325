use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SourceKind, TrainingSource};
use crate::error::{Error, Result};
use crate::models::Classifier;

/// Degradation `1 - c / c_o`, clamped to `[0, 1]`. A zero reference accuracy
/// gives 1.
pub fn sample_decay_coefficient(c_synthetic: f64, c_original: f64) -> f64 {
    if c_original <= 0.0 {
        log::warn!("reference accuracy is 0; treating synthetic data as fully degraded");
        return 1.0;
    }
    (1.0 - c_synthetic / c_original).clamp(0.0, 1.0)
}

/// `exp(-gamma * alpha)`.
pub fn sample_decay_weight(gamma: f64, alpha: f64) -> f64 {
    (-gamma * alpha).exp()
}

/// Decay bookkeeping for one learned task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskDecay {
    /// Accuracy on the task's original training images, recorded once.
    pub original: f64,
    pub reconstructed: Option<f64>,
    pub pseudo: Option<f64>,
    pub gamma_r: f64,
    pub gamma_p: f64,
    pub alpha: f64,
    pub weight_r: f64,
    pub weight_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayState {
    /// When false every weight is 1.
    pub enabled: bool,
    pub tasks: BTreeMap<usize, TaskDecay>,
}

impl DecayState {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            tasks: BTreeMap::new(),
        }
    }

    /// Stores `c_o` for a task; a second write is an error.
    pub fn record_original(&mut self, task: usize, accuracy: f64) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(Error::Config(format!("reference accuracy of task {task} already recorded")));
        }
        self.tasks.insert(
            task,
            TaskDecay {
                original: accuracy,
                reconstructed: None,
                pseudo: None,
                gamma_r: 0.0,
                gamma_p: 0.0,
                alpha: 0.0,
                weight_r: 1.0,
                weight_p: 1.0,
            },
        );
        Ok(())
    }

    /// Recomputes a task's coefficients and weights from fresh measurements.
    /// A missing measurement leaves its weight at 1.
    pub fn update(&mut self, task: usize, reconstructed: Option<f64>, pseudo: Option<f64>, alpha: f64) -> Result<()> {
        let enabled = self.enabled;
        let entry = self
            .tasks
            .get_mut(&task)
            .ok_or_else(|| Error::Config(format!("no reference accuracy for task {task}")))?;
        entry.reconstructed = reconstructed;
        entry.pseudo = pseudo;
        entry.alpha = alpha;
        entry.gamma_r = reconstructed.map_or(0.0, |c| sample_decay_coefficient(c, entry.original));
        entry.gamma_p = pseudo.map_or(0.0, |c| sample_decay_coefficient(c, entry.original));
        entry.weight_r = if enabled { sample_decay_weight(entry.gamma_r, alpha) } else { 1.0 };
        entry.weight_p = if enabled { sample_decay_weight(entry.gamma_p, alpha) } else { 1.0 };
        Ok(())
    }

    /// Loss weight of a source. Real images always weigh 1.
    pub fn weight(&self, task: usize, kind: SourceKind) -> Result<f64> {
        if kind == SourceKind::Real {
            return Ok(1.0);
        }
        let entry = self
            .tasks
            .get(&task)
            .ok_or_else(|| Error::Config(format!("no sample decay weight for task {task}")))?;
        Ok(match (self.enabled, kind) {
            (false, _) => 1.0,
            (true, SourceKind::Reconstructed) => entry.weight_r,
            (true, _) => entry.weight_p,
        })
    }
}

/// `L_t + sum(Gamma * L)` over the synthetic per-task terms.
pub fn total_loss(l_t: f64, terms: &[(usize, SourceKind, f64)], decay: &DecayState) -> Result<f64> {
    let mut total = l_t;
    for &(task, kind, loss) in terms {
        total += decay.weight(task, kind)? * loss;
    }
    Ok(total)
}

/// Accuracy of the classifier on every task's reconstructed and pseudo images,
/// keyed by task. Empty sources yield `None`.
pub fn measure_synthetic_accuracy(
    classifier: &mut Classifier<f32>,
    sources: &[TrainingSource],
) -> Result<BTreeMap<usize, (Option<f64>, Option<f64>)>> {
    let mut hits: BTreeMap<(usize, SourceKind), (usize, usize)> = BTreeMap::new();
    for s in sources.iter().filter(|s| s.kind != SourceKind::Real) {
        let e = hits.entry((s.task, s.kind)).or_default();
        if s.images.batch() > 0 {
            let (pred, _) = classifier.classify(&s.images)?;
            e.0 += pred.iter().zip(&s.labels).filter(|(p, y)| p == y).count();
            e.1 += s.labels.len();
        }
    }
    let mut out: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for ((task, kind), (correct, total)) in hits {
        let acc = (total > 0).then(|| correct as f64 / total as f64);
        let slot = out.entry(task).or_default();
        match kind {
            SourceKind::Reconstructed => slot.0 = acc,
            _ => slot.1 = acc,
        }
    }
    Ok(out)
}
