use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape, LabeledExample};
use crate::error::{Error, Result};

/// Classes introduced by one increment. Task indices start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub classes: Vec<usize>,
}

/// An ordered partition of a dataset's classes into tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementStream {
    pub tasks: Vec<TaskSpec>,
    pub data: Dataset,
    pub seed: u64,
}

impl IncrementStream {
    pub fn shape(&self) -> ImageShape {
        self.data.shape
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, index: usize) -> Result<&TaskSpec> {
        index
            .checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or_else(|| Error::Argument(format!("task {index} outside 1..={}", self.tasks.len())))
    }

    /// Classes of tasks `1..=through`, in stream order.
    pub fn classes_through(&self, through: usize) -> Result<Vec<usize>> {
        if through == 0 || through > self.tasks.len() {
            return Err(Error::Argument(format!(
                "task {through} outside 1..={}",
                self.tasks.len()
            )));
        }
        Ok(self.tasks[..through].iter().flat_map(|t| t.classes.iter().copied()).collect())
    }

    /// Training examples of the given task's classes.
    pub fn train_examples(&self, index: usize) -> Result<Vec<LabeledExample>> {
        let task = self.task(index)?;
        Ok(task.classes.iter().flat_map(|&c| self.data.train[c].iter().cloned()).collect())
    }

    /// Restricts every split to at most `n` examples per class (first-n, order kept).
    pub fn truncate_per_class(&mut self, train: usize, test: usize) {
        for v in &mut self.data.train {
            v.truncate(train);
        }
        for v in &mut self.data.test {
            v.truncate(test);
        }
    }
}

/// Shuffles class ids with `seed` and chunks them into tasks.
///
/// A class count not divisible by `classes_per_task` leaves the remainder in
/// the final task.
pub fn build_stream(data: Dataset, classes_per_task: usize, seed: u64) -> Result<IncrementStream> {
    if classes_per_task < 1 {
        return Err(Error::Argument("classes per task must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    build_stream_with_order(data, &order, classes_per_task, seed)
}

/// Like [`build_stream`] but with an explicit class order.
pub fn build_stream_with_order(
    data: Dataset,
    order: &[usize],
    classes_per_task: usize,
    seed: u64,
) -> Result<IncrementStream> {
    if classes_per_task < 1 {
        return Err(Error::Argument("classes per task must be at least 1".into()));
    }
    let mut seen = vec![false; data.num_classes];
    for &c in order {
        if c >= data.num_classes || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Argument(format!("class order repeats or exceeds classes: {c}")));
        }
    }
    let tasks = order
        .chunks(classes_per_task)
        .enumerate()
        .map(|(i, chunk)| TaskSpec {
            index: i + 1,
            classes: chunk.to_vec(),
        })
        .collect();
    Ok(IncrementStream { tasks, data, seed })
}

/// Splits one class's examples into `floor(r * N)` raw originals and the rest
/// (to be encoded). Both halves keep the input order.
pub fn hybrid_ratio_split(
    examples: &[LabeledExample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Range(format!("ratio {ratio} outside [0,1]")));
    }
    let n = examples.len();
    // Tolerance absorbs binary representation error, e.g. 0.29 * 100.
    let keep = ((ratio * n as f64) + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut raw_mask = vec![false; n];
    for &i in &idx[..keep.min(n)] {
        raw_mask[i] = true;
    }
    let (mut raw, mut rest) = (Vec::with_capacity(keep), Vec::with_capacity(n - keep));
    for (e, is_raw) in examples.iter().zip(raw_mask) {
        if is_raw {
            raw.push(e.clone());
        } else {
            rest.push(e.clone());
        }
    }
    Ok((raw, rest))
}
