//! Dataset ingestion, class-incremental streams and single-headed evaluation.

mod eval;
pub mod idx;
mod stream;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use eval::{average_incremental_accuracy, single_headed_eval, EvalEntry, EvalReport, Predictor};
pub use stream::{build_stream, build_stream_with_order, hybrid_ratio_split, IncrementStream, TaskSpec};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// One image (CHW, values in `[0,1]`) and its class id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub pixels: Vec<f32>,
    pub label: usize,
}

/// Examples grouped by class id: `train[c]` holds every training example of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub num_classes: usize,
    pub train: Vec<Vec<LabeledExample>>,
    pub validation: Vec<Vec<LabeledExample>>,
    pub test: Vec<Vec<LabeledExample>>,
}

impl Dataset {
    pub fn train_count(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn validation_count(&self) -> usize {
        self.validation.iter().map(Vec::len).sum()
    }

    pub fn test_count(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }

    /// Training plus validation examples of one class (the full training file for IDX data).
    pub fn all_training(&self, class: usize) -> Vec<LabeledExample> {
        let mut v = self.train[class].clone();
        v.extend(self.validation[class].iter().cloned());
        v
    }

    /// Checks pixel range, shape and labels of every example.
    pub fn validate(&self) -> Result<()> {
        let len = self.shape.len();
        for split in [&self.train, &self.validation, &self.test] {
            if split.len() != self.num_classes {
                return Err(Error::Argument("dataset split does not cover every class".into()));
            }
            for (c, examples) in split.iter().enumerate() {
                for e in examples {
                    if e.label != c || e.label >= self.num_classes {
                        return Err(Error::Argument(format!("example filed under class {c} has label {}", e.label)));
                    }
                    if e.pixels.len() != len {
                        return Err(Error::Argument("example shape mismatch".into()));
                    }
                    if e.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(Error::Range("pixel outside [0,1]".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Stacks examples into an `[N, C, H, W]` tensor plus their labels.
pub fn examples_to_tensor(shape: ImageShape, examples: &[LabeledExample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let t = Tensor::stack_rows(&shape.dims(), examples.iter().map(|e| e.pixels.as_slice()))?;
    Ok((t, examples.iter().map(|e| e.label).collect()))
}

fn default_pad_to() -> usize {
    32
}

fn default_validation() -> usize {
    10_000
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// The four IDX files of the MNIST distribution inside `dir`.
    Mnist {
        dir: PathBuf,
        /// Images are zero-padded (centered) to this side length.
        #[serde(default = "default_pad_to")]
        pad_to: usize,
        /// Trailing training-file images held out as validation.
        #[serde(default = "default_validation")]
        validation: usize,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    /// MNIST in `$RECALL_MNIST_DIR`, falling back to `data/mnist`.
    pub fn default_mnist() -> Self {
        DatasetSource::Mnist {
            dir: std::env::var_os("RECALL_MNIST_DIR").map_or_else(|| "data/mnist".into(), PathBuf::from),
            pad_to: default_pad_to(),
            validation: default_validation(),
        }
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    let ds = match source {
        DatasetSource::Mnist {
            dir,
            pad_to,
            validation,
        } => load_mnist(dir, *pad_to, *validation)?,
        DatasetSource::Synthetic(spec) => spec.generate()?,
    };
    ds.validate()?;
    Ok(ds)
}

fn pad_image(pixels: &[u8], rows: usize, cols: usize, side: usize) -> Vec<f32> {
    let (oy, ox) = ((side - rows) / 2, (side - cols) / 2);
    let mut out = vec![0f32; side * side];
    for y in 0..rows {
        for x in 0..cols {
            out[(y + oy) * side + x + ox] = pixels[y * cols + x] as f32 / 255.0;
        }
    }
    out
}

fn split_by_class(
    images: &idx::IdxImages,
    labels: &[u8],
    side: usize,
    classes: usize,
    range: std::ops::Range<usize>,
) -> Vec<Vec<LabeledExample>> {
    let plane = images.rows * images.cols;
    let mut out = vec![Vec::new(); classes];
    for i in range {
        let label = labels[i] as usize;
        out[label].push(LabeledExample {
            pixels: pad_image(&images.pixels[i * plane..(i + 1) * plane], images.rows, images.cols, side),
            label,
        });
    }
    out
}

/// Loads MNIST from IDX files, holding out the last `validation` training images.
pub fn load_mnist(dir: &Path, pad_to: usize, validation: usize) -> Result<Dataset> {
    let train_images = idx::parse_images(&idx::read_any(
        dir,
        &["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
    )?)?;
    let train_labels = idx::parse_labels(&idx::read_any(
        dir,
        &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
    )?)?;
    let test_images = idx::parse_images(&idx::read_any(
        dir,
        &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
    )?)?;
    let test_labels = idx::parse_labels(&idx::read_any(
        dir,
        &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
    )?)?;
    if train_images.count != train_labels.len() || test_images.count != test_labels.len() {
        return Err(Error::Format("IDX image and label counts differ".into()));
    }
    if pad_to < train_images.rows.max(train_images.cols)
        || (test_images.rows, test_images.cols) != (train_images.rows, train_images.cols)
    {
        return Err(Error::Format(format!(
            "cannot pad {}x{} images to {pad_to}",
            train_images.rows, train_images.cols
        )));
    }
    let classes = train_labels
        .iter()
        .chain(&test_labels)
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);
    let held_out = validation.min(train_images.count);
    let cut = train_images.count - held_out;
    Ok(Dataset {
        shape: ImageShape::new(1, pad_to, pad_to),
        num_classes: classes,
        train: split_by_class(&train_images, &train_labels, pad_to, classes, 0..cut),
        validation: split_by_class(&train_images, &train_labels, pad_to, classes, cut..train_images.count),
        test: split_by_class(&test_images, &test_labels, pad_to, classes, 0..test_images.count),
    })
}
