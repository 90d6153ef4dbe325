//! Autoencoder training with a reconstruction term and a classifier-feature
//! content term, and emission of encoded episodes.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{examples_to_tensor, LabeledExample};
use crate::error::{Error, Result};
use crate::models::{Autoencoder, Classifier};
use crate::nn::{mse, Mode, OptimizerConfig, Scalar, Tensor};

/// Weight of the content term and the classifier block it reads features from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentLossConfig {
    pub lambda: f64,
    /// Overrides the classifier's own feature tap when set.
    #[serde(default)]
    pub tap: Option<usize>,
}

impl Default for ContentLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            tap: None,
        }
    }
}

impl ContentLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Range(format!("lambda {} outside [0,1]", self.lambda)));
        }
        Ok(())
    }
}

/// Embedding of one training image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedEpisode {
    pub embedding: Vec<f32>,
    pub label: usize,
    pub task: usize,
}

/// Per-element mean squared error and its gradient w.r.t. `x_rec`.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    mse(x_rec, x)
}

/// Mean squared error between the classifier's tap features of `x` and of
/// `x_rec`, with the gradient w.r.t. `x_rec`. The classifier runs on running
/// statistics and its parameters are left untouched.
pub fn content_loss<T: Scalar>(
    classifier: &mut Classifier<T>,
    x: &Tensor<T>,
    x_rec: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Argument(format!(
            "content loss shape mismatch: {:?} vs {:?}",
            x.shape(),
            x_rec.shape()
        )));
    }
    let target = classifier.conv_features(x, Mode::Infer)?;
    let feats = classifier.conv_features(x_rec, Mode::Eval)?;
    let (loss, d_feats) = mse(&feats, &target)?;
    let grad = classifier.features_backward(&d_feats)?;
    Ok((loss, grad))
}

pub fn combined_loss(l_r: f64, l_cont: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * l_r + lambda * l_cont
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub reconstruction: f64,
    pub content: f64,
    pub total: f64,
}

/// Trains `autoencoder` on `images` with the combined loss while `classifier`
/// stays frozen. Batch order is a seeded shuffle per epoch. When `log` is
/// given, one CSV row `epoch,L_r,L_cont,L` is written per epoch.
pub fn train_autoencoder(
    autoencoder: &mut Autoencoder<f32>,
    classifier: &mut Classifier<f32>,
    images: &Tensor<f32>,
    content: &ContentLossConfig,
    optim: &OptimizerConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLoss>> {
    content.validate()?;
    optim.validate()?;
    if images.batch() == 0 {
        return Err(Error::Argument("no images to train the autoencoder on".into()));
    }
    let saved_tap = classifier.spec.tap;
    if content.tap.is_some() {
        classifier.spec.tap = content.tap;
    }
    let result = train_loop(autoencoder, classifier, images, content.lambda, optim, seed, &mut log);
    classifier.spec.tap = saved_tap;
    classifier.clear_cache();
    autoencoder.clear_cache();
    result
}

fn train_loop(
    ae: &mut Autoencoder<f32>,
    classifier: &mut Classifier<f32>,
    images: &Tensor<f32>,
    lambda: f64,
    optim: &OptimizerConfig,
    seed: u64,
    log: &mut Option<&mut dyn Write>,
) -> Result<Vec<EpochLoss>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = optim.build::<f32>();
    let mut order: Vec<usize> = (0..images.batch()).collect();
    let mut history = Vec::with_capacity(optim.epochs);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "epoch,L_r,L_cont,L").map_err(|e| Error::io("<autoencoder log>", e))?;
    }
    for epoch in 0..optim.epochs {
        opt.set_learning_rate(optim.learning_rate_at(epoch));
        order.shuffle(&mut rng);
        let (mut sum_r, mut sum_c) = (0.0f64, 0.0f64);
        for batch in order.chunks(optim.batch_size) {
            let x = images.select(batch);
            let rec = ae.reconstruct(&x, Mode::Train)?;
            let (l_r, g_r) = reconstruction_loss(&x, &rec)?;
            let mut grad = g_r.map(|g| g * (1.0 - lambda) as f32);
            let mut l_c = 0.0f32;
            if lambda > 0.0 {
                let (c, g_c) = content_loss(classifier, &x, &rec)?;
                l_c = c;
                for (g, gc) in grad.data_mut().iter_mut().zip(g_c.data()) {
                    *g += lambda as f32 * gc;
                }
            }
            if !l_r.is_finite() || !l_c.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("L_r={l_r} L_cont={l_c}"),
                });
            }
            ae.backward(&grad)?;
            opt.step(&mut ae.params_mut());
            ae.zero_grad();
            sum_r += l_r as f64 * batch.len() as f64;
            sum_c += l_c as f64 * batch.len() as f64;
        }
        let n = images.batch() as f64;
        let entry = EpochLoss {
            epoch,
            reconstruction: sum_r / n,
            content: sum_c / n,
            total: combined_loss(sum_r / n, sum_c / n, lambda),
        };
        log::debug!(
            "autoencoder epoch {epoch}: L_r={:.6} L_cont={:.6} L={:.6}",
            entry.reconstruction,
            entry.content,
            entry.total
        );
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "{},{},{},{}",
                entry.epoch, entry.reconstruction, entry.content, entry.total
            )
            .map_err(|e| Error::io("<autoencoder log>", e))?;
        }
        history.push(entry);
    }
    Ok(history)
}

/// One episode per example, labels preserved.
pub fn encode_task(
    autoencoder: &mut Autoencoder<f32>,
    examples: &[LabeledExample],
    task: usize,
) -> Result<Vec<EncodedEpisode>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let (images, labels) = examples_to_tensor(autoencoder.spec.input, examples)?;
    let z = autoencoder.encode(&images)?;
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| EncodedEpisode {
            embedding: z.row(i).to_vec(),
            label,
            task,
        })
        .collect())
}

/// Decodes embeddings `[N, d]` given as rows.
pub fn decode_rows(autoencoder: &mut Autoencoder<f32>, rows: &[&[f32]]) -> Result<Tensor<f32>> {
    let d = autoencoder.embedding_dim();
    let z = Tensor::stack_rows(&[d], rows.iter().copied())?;
    autoencoder.decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::models::{AutoencoderSpec, ClassifierSpec};

    fn small_models(seed: u64) -> (Autoencoder<f32>, Classifier<f32>) {
        let shape = ImageShape::new(1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = Autoencoder::new(
            AutoencoderSpec {
                input: shape,
                stages: vec![6, 4],
                latent_dim: None,
            },
            &mut rng,
        )
        .unwrap();
        let clf = Classifier::new(
            ClassifierSpec {
                input: shape,
                channels: vec![4, 4],
                leaky_slope: 0.2,
                num_classes: 2,
                tap: Some(1),
            },
            &mut rng,
        )
        .unwrap();
        (ae, clf)
    }

    fn blobs(n: usize) -> Tensor<f32> {
        let data = (0..n * 64)
            .map(|i| {
                let (s, p) = (i / 64, i % 64);
                if (p / 8 + s) % 3 == 0 { 0.9 } else { 0.1 }
            })
            .collect();
        Tensor::from_vec(&[n, 1, 8, 8], data).unwrap()
    }

    #[test]
    fn reconstruction_loss_examples() {
        let ones = Tensor::<f64>::full(&[2, 1, 2, 2], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2, 1, 2, 2]);
        assert_eq!(reconstruction_loss(&ones, &ones).unwrap().0, 0.0);
        assert_eq!(reconstruction_loss(&ones, &zeros).unwrap().0, 1.0);
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.2, 0.9]).unwrap();
        let y = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.5, 0.1]).unwrap();
        let xx = Tensor::concat(&[&x, &x]).unwrap();
        let yy = Tensor::concat(&[&y, &y]).unwrap();
        let a = reconstruction_loss(&x, &y).unwrap().0;
        let b = reconstruction_loss(&xx, &yy).unwrap().0;
        assert!((a - b).abs() < 1e-15);
        assert!(reconstruction_loss(&x, &ones).is_err());
    }

    #[test]
    fn combined_loss_endpoints() {
        assert_eq!(combined_loss(2.0, 5.0, 0.0), 2.0);
        assert_eq!(combined_loss(2.0, 5.0, 1.0), 5.0);
        assert!((combined_loss(2.0, 5.0, 0.7) - 4.1).abs() < 1e-12);
        assert_eq!(ContentLossConfig::default().lambda, 0.7);
        assert!(ContentLossConfig { lambda: 1.5, tap: None }.validate().is_err());
    }

    #[test]
    fn content_loss_of_identical_images_is_zero() {
        let (_, mut clf) = small_models(1);
        let x = blobs(3);
        let (l, g) = content_loss(&mut clf, &x, &x).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_leaves_classifier_frozen() {
        let mut optim = OptimizerConfig::autoencoder_default();
        optim.epochs = 3;
        optim.batch_size = 4;
        optim.milestones = vec![2];
        let x = blobs(10);
        let run = || {
            let (mut ae, mut clf) = small_models(7);
            let before = clf.fingerprint();
            let mut csv = Vec::new();
            let hist = train_autoencoder(&mut ae, &mut clf, &x, &ContentLossConfig::default(), &optim, 5, Some(&mut csv)).unwrap();
            assert_eq!(clf.fingerprint(), before);
            (ae.fingerprint(), hist, String::from_utf8(csv).unwrap())
        };
        let (fa, ha, csv) = run();
        let (fb, hb, _) = run();
        assert_eq!(fa, fb);
        assert_eq!(ha, hb);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("epoch,L_r,L_cont,L\n0,"));
        assert!(ha[2].total < ha[0].total);
    }

    #[test]
    fn encode_task_keeps_cardinality_and_labels() {
        let (mut ae, _) = small_models(2);
        let px = blobs(1).into_data();
        let ex: Vec<LabeledExample> = (0..5)
            .map(|i| LabeledExample { pixels: px.clone(), label: i % 2 })
            .collect();
        let eps = encode_task(&mut ae, &ex, 3).unwrap();
        assert_eq!(eps.len(), 5);
        assert!(eps.iter().all(|e| e.task == 3 && e.embedding.len() == 16));
        assert_eq!(eps[0].embedding, eps[1].embedding);
        assert_eq!(eps.iter().map(|e| e.label).collect::<Vec<_>>(), vec![0, 1, 0, 1, 0]);
    }
}
