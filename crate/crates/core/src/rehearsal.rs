//! Replay data: decoded episodes and filtered pseudo-images sampled from concepts.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Concept;
use crate::models::{Autoencoder, Classifier};
use crate::nn::Tensor;
use crate::nst::EncodedEpisode;

/// Candidate generation in chunks of this many images.
const CHUNK: usize = 512;

/// Oversampling and retry caps for pseudo-image filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub oversample: usize,
    pub retries: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            oversample: 10,
            retries: 5,
        }
    }
}

/// Pseudo-images for one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub images: Tensor<f32>,
    pub label: usize,
    pub concept_index: usize,
    /// Whether a classifier screened the candidates.
    pub filtered: bool,
    /// Trailing images that did not pass the filter.
    pub padded: usize,
}

impl PseudoBatch {
    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn empty_images(autoencoder: &Autoencoder<f32>) -> Tensor<f32> {
    let mut shape = vec![0];
    shape.extend(autoencoder.spec.input.dims());
    Tensor::zeros(&shape)
}

/// One decoded image per stored episode, labels preserved.
pub fn rehearse(
    autoencoder: &mut Autoencoder<f32>,
    episodes: &[&EncodedEpisode],
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if episodes.is_empty() {
        return Ok((empty_images(autoencoder), Vec::new()));
    }
    let d = autoencoder.embedding_dim();
    if let Some(bad) = episodes.iter().find(|e| e.embedding.len() != d) {
        return Err(Error::Argument(format!(
            "episode has {} dimensions, decoder expects {d}",
            bad.embedding.len()
        )));
    }
    let z = Tensor::stack_rows(&[d], episodes.iter().map(|e| e.embedding.as_slice()))?;
    let images = autoencoder.decode(&z)?;
    Ok((images, episodes.iter().map(|e| e.label).collect()))
}

/// `n` draws from `N(centroid, diag(m2 / count))`, one row each.
pub fn sample_pseudo_episodes<R: Rng + ?Sized>(concept: &Concept, n: usize, rng: &mut R) -> Vec<Vec<f32>> {
    let sd: Vec<f64> = concept.covariance().iter().map(|v| v.sqrt()).collect();
    (0..n)
        .map(|_| {
            concept
                .centroid
                .iter()
                .zip(&sd)
                .map(|(&c, &s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    (c + s * z) as f32
                })
                .collect()
        })
        .collect()
}

/// `oversample * count` decoded candidates for the concept.
pub fn generate_pseudo_images<R: Rng + ?Sized>(
    autoencoder: &mut Autoencoder<f32>,
    concept: &Concept,
    oversample: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let n = oversample * concept.count as usize;
    decode_samples(autoencoder, concept, n, rng)
}

fn decode_samples<R: Rng + ?Sized>(
    autoencoder: &mut Autoencoder<f32>,
    concept: &Concept,
    n: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let d = autoencoder.embedding_dim();
    if concept.dim() != d {
        return Err(Error::Argument(format!(
            "concept has {} dimensions, decoder expects {d}",
            concept.dim()
        )));
    }
    if n == 0 {
        return Ok(empty_images(autoencoder));
    }
    let rows = sample_pseudo_episodes(concept, n, rng);
    let z = Tensor::stack_rows(&[d], rows.iter().map(Vec::as_slice))?;
    autoencoder.decode(&z)
}

/// Accumulates passing candidates in arrival order and the best-scoring
/// rejects for padding.
struct Screen {
    target: usize,
    want: usize,
    sample_len: usize,
    passed: Vec<f32>,
    passed_count: usize,
    rejects: Vec<(f32, Vec<f32>)>,
}

impl Screen {
    fn new(target: usize, want: usize, sample_len: usize) -> Self {
        Self {
            target,
            want,
            sample_len,
            passed: Vec::with_capacity(want * sample_len),
            passed_count: 0,
            rejects: Vec::new(),
        }
    }

    fn full(&self) -> bool {
        self.passed_count >= self.want
    }

    fn offer(&mut self, candidates: &Tensor<f32>, classifier: &mut Classifier<f32>) -> Result<()> {
        let (pred, scores) = classifier.classify(candidates)?;
        for (i, &p) in pred.iter().enumerate() {
            if self.full() {
                break;
            }
            if p == self.target {
                self.passed.extend_from_slice(candidates.row(i));
                self.passed_count += 1;
            } else {
                let score = scores.row(i).get(self.target).copied().unwrap_or(f32::NEG_INFINITY);
                self.rejects.push((score, candidates.row(i).to_vec()));
            }
        }
        // Only the best `want` rejects can ever be used for padding.
        if self.rejects.len() > 2 * self.want.max(1) {
            self.trim_rejects();
        }
        Ok(())
    }

    fn trim_rejects(&mut self) {
        self.rejects.sort_by(|a, b| b.0.total_cmp(&a.0));
        self.rejects.truncate(self.want);
    }

    fn finish(mut self, shape: &[usize], label: usize, concept_index: usize) -> Result<PseudoBatch> {
        let mut padded = 0;
        if !self.full() {
            self.trim_rejects();
            let need = self.want - self.passed_count;
            for (_, img) in self.rejects.iter().take(need) {
                self.passed.extend_from_slice(img);
                padded += 1;
            }
            log::warn!(
                "class {label}: only {} of {} pseudo-images passed the filter, padded {padded}",
                self.passed_count,
                self.want
            );
        }
        let mut full_shape = vec![self.passed.len() / self.sample_len];
        full_shape.extend_from_slice(shape);
        Ok(PseudoBatch {
            images: Tensor::from_vec(&full_shape, self.passed)?,
            label,
            concept_index,
            filtered: true,
            padded,
        })
    }
}

/// Keeps candidates the classifier assigns to `target`, in order, up to `m`.
/// A shortfall is padded with the rejected candidates scoring highest for
/// `target`.
pub fn filter_pseudo_images(
    candidates: &Tensor<f32>,
    target: usize,
    m: usize,
    classifier: &mut Classifier<f32>,
) -> Result<PseudoBatch> {
    let sample_shape = candidates.sample_shape().to_vec();
    let mut screen = Screen::new(target, m, candidates.sample_len().max(1));
    if candidates.batch() > 0 {
        screen.offer(candidates, classifier)?;
    }
    screen.finish(&sample_shape, target, 0)
}

/// `concept.count` pseudo-images for one concept. With a filter (classifier
/// and the head index the concept's class maps to), up to `retries` rounds of
/// `oversample * count` candidates are screened; without one the first
/// `count` samples are kept as they are.
pub fn pseudorehearse<R: Rng + ?Sized>(
    autoencoder: &mut Autoencoder<f32>,
    concept: &Concept,
    concept_index: usize,
    filter: Option<(&mut Classifier<f32>, usize)>,
    config: &PseudoConfig,
    rng: &mut R,
) -> Result<PseudoBatch> {
    let want = concept.count as usize;
    let shape = autoencoder.spec.input.dims().to_vec();
    let Some((classifier, target)) = filter else {
        return Ok(PseudoBatch {
            images: decode_samples(autoencoder, concept, want, rng)?,
            label: concept.label,
            concept_index,
            filtered: false,
            padded: 0,
        });
    };
    let mut screen = Screen::new(target, want, autoencoder.spec.input.len());
    let per_round = config.oversample.max(1) * want;
    'rounds: for _ in 0..config.retries.max(1) {
        let mut left = per_round;
        while left > 0 {
            let n = left.min(CHUNK);
            left -= n;
            let candidates = decode_samples(autoencoder, concept, n, rng)?;
            screen.offer(&candidates, classifier)?;
            if screen.full() {
                break 'rounds;
            }
        }
    }
    screen.finish(&shape, concept.label, concept_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::models::{AutoencoderSpec, ClassifierSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn concept(centroid: Vec<f64>, var: f64, count: u64) -> Concept {
        let d = centroid.len();
        Concept {
            centroid,
            m2: vec![var * count as f64; d],
            count,
            label: 1,
            task: 1,
        }
    }

    fn models() -> (Autoencoder<f32>, Classifier<f32>) {
        let shape = ImageShape::new(1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ae = Autoencoder::new(
            AutoencoderSpec { input: shape, stages: vec![4, 2], latent_dim: None },
            &mut rng,
        )
        .unwrap();
        let clf = Classifier::new(
            ClassifierSpec { input: shape, channels: vec![3], leaky_slope: 0.2, num_classes: 3, tap: Some(0) },
            &mut rng,
        )
        .unwrap();
        (ae, clf)
    }

    #[test]
    fn zero_covariance_samples_equal_the_centroid() {
        let c = concept(vec![0.5, -1.0, 2.0], 0.0, 3);
        let rows = sample_pseudo_episodes(&c, 20, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(rows.iter().all(|r| r == &vec![0.5f32, -1.0, 2.0]));
    }

    #[test]
    fn sample_moments_match_the_concept() {
        let c = concept(vec![1.0, -2.0, 0.0], 0.25, 4);
        let n = 10_000;
        let rows = sample_pseudo_episodes(&c, n, &mut ChaCha8Rng::seed_from_u64(2));
        for k in 0..3 {
            let mean = rows.iter().map(|r| r[k] as f64).sum::<f64>() / n as f64;
            let var = rows.iter().map(|r| (r[k] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean - c.centroid[k]).abs() <= 4.0 * 0.5 / (n as f64).sqrt());
            assert!((var - 0.25).abs() <= 0.025);
        }
    }

    #[test]
    fn candidate_count_and_determinism() {
        let (mut ae, _) = models();
        let c = concept(vec![0.3; 8], 0.1, 30);
        let a = generate_pseudo_images(&mut ae, &c, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_pseudo_images(&mut ae, &c, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.batch(), 300);
        assert_eq!(a, b);
        let fixed = concept(vec![0.3; 8], 0.0, 4);
        let imgs = generate_pseudo_images(&mut ae, &fixed, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let dec = ae.decode(&Tensor::from_vec(&[1, 8], vec![0.3; 8]).unwrap()).unwrap();
        assert!((0..4).all(|i| imgs.row(i) == dec.row(0)));
    }

    #[test]
    fn filter_keeps_passing_and_pads_shortfall() {
        let (mut ae, mut clf) = models();
        let c = concept(vec![0.2; 8], 0.5, 10);
        let cands = generate_pseudo_images(&mut ae, &c, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (pred, _) = clf.classify(&cands).unwrap();
        let target = pred[0];
        let passing: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == target).collect();
        let m = passing.len().min(4);
        let batch = filter_pseudo_images(&cands, target, m, &mut clf).unwrap();
        assert_eq!(batch.len(), m);
        assert_eq!(batch.padded, 0);
        for (k, &i) in passing.iter().take(m).enumerate() {
            assert_eq!(batch.images.row(k), cands.row(i));
        }
        if let Some(absent) = (0..3).find(|c| !pred.contains(c)) {
            let batch = filter_pseudo_images(&cands, absent, 6, &mut clf).unwrap();
            assert_eq!((batch.len(), batch.padded), (6, 6));
        }
    }

    #[test]
    fn pseudorehearse_honours_the_count_contract() {
        let (mut ae, mut clf) = models();
        let c = concept(vec![0.1; 8], 0.3, 25);
        let cfg = PseudoConfig::default();
        let batch = pseudorehearse(&mut ae, &c, 7, Some((&mut clf, 1)), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(batch.len(), 25);
        assert_eq!(batch.concept_index, 7);
        let (pred, _) = clf.classify(&batch.images).unwrap();
        assert!(pred[..25 - batch.padded].iter().all(|&p| p == 1));
        let plain = pseudorehearse(&mut ae, &c, 0, None, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(!plain.filtered);
        assert_eq!(plain.len(), 25);
    }

    #[test]
    fn rehearse_cardinality() {
        let (mut ae, _) = models();
        let eps: Vec<EncodedEpisode> = (0..3)
            .map(|i| EncodedEpisode { embedding: vec![i as f32; 8], label: i, task: 1 })
            .collect();
        let refs: Vec<&EncodedEpisode> = eps.iter().collect();
        let (imgs, labels) = rehearse(&mut ae, &refs).unwrap();
        assert_eq!(imgs.shape(), &[3, 1, 8, 8]);
        assert_eq!(labels, vec![0, 1, 2]);
        let (imgs, labels) = rehearse(&mut ae, &[]).unwrap();
        assert_eq!((imgs.batch(), labels.len()), (0, 0));
        let bad = EncodedEpisode { embedding: vec![0.0; 3], label: 0, task: 1 };
        assert!(rehearse(&mut ae, &[&bad]).is_err());
    }
}
