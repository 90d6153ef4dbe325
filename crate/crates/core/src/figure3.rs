//! Two-class reduction study with a 2-D embedding: how closely do
//! pseudo-episodes sampled from fewer and fewer concepts cover the original
//! episode cloud?

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{examples_to_tensor, Dataset, DatasetSource, LabeledExample};
use crate::error::{Error, Result};
use crate::memory::{reduce_to_concepts, ClassMemory, MemoryItem};
use crate::models::{Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec};
use crate::nn::OptimizerConfig;
use crate::nst::{encode_task, train_autoencoder, ContentLossConfig, EncodedEpisode};
use crate::rehearsal::sample_pseudo_episodes;
use crate::trainer::{train_increment, DecayState, SourceKind, TrainingSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Figure3Config {
    pub dataset: DatasetSource,
    pub classes: Vec<usize>,
    /// Total concepts kept across both classes, one cloud per entry.
    pub concept_counts: Vec<usize>,
    pub latent_dim: usize,
    pub stages: Vec<usize>,
    pub autoencoder: OptimizerConfig,
    /// Content-loss weight; above zero a classifier is trained on the classes first.
    pub lambda: f64,
    pub classifier: OptimizerConfig,
}

impl Default for Figure3Config {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default_mnist(),
            classes: vec![2, 5],
            concept_counts: vec![4000, 2000, 1000, 200],
            latent_dim: 2,
            stages: vec![64, 32, 16],
            autoencoder: OptimizerConfig {
                epochs: 30,
                milestones: vec![15],
                ..OptimizerConfig::autoencoder_default()
            },
            lambda: 0.0,
            classifier: OptimizerConfig {
                epochs: 10,
                milestones: vec![],
                learning_rate: 0.05,
                ..OptimizerConfig::classifier_default()
            },
        }
    }
}

/// One reduction level.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCloud {
    pub concepts: usize,
    pub points: Vec<EncodedEpisode>,
    pub energy_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure3Outcome {
    pub seed: u64,
    pub original: Vec<EncodedEpisode>,
    pub clouds: Vec<PseudoCloud>,
}

impl Figure3Outcome {
    /// Whether the energy distance never increases as the concept count grows.
    pub fn is_monotone(&self) -> bool {
        let mut by_count: Vec<(usize, f64)> = self.clouds.iter().map(|c| (c.concepts, c.energy_distance)).collect();
        by_count.sort_by_key(|p| p.0);
        by_count.windows(2).all(|w| w[1].1 <= w[0].1)
    }
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn mean_distance(a: &[&[f32]], b: &[&[f32]]) -> f64 {
    let mut total = 0.0;
    for x in a {
        total += b.iter().map(|y| euclid(x, y)).sum::<f64>();
    }
    total / (a.len() as f64 * b.len() as f64)
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` between two samples
/// (V-statistic, so zero for identical multisets).
pub fn energy_distance(a: &[&[f32]], b: &[&[f32]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("energy distance of an empty sample".into()));
    }
    let cross = mean_distance(a, b);
    let within_a = mean_distance(a, a);
    let within_b = mean_distance(b, b);
    Ok((2.0 * cross - within_a - within_b).max(0.0))
}

/// Splits `total` concepts over classes in proportion to their sizes,
/// handing remainders to the largest fractions first, at least one each.
pub fn proportional_counts(sizes: &[usize], total: usize) -> Result<Vec<usize>> {
    let n: usize = sizes.iter().sum();
    if total < sizes.len() || total > n {
        return Err(Error::Argument(format!(
            "{total} concepts cannot cover {} classes of {n} episodes",
            sizes.len()
        )));
    }
    let mut counts: Vec<usize> = sizes
        .iter()
        .map(|&s| ((s as u128 * total as u128) / n as u128) as usize)
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse((sizes[i] as u128 * total as u128) % n as u128), i));
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..counts.len() {
        if counts[i] == 0 {
            let donor = (0..counts.len()).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    Ok(counts)
}

/// Reduces each class to its share of `total` concepts and draws as many
/// pseudo-episodes from every concept as it has members.
pub fn pseudo_cloud<R: Rng + ?Sized>(
    episodes: &[EncodedEpisode],
    total: usize,
    rng: &mut R,
) -> Result<Vec<EncodedEpisode>> {
    let mut by_class: BTreeMap<usize, ClassMemory> = BTreeMap::new();
    for e in episodes {
        by_class
            .entry(e.label)
            .or_insert_with(|| ClassMemory::new(e.label))
            .push(MemoryItem::Episode(e.clone()))?;
    }
    let sizes: Vec<usize> = by_class.values().map(|m| m.items.len()).collect();
    let counts = proportional_counts(&sizes, total)?;
    let mut out = Vec::with_capacity(episodes.len());
    for (mem, count) in by_class.values_mut().zip(counts) {
        reduce_to_concepts(mem, count)?;
        for concept in mem.concepts() {
            for embedding in sample_pseudo_episodes(concept, concept.count as usize, rng) {
                out.push(EncodedEpisode {
                    embedding,
                    label: concept.label,
                    task: concept.task,
                });
            }
        }
    }
    Ok(out)
}

/// Trains a low-dimensional autoencoder on every training image of the
/// chosen classes, encodes them, and measures each reduction level.
pub fn run_figure3(data: &Dataset, config: &Figure3Config, seed: u64) -> Result<Figure3Outcome> {
    if config.classes.is_empty() || config.classes.iter().any(|&c| c >= data.num_classes) {
        return Err(Error::Config(format!("figure classes {:?} not in the dataset", config.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<LabeledExample> = config.classes.iter().flat_map(|&c| data.all_training(c)).collect();
    let (images, labels) = examples_to_tensor(data.shape, &examples)?;
    log::info!("figure 3: {} training images of classes {:?}", examples.len(), config.classes);

    // Without the content term the classifier is never consulted.
    let spec = if config.lambda > 0.0 {
        ClassifierSpec::standard(data.shape, config.classes.len())
    } else {
        ClassifierSpec {
            channels: vec![1],
            tap: Some(0),
            ..ClassifierSpec::standard(data.shape, config.classes.len())
        }
    };
    let mut classifier = Classifier::new(spec, &mut rng)?;
    if config.lambda > 0.0 {
        let positions = labels
            .iter()
            .map(|l| config.classes.iter().position(|c| c == l).unwrap())
            .collect();
        let source = TrainingSource {
            task: 1,
            kind: SourceKind::Real,
            images: images.clone(),
            labels: positions,
        };
        train_increment(&mut classifier, &[source], &DecayState::new(false), &config.classifier, 1, rng.random())?;
    }

    let mut ae = Autoencoder::new(
        AutoencoderSpec {
            input: data.shape,
            stages: config.stages.clone(),
            latent_dim: Some(config.latent_dim),
        },
        &mut rng,
    )?;
    let content = ContentLossConfig {
        lambda: config.lambda,
        tap: None,
    };
    train_autoencoder(&mut ae, &mut classifier, &images, &content, &config.autoencoder, rng.random(), None)?;
    drop(images);
    let original = encode_task(&mut ae, &examples, 1)?;
    let base: Vec<&[f32]> = original.iter().map(|e| e.embedding.as_slice()).collect();

    let mut clouds = Vec::with_capacity(config.concept_counts.len());
    for &count in &config.concept_counts {
        let points = pseudo_cloud(&original, count, &mut rng)?;
        let sample: Vec<&[f32]> = points.iter().map(|e| e.embedding.as_slice()).collect();
        let energy = energy_distance(&base, &sample)?;
        log::info!("figure 3: {count} concepts, energy distance {energy:.6}");
        clouds.push(PseudoCloud {
            concepts: count,
            points,
            energy_distance: energy,
        });
    }
    Ok(Figure3Outcome { seed, original, clouds })
}
