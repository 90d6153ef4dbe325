use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, measure_synthetic_accuracy, train_increment, DecayState, SourceKind, TrainingSource};
use crate::data::{
    build_stream, build_stream_with_order, hybrid_ratio_split, single_headed_eval, Dataset, DatasetSource, EvalEntry, EvalReport, IncrementStream, LabeledExample, Predictor,
};
use crate::error::{Error, Result};
use crate::memory::{Concept, MemoryItem, MemoryStore, OverflowPolicy};
use crate::models::{Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec};
use crate::nn::{OptimizerConfig, Tensor};
use crate::nst::{encode_task, train_autoencoder, ContentLossConfig, EpochLoss};
use crate::rehearsal::{pseudorehearse, rehearse, PseudoConfig};
use crate::store::{memory_report, payload_bytes, MemoryReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// One autoencoder per task, never retrained.
    #[serde(rename = "EEC")]
    Eec,
    /// One shared autoencoder retrained every increment on reconstructions.
    #[serde(rename = "EECS")]
    Eecs,
    /// No replay at all; the forgetting baseline.
    #[serde(rename = "finetune")]
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Autoencoders trained with the reconstruction term only.
    #[serde(rename = "noNST")]
    NoNst,
    /// Every sample decay weight fixed at 1.
    #[serde(rename = "noDecay")]
    NoDecay,
    /// Overflowing episodes are dropped instead of merged into concepts.
    #[serde(rename = "noPseudo")]
    NoPseudo,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noNST" => Ok(Ablation::NoNst),
            "noDecay" => Ok(Ablation::NoDecay),
            "noPseudo" => Ok(Ablation::NoPseudo),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}`, expected one of noNST, noDecay, noPseudo"
            ))),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EEC" | "eec" => Ok(Variant::Eec),
            "EECS" | "eecs" => Ok(Variant::Eecs),
            "finetune" => Ok(Variant::FineTune),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}`, expected one of EEC, EECS, finetune"
            ))),
        }
    }
}

/// Everything one experiment needs. Built by `store::parse_config`, which
/// fills absent keys with these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub variant: Variant,
    /// Memory capacity in units; `None` is unlimited.
    #[serde(rename = "K")]
    pub budget: Option<usize>,
    /// Fraction of each class kept as raw images.
    #[serde(rename = "r")]
    pub ratio: f64,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub ablations: Vec<Ablation>,
    pub single_concept: bool,
    pub classes_per_task: usize,
    /// Stop after this many increments.
    pub increments: Option<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub class_order: Option<Vec<usize>>,
    pub autoencoder: OptimizerConfig,
    pub classifier: OptimizerConfig,
    pub autoencoder_stages: Vec<usize>,
    pub classifier_channels: Vec<usize>,
    pub pseudo: PseudoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default_mnist(),
            variant: Variant::Eec,
            budget: None,
            ratio: 0.0,
            lambda: 0.7,
            seeds: vec![1],
            ablations: Vec::new(),
            single_concept: false,
            classes_per_task: 1,
            increments: None,
            train_per_class: None,
            test_per_class: None,
            class_order: None,
            autoencoder: OptimizerConfig::autoencoder_default(),
            classifier: OptimizerConfig::classifier_default(),
            autoencoder_stages: vec![64, 32, 16],
            classifier_channels: vec![32, 64, 128],
            pseudo: PseudoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Range(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Range(format!("r {} outside [0,1]", self.ratio)));
        }
        if self.budget == Some(0) {
            return Err(Error::Range("K must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Range("at least one seed is required".into()));
        }
        if self.classes_per_task == 0 {
            return Err(Error::Range("classes_per_task must be at least 1".into()));
        }
        if self.increments == Some(0) {
            return Err(Error::Range("increments must be at least 1".into()));
        }
        if self.pseudo.oversample == 0 || self.pseudo.retries == 0 {
            return Err(Error::Range("pseudo oversample and retries must be at least 1".into()));
        }
        self.autoencoder.validate()?;
        self.classifier.validate()
    }

    fn content(&self) -> ContentLossConfig {
        ContentLossConfig {
            lambda: if self.has(Ablation::NoNst) { 0.0 } else { self.lambda },
            tap: None,
        }
    }
}

/// One row of the experiment report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementRecord {
    pub increment: usize,
    pub accuracy: f64,
    pub units_stored: usize,
    pub bytes: u64,
}

/// Results plus the trained state, for reporting and dumps.
pub struct ExperimentOutcome {
    pub seed: u64,
    pub eval: EvalReport,
    pub increments: Vec<IncrementRecord>,
    pub memory: MemoryReport,
    pub decay: DecayState,
    pub classifier: Classifier<f32>,
    /// Keyed by task for EEC; the shared autoencoder sits under key 0 for EECS.
    pub autoencoders: BTreeMap<usize, Autoencoder<f32>>,
    pub store: MemoryStore,
    /// Class ids in head order.
    pub head_classes: Vec<usize>,
    /// Per increment, the autoencoder's epoch losses.
    pub autoencoder_losses: Vec<(usize, Vec<EpochLoss>)>,
    /// Per increment, the classifier's mean weighted loss per epoch.
    pub classifier_losses: Vec<(usize, Vec<f64>)>,
}

impl ExperimentOutcome {
    pub fn average_incremental_accuracy(&self) -> Result<f64> {
        self.eval.average_incremental_accuracy()
    }

    /// Decoder for a task's episodes.
    pub fn autoencoder_for(&mut self, task: usize) -> Option<&mut Autoencoder<f32>> {
        let key = if self.autoencoders.contains_key(&0) { 0 } else { task };
        self.autoencoders.get_mut(&key)
    }
}

/// Maps head indices back to class ids.
struct Mapped<'a> {
    classifier: &'a mut Classifier<f32>,
    ids: &'a [usize],
}

impl Predictor for Mapped<'_> {
    fn predict(&mut self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.classifier.predict(images)?.into_iter().map(|p| self.ids[p]).collect())
    }
}

/// Where each stored item's replay images sit, for EECS re-encoding.
enum ItemImages {
    Episode { source: usize, row: usize },
    Concept { source: usize, start: usize, len: usize },
}

struct Replay {
    sources: Vec<TrainingSource>,
    items: BTreeMap<(usize, usize), ItemImages>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    stream: &'a IncrementStream,
    rng: ChaCha8Rng,
    classifier: Option<Classifier<f32>>,
    autoencoders: BTreeMap<usize, Autoencoder<f32>>,
    store: MemoryStore,
    raw: BTreeMap<usize, (usize, Vec<LabeledExample>)>,
    decay: DecayState,
    head: Vec<usize>,
    position: Vec<Option<usize>>,
    autoencoder_losses: Vec<(usize, Vec<EpochLoss>)>,
    classifier_losses: Vec<(usize, Vec<f64>)>,
}

impl<'a> Run<'a> {
    fn to_tensor(&self, examples: &[LabeledExample]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let t = Tensor::stack_rows(&self.stream.shape().dims(), examples.iter().map(|e| e.pixels.as_slice()))?;
        let labels = examples
            .iter()
            .map(|e| self.position[e.label].ok_or_else(|| Error::Argument(format!("class {} not in the head", e.label))))
            .collect::<Result<_>>()?;
        Ok((t, labels))
    }

    fn ae_key(&self, task: usize) -> usize {
        if self.cfg.variant == Variant::Eecs {
            0
        } else {
            task
        }
    }

    fn replay(&mut self) -> Result<Replay> {
        let mut per_task: BTreeMap<(usize, SourceKind), (Vec<f32>, Vec<usize>)> = BTreeMap::new();
        let mut placements: Vec<((usize, usize), usize, SourceKind, usize, usize)> = Vec::new();
        let shape = self.stream.shape();
        let classifier = self.classifier.as_mut().expect("classifier exists after the first increment");
        for (&class, mem) in &self.store.classes {
            let target = self.position[class].expect("stored classes are in the head");
            let task = mem.items.first().map_or(0, MemoryItem::task);
            let key = if self.cfg.variant == Variant::Eecs { 0 } else { task };
            let ae = self
                .autoencoders
                .get_mut(&key)
                .ok_or_else(|| Error::Config(format!("no autoencoder for task {task}")))?;
            let episodes: Vec<(usize, &crate::nst::EncodedEpisode)> = mem
                .items
                .iter()
                .enumerate()
                .filter_map(|(k, it)| match it {
                    MemoryItem::Episode(e) => Some((k, e)),
                    MemoryItem::Concept(_) => None,
                })
                .collect();
            if !episodes.is_empty() {
                let refs: Vec<&crate::nst::EncodedEpisode> = episodes.iter().map(|(_, e)| *e).collect();
                let (images, _) = rehearse(ae, &refs)?;
                let slot = per_task.entry((task, SourceKind::Reconstructed)).or_default();
                for (r, (k, _)) in episodes.iter().enumerate() {
                    placements.push(((class, *k), task, SourceKind::Reconstructed, slot.1.len(), 1));
                    slot.0.extend_from_slice(images.row(r));
                    slot.1.push(target);
                }
            }
            for (k, item) in mem.items.iter().enumerate() {
                let MemoryItem::Concept(c) = item else { continue };
                let batch = pseudorehearse(ae, c, k, Some((classifier, target)), &self.cfg.pseudo, &mut self.rng)?;
                let slot = per_task.entry((task, SourceKind::Pseudo)).or_default();
                placements.push(((class, k), task, SourceKind::Pseudo, slot.1.len(), batch.len()));
                slot.0.extend_from_slice(batch.images.data());
                slot.1.extend(std::iter::repeat_n(target, batch.len()));
            }
        }
        let mut sources = Vec::new();
        let mut index_of = BTreeMap::new();
        for ((task, kind), (data, labels)) in per_task {
            let mut dims = vec![labels.len()];
            dims.extend(shape.dims());
            index_of.insert((task, kind), sources.len());
            sources.push(TrainingSource {
                task,
                kind,
                images: Tensor::from_vec(&dims, data)?,
                labels,
            });
        }
        let items = placements
            .into_iter()
            .map(|(key, task, kind, start, len)| {
                let source = index_of[&(task, kind)];
                let placed = match kind {
                    SourceKind::Pseudo => ItemImages::Concept { source, start, len },
                    _ => ItemImages::Episode { source, row: start },
                };
                (key, placed)
            })
            .collect();
        for (task, examples) in self.raw.values() {
            let (images, labels) = self.to_tensor(examples)?;
            sources.push(TrainingSource {
                task: *task,
                kind: SourceKind::Real,
                images,
                labels,
            });
        }
        Ok(Replay { sources, items })
    }

    fn increment(&mut self, t: usize) -> Result<(IncrementRecord, EvalEntry)> {
        let task = self.stream.task(t)?.clone();
        let replaying = self.cfg.variant != Variant::FineTune && t > 1;
        let replay = if replaying {
            self.replay()?
        } else {
            Replay {
                sources: Vec::new(),
                items: BTreeMap::new(),
            }
        };
        if replaying {
            let measured = measure_synthetic_accuracy(self.classifier.as_mut().unwrap(), &replay.sources)?;
            for i in 1..t {
                let (c_r, c_p) = measured.get(&i).copied().unwrap_or((None, None));
                let alpha = match self.cfg.variant {
                    Variant::Eecs => (t - 1 - i) as f64,
                    _ => 1.0,
                };
                self.decay.update(i, c_r, c_p, alpha)?;
                log::info!(
                    "increment {t}: task {i} c_o={:.4} c_r={c_r:?} c_p={c_p:?} weights r={:.4} p={:.4}",
                    self.decay.tasks[&i].original,
                    self.decay.tasks[&i].weight_r,
                    self.decay.tasks[&i].weight_p
                );
            }
        }

        for &c in &task.classes {
            if self.position[c].is_none() {
                self.position[c] = Some(self.head.len());
                self.head.push(c);
            }
        }
        match self.classifier.as_mut() {
            Some(c) => c.expand_head(self.head.len(), &mut self.rng)?,
            None => {
                let spec = ClassifierSpec {
                    channels: self.cfg.classifier_channels.clone(),
                    tap: self.cfg.classifier_channels.len().checked_sub(1),
                    ..ClassifierSpec::standard(self.stream.shape(), self.head.len())
                };
                self.classifier = Some(Classifier::new(spec, &mut self.rng)?);
            }
        }

        let new_examples = self.stream.train_examples(t)?;
        let (new_images, new_labels) = self.to_tensor(&new_examples)?;
        let mut sources = vec![TrainingSource {
            task: t,
            kind: SourceKind::Real,
            images: new_images.clone(),
            labels: new_labels.clone(),
        }];
        sources.extend(replay.sources.iter().cloned());
        let seed = self.rng.random();
        let classifier = self.classifier.as_mut().unwrap();
        let losses = train_increment(classifier, &sources, &self.decay, &self.cfg.classifier, t, seed)?;
        self.classifier_losses.push((t, losses));
        drop(sources);
        let c_o = accuracy(classifier, &new_images, &new_labels)?;
        self.decay.record_original(t, c_o)?;
        log::info!("increment {t}: classifier trained, training accuracy {c_o:.4}");

        if self.cfg.variant != Variant::FineTune {
            self.autoencode(t, &new_examples, &new_images, &replay)?;
        }

        let (record, entry) = self.evaluate(t)?;
        log::info!(
            "increment {t}: accuracy {:.4}, {} units stored",
            record.accuracy,
            record.units_stored
        );
        Ok((record, entry))
    }

    fn autoencode(
        &mut self,
        t: usize,
        new_examples: &[LabeledExample],
        new_images: &Tensor<f32>,
        replay: &Replay,
    ) -> Result<()> {
        let key = self.ae_key(t);
        let spec = AutoencoderSpec {
            stages: self.cfg.autoencoder_stages.clone(),
            ..AutoencoderSpec::standard(self.stream.shape())
        };
        if !self.autoencoders.contains_key(&key) {
            let ae = Autoencoder::new(spec, &mut self.rng)?;
            self.autoencoders.insert(key, ae);
        }
        let synthetic: Vec<&Tensor<f32>> = replay
            .sources
            .iter()
            .filter(|s| s.kind != SourceKind::Real && s.images.batch() > 0)
            .map(|s| &s.images)
            .collect();
        let training = if self.cfg.variant == Variant::Eecs && !synthetic.is_empty() {
            let mut parts = vec![new_images];
            parts.extend(synthetic);
            Tensor::concat(&parts)?
        } else {
            new_images.clone()
        };
        let seed = self.rng.random();
        let content = self.cfg.content();
        let classifier = self.classifier.as_mut().unwrap();
        let ae = self.autoencoders.get_mut(&key).unwrap();
        let losses = train_autoencoder(ae, classifier, &training, &content, &self.cfg.autoencoder, seed, None)?;
        self.autoencoder_losses.push((t, losses));
        drop(training);

        if self.cfg.variant == Variant::Eecs {
            reencode(&mut self.store, ae, replay)?;
        }

        let mut encodable = Vec::new();
        let split_seed: u64 = self.rng.random();
        for &c in &self.stream.task(t)?.classes {
            let class_examples: Vec<LabeledExample> =
                new_examples.iter().filter(|e| e.label == c).cloned().collect();
            let (raw, rest) = hybrid_ratio_split(&class_examples, self.cfg.ratio, split_seed ^ c as u64)?;
            if !raw.is_empty() {
                self.raw.insert(c, (t, raw));
            }
            encodable.extend(rest);
        }
        let episodes = encode_task(ae, &encodable, t)?;
        let summary = self.store.add_task(episodes)?;
        if summary.reduction > 0 {
            log::info!(
                "increment {t}: freed {} units ({} classes clamped, {} extra merges, {} discarded)",
                summary.reduction,
                summary.clamped.len(),
                summary.extra_merges,
                summary.discarded
            );
        }
        Ok(())
    }

    fn evaluate(&mut self, t: usize) -> Result<(IncrementRecord, EvalEntry)> {
        let classifier = self.classifier.as_mut().unwrap();
        let entry = single_headed_eval(
            &mut Mapped {
                classifier,
                ids: &self.head,
            },
            self.stream,
            t,
        )?;
        let units = self.store.unit_count();
        let d = self.store.dim().unwrap_or(0);
        let record = IncrementRecord {
            increment: t,
            accuracy: entry.accuracy,
            units_stored: units,
            bytes: payload_bytes(units, d),
        };
        Ok((record, entry))
    }
}

/// Moves stored items of a retrained shared autoencoder into its new
/// embedding space: episodes are re-encoded from their reconstructions and
/// concepts are refit to their encoded pseudo-images.
fn reencode(store: &mut MemoryStore, ae: &mut Autoencoder<f32>, replay: &Replay) -> Result<()> {
    let mut encoded: Vec<Option<Tensor<f32>>> = vec![None; replay.sources.len()];
    for (&(class, k), placed) in &replay.items {
        let (ItemImages::Episode { source, .. } | ItemImages::Concept { source, .. }) = placed;
        if encoded[*source].is_none() {
            encoded[*source] = Some(ae.encode(&replay.sources[*source].images)?);
        }
        let z = encoded[*source].as_ref().unwrap();
        let item = &mut store.classes.get_mut(&class).unwrap().items[k];
        match (placed, item) {
            (ItemImages::Episode { row, .. }, MemoryItem::Episode(e)) => {
                e.embedding = z.row(*row).to_vec();
            }
            (ItemImages::Concept { start, len, .. }, MemoryItem::Concept(c)) if *len > 0 => {
                let rows: Vec<&[f32]> = (*start..start + len).map(|i| z.row(i)).collect();
                let refit = Concept::from_points(&rows, c.label, c.task)?;
                *c = refit;
            }
            _ => {}
        }
    }
    Ok(())
}

/// The config's class-incremental stream; the class order is shuffled with
/// `seed` unless given explicitly.
pub fn prepare_stream(config: &ExperimentConfig, data: Dataset, seed: u64) -> Result<IncrementStream> {
    let mut stream = match &config.class_order {
        Some(order) => build_stream_with_order(data, order, config.classes_per_task, seed)?,
        None => build_stream(data, config.classes_per_task, seed)?,
    };
    if config.train_per_class.is_some() || config.test_per_class.is_some() {
        stream.truncate_per_class(
            config.train_per_class.unwrap_or(usize::MAX),
            config.test_per_class.unwrap_or(usize::MAX),
        );
    }
    Ok(stream)
}

/// Runs every increment of `stream` (or the first `config.increments`) with
/// one seed: classifier first, then the autoencoder(s), encoding and memory
/// integration, then single-headed evaluation.
pub fn run_experiment(config: &ExperimentConfig, stream: &IncrementStream, seed: u64) -> Result<ExperimentOutcome> {
    config.validate()?;
    let policy = if config.has(Ablation::NoPseudo) {
        OverflowPolicy::Discard
    } else {
        OverflowPolicy::Cluster
    };
    let mut run = Run {
        cfg: config,
        stream,
        rng: ChaCha8Rng::seed_from_u64(seed),
        classifier: None,
        autoencoders: BTreeMap::new(),
        store: MemoryStore::new(config.budget, policy, config.single_concept, seed),
        raw: BTreeMap::new(),
        decay: DecayState::new(!config.has(Ablation::NoDecay)),
        head: Vec::new(),
        position: vec![None; stream.data.num_classes],
        autoencoder_losses: Vec::new(),
        classifier_losses: Vec::new(),
    };
    let last = config.increments.map_or(stream.len(), |n| n.min(stream.len()));
    let mut eval = EvalReport::default();
    let mut increments = Vec::with_capacity(last);
    for t in 1..=last {
        let (record, entry) = run.increment(t)?;
        eval.push(entry);
        increments.push(record);
    }
    let model_params = run.classifier.as_ref().map_or(0, Classifier::param_count)
        + run.autoencoders.values().map(Autoencoder::param_count).sum::<usize>();
    let memory = memory_report(&run.store, model_params);
    Ok(ExperimentOutcome {
        seed,
        eval,
        increments,
        memory,
        decay: run.decay,
        classifier: run.classifier.unwrap(),
        autoencoders: run.autoencoders,
        store: run.store,
        head_classes: run.head,
        autoencoder_losses: run.autoencoder_losses,
        classifier_losses: run.classifier_losses,
    })
}
