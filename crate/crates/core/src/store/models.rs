use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, save_checkpoint, write_atomic};
use crate::error::{Error, Result};
use crate::models::{Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec};

const MODELS: &str = "models.json";

/// Shapes needed to rebuild the saved networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub classifier: ClassifierSpec,
    /// Class id of every head output, in order.
    pub head_classes: Vec<usize>,
    /// Keyed by task, or a single entry under 0 when shared.
    pub autoencoders: BTreeMap<usize, AutoencoderSpec>,
    pub shared_autoencoder: bool,
}

pub struct SavedModels {
    pub manifest: ModelManifest,
    pub classifier: Classifier<f32>,
    pub autoencoders: BTreeMap<usize, Autoencoder<f32>>,
}

impl SavedModels {
    pub fn param_count(&self) -> usize {
        self.classifier.param_count() + self.autoencoders.values().map(Autoencoder::param_count).sum::<usize>()
    }

    /// Decoder for episodes of `task`.
    pub fn autoencoder_for(&mut self, task: usize) -> Option<&mut Autoencoder<f32>> {
        let key = if self.manifest.shared_autoencoder { 0 } else { task };
        self.autoencoders.get_mut(&key)
    }
}

fn classifier_path(dir: &Path) -> PathBuf {
    dir.join("model_classifier.eecb")
}

fn autoencoder_path(dir: &Path, key: usize) -> PathBuf {
    dir.join(format!("model_autoencoder{key:03}.eecb"))
}

pub fn save_models(
    dir: &Path,
    classifier: &Classifier<f32>,
    autoencoders: &BTreeMap<usize, Autoencoder<f32>>,
    head_classes: &[usize],
    shared_autoencoder: bool,
) -> Result<()> {
    if head_classes.len() != classifier.num_classes() {
        return Err(Error::Argument(format!(
            "{} head classes for a head of {}",
            head_classes.len(),
            classifier.num_classes()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&classifier_path(dir), classifier.named_arrays())?;
    for (&key, ae) in autoencoders {
        save_checkpoint(&autoencoder_path(dir, key), ae.named_arrays())?;
    }
    let manifest = ModelManifest {
        classifier: classifier.spec.clone(),
        head_classes: head_classes.to_vec(),
        autoencoders: autoencoders.iter().map(|(&k, ae)| (k, ae.spec.clone())).collect(),
        shared_autoencoder,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(MODELS), &json)
}

pub fn load_models(dir: &Path) -> Result<SavedModels> {
    let path = dir.join(MODELS);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ModelManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    // Arrays overwrite every parameter, so the init seed is irrelevant.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut classifier = Classifier::new(manifest.classifier.clone(), &mut rng)?;
    let arrays = load_checkpoint(&classifier_path(dir))?;
    classifier.load_arrays(&|name| arrays.get(name).cloned(), &mut rng)?;
    let mut autoencoders = BTreeMap::new();
    for (&key, spec) in &manifest.autoencoders {
        let mut ae = Autoencoder::new(spec.clone(), &mut rng)?;
        let arrays = load_checkpoint(&autoencoder_path(dir, key))?;
        ae.load_arrays(&|name| arrays.get(name).cloned())?;
        autoencoders.insert(key, ae);
    }
    Ok(SavedModels {
        manifest,
        classifier,
        autoencoders,
    })
}
