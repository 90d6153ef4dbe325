use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::trainer::ExperimentConfig;

/// Top-level keys accepted in an experiment config.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "variant",
    "K",
    "r",
    "lambda",
    "seeds",
    "ablations",
    "single_concept",
    "classes_per_task",
    "increments",
    "train_per_class",
    "test_per_class",
    "class_order",
    "autoencoder",
    "classifier",
    "autoencoder_stages",
    "classifier_channels",
    "pseudo",
];

/// Objects whose keys are merged one by one onto the defaults instead of
/// replacing them wholesale.
const MERGED: &[&str] = &["autoencoder", "classifier", "pseudo"];

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses a JSON config. Absent keys take the defaults of
/// [`ExperimentConfig::default`]; nested optimizer and pseudo-image objects
/// may override single fields.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    let Value::Object(doc) = doc else {
        return Err(Error::Config("config must be a JSON object".into()));
    };
    if let Some(bad) = doc.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "unknown key `{bad}`; valid keys are {}",
            CONFIG_KEYS.join(", ")
        )));
    }
    let Value::Object(mut merged) =
        serde_json::to_value(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?
    else {
        unreachable!("config serializes to an object");
    };
    for (key, value) in doc {
        match (merged.get_mut(&key), value) {
            (Some(Value::Object(base)), Value::Object(over)) if MERGED.contains(&key.as_str()) => {
                overlay(base, over);
            }
            (_, value) => {
                merged.insert(key, value);
            }
        }
    }
    let config: ExperimentConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn overlay(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        base.insert(k, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerConfig;
    use crate::trainer::{Ablation, Variant};

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse_config_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.lambda, 0.7);
        assert_eq!(c.autoencoder.epochs, 100);
        assert_eq!(c.classifier.epochs_next, Some(45));
    }

    #[test]
    fn out_of_range_lambda() {
        assert!(matches!(parse_config_str(r#"{"lambda": 1.5}"#), Err(Error::Range(_))));
        assert!(matches!(parse_config_str(r#"{"r": -0.1}"#), Err(Error::Range(_))));
        assert!(matches!(parse_config_str(r#"{"K": 0}"#), Err(Error::Range(_))));
    }

    #[test]
    fn unknown_keys_list_valid_ones() {
        let Err(Error::Config(m)) = parse_config_str(r#"{"lamda": 0.5}"#) else {
            panic!("expected a config error")
        };
        assert!(m.contains("lamda") && m.contains("lambda") && m.contains("classes_per_task"));
        assert!(matches!(
            parse_config_str(r#"{"autoencoder": {"epoch": 3}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn variant_and_budget_round_trip() {
        let c = parse_config_str(r#"{"variant":"EECS","K":5000}"#).unwrap();
        assert_eq!((c.variant, c.budget), (Variant::Eecs, Some(5000)));
        let again = parse_config_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn partial_optimizer_override() {
        let c = parse_config_str(r#"{"autoencoder":{"epochs":30},"ablations":["noDecay"]}"#).unwrap();
        assert_eq!(
            c.autoencoder,
            OptimizerConfig {
                epochs: 30,
                ..OptimizerConfig::autoencoder_default()
            }
        );
        assert!(c.has(Ablation::NoDecay));
    }
}
