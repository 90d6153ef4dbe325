//! End-to-end runs on small synthetic streams.

use recall::data::{load_dataset, DatasetSource, ImageShape, SyntheticSpec};
use recall::nn::OptimizerConfig;
use recall::trainer::{prepare_stream, run_experiment, Ablation, ExperimentConfig, Variant};

fn config(variant: Variant, budget: Option<usize>) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            classes: 4,
            shape: ImageShape::new(1, 8, 8),
            noise_sigma: 0.08,
            train_per_class: 40,
            test_per_class: 20,
            seed: 17,
            means: None,
        }),
        variant,
        budget,
        ratio: 0.0,
        autoencoder: OptimizerConfig {
            epochs: 15,
            milestones: vec![],
            batch_size: 16,
            weight_decay: 0.0,
            ..OptimizerConfig::autoencoder_default()
        },
        classifier: OptimizerConfig {
            learning_rate: 0.05,
            epochs: 12,
            epochs_next: Some(8),
            milestones: vec![],
            batch_size: 16,
            ..OptimizerConfig::classifier_default()
        },
        autoencoder_stages: vec![8, 4],
        classifier_channels: vec![8, 16],
        ..ExperimentConfig::default()
    }
}

fn a_n(cfg: &ExperimentConfig, seed: u64) -> (f64, Vec<recall::trainer::IncrementRecord>) {
    let data = load_dataset(&cfg.dataset).unwrap();
    let stream = prepare_stream(cfg, data, seed).unwrap();
    let out = run_experiment(cfg, &stream, seed).unwrap();
    (out.average_incremental_accuracy().unwrap(), out.increments)
}

#[test]
fn eec_replay_runs_and_is_deterministic() {
    let cfg = config(Variant::Eec, None);
    let (a, records) = a_n(&cfg, 3);
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    // 40 episodes per class, one unit each, d = 4 * 2 * 2
    assert_eq!(records[3].units_stored, 160);
    assert_eq!(records[3].bytes, 160 * 16 * 4);
    let (b, again) = a_n(&cfg, 3);
    assert_eq!(a, b);
    assert_eq!(records, again);
}

#[test]
fn budgeted_runs_respect_capacity() {
    for variant in [Variant::Eec, Variant::Eecs] {
        let cfg = ExperimentConfig {
            ratio: 0.1,
            ..config(variant, Some(50))
        };
        let (_, records) = a_n(&cfg, 5);
        assert!(records.iter().all(|r| r.units_stored <= 50), "{variant:?}: {records:?}");
    }
    let cfg = ExperimentConfig {
        ablations: vec![Ablation::NoPseudo, Ablation::NoDecay, Ablation::NoNst],
        ..config(Variant::Eec, Some(50))
    };
    let (_, records) = a_n(&cfg, 5);
    assert!(records.iter().all(|r| r.units_stored <= 50));
}

#[test]
fn replay_beats_fine_tuning() {
    let (eec, _) = a_n(&config(Variant::Eec, None), 11);
    let (ft, ft_records) = a_n(&config(Variant::FineTune, None), 11);
    assert_eq!(ft_records[3].units_stored, 0);
    eprintln!("EEC A_N = {eec:.3}, fine-tune A_N = {ft:.3}");
    assert!(eec > ft, "EEC {eec} vs fine-tune {ft}");
}

#[test]
fn single_concept_mode_keeps_two_units_per_class() {
    let cfg = ExperimentConfig {
        single_concept: true,
        ..config(Variant::Eec, None)
    };
    let (_, records) = a_n(&cfg, 2);
    assert_eq!(records.iter().map(|r| r.units_stored).collect::<Vec<_>>(), vec![2, 4, 6, 8]);
}
