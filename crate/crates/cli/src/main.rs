//! `recall`: run incremental experiments and inspect what they store.

mod image;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recall::data::{load_dataset, single_headed_eval, Predictor};
use recall::figure3::{run_figure3, Figure3Config, Figure3Outcome};
use recall::memory::MemoryItem;
use recall::nn::Tensor;
use recall::nst::EncodedEpisode;
use recall::rehearsal::{rehearse, sample_pseudo_episodes};
use recall::store::{
    format_megabytes, load_models, load_store, memory_report, parse_config, save_models, save_store, write_atomic,
};
use recall::trainer::{prepare_stream, run_experiment, Ablation, ExperimentConfig, ExperimentOutcome, Variant};

#[derive(Parser)]
#[command(name = "recall", version, about = "Class-incremental learning with encoded episodes and concepts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train through every increment and write report.csv, the store and checkpoints.
    Run {
        /// JSON experiment config; absent keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory that receives one folder per run.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// EEC, EECS or finetune.
        #[arg(long)]
        variant: Option<Variant>,
        /// Memory budget K in units.
        #[arg(long)]
        budget: Option<usize>,
        /// Fraction r of each class kept as raw images.
        #[arg(long)]
        ratio: Option<f64>,
        /// noNST, noDecay or noPseudo; repeatable.
        #[arg(long)]
        ablation: Vec<Ablation>,
    },
    /// Re-evaluate a finished run's classifier on every class it has learned.
    Eval {
        /// A run folder written by `run`.
        #[arg(long)]
        store: PathBuf,
    },
    /// Decode stored episodes and concept samples of every class into image grids.
    DumpReconstructions {
        /// A store folder (`<run>/store`).
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for concept sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print unit counts and byte sizes of a store.
    ReportMemory {
        #[arg(long)]
        store: PathBuf,
    },
    /// Two-class reduction study with a 2-D embedding, written as CSV scatters.
    Figure3 {
        /// JSON figure config; absent keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only this total concept count instead of the config's list.
        #[arg(long)]
        centroids: Option<usize>,
        /// Only this seed instead of 1, 2 and 3.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results/figure3")]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            variant,
            budget,
            ratio,
            ablation,
        } => cmd_run(config.as_deref(), seed, &out, variant, budget, ratio, ablation),
        Command::Eval { store } => cmd_eval(&store),
        Command::DumpReconstructions { store, out, seed } => cmd_dump(&store, &out, seed),
        Command::ReportMemory { store } => cmd_report(&store),
        Command::Figure3 {
            config,
            centroids,
            seed,
            out,
        } => cmd_figure3(config.as_deref(), centroids, seed, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run_id(stem: &str, cfg: &ExperimentConfig, seed: u64) -> String {
    let variant = match cfg.variant {
        Variant::Eec => "EEC",
        Variant::Eecs => "EECS",
        Variant::FineTune => "finetune",
    };
    let mut id = format!("{stem}-{variant}");
    if let Some(k) = cfg.budget {
        write!(id, "-K{k}").unwrap();
    }
    if cfg.ratio > 0.0 {
        write!(id, "-r{}", cfg.ratio).unwrap();
    }
    for a in &cfg.ablations {
        let name = serde_json::to_value(a).unwrap();
        write!(id, "-{}", name.as_str().unwrap()).unwrap();
    }
    format!("{id}-seed{seed}")
}

fn report_csv(outcome: &ExperimentOutcome) -> String {
    let mut csv = String::from("increment,accuracy,units_stored,bytes\n");
    for r in &outcome.increments {
        writeln!(csv, "{},{:.6},{},{}", r.increment, r.accuracy, r.units_stored, r.bytes).unwrap();
    }
    csv
}

fn loss_csvs(outcome: &ExperimentOutcome) -> (String, String) {
    let mut ae = String::from("increment,epoch,L_r,L_cont,L\n");
    for (t, losses) in &outcome.autoencoder_losses {
        for l in losses {
            writeln!(ae, "{t},{},{:.8},{:.8},{:.8}", l.epoch, l.reconstruction, l.content, l.total).unwrap();
        }
    }
    let mut clf = String::from("increment,epoch,loss\n");
    for (t, losses) in &outcome.classifier_losses {
        for (e, l) in losses.iter().enumerate() {
            writeln!(clf, "{t},{},{l:.8}", e + 1).unwrap();
        }
    }
    (ae, clf)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    variant: Option<Variant>,
    budget: Option<usize>,
    ratio: Option<f64>,
    ablations: Vec<Ablation>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if budget.is_some() {
        cfg.budget = budget;
    }
    if let Some(r) = ratio {
        cfg.ratio = r;
    }
    for a in ablations {
        if !cfg.ablations.contains(&a) {
            cfg.ablations.push(a);
        }
    }
    cfg.ablations.sort();
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let stem = config
        .and_then(|p| p.file_stem())
        .map_or_else(|| "default".to_owned(), |s| s.to_string_lossy().into_owned());
    let data = load_dataset(&cfg.dataset).context("loading the dataset")?;
    let mut totals = Vec::new();
    for &seed in &cfg.seeds {
        let stream = prepare_stream(&cfg, data.clone(), seed)?;
        let dir = out.join(run_id(&stem, &cfg, seed));
        log::info!("run {} with {} increments", dir.display(), stream.len());
        let outcome = run_experiment(&cfg, &stream, seed)?;
        let single = ExperimentConfig {
            seeds: vec![seed],
            ..cfg.clone()
        };
        write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(&single)?)?;
        write_atomic(&dir.join("report.csv"), report_csv(&outcome).as_bytes())?;
        let (ae, clf) = loss_csvs(&outcome);
        write_atomic(&dir.join("autoencoder_loss.csv"), ae.as_bytes())?;
        write_atomic(&dir.join("classifier_loss.csv"), clf.as_bytes())?;
        let store = dir.join("store");
        save_store(&store, &outcome.store)?;
        save_models(
            &store,
            &outcome.classifier,
            &outcome.autoencoders,
            &outcome.head_classes,
            cfg.variant == Variant::Eecs,
        )?;
        let a_n = outcome.average_incremental_accuracy()?;
        println!("{}: A_N={a_n:.4}", dir.display());
        totals.push(a_n);
    }
    if totals.len() > 1 {
        println!("mean A_N={:.4}", totals.iter().sum::<f64>() / totals.len() as f64);
    }
    Ok(())
}

struct Mapped<'a> {
    classifier: &'a mut recall::models::Classifier<f32>,
    ids: &'a [usize],
}

impl Predictor for Mapped<'_> {
    fn predict(&mut self, images: &Tensor<f32>) -> recall::Result<Vec<usize>> {
        Ok(self.classifier.predict(images)?.into_iter().map(|p| self.ids[p]).collect())
    }
}

fn cmd_eval(run: &Path) -> Result<()> {
    let cfg = parse_config(&run.join("config.json"))?;
    let seed = cfg.seeds[0];
    let mut models = load_models(&run.join("store"))?;
    let data = load_dataset(&cfg.dataset).context("loading the dataset")?;
    let stream = prepare_stream(&cfg, data, seed)?;
    let learned = models.manifest.head_classes.len();
    let through = (1..=stream.len())
        .find(|&t| stream.classes_through(t).map(|c| c.len()).unwrap_or(0) >= learned)
        .context("the stream has fewer classes than the saved head")?;
    let ids = models.manifest.head_classes.clone();
    let entry = single_headed_eval(
        &mut Mapped {
            classifier: &mut models.classifier,
            ids: &ids,
        },
        &stream,
        through,
    )?;
    for (c, a) in &entry.per_class {
        println!("class {c}: {a:.4}");
    }
    println!("accuracy={:.4} over {} classes", entry.accuracy, entry.per_class.len());
    Ok(())
}

fn cmd_dump(store_dir: &Path, out: &Path, seed: u64) -> Result<()> {
    const PER_GRID: usize = 64;
    let store = load_store(store_dir)?;
    let mut models = load_models(store_dir)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = 0;
    for (&class, mem) in &store.classes {
        let Some(task) = mem.items.first().map(MemoryItem::task) else { continue };
        let ae = models
            .autoencoder_for(task)
            .with_context(|| format!("no autoencoder checkpoint for task {task}"))?;
        let shape = ae.spec.input;
        let ext = if shape.channels == 1 { "pgm" } else { "ppm" };
        let episodes: Vec<&EncodedEpisode> = mem.episodes().take(PER_GRID).collect();
        if !episodes.is_empty() {
            let (images, _) = rehearse(ae, &episodes)?;
            let rows: Vec<&[f32]> = (0..images.batch()).map(|i| images.row(i)).collect();
            image::write_grid(&out.join(format!("class{class:03}_episodes.{ext}")), shape, &rows, 8)?;
            written += 1;
        }
        let mut samples = Vec::new();
        for c in mem.concepts() {
            let n = (c.count as usize).min(PER_GRID - samples.len().min(PER_GRID));
            samples.extend(sample_pseudo_episodes(c, n, &mut rng).into_iter().map(|embedding| EncodedEpisode {
                embedding,
                label: class,
                task: c.task,
            }));
            if samples.len() >= PER_GRID {
                break;
            }
        }
        if !samples.is_empty() {
            let refs: Vec<&EncodedEpisode> = samples.iter().collect();
            let (images, _) = rehearse(ae, &refs)?;
            let rows: Vec<&[f32]> = (0..images.batch()).map(|i| images.row(i)).collect();
            image::write_grid(&out.join(format!("class{class:03}_pseudo.{ext}")), shape, &rows, 8)?;
            written += 1;
        }
    }
    println!("wrote {written} grids to {}", out.display());
    Ok(())
}

fn cmd_report(store_dir: &Path) -> Result<()> {
    let store = load_store(store_dir)?;
    let params = if store_dir.join("models.json").exists() {
        load_models(store_dir)?.param_count()
    } else {
        0
    };
    let report = memory_report(&store, params);
    println!("{report}");
    if let Some(k) = store.capacity {
        println!(
            "budget: {k} units ({})",
            format_megabytes(recall::store::payload_bytes(k, report.dim))
        );
    }
    Ok(())
}

fn scatter_csv(points: &[EncodedEpisode]) -> String {
    let d = points.first().map_or(0, |p| p.embedding.len());
    let mut csv = (0..d).map(|k| format!("z{k}")).collect::<Vec<_>>().join(",");
    csv.push_str(",label\n");
    for p in points {
        for v in &p.embedding {
            write!(csv, "{v},").unwrap();
        }
        writeln!(csv, "{}", p.label).unwrap();
    }
    csv
}

fn write_figure(dir: &Path, outcome: &Figure3Outcome) -> Result<()> {
    write_atomic(&dir.join("original.csv"), scatter_csv(&outcome.original).as_bytes())?;
    let mut energy = String::from("concepts,energy_distance\n");
    for cloud in &outcome.clouds {
        write_atomic(
            &dir.join(format!("pseudo_{}.csv", cloud.concepts)),
            scatter_csv(&cloud.points).as_bytes(),
        )?;
        writeln!(energy, "{},{:.9}", cloud.concepts, cloud.energy_distance).unwrap();
    }
    write_atomic(&dir.join("energy.csv"), energy.as_bytes())?;
    Ok(())
}

fn cmd_figure3(config: Option<&Path>, centroids: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: Figure3Config = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Figure3Config::default(),
    };
    if let Some(n) = centroids {
        cfg.concept_counts = vec![n];
    }
    if cfg.concept_counts.is_empty() {
        bail!("no concept counts to reduce to");
    }
    let seeds = seed.map_or_else(|| vec![1, 2, 3], |s| vec![s]);
    let data = load_dataset(&cfg.dataset).context("loading the dataset")?;
    for seed in seeds {
        let outcome = run_figure3(&data, &cfg, seed)?;
        let dir = out.join(format!("seed{seed}"));
        write_figure(&dir, &outcome)?;
        let energies: Vec<String> = outcome
            .clouds
            .iter()
            .map(|c| format!("{}:{:.6}", c.concepts, c.energy_distance))
            .collect();
        println!(
            "seed {seed}: {} episodes, energy {} monotone={}",
            outcome.original.len(),
            energies.join(" "),
            outcome.is_monotone()
        );
    }
    Ok(())
}
