//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 1 to 4 need the MNIST IDX files in `$RECALL_MNIST_DIR` (or
//! `data/mnist` at the workspace root). Without them they report FAIL as
//! blocked and do not affect the exit status; criteria 5 to 10 always run and
//! any failure among them exits non-zero.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{central, check_params, rel_err};
use recall::data::{load_dataset, Dataset, DatasetSource, ImageShape};
use recall::figure3::{run_figure3, Figure3Config};
use recall::memory::{
    compute_reduction, integrate, ClassMemory, MemoryBudget, MemoryItem, MemoryStore, OverflowPolicy,
};
use recall::models::{Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec};
use recall::nn::{cross_entropy, cross_entropy_grad, softmax, Mode, OptimizerConfig, Tensor};
use recall::nst::{content_loss, reconstruction_loss, EncodedEpisode};
use recall::rehearsal::{pseudorehearse, PseudoConfig};
use recall::store::{encode_bank, format_megabytes, memory_report, payload_bytes, EpisodeBank};
use recall::trainer::{
    prepare_stream, run_experiment, sample_decay_weight, Ablation, ExperimentConfig, Variant,
};

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// ---------------------------------------------------------------- MNIST runs

fn mnist() -> Result<Dataset, String> {
    let mut candidates = Vec::new();
    if let Some(dir) = std::env::var_os("RECALL_MNIST_DIR") {
        candidates.push(PathBuf::from(dir));
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap();
    candidates.push(root.join("data/mnist"));
    let mut tried = Vec::new();
    for dir in candidates {
        let source = DatasetSource::Mnist {
            dir: dir.clone(),
            pad_to: 32,
            validation: 10_000,
        };
        match load_dataset(&source) {
            Ok(d) => return Ok(d),
            Err(_) => tried.push(dir.display().to_string()),
        }
    }
    Err(format!(
        "no MNIST IDX files in {}; set RECALL_MNIST_DIR",
        tried.join(", ")
    ))
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        autoencoder: OptimizerConfig {
            epochs: 30,
            milestones: vec![15],
            ..OptimizerConfig::autoencoder_default()
        },
        classifier: OptimizerConfig {
            epochs: 100,
            epochs_next: Some(25),
            milestones: vec![30, 60, 80],
            ..OptimizerConfig::classifier_default()
        },
        ..ExperimentConfig::default()
    }
}

/// Per-increment accuracies of every seed, cached by run name.
struct Runs {
    data: Dataset,
    cache: BTreeMap<&'static str, Vec<Vec<f64>>>,
}

impl Runs {
    fn get(&mut self, name: &'static str) -> Result<&Vec<Vec<f64>>, String> {
        if !self.cache.contains_key(name) {
            let base = desk_config();
            let cfg = match name {
                "EEC" => base,
                "finetune" => ExperimentConfig {
                    variant: Variant::FineTune,
                    ..base
                },
                "EEC-noDecay" => ExperimentConfig {
                    ablations: vec![Ablation::NoDecay],
                    ..base
                },
                "EEC-K2000" => ExperimentConfig {
                    budget: Some(2000),
                    ..base
                },
                "EEC-noPseudo-K2000" => ExperimentConfig {
                    budget: Some(2000),
                    ablations: vec![Ablation::NoPseudo],
                    ..base
                },
                _ => unreachable!(),
            };
            let mut per_seed = Vec::new();
            for seed in SEEDS {
                let stream = prepare_stream(&cfg, self.data.clone(), seed).map_err(|e| e.to_string())?;
                let out = run_experiment(&cfg, &stream, seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
                let acc = out.eval.per_increment();
                eprintln!("  {name} seed {seed}: {acc:.4?}");
                per_seed.push(acc);
            }
            self.cache.insert(name, per_seed);
        }
        Ok(&self.cache[name])
    }

    /// Mean over seeds of the average of the first `n` increments.
    fn mean_a(&mut self, name: &'static str, n: usize) -> Result<f64, String> {
        let runs = self.get(name)?;
        let a: Vec<f64> = runs
            .iter()
            .map(|acc| acc[..n.min(acc.len())].iter().sum::<f64>() / n.min(acc.len()) as f64)
            .collect();
        Ok(a.iter().sum::<f64>() / a.len() as f64)
    }
}

fn criterion_1(runs: &mut Result<Runs, String>) -> Verdict {
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return Verdict::Blocked(e.clone()),
    };
    match (runs.mean_a("EEC", 5), runs.mean_a("EEC", 10)) {
        (Ok(a5), Ok(a10)) => verdict(
            a5 >= 0.95 && a10 >= 0.90,
            format!("A_5={a5:.4} (>= 0.95), A_10={a10:.4} (>= 0.90), mean of 3 seeds"),
        ),
        (Err(e), _) | (_, Err(e)) => Verdict::Fail(e),
    }
}

fn criterion_2(runs: &mut Result<Runs, String>) -> Verdict {
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return Verdict::Blocked(e.clone()),
    };
    match (runs.mean_a("EEC", 10), runs.mean_a("finetune", 10)) {
        (Ok(eec), Ok(ft)) => verdict(
            eec - ft >= 0.30,
            format!("A_10 EEC={eec:.4}, fine-tune={ft:.4}, gap {:.1} points (>= 30)", (eec - ft) * 100.0),
        ),
        (Err(e), _) | (_, Err(e)) => Verdict::Fail(e),
    }
}

fn criterion_3(runs: &mut Result<Runs, String>) -> Verdict {
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return Verdict::Blocked(e.clone()),
    };
    let pairs = [("EEC", "EEC-noDecay"), ("EEC-K2000", "EEC-noPseudo-K2000")];
    let mut details = Vec::new();
    let mut ok = true;
    for (full, ablated) in pairs {
        match (runs.mean_a(full, 10), runs.mean_a(ablated, 10)) {
            (Ok(a), Ok(b)) => {
                ok &= a >= b;
                details.push(format!("{full}={a:.4} vs {ablated}={b:.4}"));
            }
            (Err(e), _) | (_, Err(e)) => return Verdict::Fail(e),
        }
    }
    verdict(ok, details.join("; "))
}

fn criterion_4(data: &Result<Dataset, String>) -> Verdict {
    let data = match data {
        Ok(d) => d,
        Err(e) => return Verdict::Blocked(e.clone()),
    };
    let cfg = Figure3Config::default();
    let mut details = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        match run_figure3(data, &cfg, seed) {
            Ok(out) => {
                let energies: Vec<String> = out
                    .clouds
                    .iter()
                    .map(|c| format!("{}:{:.5}", c.concepts, c.energy_distance))
                    .collect();
                ok &= out.original.len() == 11379 && out.is_monotone();
                details.push(format!(
                    "seed {seed}: {} episodes, {}",
                    out.original.len(),
                    energies.join(" ")
                ));
            }
            Err(e) => return Verdict::Fail(format!("seed {seed}: {e}")),
        }
    }
    verdict(ok, details.join("; "))
}

// ---------------------------------------------------------------- pure checks

fn criterion_5() -> Verdict {
    let mut store = MemoryStore::new(None, OverflowPolicy::Cluster, false, 0);
    let episodes: Vec<EncodedEpisode> = (0..5000)
        .map(|i| EncodedEpisode {
            embedding: vec![i as f32; 256],
            label: i % 10,
            task: i % 10 + 1,
        })
        .collect();
    let bank = EpisodeBank::episodes(0, 1, 256, episodes.iter().filter(|e| e.label == 0).cloned().collect());
    store.add_task(episodes).unwrap();
    let report = memory_report(&store, 0);
    let small = format_megabytes(report.payload_bytes);
    let large = format_megabytes(payload_bytes(65_000, 256));
    let bank_len = encode_bank(&bank.unwrap()).len();
    verdict(
        report.payload_bytes == 5_120_000 && small == "5.12 MB" && large == "66.56 MB" && bank_len == 28 + 500 * 1024,
        format!(
            "5000 units -> {} bytes \"{small}\"; 65000 units -> {} bytes \"{large}\"",
            report.payload_bytes,
            payload_bytes(65_000, 256)
        ),
    )
}

/// Largest whole `m` with `m * K_{t-1} <= N_y * (K_{t-1} - K_r)`, by counting.
fn counting_oracle(n: usize, stored: usize, kr: usize) -> usize {
    let mut m = 0;
    while (m + 1) * stored <= n * (stored - kr) {
        m += 1;
    }
    m
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut overflows = 0;
    let mut infeasible_checked = 0;
    for case in 0..200 {
        let classes = rng.random_range(1..=6);
        let counts: Vec<usize> = (0..classes).map(|_| rng.random_range(1..=40)).collect();
        let stored: usize = counts.iter().sum();
        let incoming = rng.random_range(1..=30);
        let floor = counts.iter().map(|&n| n.min(2)).sum::<usize>() + incoming;
        let capacity = rng.random_range(floor..=stored + incoming + 5);

        let budget = MemoryBudget {
            capacity,
            stored,
            incoming,
        };
        let kr = (stored + incoming).saturating_sub(capacity);
        let expected: Vec<usize> = counts.iter().map(|&n| counting_oracle(n, stored, kr)).collect();
        if compute_reduction(&budget, &counts).ok() != Some(expected) {
            mismatches += 1;
        }

        // same shape, but the new task alone overflows an empty store
        if case % 4 == 0 {
            let tight = MemoryBudget {
                capacity: rng.random_range(1..=stored.max(1)),
                stored,
                incoming: stored + rng.random_range(capacity..=capacity + 10),
            };
            let err = compute_reduction(&tight, &counts);
            if tight.reduction() > stored {
                infeasible_checked += 1;
                if err.is_ok() {
                    mismatches += 1;
                }
            }
        }

        let mut store = MemoryStore::new(None, OverflowPolicy::Cluster, false, case);
        for (c, &n) in counts.iter().enumerate() {
            let eps = (0..n)
                .map(|_| EncodedEpisode {
                    embedding: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    label: c,
                    task: c + 1,
                })
                .collect();
            store.add_task(eps).unwrap();
        }
        store.capacity = Some(capacity);
        let new = (0..incoming)
            .map(|_| EncodedEpisode {
                embedding: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: classes,
                task: classes + 1,
            })
            .collect();
        match store.add_task(new) {
            Ok(_) if store.unit_count() <= capacity => {}
            _ => overflows += 1,
        }
    }
    verdict(
        mismatches == 0 && overflows == 0 && infeasible_checked > 0,
        format!(
            "200 instances: {mismatches} target mismatches, {overflows} budget violations, {infeasible_checked} infeasible cases rejected"
        ),
    )
}

/// Greedy agglomeration from scratch: every step scans all pairs, every
/// concept keeps its raw members and recomputes its statistics directly.
fn greedy_oracle(points: &[Vec<f64>], target: usize) -> (Vec<(usize, usize)>, Vec<Vec<usize>>) {
    let mut groups: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let units = |g: &Vec<Vec<usize>>| g.iter().map(|m| if m.len() == 1 { 1 } else { 2 }).sum::<usize>();
    let mean = |m: &Vec<usize>| -> Vec<f64> {
        let d = points[0].len();
        (0..d)
            .map(|k| m.iter().map(|&i| points[i][k]).sum::<f64>() / m.len() as f64)
            .collect()
    };
    let goal = target.max(2);
    let mut merges = Vec::new();
    if units(&groups) <= target {
        return (merges, groups);
    }
    while units(&groups) > goal && groups.len() > 1 {
        let centroids: Vec<Vec<f64>> = groups.iter().map(mean).collect();
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                let d: f64 = centroids[i].iter().zip(&centroids[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (_, i, j) = best;
        merges.push((i, j));
        let moved = groups.remove(j);
        groups[i].extend(moved);
    }
    (merges, groups)
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sequence_mismatch = 0;
    let mut worst_stat: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=8);
        let target = rng.random_range(0..=n);
        let episodes: Vec<EncodedEpisode> = (0..n)
            .map(|_| EncodedEpisode {
                embedding: (0..d).map(|_| rng.random_range(-5.0f32..5.0)).collect(),
                label: 0,
                task: 1,
            })
            .collect();
        let points: Vec<Vec<f64>> = episodes
            .iter()
            .map(|e| e.embedding.iter().map(|&v| v as f64).collect())
            .collect();
        let mut mem = ClassMemory::new(0);
        for e in &episodes {
            mem.push(MemoryItem::Episode(e.clone())).unwrap();
        }
        let got = integrate(&mut mem, target).unwrap();
        let (merges, groups) = greedy_oracle(&points, target);
        if got.merges != merges || mem.items.len() != groups.len() {
            sequence_mismatch += 1;
            continue;
        }
        for (item, members) in mem.items.iter().zip(&groups) {
            let MemoryItem::Concept(c) = item else {
                if members.len() != 1 {
                    sequence_mismatch += 1;
                }
                continue;
            };
            if c.count as usize != members.len() {
                sequence_mismatch += 1;
                continue;
            }
            let var = c.covariance();
            for k in 0..d {
                let m = members.iter().map(|&i| points[i][k]).sum::<f64>() / members.len() as f64;
                let v = members.iter().map(|&i| (points[i][k] - m).powi(2)).sum::<f64>() / members.len() as f64;
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
                worst_stat = worst_stat.max(rel(c.centroid[k], m));
                if v > 1e-9 {
                    worst_stat = worst_stat.max(rel(var[k], v));
                } else {
                    worst_stat = worst_stat.max((var[k] - v).abs());
                }
            }
        }
    }
    verdict(
        sequence_mismatch == 0 && worst_stat <= 1e-6,
        format!("100 instances: {sequence_mismatch} sequence mismatches, worst statistic error {worst_stat:.2e} (<= 1e-6)"),
    )
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = ImageShape::new(1, 4, 4);
    let x = random_tensor(&[3, 1, 4, 4], 0.0, 1.0, &mut rng);

    // reconstruction loss through every autoencoder parameter
    let mut ae = Autoencoder::<f64>::new(
        AutoencoderSpec {
            input: shape,
            stages: vec![2],
            latent_dim: None,
        },
        &mut rng,
    )
    .unwrap();
    let ae_params = ae.param_count();
    let e_r = check_params(
        &mut ae,
        |a| a.params_mut(),
        |a| {
            a.zero_grad();
            let rec = a.reconstruct(&x, Mode::Train).unwrap();
            let (_, g) = reconstruction_loss(&x, &rec).unwrap();
            a.backward(&g).unwrap();
        },
        |a| {
            let rec = a.reconstruct(&x, Mode::Train).unwrap();
            reconstruction_loss(&x, &rec).unwrap().0
        },
    );

    // content loss with respect to the reconstruction
    let mut clf = Classifier::<f64>::new(
        ClassifierSpec {
            channels: vec![2, 3],
            tap: Some(1),
            ..ClassifierSpec::standard(shape, 4)
        },
        &mut rng,
    )
    .unwrap();
    let clf_params = clf.param_count();
    let x_rec = random_tensor(&[3, 1, 4, 4], 0.0, 1.0, &mut rng);
    let (_, g) = content_loss(&mut clf, &x, &x_rec).unwrap();
    let mut e_c: f64 = 0.0;
    let mut v = x_rec.data().to_vec();
    for i in 0..v.len() {
        let num = central(&mut v, i, 1e-5, |p| {
            let t = Tensor::from_vec(x_rec.shape(), p.to_vec()).unwrap();
            content_loss(&mut clf, &x, &t).unwrap().0
        });
        e_c = e_c.max(rel_err(g.data()[i], num));
    }

    // cross-entropy with respect to logits, then through the classifier
    let logits = random_tensor(&[5, 4], -2.0, 2.0, &mut rng);
    let labels = [0, 3, 1, 1, 2];
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let mut e_ce: f64 = 0.0;
    let mut v = logits.data().to_vec();
    for i in 0..v.len() {
        let num = central(&mut v, i, 1e-5, |p| {
            cross_entropy(&Tensor::from_vec(&[5, 4], p.to_vec()).unwrap(), &labels).unwrap().0
        });
        e_ce = e_ce.max(rel_err(g.data()[i], num));
    }
    let y = [1, 0, 3];
    e_ce = e_ce.max(check_params(
        &mut clf,
        |c| c.params_mut(),
        |c| {
            c.zero_grad();
            let out = c.forward(&x, Mode::Train).unwrap();
            let (_, g) = cross_entropy(&out, &y).unwrap();
            c.backward(&g).unwrap();
        },
        |c| cross_entropy(&c.forward(&x, Mode::Train).unwrap(), &y).unwrap().0,
    ));

    let ok = e_r <= 1e-3 && e_c <= 1e-3 && e_ce <= 1e-3 && ae_params <= 1000 && clf_params <= 1000;
    verdict(
        ok,
        format!(
            "max relative error L_r {e_r:.1e} ({ae_params} params), L_cont {e_c:.1e}, cross-entropy {e_ce:.1e} ({clf_params} params); tolerance 1e-3"
        ),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = ImageShape::new(1, 8, 8);
    let mut ae = Autoencoder::<f32>::new(
        AutoencoderSpec {
            input: shape,
            stages: vec![4, 2],
            latent_dim: None,
        },
        &mut rng,
    )
    .unwrap();
    let mut clf = Classifier::<f32>::new(
        ClassifierSpec {
            channels: vec![4, 8],
            tap: Some(1),
            ..ClassifierSpec::standard(shape, 3)
        },
        &mut rng,
    )
    .unwrap();
    let d = ae.embedding_dim();
    let config = PseudoConfig {
        oversample: 4,
        retries: 2,
    };
    let (mut violations, mut wrong_size, mut padded_total, mut members) = (0, 0, 0, 0);
    for k in 0..50 {
        let count = rng.random_range(1..=40u64);
        let centroid: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0) * count as f64).collect();
        let concept = recall::memory::Concept {
            centroid,
            m2,
            count,
            label: k % 3,
            task: 1,
        };
        // every fifth target lies past the head, so nothing passes and all is padding
        let target = if k % 5 == 4 { 3 } else { k % 3 };
        let batch = pseudorehearse(&mut ae, &concept, k, Some((&mut clf, target)), &config, &mut rng).unwrap();
        members += count as usize;
        if batch.len() != count as usize {
            wrong_size += 1;
        }
        padded_total += batch.padded;
        let kept = batch.len() - batch.padded;
        if kept > 0 {
            let (pred, _) = clf.classify(&batch.images.select(&(0..kept).collect::<Vec<_>>())).unwrap();
            violations += pred.iter().filter(|&&p| p != target).count();
        }
    }
    verdict(
        violations == 0 && wrong_size == 0 && padded_total > 0,
        format!(
            "50 concepts, {members} members: {violations} kept images off target, {wrong_size} batches of wrong size, {padded_total} padded"
        ),
    )
}

fn criterion_10() -> Verdict {
    let grid_g: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let grid_a: Vec<f64> = (0..=5).map(f64::from).collect();
    let mut ok = grid_a.iter().all(|&a| sample_decay_weight(0.0, a) == 1.0)
        && grid_g.iter().all(|&g| sample_decay_weight(g, 0.0) == 1.0);
    for &g in &grid_g {
        for w in grid_a.windows(2) {
            ok &= sample_decay_weight(g, w[1]) <= sample_decay_weight(g, w[0]);
        }
    }
    for &a in &grid_a {
        for w in grid_g.windows(2) {
            ok &= sample_decay_weight(w[1], a) <= sample_decay_weight(w[0], a);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let logits = random_tensor(&[6, 5], -3.0, 3.0, &mut rng);
    let labels = [4, 0, 2, 2, 1, 3];
    let probs = softmax(&logits);
    let base = cross_entropy_grad(&probs, &labels, &[1.0; 6]);
    let mut worst: f64 = 0.0;
    for &g in &grid_g {
        for &a in &grid_a {
            let w = sample_decay_weight(g, a);
            let scaled = cross_entropy_grad(&probs, &labels, &[w; 6]);
            for (s, b) in scaled.data().iter().zip(base.data()) {
                worst = worst.max((s - w * b).abs());
            }
        }
    }
    verdict(
        ok && worst <= 1e-15,
        format!("grid 11 x 6 monotone, boundaries exact; |grad(G*L) - G*grad(L)| <= {worst:.1e}"),
    )
}

fn main() {
    let data = mnist();
    let mut runs = data.clone().map(|data| Runs {
        data,
        cache: BTreeMap::new(),
    });
    let mut failed = 0;
    let mut report = |name: &str, v: Verdict| match v {
        Verdict::Pass(d) => println!("PASS criterion {name}: {d}"),
        Verdict::Fail(d) => {
            failed += 1;
            println!("FAIL criterion {name}: {d}");
        }
        Verdict::Blocked(d) => println!("FAIL criterion {name}: blocked, {d}"),
    };
    report("1 MNIST desk-scale accuracy", criterion_1(&mut runs));
    report("2 forgetting control", criterion_2(&mut runs));
    report("3 ablation directions", criterion_3(&mut runs));
    report("4 pseudo-embedding fidelity", criterion_4(&data));
    report("5 memory arithmetic", criterion_5());
    report("6 reduction targets and budget", criterion_6());
    report("7 clustering oracle", criterion_7());
    report("8 gradient checks", criterion_8());
    report("9 filter contract", criterion_9());
    report("10 decay algebra", criterion_10());
    if failed > 0 {
        std::process::exit(1);
    }
}
