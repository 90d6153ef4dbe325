use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recall::figure3::energy_distance;
use recall::memory::{integrate, ClassMemory, MemoryItem};
use recall::nst::EncodedEpisode;

fn episodes(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<EncodedEpisode> {
    (0..n)
        .map(|_| EncodedEpisode {
            embedding: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: 0,
            task: 1,
        })
        .collect()
}

fn merge(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = episodes(400, 256, &mut rng);
    c.bench_function("integrate 400 episodes d=256 to 100 units", |b| {
        b.iter_batched(
            || {
                let mut m = ClassMemory::new(0);
                for e in &eps {
                    m.push(MemoryItem::Episode(e.clone())).unwrap();
                }
                m
            },
            |mut m| integrate(&mut m, 100).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn energy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = episodes(2000, 2, &mut rng);
    let b = episodes(2000, 2, &mut rng);
    let a: Vec<&[f32]> = a.iter().map(|e| e.embedding.as_slice()).collect();
    let b: Vec<&[f32]> = b.iter().map(|e| e.embedding.as_slice()).collect();
    c.bench_function("energy distance 2000x2000 in 2-D", |bn| {
        bn.iter(|| energy_distance(&a, &b).unwrap())
    });
}

criterion_group!(benches, merge, energy);
criterion_main!(benches);
