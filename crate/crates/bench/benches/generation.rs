use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use flam_bench::default_split;
use flam_core::embedder::Dictionary;
use flam_core::manipulator::Generator;
use flam_core::retrieval::manipulate_queries;
use flam_core::synthdata::{generate, AttributeSchema, GenConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn generation(c: &mut Criterion) {
    let schema = AttributeSchema::default();
    c.bench_function("generate_dataset", |b| {
        b.iter(|| generate(black_box(&GenConfig::default()), &schema, 0).unwrap())
    });

    let sp = default_split(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = Generator::init(64, 32, 128, &mut rng);
    let dict = Dictionary::new("color", 10, 32, &mut rng);
    let x = sp.query.feature_matrix();
    let targets: Vec<usize> = (0..x.rows()).map(|i| i % 10).collect();
    c.bench_function("manipulate_queries", |b| {
        b.iter(|| manipulate_queries(&gen, &dict, black_box(&x), &targets).unwrap())
    });
}

criterion_group!(benches, generation);
criterion_main!(benches);
