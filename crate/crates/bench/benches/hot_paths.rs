//! Benchmarks for the paths a run spends its time in: mutation, network
//! assembly, k-means speciation, a full surrogate generation, and one
//! epoch of real training.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use conas_bench::bench_config;
use conas_core::assembly::{assemble, Shape};
use conas_core::engine::Engine;
use conas_core::eval::{SurrogateEvaluator, SurrogateSpec};
use conas_core::nn::TrainState;
use conas_core::population::spawn_individuals;
use conas_core::speciation::{kmeans, FeatureVector};
use conas_core::variation::{default_mutation_weights, mutate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_mutation(c: &mut Criterion) {
    let config = bench_config();
    let engine = Engine::new(config.clone()).unwrap();
    let graphs: Vec<_> =
        engine.state.modules.members.iter().map(|m| m.genotype.clone()).collect();
    let weights = default_mutation_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut i = 0usize;
    c.bench_function("mutate_module", |b| {
        b.iter(|| {
            let g = &graphs[i % graphs.len()];
            i += 1;
            let mut sampler =
                |r: &mut ChaCha8Rng| config.tables.sample_intermediate_layer(r);
            black_box(mutate(g, &weights, &mut sampler, &mut rng))
        })
    });
}

fn bench_assembly(c: &mut Criterion) {
    let config = bench_config();
    let engine = Engine::new(config.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let individuals = spawn_individuals(
        32,
        &engine.state.blueprints,
        &engine.state.modules,
        &config.tables,
        &mut rng,
    )
    .unwrap();
    let mut i = 0usize;
    c.bench_function("assemble_individual", |b| {
        b.iter(|| {
            let ind = &individuals[i % individuals.len()];
            i += 1;
            black_box(assemble(ind, Shape::Spatial(8, 8, 1), 10))
        })
    });
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<FeatureVector> = (0..1000)
        .map(|_| {
            FeatureVector::new(
                rng.random_range(0.0..400.0),
                rng.random_range(1.0..10.0),
                rng.random_range(1.0..12.0),
            )
        })
        .collect();
    c.bench_function("kmeans_1000x3", |b| {
        b.iter(|| black_box(kmeans(&points, 3, 1e-6, 100, &mut rng)))
    });
}

fn bench_surrogate_generation(c: &mut Criterion) {
    let config = bench_config();
    let evaluator = SurrogateEvaluator { spec: SurrogateSpec::default() };
    c.bench_function("surrogate_generation", |b| {
        b.iter_batched(
            || Engine::new(config.clone()).unwrap(),
            |mut engine| {
                engine.step(&evaluator).unwrap();
                black_box(engine)
            },
            BatchSize::LargeInput,
        )
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let config = bench_config();
    let (train, validation) = config.dataset.load().unwrap();
    let engine = Engine::new(config.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let individuals =
        spawn_individuals(1, &engine.state.blueprints, &engine.state.modules, &config.tables, &mut rng)
            .unwrap();
    let graph = assemble(&individuals[0], train.sample_shape(), train.class_count).unwrap();
    let mut hyper = individuals[0].hyperparams.clone();
    hyper.epochs = 1;
    c.bench_function("train_one_epoch_200", |b| {
        b.iter_batched(
            || {
                TrainState::<f32>::build_network(
                    &graph,
                    train.sample_shape(),
                    ChaCha8Rng::seed_from_u64(5),
                )
                .unwrap()
            },
            |mut state| black_box(state.train(&train, &validation, &hyper).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(
    benches,
    bench_mutation,
    bench_assembly,
    bench_kmeans,
    bench_surrogate_generation,
    bench_train_epoch,
);
criterion_main!(benches);
