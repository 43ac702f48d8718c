//! The full acceptance suite: nine numbered criteria, each reported as a
//! single pass/fail line. Criterion 2 runs the scaled evolution
//! experiment and dominates the runtime; run with `--nocapture` to watch
//! the lines appear.

use std::collections::BTreeMap;

use conas_core::assembly::{
    assemble, assemble_raw, insert_merges, shape_check, AssembledLayer, LayerGraph, LayerId,
    LayerKind, Provenance, Shape,
};
use conas_core::engine::{
    log_csv_stable, parse_run_config, run_random_baseline, DatasetSource, Engine, RunConfig,
};
use conas_core::eval::{SurrogateEvaluator, SurrogateSpec, TrainerEvaluator};
use conas_core::nn::{cross_entropy, TrainState};
use conas_core::population::spawn_individuals;
use conas_core::speciation::{kmeans, FeatureVector, Normalizer};
use conas_core::tables::ParamValue;
use conas_core::variation::{
    default_mutation_weights, mutate, next_generation, propagate_scores, select_elites,
    uniform_crossover, FitnessScore,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn experiment_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../experiment.conf");
    let text = std::fs::read_to_string(path).expect("experiment.conf at repo root");
    parse_run_config(&text).expect("shipped config parses")
}

fn trainer_for(config: &RunConfig) -> TrainerEvaluator {
    let (train, validation) = config.dataset.load().expect("fixture loads");
    TrainerEvaluator {
        input_shape: train.sample_shape(),
        class_count: train.class_count,
        train,
        validation,
    }
}

fn surrogate() -> SurrogateEvaluator {
    SurrogateEvaluator { spec: SurrogateSpec::default() }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

// --- criterion 1: paper-scale targets are reference-only ---------------

fn criterion_1() -> Result<String, String> {
    // The large-run numbers cannot be reproduced in CI; they must be
    // documented as reference targets instead, which the README carries.
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .map_err(|e| format!("README.md missing: {e}"))?;
    for needle in ["86.5", "79.5", "77%", "92%", "reference targets"] {
        if !readme.contains(needle) {
            return Err(format!("README does not document reference target {needle:?}"));
        }
    }
    Ok("paper-scale targets documented as reference-only; property suites substitute".into())
}

// --- criterion 2: scaled evolution experiment --------------------------

fn criterion_2() -> Result<String, String> {
    let base = experiment_config();
    let mut evolved = Vec::new();
    let mut baseline = Vec::new();
    for seed in 0..5u64 {
        let mut config = base.clone();
        config.master_seed = seed;
        let evaluator = trainer_for(&config);
        let report = Engine::new(config.clone())
            .map_err(|e| e.to_string())?
            .run(&evaluator, None)
            .map_err(|e| e.to_string())?;
        evolved.push(report.best_score.accuracy);
        let b = run_random_baseline(&config, &evaluator).map_err(|e| e.to_string())?;
        baseline.push(b.accuracy);
    }
    let best = evolved.iter().cloned().fold(0.0, f64::max);
    let (em, bm) = (median(&evolved), median(&baseline));
    if best < 0.85 {
        return Err(format!("best evolved accuracy {best:.4} < 0.85"));
    }
    if em <= bm {
        return Err(format!(
            "evolved median {em:.4} does not exceed baseline median {bm:.4}"
        ));
    }
    Ok(format!(
        "best evolved {best:.4} >= 0.85; medians over 5 seeds: evolved {em:.4} > baseline {bm:.4}"
    ))
}

// --- criterion 3: graph-rule fuzzing -----------------------------------

fn criterion_3() -> Result<String, String> {
    let config = experiment_config();
    let engine = Engine::new(config.clone()).map_err(|e| e.to_string())?;
    let weights = default_mutation_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut checked = 0usize;

    let mut module_pool: Vec<_> =
        engine.state.modules.members.iter().map(|m| m.genotype.clone()).collect();
    while checked < 6000 {
        let a = rng.random_range(0..module_pool.len());
        let b = rng.random_range(0..module_pool.len());
        let mut sampler = |r: &mut ChaCha8Rng| config.tables.sample_intermediate_layer(r);
        let child = match checked % 3 {
            0 => mutate(&module_pool[a], &weights, &mut sampler, &mut rng),
            1 => uniform_crossover(&module_pool[a], &module_pool[b], 0.5, &mut rng),
            _ => {
                let x = uniform_crossover(&module_pool[a], &module_pool[b], 0.5, &mut rng);
                mutate(&x, &weights, &mut sampler, &mut rng)
            }
        };
        if !child.validate().ok() {
            return Err(format!("module sequence {checked} produced an invalid graph"));
        }
        let slot = rng.random_range(0..module_pool.len());
        module_pool[slot] = child;
        checked += 1;
    }

    let species = engine.state.module_species.ids();
    let mut blueprint_pool: Vec<_> =
        engine.state.blueprints.members.iter().map(|m| m.genotype.clone()).collect();
    while checked < 10_000 {
        let a = rng.random_range(0..blueprint_pool.len());
        let b = rng.random_range(0..blueprint_pool.len());
        let mut sampler =
            |r: &mut ChaCha8Rng| species[r.random_range(0..species.len())];
        let child = match checked % 3 {
            0 => mutate(&blueprint_pool[a], &weights, &mut sampler, &mut rng),
            1 => uniform_crossover(&blueprint_pool[a], &blueprint_pool[b], 0.5, &mut rng),
            _ => {
                let x = uniform_crossover(&blueprint_pool[a], &blueprint_pool[b], 0.5, &mut rng);
                mutate(&x, &weights, &mut sampler, &mut rng)
            }
        };
        if !child.validate().ok() {
            return Err(format!("blueprint sequence {checked} produced an invalid graph"));
        }
        let slot = rng.random_range(0..blueprint_pool.len());
        blueprint_pool[slot] = child;
        checked += 1;
    }
    Ok(format!("{checked} mutation/crossover sequences, all validate-passing"))
}

// --- criterion 4: gradient correctness ---------------------------------

fn conv_layer(filters: i64, kernel: i64, stride: i64, act: &str, dropout: f64) -> AssembledLayer {
    let mut params = BTreeMap::new();
    params.insert("filters".to_string(), ParamValue::Int(filters));
    params.insert("kernel_size".to_string(), ParamValue::Int(kernel));
    params.insert("stride".to_string(), ParamValue::Int(stride));
    params.insert("activation".to_string(), ParamValue::Str(act.to_string()));
    params.insert("dropout".to_string(), ParamValue::Float(dropout));
    AssembledLayer { kind: LayerKind::Conv2d, params, provenance: Provenance::Synthetic }
}

fn dense_layer(units: i64, act: &str) -> AssembledLayer {
    let mut params = BTreeMap::new();
    params.insert("units".to_string(), ParamValue::Int(units));
    params.insert("activation".to_string(), ParamValue::Str(act.to_string()));
    AssembledLayer { kind: LayerKind::Dense, params, provenance: Provenance::Synthetic }
}

fn plain(kind: LayerKind) -> AssembledLayer {
    AssembledLayer { kind, params: BTreeMap::new(), provenance: Provenance::Synthetic }
}

/// Central-difference check of every parameter of `graph`; returns the
/// worst relative error. `training` selects which forward mode both the
/// analytic and numeric sides use.
fn fd_worst_error(
    graph: &LayerGraph,
    input: Shape,
    batch: usize,
    training: bool,
    seed: u64,
) -> Result<f64, String> {
    let base: TrainState<f64> =
        TrainState::build_network(graph, input, ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Array2::from_shape_fn((batch, input.len()), |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> =
        (0..batch).map(|_| rng.random_range(0..base.class_count())).collect();

    let mut state = base.clone();
    let pass = state.forward(&x, training).map_err(|e| e.to_string())?;
    let (grads, _) = state.backward(&pass, &labels);

    let h = 1e-4;
    let mut worst = 0.0f64;
    let ids: Vec<LayerId> = base.params.keys().copied().collect();
    for id in ids {
        for slot in 0..2u8 {
            let dim = if slot == 0 {
                base.params[&id].weights.dim()
            } else {
                base.params[&id].bias.dim()
            };
            for i in 0..dim.0 {
                for j in 0..dim.1 {
                    let loss_at = |delta: f64| -> f64 {
                        let mut s = base.clone();
                        let p = s.params.get_mut(&id).unwrap();
                        if slot == 0 {
                            p.weights[[i, j]] += delta;
                        } else {
                            p.bias[[i, j]] += delta;
                        }
                        let pass = s.forward(&x, training).unwrap();
                        cross_entropy(&pass.probs, &labels)
                    };
                    let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                    let analytic = if slot == 0 {
                        grads[&id].weights[[i, j]]
                    } else {
                        grads[&id].bias[[i, j]]
                    };
                    let scale = 1.0f64.max(analytic.abs() + numeric.abs());
                    worst = worst.max((analytic - numeric).abs() / scale);
                }
            }
        }
    }
    Ok(worst)
}

fn criterion_4() -> Result<String, String> {
    // Smooth activations only: central differences are invalid at relu's
    // kink, and with ~150 pre-activations per instance a random draw
    // lands within h of it often enough to flake. Relu gradients are
    // pinned by the fixed-seed full-network check in the nn unit tests.
    let activations = ["tanh", "sigmoid", "linear"];
    let per_kind = 100usize;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_overall = 0.0f64;
    let mut run = |name: &str,
                   build: &mut dyn FnMut(&mut ChaCha8Rng) -> (LayerGraph, Shape, bool)|
     -> Result<(), String> {
        for instance in 0..per_kind {
            let (graph, input, training) = build(&mut rng);
            let seed = 9000 + instance as u64;
            let worst = fd_worst_error(&graph, input, 3, training, seed)
                .map_err(|e| format!("{name} instance {instance}: {e}"))?;
            if worst >= 1e-4 {
                return Err(format!("{name} instance {instance}: relative error {worst:.2e}"));
            }
            worst_overall = worst_overall.max(worst);
        }
        Ok(())
    };

    // Dense chains on flat input.
    run("dense", &mut |rng| {
        let classes = rng.random_range(2..5);
        let mut g = LayerGraph::shell(classes);
        let d = g.add_layer(dense_layer(
            rng.random_range(2..6),
            activations[rng.random_range(0..activations.len())],
        ));
        g.add_edge(g.input(), d);
        g.add_edge(d, g.output());
        (g, Shape::Flat(rng.random_range(3..9)), false)
    })?;

    // Single conv into flatten, no dropout.
    run("conv2d", &mut |rng| {
        let classes = rng.random_range(2..5);
        let mut g = LayerGraph::shell(classes);
        let side = rng.random_range(4..7);
        let c = g.add_layer(conv_layer(
            rng.random_range(1..4),
            if rng.random_range(0.0..1.0) < 0.5 { 1 } else { 3 },
            rng.random_range(1..3),
            activations[rng.random_range(0..activations.len())],
            0.0,
        ));
        let f = g.add_layer(plain(LayerKind::Flatten));
        g.add_edge(g.input(), c);
        g.add_edge(c, f);
        g.add_edge(f, g.output());
        (g, Shape::Spatial(side, side, rng.random_range(1..3)), false)
    })?;

    // Two conv branches into a channel-concat merge. Both branches keep
    // stride 1 so the merge is a pure concat: max-pool adapters have
    // argmax ties that finite differences can flip, and the pooled path
    // is pinned down by a fixed-seed unit test instead.
    run("merge-concat", &mut |rng| {
        let classes = rng.random_range(2..5);
        let mut g = LayerGraph::shell(classes);
        let a = g.add_layer(conv_layer(
            rng.random_range(1..3),
            3,
            1,
            activations[rng.random_range(0..activations.len())],
            0.0,
        ));
        let b = g.add_layer(conv_layer(
            rng.random_range(1..3),
            1,
            1,
            activations[rng.random_range(0..activations.len())],
            0.0,
        ));
        let m = g.add_layer(plain(LayerKind::MergeConcat));
        let f = g.add_layer(plain(LayerKind::Flatten));
        g.add_edge(g.input(), a);
        g.add_edge(g.input(), b);
        g.add_edge(a, m);
        g.add_edge(b, m);
        g.add_edge(m, f);
        g.add_edge(f, g.output());
        (g, Shape::Spatial(5, 5, 1), false)
    })?;

    // Flatten between conv and dense.
    run("flatten", &mut |rng| {
        let classes = rng.random_range(2..5);
        let mut g = LayerGraph::shell(classes);
        let c = g.add_layer(conv_layer(rng.random_range(1..3), 3, 1, "linear", 0.0));
        let f = g.add_layer(plain(LayerKind::Flatten));
        let d = g.add_layer(dense_layer(
            rng.random_range(2..6),
            activations[rng.random_range(0..activations.len())],
        ));
        g.add_edge(g.input(), c);
        g.add_edge(c, f);
        g.add_edge(f, d);
        g.add_edge(d, g.output());
        (g, Shape::Spatial(4, 4, 1), false)
    })?;

    // Dropout layers in inference mode (masks disabled, gradient exact).
    run("dropout-inference", &mut |rng| {
        let classes = rng.random_range(2..5);
        let mut g = LayerGraph::shell(classes);
        let c = g.add_layer(conv_layer(
            rng.random_range(1..4),
            3,
            1,
            activations[rng.random_range(0..activations.len())],
            rng.random_range(0.1..0.6),
        ));
        let f = g.add_layer(plain(LayerKind::Flatten));
        g.add_edge(g.input(), c);
        g.add_edge(c, f);
        g.add_edge(f, g.output());
        (g, Shape::Spatial(4, 4, 1), false)
    })?;

    // Bare softmax + cross-entropy head.
    run("softmax-ce", &mut |rng| {
        let classes = rng.random_range(2..7);
        let mut g = LayerGraph::shell(classes);
        g.add_edge(g.input(), g.output());
        (g, Shape::Flat(rng.random_range(2..9)), false)
    })?;

    Ok(format!(
        "6 layer kinds x {per_kind} instances, worst relative error {worst_overall:.2e} < 1e-4"
    ))
}

// --- criterion 5: k-means oracle ---------------------------------------

/// Lloyd's algorithm from the given initial centroids, in normalized
/// space, run to convergence. Returns (assignments, wcss).
fn lloyd(points: &[[f64; 3]], mut centroids: Vec<[f64; 3]>) -> (Vec<usize>, f64) {
    let k = centroids.len();
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
    };
    let mut assignments = vec![0usize; points.len()];
    loop {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    dist2(p, &centroids[a]).partial_cmp(&dist2(p, &centroids[b])).unwrap()
                })
                .unwrap();
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            for d in 0..3 {
                sums[assignments[i]][d] += p[d];
            }
            counts[assignments[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..3 {
                    centroids[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    (assignments, wcss)
}

/// Canonical form of a clustering: the sorted list of sorted member sets.
fn partition(assignments: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        groups[a].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups.sort();
    groups
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

fn criterion_5() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Fixed small instances with clear cluster structure: assignments
    // must match the best clustering over every possible seeding.
    let mut instances = Vec::new();
    for (k, centers) in [
        (2usize, vec![[20.0, 2.0, 2.0], [200.0, 8.0, 9.0]]),
        (3, vec![[10.0, 2.0, 1.0], [120.0, 5.0, 6.0], [320.0, 9.0, 11.0]]),
        (3, vec![[40.0, 3.0, 3.0], [150.0, 6.0, 7.0], [260.0, 8.0, 10.0]]),
    ] {
        let mut points = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..(4 + ci) {
                points.push(FeatureVector::new(
                    c[0] + rng.random_range(-5.0..5.0),
                    c[1] + rng.random_range(-0.4..0.4),
                    c[2] + rng.random_range(-0.4..0.4),
                ));
            }
        }
        instances.push((k, points));
    }
    for (idx, (k, points)) in instances.iter().enumerate() {
        let result = kmeans(points, *k, 1e-9, 200, &mut rng).map_err(|e| e.to_string())?;
        // Brute-force oracle: every k-subset of points as initial
        // centroids, Lloyd to convergence, keep the best WCSS.
        let norm = Normalizer::fit(points);
        let normalized: Vec<[f64; 3]> = points.iter().map(|p| norm.apply(*p)).collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for subset in k_subsets(points.len(), *k) {
            let init: Vec<[f64; 3]> = subset.iter().map(|&i| normalized[i]).collect();
            let (assign, wcss) = lloyd(&normalized, init);
            if best.as_ref().map_or(true, |(_, w)| wcss < *w - 1e-12) {
                best = Some((assign, wcss));
            }
        }
        let (oracle_assign, _) = best.unwrap();
        if partition(&result.assignments, *k) != partition(&oracle_assign, *k) {
            return Err(format!("instance {idx}: clustering differs from brute-force oracle"));
        }
    }

    // Fuzzed instances: WCSS must never increase between iterations.
    let mut fuzzed = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(5..40);
        let k = rng.random_range(1..4).min(n);
        let points: Vec<FeatureVector> = (0..n)
            .map(|_| {
                FeatureVector::new(
                    rng.random_range(0.0..400.0),
                    rng.random_range(1.0..10.0),
                    rng.random_range(1.0..12.0),
                )
            })
            .collect();
        let result = kmeans(&points, k, 1e-9, 200, &mut rng).map_err(|e| e.to_string())?;
        for w in result.wcss_history.windows(2) {
            if w[1] > w[0] + 1e-9 {
                return Err(format!("WCSS rose from {} to {}", w[0], w[1]));
            }
        }
        fuzzed += 1;
    }
    Ok(format!(
        "{} fixed instances match the brute-force oracle; WCSS non-increasing on {fuzzed} fuzzed instances",
        instances.len()
    ))
}

// --- criterion 6: score-propagation conservation -----------------------

fn criterion_6() -> Result<String, String> {
    let config = experiment_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut batches = 0usize;
    for seed in 0..50u64 {
        let mut cfg = config.clone();
        cfg.master_seed = seed;
        let engine = Engine::new(cfg).map_err(|e| e.to_string())?;
        let mut individuals = spawn_individuals(
            10,
            &engine.state.blueprints,
            &engine.state.modules,
            &config.tables,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        for ind in &mut individuals {
            ind.score = Some(FitnessScore::new(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..3.0),
            ));
        }
        let maps = propagate_scores(&individuals);

        // Usage counts per module member, with multiplicity.
        let mut usage: BTreeMap<_, usize> = BTreeMap::new();
        let mut rhs = 0.0f64;
        for ind in &individuals {
            for (member_id, _) in ind.resolved_modules.values() {
                *usage.entry(*member_id).or_default() += 1;
                rhs += ind.score.unwrap().accuracy;
            }
        }
        let lhs: f64 = maps
            .modules
            .iter()
            .map(|(id, score)| score.accuracy * usage[id] as f64)
            .sum();
        if (lhs - rhs).abs() > 1e-12 {
            return Err(format!("seed {seed}: sum mismatch {lhs} vs {rhs}"));
        }
        batches += 1;
    }
    Ok(format!("score totals conserved within 1e-12 on {batches} fuzzed populations"))
}

// --- criterion 7: elitism / monotonicity -------------------------------

fn criterion_7() -> Result<String, String> {
    let base = experiment_config();
    let evaluator = surrogate();
    for seed in 0..10u64 {
        let mut config = base.clone();
        config.master_seed = seed;
        config.generations = 20;
        let mut engine = Engine::new(config).map_err(|e| e.to_string())?;
        let mut previous: Option<FitnessScore> = None;
        while !engine.finished() {
            engine.step(&evaluator).map_err(|e| e.to_string())?;
            let best = engine.state.best.as_ref().unwrap().score.unwrap();
            if let Some(p) = previous {
                // cmp_desc: Less sorts first, i.e. strictly better.
                if p.cmp_desc(&best) == std::cmp::Ordering::Less {
                    return Err(format!(
                        "seed {seed} generation {}: best worsened",
                        engine.state.generation
                    ));
                }
            }
            previous = Some(best);
        }
    }

    // Elite genotypes cross the generation boundary bit-identically:
    // score a fresh module population by hand, reproduce it, and look
    // for the elites in the offspring.
    let config = base.clone();
    let mut e = Engine::new(config.clone()).map_err(|e| e.to_string())?;
    let species = e.state.module_species.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut individuals = spawn_individuals(
        config.individuals,
        &e.state.blueprints,
        &e.state.modules,
        &config.tables,
        &mut rng,
    )
    .map_err(|err| err.to_string())?;
    for (i, ind) in individuals.iter_mut().enumerate() {
        ind.score = Some(FitnessScore::new(0.1 + 0.05 * i as f64, 1.0));
    }
    let maps = propagate_scores(&individuals);
    conas_core::variation::apply_scores(&mut e.state.modules, &maps.modules);
    let scored = e.state.modules;
    let elites = select_elites(&scored, config.rates.elitism);
    if elites.is_empty() {
        return Err("no elites selected".into());
    }
    let mut sampler = |r: &mut ChaCha8Rng| config.tables.sample_intermediate_layer(r);
    let next = next_generation(
        &scored,
        &config.rates,
        &species,
        &config.variation,
        &mut sampler,
        &mut rng,
    );
    for id in &elites {
        let before = &scored.get(*id).unwrap().genotype;
        let survived = next
            .members
            .iter()
            .any(|m| m.id == *id && &m.genotype == before);
        if !survived {
            return Err(format!("elite {id:?} not carried over bit-identically"));
        }
    }
    Ok(format!(
        "best-so-far non-decreasing in 10/10 seeded 20-generation runs; {} elites bit-identical across the boundary",
        elites.len()
    ))
}

// --- criterion 8: determinism & schedule independence ------------------

fn small_trainer_config() -> RunConfig {
    let mut config = experiment_config();
    config.generations = 3;
    config.individuals = 4;
    config.blueprints = 4;
    config.modules = 8;
    config.starting_species = 2;
    config.master_seed = 17;
    config.dataset.source = DatasetSource::Synthetic { samples: 300, seed: 5 };
    config.dataset.train = 200;
    config.dataset.validation = 50;
    config.tables.training.epochs = 1;
    config
}

fn criterion_8() -> Result<String, String> {
    let base = small_trainer_config();

    // Worker-count independence on real training workloads.
    let mut logs = Vec::new();
    for workers in [1usize, 4] {
        let mut config = base.clone();
        config.workers = workers;
        let evaluator = trainer_for(&config);
        let report = Engine::new(config)
            .map_err(|e| e.to_string())?
            .run(&evaluator, None)
            .map_err(|e| e.to_string())?;
        logs.push((log_csv_stable(&report.records), report.best_score));
    }
    if logs[0] != logs[1] {
        return Err("worker counts 1 and 4 produced different logs".into());
    }

    // Checkpoint/resume equals the uninterrupted run.
    let evaluator = trainer_for(&base);
    let full = Engine::new(base.clone())
        .map_err(|e| e.to_string())?
        .run(&evaluator, None)
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.json");
    let mut first = Engine::new(base.clone()).map_err(|e| e.to_string())?;
    first.step(&evaluator).map_err(|e| e.to_string())?;
    first.save_checkpoint(&path).map_err(|e| e.to_string())?;
    drop(first);
    let resumed = Engine::load_checkpoint(&path)
        .map_err(|e| e.to_string())?
        .run(&evaluator, None)
        .map_err(|e| e.to_string())?;
    if log_csv_stable(&full.records) != log_csv_stable(&resumed.records)
        || full.best_score != resumed.best_score
    {
        return Err("checkpoint-resume diverged from the uninterrupted run".into());
    }
    Ok("logs bit-identical for workers 1 vs 4; checkpoint-resume matches uninterrupted run".into())
}

// --- criterion 9: assembly counting ------------------------------------

/// Counts the adapters the merge-stage graph requires: one per edge that
/// carries a spatial signal into a layer that needs a flat one (dense
/// heads, and the spatial side of a mixed merge).
fn expected_flattens(g: &LayerGraph) -> Result<usize, String> {
    let order = g.topological_order().map_err(|e| e.to_string())?;
    let mut spatial: BTreeMap<LayerId, bool> = BTreeMap::new();
    for id in &order {
        let preds = g.predecessors(*id);
        let s = match g.layer(*id).kind {
            LayerKind::Input => true,
            LayerKind::Conv2d => true,
            LayerKind::MergeConcat => preds.iter().all(|p| spatial[p]),
            LayerKind::Dense | LayerKind::OutputDense | LayerKind::Flatten => false,
            LayerKind::Junction => return Err("junction survived contraction".into()),
        };
        spatial.insert(*id, s);
    }
    let mut count = 0usize;
    for (u, v) in g.edges() {
        if !spatial[&u] {
            continue;
        }
        let needs_flat = match g.layer(v).kind {
            LayerKind::Dense | LayerKind::OutputDense => true,
            LayerKind::MergeConcat => {
                let other = g.predecessors(v).into_iter().find(|p| *p != u);
                other.map_or(false, |p| !spatial[&p])
            }
            _ => false,
        };
        if needs_flat {
            count += 1;
        }
    }
    Ok(count)
}

fn criterion_9() -> Result<String, String> {
    let config = experiment_config();
    let engine = Engine::new(config.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let individuals = spawn_individuals(
        300,
        &engine.state.blueprints,
        &engine.state.modules,
        &config.tables,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    for (i, ind) in individuals.iter().enumerate() {
        let raw = assemble_raw(ind, 10).map_err(|e| format!("individual {i}: {e}"))?;
        let fan_ins = raw.layer_ids().filter(|id| raw.in_degree(*id) == 2).count();
        let merged = insert_merges(raw);
        let flattens = expected_flattens(&merged)?;
        let module_nodes: usize =
            ind.resolved_modules.values().map(|(_, m)| m.hidden_count()).sum();
        let expected = module_nodes + 2 + fan_ins + flattens;

        let final_g =
            assemble(ind, Shape::Spatial(8, 8, 1), 10).map_err(|e| format!("individual {i}: {e}"))?;
        if final_g.len() != expected {
            return Err(format!(
                "individual {i}: {} layers, expected {module_nodes} + 2 + {fan_ins} + {flattens}",
                final_g.len()
            ));
        }
        // The assembled graph must also pass shape checking.
        shape_check(&final_g, Shape::Spatial(8, 8, 1)).map_err(|e| format!("individual {i}: {e}"))?;
    }
    Ok("node counts match Σ module nodes + 2 + fan-ins + adapters on 300 fuzzed individuals".into())
}

#[test]
fn acceptance() {
    let criteria: Vec<(usize, fn() -> Result<String, String>)> = vec![
        (1, criterion_1),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (9, criterion_9),
        (8, criterion_8),
        (2, criterion_2),
    ];
    let mut lines = Vec::new();
    let mut failures = 0usize;
    for (number, f) in criteria {
        let line = match f() {
            Ok(detail) => format!("criterion {number}: PASS — {detail}"),
            Err(detail) => {
                failures += 1;
                format!("criterion {number}: FAIL — {detail}")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    let mut sorted = lines.clone();
    sorted.sort();
    assert_eq!(failures, 0, "acceptance failures:\n{}", sorted.join("\n"));
}
