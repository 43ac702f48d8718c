//! Fitness evaluation: the trainer-backed evaluator, a fast deterministic
//! surrogate for tests, and parallel per-generation dispatch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble, AssemblyError, Shape};
use crate::data::Dataset;
use crate::nn::{NnError, TrainState};
use crate::population::Individual;
use crate::speciation::FeatureVector;
use crate::variation::FitnessScore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("evaluation worker panicked")]
    WorkerPanic,
}

/// Anything that can score an individual. Must be total over valid
/// individuals and must not mutate them; a failure is reported, not
/// panicked.
pub trait Evaluator: Sync {
    fn evaluate(&self, individual: &Individual, seed: u64) -> Result<FitnessScore, EvalError>;

    /// Whether two calls with equal arguments always return equal scores.
    fn deterministic(&self) -> bool {
        true
    }
}

/// Trains each candidate network from scratch and scores it on the
/// validation split; validation accuracy is the fitness signal.
pub struct TrainerEvaluator {
    pub train: Dataset,
    pub validation: Dataset,
    pub input_shape: Shape,
    pub class_count: usize,
}

impl Evaluator for TrainerEvaluator {
    fn evaluate(&self, individual: &Individual, seed: u64) -> Result<FitnessScore, EvalError> {
        let graph = assemble(individual, self.input_shape, self.class_count)?;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state: TrainState<f32> =
            TrainState::build_network(&graph, self.input_shape, rng)?;
        state.train(&self.train, &self.validation, &individual.hyperparams)?;
        Ok(state.evaluate(&self.validation)?)
    }
}

/// A synthetic fitness landscape with a known optimum: individuals score
/// by how close their structural features are to a target vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub target: FeatureVector,
    /// Kernel width; larger is flatter. Must be positive.
    pub width: f64,
    /// Per-feature divisors bringing the three features onto comparable
    /// scales before the distance is taken.
    pub scale: FeatureVector,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec {
            target: FeatureVector::new(200.0, 6.0, 8.0),
            width: 4.0,
            scale: FeatureVector::new(100.0, 5.0, 5.0),
        }
    }
}

impl SurrogateSpec {
    /// `exp(-dist^2 / width)` over scale-normalized features; in (0, 1],
    /// exactly 1 at the target.
    pub fn score(&self, features: &FeatureVector) -> f64 {
        let d = self.normalized_distance_sq(features);
        (-d / self.width).exp()
    }

    fn normalized_distance_sq(&self, features: &FeatureVector) -> f64 {
        let f = features.to_array();
        let t = self.target.to_array();
        let s = self.scale.to_array();
        f.iter()
            .zip(&t)
            .zip(&s)
            .map(|((f, t), s)| ((f - t) / s).powi(2))
            .sum()
    }
}

/// Millisecond-scale deterministic evaluator for tests and smoke runs.
pub struct SurrogateEvaluator {
    pub spec: SurrogateSpec,
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, individual: &Individual, _seed: u64) -> Result<FitnessScore, EvalError> {
        let value = self.spec.score(&individual.features());
        Ok(FitnessScore::new(value, 1.0 - value))
    }
}

/// Seed for one evaluation: a pure function of the run seed, the
/// generation and the individual's position, so results cannot depend on
/// worker count or scheduling. SplitMix64 finalizer over the packed
/// inputs.
pub fn eval_seed(master_seed: u64, generation: usize, index: usize) -> u64 {
    let mut z = master_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + generation as u64))
        .wrapping_add(0x632b_e5ab_61b4_d0c5u64.wrapping_mul(1 + index as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scores every individual in parallel. A failed or panicking evaluation
/// gives that individual the worst rank and the run continues; the error
/// text is returned alongside for logging.
pub fn evaluate_generation<E: Evaluator>(
    individuals: &mut [Individual],
    evaluator: &E,
    worker_count: usize,
    master_seed: u64,
    generation: usize,
) -> Vec<(usize, String)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<FitnessScore, EvalError>> = pool.install(|| {
        individuals
            .par_iter()
            .enumerate()
            .map(|(i, ind)| {
                let seed = eval_seed(master_seed, generation, i);
                std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    evaluator.evaluate(ind, seed)
                }))
                .unwrap_or(Err(EvalError::WorkerPanic))
            })
            .collect()
    });
    let mut failures = Vec::new();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok(score) => individuals[i].score = Some(score),
            Err(e) => {
                individuals[i].score = Some(FitnessScore::worst());
                failures.push((i, e.to_string()));
            }
        }
    }
    failures
}
