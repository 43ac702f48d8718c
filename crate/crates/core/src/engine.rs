//! The generation loop: configuration, population bookkeeping, speciation
//! across generations, logging, checkpoints and exports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble, AssemblyError, Shape};
use crate::data::{load_csv, load_idx, subsample_split, DataError, Dataset, SplitSpec};
use crate::eval::{evaluate_generation, Evaluator};
use crate::graph::LineageMark;
use crate::nn::{History, NnError, TrainState};
use crate::population::{
    init_blueprint_population, init_module_population, repair_dangling_refs, spawn_individuals,
    BlueprintPopulation, Individual, ModulePopulation, Population, PopulationError,
};
use crate::speciation::{
    blueprint_features, kmeans, module_features, FeatureVector, Normalizer, SpeciationError,
    Species, SpeciesId, SpeciesSet,
};
use crate::tables::{parse_tables_value, ParameterTables, ParseError, TrainingHyperparams};
use crate::variation::{
    apply_scores, next_generation, propagate_scores, rank_desc, shared_fitness, FitnessScore,
    GenerationRates, VariationConfig,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Tables(#[from] ParseError),
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Speciation(#[from] SpeciationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.display().to_string(), source }
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// The built-in procedural digit fixture.
    Synthetic { samples: usize, seed: u64 },
    /// An IDX (MNIST container) image/label file pair.
    Idx { images: PathBuf, labels: PathBuf },
    /// Rows of `label, pixel...` raw values.
    Csv { path: PathBuf, width: usize, height: usize, channels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    pub train: usize,
    pub validation: usize,
    #[serde(default)]
    pub split_seed: u64,
}

impl DatasetConfig {
    /// Loads the full dataset and carves out the train/validation splits.
    pub fn load(&self) -> Result<(Dataset, Dataset), DataError> {
        let full = match &self.source {
            DatasetSource::Synthetic { samples, seed } => {
                crate::data::synthetic_digits(*samples, *seed)
            }
            DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
            DatasetSource::Csv { path, width, height, channels } => {
                load_csv(path, *width, *height, *channels)?
            }
        };
        subsample_split(
            &full,
            SplitSpec {
                train_count: self.train,
                validation_count: self.validation,
                seed: self.split_seed,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunSection {
    generations: usize,
    individuals: usize,
    blueprints: usize,
    modules: usize,
    starting_species: usize,
    new_species_threshold: f64,
    elitism: f64,
    crossover: f64,
    mutation: f64,
    swap_prob: f64,
    master_seed: u64,
    workers: usize,
    output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            generations: 10,
            individuals: 10,
            blueprints: 10,
            modules: 30,
            starting_species: 3,
            new_species_threshold: 3.0,
            elitism: 0.2,
            crossover: 0.3,
            mutation: 0.5,
            swap_prob: 0.5,
            master_seed: 0,
            workers: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub generations: usize,
    pub individuals: usize,
    pub blueprints: usize,
    pub modules: usize,
    pub starting_species: usize,
    pub new_species_threshold: f64,
    pub rates: GenerationRates,
    pub variation: VariationConfig,
    pub master_seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub tables: ParameterTables,
}

/// Parses a run config document: `[run]` and `[dataset]` sections plus the
/// full parameter-table grammar in the same file.
pub fn parse_run_config(text: &str) -> Result<RunConfig, EngineError> {
    let doc: toml::Value = toml::from_str(text)?;
    let run: RunSection = match doc.get("run") {
        Some(v) => v.clone().try_into()?,
        None => RunSection::default(),
    };
    let dataset: DatasetConfig = doc
        .get("dataset")
        .ok_or_else(|| EngineError::InvalidConfig("missing [dataset] section".into()))?
        .clone()
        .try_into()?;
    let tables = parse_tables_value(&doc)?;
    let rates = GenerationRates::new(run.elitism, run.crossover, run.mutation)
        .map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
    let config = RunConfig {
        generations: run.generations,
        individuals: run.individuals,
        blueprints: run.blueprints,
        modules: run.modules,
        starting_species: run.starting_species,
        new_species_threshold: run.new_species_threshold,
        rates,
        variation: VariationConfig {
            swap_prob: run.swap_prob,
            ..VariationConfig::default()
        },
        master_seed: run.master_seed,
        workers: run.workers,
        output_dir: run.output_dir,
        dataset,
        tables,
    };
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let counts = [
            ("generations", self.generations),
            ("individuals", self.individuals),
            ("blueprints", self.blueprints),
            ("modules", self.modules),
            ("starting_species", self.starting_species),
            ("workers", self.workers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(EngineError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.new_species_threshold <= 0.0 {
            return Err(EngineError::InvalidConfig(
                "new_species_threshold must be positive".into(),
            ));
        }
        if self.starting_species > self.modules {
            return Err(EngineError::InvalidConfig(
                "starting_species cannot exceed the module population".into(),
            ));
        }
        Ok(())
    }
}

/// Per-species statistics for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesRecord {
    pub species: SpeciesId,
    pub mean_size: f64,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    pub mean_accuracy: f64,
    pub mean_loss: f64,
}

/// One appended log entry per generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub species: Vec<SpeciesRecord>,
    /// Index of the generation's best individual in its spawn order.
    pub best_index: usize,
    pub best_score: FitnessScore,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "generation,species_id,mean_size,mean_nodes,mean_edges,\
mean_accuracy,mean_loss,best_accuracy,best_loss,seconds";

/// Renders the generation log as CSV, one row per (generation, species).
pub fn log_csv(records: &[GenerationRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        for s in &r.species {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.generation,
                s.species,
                s.mean_size,
                s.mean_nodes,
                s.mean_edges,
                s.mean_accuracy,
                s.mean_loss,
                r.best_score.accuracy,
                r.best_score.loss,
                r.seconds,
            ));
        }
    }
    out
}

/// The log with the wall-clock column blanked; what determinism
/// comparisons look at, since elapsed time legitimately varies.
pub fn log_csv_stable(records: &[GenerationRecord]) -> String {
    let mut stable = records.to_vec();
    for r in &mut stable {
        r.seconds = 0.0;
    }
    log_csv(&stable)
}

/// Complete evolving state; everything a checkpoint must capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub generation: usize,
    pub modules: ModulePopulation,
    pub blueprints: BlueprintPopulation,
    pub module_species: SpeciesSet,
    pub blueprint_species: SpeciesSet,
    pub rng: ChaCha8Rng,
    pub best: Option<Individual>,
    pub records: Vec<GenerationRecord>,
}

/// What a finished run hands back.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub best: Individual,
    pub best_score: FitnessScore,
    pub records: Vec<GenerationRecord>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    lineage_counter: u64,
    config: RunConfig,
    state: EngineState,
}

pub struct Engine {
    pub config: RunConfig,
    pub state: EngineState,
}

/// Clusters a fresh population into `k` starting species and tags every
/// member.
fn initial_speciate<G>(
    pop: &mut Population<G>,
    features: &[FeatureVector],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SpeciesSet, SpeciationError> {
    let k = k.min(features.len());
    let result = kmeans(features, k, 1e-6, 100, rng)?;
    let mut set = SpeciesSet::new();
    let mut ids = Vec::with_capacity(k);
    for _ in 0..k {
        let id = set.fresh_id();
        set.species.push(Species {
            id,
            centroid: FeatureVector::new(0.0, 0.0, 0.0),
            shared_fitness: None,
        });
        ids.push(id);
    }
    let tagged: Vec<(SpeciesId, FeatureVector)> = result
        .assignments
        .iter()
        .zip(features)
        .map(|(c, f)| (ids[*c], *f))
        .collect();
    for (member, (sid, _)) in pop.members.iter_mut().zip(&tagged) {
        member.species = Some(*sid);
    }
    set.recompute_centroids(&tagged);
    Ok(set)
}

/// Assigns species to unspeciated members, recomputes centroids, and
/// returns the centroids of species that died out this generation.
fn respeciate<G>(
    pop: &mut Population<G>,
    set: &mut SpeciesSet,
    features: &[FeatureVector],
    threshold: f64,
) -> BTreeMap<SpeciesId, FeatureVector> {
    let norm = Normalizer::fit(features);
    for (member, f) in pop.members.iter_mut().zip(features) {
        if member.species.is_none() {
            member.species = Some(set.assign(*f, threshold, &norm));
        }
    }
    let before: BTreeMap<SpeciesId, FeatureVector> =
        set.species.iter().map(|s| (s.id, s.centroid)).collect();
    let tagged: Vec<(SpeciesId, FeatureVector)> = pop
        .members
        .iter()
        .zip(features)
        .map(|(m, f)| (m.species.expect("assigned above"), *f))
        .collect();
    set.recompute_centroids(&tagged);
    let alive: std::collections::BTreeSet<SpeciesId> =
        set.species.iter().map(|s| s.id).collect();
    before.into_iter().filter(|(id, _)| !alive.contains(id)).collect()
}

fn update_shared_fitness<G>(set: &mut SpeciesSet, pop: &Population<G>) {
    for species in &mut set.species {
        let scores: Vec<Option<FitnessScore>> = pop
            .members
            .iter()
            .filter(|m| m.species == Some(species.id))
            .map(|m| m.score)
            .collect();
        species.shared_fitness = Some(shared_fitness(&scores));
    }
}

fn module_feature_vec(pop: &ModulePopulation) -> Vec<FeatureVector> {
    pop.members.iter().map(|m| module_features(&m.genotype)).collect()
}

fn blueprint_feature_vec(
    pop: &BlueprintPopulation,
    module_species: &SpeciesSet,
) -> Vec<FeatureVector> {
    pop.members
        .iter()
        .map(|m| {
            blueprint_features(&m.genotype, |sid| {
                module_species.get(*sid).map(|s| s.centroid.network_size).unwrap_or(0.0)
            })
        })
        .collect()
}

impl Engine {
    /// Initializes both populations and their starting species.
    pub fn new(config: RunConfig) -> Result<Engine, EngineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
        let mut modules = init_module_population(config.modules, &config.tables, &mut rng)?;
        let module_feats = module_feature_vec(&modules);
        let module_species =
            initial_speciate(&mut modules, &module_feats, config.starting_species, &mut rng)?;
        let mut blueprints = init_blueprint_population(
            config.blueprints,
            &module_species.ids(),
            &config.tables,
            &mut rng,
        )?;
        let bp_feats = blueprint_feature_vec(&blueprints, &module_species);
        let blueprint_species =
            initial_speciate(&mut blueprints, &bp_feats, config.starting_species, &mut rng)?;
        Ok(Engine {
            config,
            state: EngineState {
                generation: 0,
                modules,
                blueprints,
                module_species,
                blueprint_species,
                rng,
                best: None,
                records: Vec::new(),
            },
        })
    }

    pub fn finished(&self) -> bool {
        self.state.generation >= self.config.generations
    }

    /// Runs one full generation: spawn, evaluate, score propagation,
    /// logging, then module and blueprint reproduction and re-speciation.
    pub fn step<E: Evaluator>(&mut self, evaluator: &E) -> Result<GenerationRecord, EngineError> {
        let started = Instant::now();
        let s = &mut self.state;
        let cfg = &self.config;

        let mut individuals = spawn_individuals(
            cfg.individuals,
            &s.blueprints,
            &s.modules,
            &cfg.tables,
            &mut s.rng,
        )?;
        let failures = evaluate_generation(
            &mut individuals,
            evaluator,
            cfg.workers,
            cfg.master_seed,
            s.generation,
        );
        for (index, error) in &failures {
            eprintln!(
                "generation {}: individual {index} failed evaluation: {error}",
                s.generation
            );
        }

        let maps = propagate_scores(&individuals);
        apply_scores(&mut s.modules, &maps.modules);
        apply_scores(&mut s.blueprints, &maps.blueprints);
        update_shared_fitness(&mut s.module_species, &s.modules);
        update_shared_fitness(&mut s.blueprint_species, &s.blueprints);

        // Best-so-far: replaced only by a strictly better individual.
        let (best_index, gen_best) = individuals
            .iter()
            .enumerate()
            .max_by(|a, b| rank_desc(&b.1.score, &a.1.score))
            .map(|(i, ind)| (i, ind))
            .expect("non-empty generation");
        let gen_best_score = gen_best.score.expect("evaluated");
        let replace = match &s.best {
            None => true,
            Some(best) => {
                rank_desc(&Some(gen_best_score), &best.score) == std::cmp::Ordering::Less
            }
        };
        if replace {
            s.best = Some(gen_best.clone());
        }

        // Log the evaluated generation's module species.
        let feats = module_feature_vec(&s.modules);
        let mut species_records = Vec::new();
        for sp in &s.module_species.species {
            let members: Vec<usize> = s
                .modules
                .members
                .iter()
                .enumerate()
                .filter(|(_, m)| m.species == Some(sp.id))
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let mean =
                |f: &dyn Fn(usize) -> f64| members.iter().map(|&i| f(i)).sum::<f64>() / n;
            let scored: Vec<FitnessScore> = members
                .iter()
                .filter_map(|&i| s.modules.members[i].score)
                .collect();
            let sn = scored.len().max(1) as f64;
            species_records.push(SpeciesRecord {
                species: sp.id,
                mean_size: mean(&|i| feats[i].network_size),
                mean_nodes: mean(&|i| feats[i].node_count),
                mean_edges: mean(&|i| feats[i].edge_count),
                mean_accuracy: scored.iter().map(|x| x.accuracy).sum::<f64>() / sn,
                mean_loss: scored.iter().map(|x| x.loss).sum::<f64>() / sn,
            });
        }

        // Modules reproduce first, then blueprints (following the listed
        // algorithm order), each followed by re-speciation.
        let mut module_sampler =
            |r: &mut ChaCha8Rng| cfg.tables.sample_intermediate_layer(r);
        s.modules = next_generation(
            &s.modules,
            &cfg.rates,
            &s.module_species,
            &cfg.variation,
            &mut module_sampler,
            &mut s.rng,
        );
        let module_feats = module_feature_vec(&s.modules);
        let dead = respeciate(
            &mut s.modules,
            &mut s.module_species,
            &module_feats,
            cfg.new_species_threshold,
        );

        let module_ids = s.module_species.ids();
        let mut blueprint_sampler =
            |r: &mut ChaCha8Rng| module_ids[r.random_range(0..module_ids.len())];
        s.blueprints = next_generation(
            &s.blueprints,
            &cfg.rates,
            &s.blueprint_species,
            &cfg.variation,
            &mut blueprint_sampler,
            &mut s.rng,
        );
        let norm = Normalizer::fit(&module_feats);
        repair_dangling_refs(&mut s.blueprints, &s.module_species, &dead, &norm)?;
        let bp_feats = blueprint_feature_vec(&s.blueprints, &s.module_species);
        respeciate(
            &mut s.blueprints,
            &mut s.blueprint_species,
            &bp_feats,
            cfg.new_species_threshold,
        );

        let record = GenerationRecord {
            generation: s.generation,
            species: species_records,
            best_index,
            best_score: gen_best_score,
            seconds: started.elapsed().as_secs_f64(),
        };
        s.records.push(record.clone());
        s.generation += 1;
        Ok(record)
    }

    /// Runs every remaining generation, checkpointing after each when a
    /// path is given.
    pub fn run<E: Evaluator>(
        &mut self,
        evaluator: &E,
        checkpoint_path: Option<&Path>,
    ) -> Result<RunReport, EngineError> {
        while !self.finished() {
            self.step(evaluator)?;
            if let Some(path) = checkpoint_path {
                self.save_checkpoint(path)?;
            }
        }
        self.report()
    }

    pub fn report(&self) -> Result<RunReport, EngineError> {
        let best = self
            .state
            .best
            .clone()
            .ok_or_else(|| EngineError::InvalidConfig("run has no generations yet".into()))?;
        let best_score = best.score.expect("best is scored");
        Ok(RunReport { best, best_score, records: self.state.records.clone() })
    }

    /// Writes the full engine state as a versioned JSON checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), EngineError> {
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            lineage_counter: LineageMark::counter(),
            config: self.config.clone(),
            state: self.state.clone(),
        };
        let json = serde_json::to_string(&checkpoint)
            .map_err(|e| EngineError::BadCheckpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(io_err(path))
    }

    /// Restores an engine mid-run; the lineage counter is raised so marks
    /// created after resume never collide with checkpointed ones.
    pub fn load_checkpoint(path: &Path) -> Result<Engine, EngineError> {
        let json = std::fs::read_to_string(path).map_err(io_err(path))?;
        let checkpoint: Checkpoint = serde_json::from_str(&json)
            .map_err(|e| EngineError::BadCheckpoint(e.to_string()))?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(EngineError::BadCheckpoint(format!(
                "version {} unsupported (expected {})",
                checkpoint.version, CHECKPOINT_VERSION
            )));
        }
        LineageMark::raise_counter(checkpoint.lineage_counter);
        Ok(Engine { config: checkpoint.config, state: checkpoint.state })
    }
}

/// The identical-budget control for the scaled experiment: every
/// generation draws brand-new random populations and evaluates them; no
/// elitism, crossover or mutation. Returns the best score seen.
pub fn run_random_baseline<E: Evaluator>(
    config: &RunConfig,
    evaluator: &E,
) -> Result<FitnessScore, EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    let mut best: Option<FitnessScore> = None;
    for generation in 0..config.generations {
        let mut modules = init_module_population(config.modules, &config.tables, &mut rng)?;
        let module_feats = module_feature_vec(&modules);
        let species =
            initial_speciate(&mut modules, &module_feats, config.starting_species, &mut rng)?;
        let blueprints = init_blueprint_population(
            config.blueprints,
            &species.ids(),
            &config.tables,
            &mut rng,
        )?;
        let mut individuals = spawn_individuals(
            config.individuals,
            &blueprints,
            &modules,
            &config.tables,
            &mut rng,
        )?;
        evaluate_generation(
            &mut individuals,
            evaluator,
            config.workers,
            config.master_seed,
            generation,
        );
        for ind in &individuals {
            if rank_desc(&ind.score, &best) == std::cmp::Ordering::Less {
                best = ind.score;
            }
        }
    }
    best.ok_or_else(|| EngineError::InvalidConfig("baseline produced no scores".into()))
}

/// Trains the best network on the full dataset for a validation pass after
/// evolution; returns the per-epoch history and the final validation
/// score.
pub fn final_train(
    best: &Individual,
    train: &Dataset,
    validation: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<(History, FitnessScore), EngineError> {
    let input_shape = train.sample_shape();
    let graph = assemble(best, input_shape, train.class_count)?;
    let mut state: TrainState<f32> =
        TrainState::build_network(&graph, input_shape, ChaCha8Rng::seed_from_u64(seed))?;
    let hyper = TrainingHyperparams { epochs, ..best.hyperparams.clone() };
    let history = state.train(train, validation, &hyper)?;
    let score = state.evaluate(validation)?;
    Ok((history, score))
}

/// Writes the run artifacts: the best network's portable serialization,
/// DOT renderings of its blueprint, modules and assembled graph, and the
/// generation log CSV.
pub fn export_best(
    report: &RunReport,
    input_shape: Shape,
    class_count: usize,
    out_dir: &Path,
) -> Result<(), EngineError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, contents: String| -> Result<(), EngineError> {
        let path = out_dir.join(name);
        std::fs::write(&path, contents).map_err(io_err(&path))
    };

    let graph = assemble(&report.best, input_shape, class_count)?;
    let json = serde_json::to_string_pretty(&graph)
        .map_err(|e| EngineError::BadCheckpoint(e.to_string()))?;
    write("best_network.json", json)?;
    write("best_network.dot", graph.to_dot("network"))?;
    write(
        "best_blueprint.dot",
        report.best.blueprint.to_dot("blueprint", |sid| format!("species {sid}")),
    )?;
    for (node, (_, module)) in &report.best.resolved_modules {
        write(
            &format!("best_module_{node}.dot"),
            module.to_dot(&format!("module_{node}"), |spec| spec.summary()),
        )?;
    }
    write("generations.csv", log_csv(&report.records))?;
    Ok(())
}
