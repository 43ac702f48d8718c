//! Co-evolutionary neural architecture search at desk scale.
//!
//! Two populations are evolved side by side: module graphs whose nodes are
//! concrete layer specs, and blueprint graphs whose nodes reference module
//! species. Each generation, blueprints are resolved into individuals,
//! assembled into layer-level networks, trained by the built-in engine and
//! scored; scores propagate back to blueprints, modules and species, and
//! elitism, crossover and mutation produce the next generation.

pub mod assembly;
pub mod data;
pub mod engine;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod population;
pub mod speciation;
pub mod tables;
pub mod variation;

pub use graph::{GenotypeGraph, LineageMark, NodeId};
pub use population::{BlueprintGraph, Individual, ModuleGraph};
pub use speciation::{FeatureVector, Species, SpeciesId};
pub use tables::{LayerSpec, ParameterTables, TrainingHyperparams};
pub use variation::FitnessScore;
