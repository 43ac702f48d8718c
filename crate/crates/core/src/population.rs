//! Module and blueprint populations, and the per-generation individuals
//! that bind a blueprint to concrete module choices and training
//! hyperparameters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GenotypeGraph, GraphError, NodeId};
use crate::speciation::{
    blueprint_features, module_features, Normalizer, SpeciesId, SpeciesSet,
};
use crate::tables::{LayerSpec, ParameterTables, TrainingHyperparams};
use crate::variation::FitnessScore;

/// Layer-level genotype: hidden nodes are concrete layer specs.
pub type ModuleGraph = GenotypeGraph<LayerSpec>;
/// Module-level genotype: hidden nodes reference module species.
pub type BlueprintGraph = GenotypeGraph<SpeciesId>;

/// Identifier of a population member, unique within its population across
/// a whole run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct MemberId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member<G> {
    pub id: MemberId,
    pub genotype: G,
    pub species: Option<SpeciesId>,
    pub score: Option<FitnessScore>,
}

/// A fixed-size population: replacement, not growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population<G> {
    pub members: Vec<Member<G>>,
    next_member_id: u64,
}

pub type ModulePopulation = Population<ModuleGraph>;
pub type BlueprintPopulation = Population<BlueprintGraph>;

impl<G> Population<G> {
    pub fn new() -> Self {
        Population { members: Vec::new(), next_member_id: 0 }
    }

    pub fn push(&mut self, genotype: G) -> MemberId {
        let id = MemberId(self.next_member_id);
        self.next_member_id += 1;
        self.members.push(Member { id, genotype, species: None, score: None });
        id
    }

    /// Re-inserts an existing member unchanged (elitism); keeps its id,
    /// species and score.
    pub fn push_member(&mut self, member: Member<G>) {
        self.members.push(member);
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, id: MemberId) -> Option<&Member<G>> {
        self.members.iter().find(|m| m.id == id)
    }

    pub fn members_of_species(&self, species: SpeciesId) -> Vec<&Member<G>> {
        self.members.iter().filter(|m| m.species == Some(species)).collect()
    }

    /// An empty successor population sharing the member-id counter.
    pub fn successor(&self) -> Self {
        Population { members: Vec::new(), next_member_id: self.next_member_id }
    }
}

impl<G> Default for Population<G> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Error)]
pub enum PopulationError {
    #[error("module species list is empty")]
    NoModuleSpecies,
    #[error("species {0} has no members and no surviving species exists to repair to")]
    UnrepairableSpecies(SpeciesId),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Creates `count` module graphs; sizes come from the module-size spec and
/// node contents from the intermediate component tables.
pub fn init_module_population<R: Rng>(
    count: usize,
    tables: &ParameterTables,
    rng: &mut R,
) -> Result<ModulePopulation, PopulationError> {
    let range = tables
        .hyper
        .module_size
        .as_size_range()
        .unwrap_or((1, 3));
    let mut pop = Population::new();
    for _ in 0..count {
        let mut sampler = |r: &mut R| tables.sample_intermediate_layer(r);
        let g = ModuleGraph::random(range, &mut sampler, rng)?;
        pop.push(g);
    }
    Ok(pop)
}

/// Creates `count` blueprint graphs whose node contents are module-species
/// references drawn uniformly from `module_species`.
pub fn init_blueprint_population<R: Rng>(
    count: usize,
    module_species: &[SpeciesId],
    tables: &ParameterTables,
    rng: &mut R,
) -> Result<BlueprintPopulation, PopulationError> {
    if module_species.is_empty() {
        return Err(PopulationError::NoModuleSpecies);
    }
    let range = tables
        .hyper
        .blueprint_size
        .as_size_range()
        .unwrap_or((1, 3));
    let mut pop = Population::new();
    for _ in 0..count {
        let mut sampler =
            |r: &mut R| module_species[r.random_range(0..module_species.len())];
        let g = BlueprintGraph::random(range, &mut sampler, rng)?;
        pop.push(g);
    }
    Ok(pop)
}

/// Re-points blueprint nodes referencing extinct module species to the
/// surviving species whose centroid is nearest the dead species' last
/// known centroid (taken from `dead_centroids` when available).
pub fn repair_dangling_refs(
    blueprints: &mut BlueprintPopulation,
    module_species: &SpeciesSet,
    dead_centroids: &BTreeMap<SpeciesId, crate::speciation::FeatureVector>,
    norm: &Normalizer,
) -> Result<(), PopulationError> {
    for member in &mut blueprints.members {
        let nodes: Vec<NodeId> = member.genotype.hidden_ids().collect();
        for node in nodes {
            let sid = *member.genotype.content(node).expect("hidden has content");
            if module_species.get(sid).is_some() {
                continue;
            }
            let probe = dead_centroids
                .get(&sid)
                .copied()
                .unwrap_or(crate::speciation::FeatureVector::new(0.0, 0.0, 0.0));
            let replacement = module_species
                .nearest(probe, norm)
                .ok_or(PopulationError::UnrepairableSpecies(sid))?;
            member.genotype.set_content(node, replacement);
        }
    }
    Ok(())
}

/// A blueprint instance bound to concrete module choices and training
/// hyperparameters; the unit of fitness evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub blueprint_member: MemberId,
    pub blueprint: BlueprintGraph,
    /// Blueprint hidden node -> the module member chosen for it.
    pub resolved_modules: BTreeMap<NodeId, (MemberId, ModuleGraph)>,
    pub hyperparams: TrainingHyperparams,
    pub score: Option<FitnessScore>,
}

impl Individual {
    /// Concrete structural features of the resolved network genotype:
    /// blueprint structure with resolved module sizes.
    pub fn features(&self) -> crate::speciation::FeatureVector {
        blueprint_features(&self.blueprint, |sid| {
            // Mean over the modules actually resolved for this species in
            // this individual.
            let sizes: Vec<f64> = self
                .resolved_modules
                .iter()
                .filter(|(node, _)| self.blueprint.content(**node) == Some(sid))
                .map(|(_, (_, g))| module_features(g).network_size)
                .collect();
            if sizes.is_empty() {
                0.0
            } else {
                sizes.iter().sum::<f64>() / sizes.len() as f64
            }
        })
    }
}

/// Spawns `count` individuals: blueprints assigned round-robin, each
/// species reference resolved by a uniform draw from that species' current
/// members, hyperparameters freshly sampled.
pub fn spawn_individuals<R: Rng>(
    count: usize,
    blueprints: &BlueprintPopulation,
    modules: &ModulePopulation,
    tables: &ParameterTables,
    rng: &mut R,
) -> Result<Vec<Individual>, PopulationError> {
    assert!(!blueprints.is_empty(), "blueprint population is empty");
    let mut individuals = Vec::with_capacity(count);
    for i in 0..count {
        let bp = &blueprints.members[i % blueprints.len()];
        let mut resolved = BTreeMap::new();
        for node in bp.genotype.hidden_ids().collect::<Vec<_>>() {
            let sid = *bp.genotype.content(node).expect("hidden has content");
            let candidates = modules.members_of_species(sid);
            let pick = if candidates.is_empty() {
                // Dangling reference that slipped past repair: fall back to
                // the whole module population rather than aborting the run.
                if modules.is_empty() {
                    return Err(PopulationError::UnrepairableSpecies(sid));
                }
                &modules.members[rng.random_range(0..modules.len())]
            } else {
                candidates[rng.random_range(0..candidates.len())]
            };
            resolved.insert(node, (pick.id, pick.genotype.clone()));
        }
        individuals.push(Individual {
            blueprint_member: bp.id,
            blueprint: bp.genotype.clone(),
            resolved_modules: resolved,
            hyperparams: tables.sample_training_hyperparams(rng),
            score: None,
        });
    }
    Ok(individuals)
}
