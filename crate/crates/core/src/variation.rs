//! Score propagation, fitness sharing, elitism, uniform crossover with
//! lineage compatibility, and the mutation operators.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GenotypeGraph, LineageMark, NodeId, MAX_HIDDEN_NODES};
use crate::population::{Individual, MemberId, Population};
use crate::speciation::SpeciesId;

/// Retries before a variation operator gives up and returns the parent.
const MAX_RETRIES: usize = 5;

/// Fitness of one evaluation: higher accuracy wins, ties broken by lower
/// loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    pub accuracy: f64,
    pub loss: f64,
}

impl FitnessScore {
    pub fn new(accuracy: f64, loss: f64) -> Self {
        FitnessScore { accuracy, loss }
    }

    /// Sentinel for failed or never-run evaluations; ranks below any real
    /// score. Finite so it survives JSON round trips.
    pub fn worst() -> Self {
        FitnessScore { accuracy: 0.0, loss: f64::MAX }
    }

    /// Best-first ordering.
    pub fn cmp_desc(&self, other: &Self) -> Ordering {
        other
            .accuracy
            .total_cmp(&self.accuracy)
            .then(self.loss.total_cmp(&other.loss))
    }
}

/// Best-first ordering over optional scores; never-evaluated members rank
/// below any evaluated member.
pub fn rank_desc(a: &Option<FitnessScore>, b: &Option<FitnessScore>) -> Ordering {
    match (a, b) {
        (Some(a), Some(b)) => a.cmp_desc(b),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Fractions of a population produced by each reproduction path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationRates {
    pub elitism: f64,
    pub crossover: f64,
    pub mutation: f64,
}

#[derive(Debug, Error)]
#[error("generation rates must be non-negative and sum to 1 (got {0:?})")]
pub struct BadRates(pub GenerationRates);

impl GenerationRates {
    pub fn new(elitism: f64, crossover: f64, mutation: f64) -> Result<Self, BadRates> {
        let r = GenerationRates { elitism, crossover, mutation };
        if elitism < 0.0
            || crossover < 0.0
            || mutation < 0.0
            || (elitism + crossover + mutation - 1.0).abs() > 1e-9
        {
            return Err(BadRates(r));
        }
        Ok(r)
    }

    /// Member counts per path for a population of `size`; always sums to
    /// `size`.
    pub fn counts(&self, size: usize) -> (usize, usize, usize) {
        let elites = (self.elitism * size as f64).ceil() as usize;
        let elites = elites.min(size);
        let crossover = ((self.crossover * size as f64).round() as usize).min(size - elites);
        let mutation = size - elites - crossover;
        (elites, crossover, mutation)
    }
}

/// Mean scores per blueprint and per module after a generation's
/// evaluations. A module used twice in one network is counted twice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreMaps {
    pub blueprints: BTreeMap<MemberId, FitnessScore>,
    pub modules: BTreeMap<MemberId, FitnessScore>,
}

/// Averages individual scores back onto the blueprints and modules that
/// produced them.
pub fn propagate_scores(individuals: &[Individual]) -> ScoreMaps {
    let mut bp_acc: BTreeMap<MemberId, (f64, f64, usize)> = BTreeMap::new();
    let mut mod_acc: BTreeMap<MemberId, (f64, f64, usize)> = BTreeMap::new();
    for ind in individuals {
        let score = ind.score.expect("propagate_scores requires scored individuals");
        let e = bp_acc.entry(ind.blueprint_member).or_insert((0.0, 0.0, 0));
        e.0 += score.accuracy;
        e.1 += score.loss;
        e.2 += 1;
        for (module_member, _) in ind.resolved_modules.values() {
            let e = mod_acc.entry(*module_member).or_insert((0.0, 0.0, 0));
            e.0 += score.accuracy;
            e.1 += score.loss;
            e.2 += 1;
        }
    }
    let mean = |m: BTreeMap<MemberId, (f64, f64, usize)>| {
        m.into_iter()
            .map(|(id, (a, l, n))| {
                (id, FitnessScore::new(a / n as f64, l / n as f64))
            })
            .collect()
    };
    ScoreMaps { blueprints: mean(bp_acc), modules: mean(mod_acc) }
}

/// Applies a score map to a population: mapped members get the new score,
/// unevaluated members keep whatever they had.
pub fn apply_scores<G>(pop: &mut Population<G>, scores: &BTreeMap<MemberId, FitnessScore>) {
    for member in &mut pop.members {
        if let Some(s) = scores.get(&member.id) {
            member.score = Some(*s);
        }
    }
}

/// Mean member accuracy of a species; the shared fitness stored on it.
pub fn shared_fitness(member_scores: &[Option<FitnessScore>]) -> f64 {
    let scored: Vec<f64> = member_scores
        .iter()
        .filter_map(|s| s.map(|s| s.accuracy))
        .collect();
    if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    }
}

/// Picks `ceil(rate * size)` members to preserve unchanged, allocated to
/// species proportionally to species size (largest remainder) so small
/// species are not wiped out by global truncation.
pub fn select_elites<G>(pop: &Population<G>, rate: f64) -> Vec<MemberId> {
    let total = ((rate * pop.len() as f64).ceil() as usize).min(pop.len());
    if total == 0 {
        return Vec::new();
    }
    // Group member indices by species.
    let mut groups: BTreeMap<Option<SpeciesId>, Vec<usize>> = BTreeMap::new();
    for (i, m) in pop.members.iter().enumerate() {
        groups.entry(m.species).or_default().push(i);
    }
    // Proportional allocation with largest remainder.
    let n = pop.len() as f64;
    let mut alloc: Vec<(Option<SpeciesId>, usize, f64)> = groups
        .iter()
        .map(|(sid, idxs)| {
            let exact = total as f64 * idxs.len() as f64 / n;
            (*sid, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = alloc.iter().map(|(_, b, _)| *b).sum();
    // Hand out remainders, largest first; ties by species id for
    // determinism.
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(alloc[a].0.cmp(&alloc[b].0)));
    for &i in order.iter().cycle() {
        if assigned >= total {
            break;
        }
        if alloc[i].1 < groups[&alloc[i].0].len() {
            alloc[i].1 += 1;
            assigned += 1;
        }
    }
    // Best members within each species.
    let mut elites = Vec::with_capacity(total);
    for (sid, count, _) in alloc {
        let mut idxs = groups[&sid].clone();
        idxs.sort_by(|&a, &b| rank_desc(&pop.members[a].score, &pop.members[b].score));
        elites.extend(idxs.into_iter().take(count).map(|i| pop.members[i].id));
    }
    elites
}

/// Uniform crossover: the child's topology is a clone of the fitter
/// parent; for every node whose lineage mark also appears in the other
/// parent, the content is swapped in with probability `swap_prob`. Child
/// nodes keep their parent lineage marks.
pub fn uniform_crossover<C: Clone, R: Rng>(
    fitter: &GenotypeGraph<C>,
    other: &GenotypeGraph<C>,
    swap_prob: f64,
    rng: &mut R,
) -> GenotypeGraph<C> {
    let mut child = fitter.clone();
    let other_by_mark: BTreeMap<LineageMark, NodeId> = other
        .hidden_ids()
        .map(|id| (other.node(id).mark, id))
        .collect();
    for id in fitter.hidden_ids().collect::<Vec<_>>() {
        let mark = fitter.node(id).mark;
        if let Some(other_id) = other_by_mark.get(&mark) {
            if rng.random_range(0.0..1.0) < swap_prob {
                let content = other.content(*other_id).expect("hidden has content").clone();
                child.set_content(id, content);
            }
        }
    }
    child
}

/// The structural and content mutation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MutationOp {
    /// Insert a node between an existing connection.
    AddNodeOnEdge,
    /// Add a node and wire it to a compatible source/target pair.
    AddNodeWithNewEdges,
    /// Remove a node and reconnect its direct neighbors.
    RemoveNode,
    AddEdge,
    RemoveEdge,
    /// Resample the content of an existing node.
    ReplaceContent,
}

pub const MUTATION_OPS: [MutationOp; 6] = [
    MutationOp::AddNodeOnEdge,
    MutationOp::AddNodeWithNewEdges,
    MutationOp::RemoveNode,
    MutationOp::AddEdge,
    MutationOp::RemoveEdge,
    MutationOp::ReplaceContent,
];

/// Operator weights; equal by default.
pub type MutationWeights = [f64; 6];

pub fn default_mutation_weights() -> MutationWeights {
    [1.0; 6]
}

fn sample_op<R: Rng>(weights: &MutationWeights, rng: &mut R) -> MutationOp {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (op, w) in MUTATION_OPS.iter().zip(weights) {
        if x < *w {
            return *op;
        }
        x -= w;
    }
    MUTATION_OPS[5]
}

/// Applies one weight-sampled mutation operator. An attempt that yields an
/// invalid graph retries with fresh randomness up to 5 times, then the
/// unmodified parent is returned, so the call is total.
pub fn mutate<C: Clone, R: Rng>(
    graph: &GenotypeGraph<C>,
    weights: &MutationWeights,
    sampler: &mut dyn FnMut(&mut R) -> C,
    rng: &mut R,
) -> GenotypeGraph<C> {
    mutate_traced(graph, weights, sampler, rng).0
}

/// Like [`mutate`], also reporting which operator was sampled.
pub fn mutate_traced<C: Clone, R: Rng>(
    graph: &GenotypeGraph<C>,
    weights: &MutationWeights,
    sampler: &mut dyn FnMut(&mut R) -> C,
    rng: &mut R,
) -> (GenotypeGraph<C>, MutationOp) {
    let op = sample_op(weights, rng);
    for _ in 0..=MAX_RETRIES {
        if let Some(candidate) = apply_op(graph, op, sampler, rng) {
            if candidate.validate().ok() {
                return (candidate, op);
            }
        }
    }
    (graph.clone(), op)
}

fn pick<T: Copy, R: Rng>(items: &[T], rng: &mut R) -> Option<T> {
    if items.is_empty() {
        None
    } else {
        Some(items[rng.random_range(0..items.len())])
    }
}

fn reaches<C: Clone>(g: &GenotypeGraph<C>, from: NodeId, to: NodeId) -> bool {
    let mut stack = vec![from];
    let mut seen = std::collections::BTreeSet::new();
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        if seen.insert(v) {
            stack.extend(g.successors(v));
        }
    }
    false
}

fn apply_op<C: Clone, R: Rng>(
    graph: &GenotypeGraph<C>,
    op: MutationOp,
    sampler: &mut dyn FnMut(&mut R) -> C,
    rng: &mut R,
) -> Option<GenotypeGraph<C>> {
    let mut g = graph.clone();
    match op {
        MutationOp::AddNodeOnEdge => {
            if g.hidden_count() >= MAX_HIDDEN_NODES {
                return None;
            }
            let edges: Vec<(NodeId, NodeId)> = g.edges().collect();
            let (u, v) = pick(&edges, rng)?;
            let w = g.add_hidden(sampler(rng));
            g.remove_edge(u, v);
            g.add_edge(u, w);
            g.add_edge(w, v);
        }
        MutationOp::AddNodeWithNewEdges => {
            if g.hidden_count() >= MAX_HIDDEN_NODES {
                return None;
            }
            let sources: Vec<NodeId> =
                g.node_ids().filter(|id| *id != g.output()).collect();
            let s = pick(&sources, rng)?;
            let targets: Vec<NodeId> = g
                .node_ids()
                .filter(|id| *id != g.input() && *id != s && g.in_degree(*id) < 2)
                .filter(|id| !reaches(&g, *id, s))
                .collect();
            let t = pick(&targets, rng)?;
            let w = g.add_hidden(sampler(rng));
            g.add_edge(s, w);
            g.add_edge(w, t);
        }
        MutationOp::RemoveNode => {
            // Keep at least one hidden node; an empty module or blueprint
            // would be a pure identity pass-through.
            if g.hidden_count() <= 1 {
                return None;
            }
            let hidden: Vec<NodeId> = g.hidden_ids().collect();
            let v = pick(&hidden, rng)?;
            let preds = g.predecessors(v);
            let succs = g.successors(v);
            g.remove_hidden(v);
            for p in &preds {
                for s in &succs {
                    if !g.has_edge(*p, *s) && g.in_degree(*s) < 2 {
                        g.add_edge(*p, *s);
                    }
                }
            }
        }
        MutationOp::AddEdge => {
            let sources: Vec<NodeId> =
                g.node_ids().filter(|id| *id != g.output()).collect();
            let s = pick(&sources, rng)?;
            let targets: Vec<NodeId> = g
                .node_ids()
                .filter(|id| {
                    *id != g.input() && *id != s && g.in_degree(*id) < 2 && !g.has_edge(s, *id)
                })
                .filter(|id| !reaches(&g, *id, s))
                .collect();
            let t = pick(&targets, rng)?;
            g.add_edge(s, t);
        }
        MutationOp::RemoveEdge => {
            let edges: Vec<(NodeId, NodeId)> = g.edges().collect();
            let (u, v) = pick(&edges, rng)?;
            g.remove_edge(u, v);
        }
        MutationOp::ReplaceContent => {
            let hidden: Vec<NodeId> = g.hidden_ids().collect();
            let v = pick(&hidden, rng)?;
            g.set_content(v, sampler(rng));
        }
    }
    Some(g)
}

/// Knobs for one population's reproduction step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationConfig {
    pub swap_prob: f64,
    pub mutation_weights: MutationWeights,
}

impl Default for VariationConfig {
    fn default() -> Self {
        VariationConfig { swap_prob: 0.5, mutation_weights: default_mutation_weights() }
    }
}

/// Roulette pick over members by accuracy; never-evaluated members get a
/// minimal weight so they stay selectable.
fn roulette<'a, G, R: Rng>(
    members: &[&'a crate::population::Member<G>],
    rng: &mut R,
) -> &'a crate::population::Member<G> {
    const FLOOR: f64 = 1e-6;
    let weights: Vec<f64> = members
        .iter()
        .map(|m| m.score.map(|s| s.accuracy.max(FLOOR)).unwrap_or(FLOOR))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (m, w) in members.iter().zip(weights) {
        if x < w {
            return m;
        }
        x -= w;
    }
    members.last().expect("non-empty species")
}

/// Produces the next generation of one population: elites preserved
/// bit-identically, a crossover fraction bred from fitness-proportionate
/// parent pairs within species, and the rest mutated copies of uniformly
/// drawn survivors. Population size is preserved; offspring enter
/// unspeciated.
pub fn next_generation<C: Clone, R: Rng>(
    pop: &Population<GenotypeGraph<C>>,
    rates: &GenerationRates,
    species: &crate::speciation::SpeciesSet,
    config: &VariationConfig,
    sampler: &mut dyn FnMut(&mut R) -> C,
    rng: &mut R,
) -> Population<GenotypeGraph<C>> {
    let size = pop.len();
    let (elite_count, crossover_count, mutation_count) = rates.counts(size);
    let mut next = pop.successor();

    // Elites survive unchanged, keeping id, species and score.
    let elites = select_elites(pop, rates.elitism);
    debug_assert_eq!(elites.len(), elite_count);
    for id in elites {
        next.push_member(pop.get(id).expect("elite exists").clone());
    }

    // Species eligible for crossover, weighted by shared fitness.
    let pools: Vec<(SpeciesId, Vec<&crate::population::Member<GenotypeGraph<C>>>)> = species
        .species
        .iter()
        .map(|s| (s.id, pop.members_of_species(s.id)))
        .filter(|(_, members)| !members.is_empty())
        .collect();

    for _ in 0..crossover_count {
        let child = if pools.is_empty() {
            // No speciation yet; breed over the whole population.
            let all: Vec<_> = pop.members.iter().collect();
            let a = roulette(&all, rng);
            let b = roulette(&all, rng);
            breed(a, b, config.swap_prob, rng)
        } else {
            let weights: Vec<f64> = pools
                .iter()
                .map(|(sid, _)| {
                    species
                        .get(*sid)
                        .and_then(|s| s.shared_fitness)
                        .map(|f| f.max(1e-6))
                        .unwrap_or(1e-6)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut x = rng.random_range(0.0..total);
            let mut chosen = &pools[pools.len() - 1];
            for (pool, w) in pools.iter().zip(&weights) {
                if x < *w {
                    chosen = pool;
                    break;
                }
                x -= w;
            }
            let a = roulette(&chosen.1, rng);
            let b = roulette(&chosen.1, rng);
            breed(a, b, config.swap_prob, rng)
        };
        next.push(child);
    }

    for _ in 0..mutation_count {
        let parent = &pop.members[rng.random_range(0..size)];
        let child = mutate(&parent.genotype, &config.mutation_weights, sampler, rng);
        next.push(child);
    }

    debug_assert_eq!(next.len(), size);
    next
}

fn breed<C: Clone, R: Rng>(
    a: &crate::population::Member<GenotypeGraph<C>>,
    b: &crate::population::Member<GenotypeGraph<C>>,
    swap_prob: f64,
    rng: &mut R,
) -> GenotypeGraph<C> {
    let (fitter, other) = if rank_desc(&a.score, &b.score) != Ordering::Greater {
        (a, b)
    } else {
        (b, a)
    };
    uniform_crossover(&fitter.genotype, &other.genotype, swap_prob, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{spawn_individuals, init_blueprint_population, init_module_population};
    use crate::speciation::{Species, SpeciesSet, FeatureVector};
    use crate::tables::parse_tables;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn score(acc: f64, loss: f64) -> Option<FitnessScore> {
        Some(FitnessScore::new(acc, loss))
    }

    #[test]
    fn ordering_prefers_accuracy_then_low_loss() {
        let a = FitnessScore::new(0.9, 1.0);
        let b = FitnessScore::new(0.8, 0.1);
        let c = FitnessScore::new(0.9, 0.5);
        assert_eq!(a.cmp_desc(&b), Ordering::Less); // a ranks first
        assert_eq!(c.cmp_desc(&a), Ordering::Less); // same accuracy, lower loss first
        assert_eq!(rank_desc(&score(0.1, 9.0), &None), Ordering::Less);
    }

    #[test]
    fn rates_split_matches_experiment_setup() {
        let rates = GenerationRates::new(0.2, 0.3, 0.5).unwrap();
        assert_eq!(rates.counts(10), (2, 3, 5));
        let pure_elitism = GenerationRates::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(pure_elitism.counts(10), (10, 0, 0));
        assert!(GenerationRates::new(0.5, 0.2, 0.2).is_err());
        assert!(GenerationRates::new(-0.1, 0.6, 0.5).is_err());
    }

    #[test]
    fn shared_fitness_is_the_mean_accuracy() {
        assert_eq!(shared_fitness(&[score(0.5, 1.0), score(0.7, 2.0)]), 0.6);
        assert_eq!(shared_fitness(&[score(0.9, 0.0)]), 0.9);
        assert_eq!(shared_fitness(&[None, score(0.4, 1.0)]), 0.4);
        assert_eq!(shared_fitness(&[]), 0.0);
    }

    fn test_setup(
        seed: u64,
    ) -> (crate::tables::ParameterTables, crate::population::ModulePopulation, Vec<Individual>)
    {
        let tables = parse_tables(crate::tables::test_fixtures::EXPERIMENT_TABLES).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modules = init_module_population(6, &tables, &mut rng).unwrap();
        for m in &mut modules.members {
            m.species = Some(SpeciesId(0));
        }
        let blueprints =
            init_blueprint_population(4, &[SpeciesId(0)], &tables, &mut rng).unwrap();
        let individuals =
            spawn_individuals(8, &blueprints, &modules, &tables, &mut rng).unwrap();
        (tables, modules, individuals)
    }

    #[test]
    fn module_score_is_mean_of_its_users() {
        let (_, _, mut individuals) = test_setup(31);
        // Give the first two individuals known scores and the rest a flat one.
        for (i, ind) in individuals.iter_mut().enumerate() {
            let acc = match i {
                0 => 0.8,
                1 => 0.6,
                _ => 0.5,
            };
            ind.score = Some(FitnessScore::new(acc, 1.0 - acc));
        }
        let maps = propagate_scores(&individuals);
        // Recompute by brute force.
        for (module, got) in &maps.modules {
            let mut accs = Vec::new();
            for ind in &individuals {
                for (m, _) in ind.resolved_modules.values() {
                    if m == module {
                        accs.push(ind.score.unwrap().accuracy);
                    }
                }
            }
            let want = accs.iter().sum::<f64>() / accs.len() as f64;
            assert!((got.accuracy - want).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_conserves_total_score_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, _, mut individuals) = test_setup(5);
        for ind in &mut individuals {
            ind.score = Some(FitnessScore::new(rng.random_range(0.0..1.0), rng.random_range(0.0..3.0)));
        }
        let maps = propagate_scores(&individuals);
        let mut usage: BTreeMap<MemberId, usize> = BTreeMap::new();
        for ind in &individuals {
            for (m, _) in ind.resolved_modules.values() {
                *usage.entry(*m).or_default() += 1;
            }
        }
        let lhs: f64 = maps
            .modules
            .iter()
            .map(|(id, s)| s.accuracy * usage[id] as f64)
            .sum();
        let rhs: f64 = individuals
            .iter()
            .map(|i| i.score.unwrap().accuracy * i.resolved_modules.len() as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn elites_are_the_top_k_of_a_full_sort() {
        let (_, mut modules, _) = test_setup(41);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in &mut modules.members {
            m.score = score(rng.random_range(0.0..1.0), rng.random_range(0.0..2.0));
        }
        let elites = select_elites(&modules, 0.5);
        assert_eq!(elites.len(), 3);
        // Single species, so the allocation is a plain global top-k.
        let mut sorted = modules.members.clone();
        sorted.sort_by(|a, b| rank_desc(&a.score, &b.score));
        let want: Vec<MemberId> = sorted.iter().take(3).map(|m| m.id).collect();
        let mut got = elites.clone();
        got.sort();
        let mut want_sorted = want.clone();
        want_sorted.sort();
        assert_eq!(got, want_sorted);
    }

    #[test]
    fn zero_rate_selects_no_elites() {
        let (_, modules, _) = test_setup(43);
        assert!(select_elites(&modules, 0.0).is_empty());
    }

    #[test]
    fn identical_parents_crossover_to_identical_child() {
        let (tables, _, _) = test_setup(51);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        let g = crate::population::ModuleGraph::random((2, 3), &mut sampler, &mut rng).unwrap();
        let child = uniform_crossover(&g, &g, 0.7, &mut rng);
        assert_eq!(child, g);
    }

    #[test]
    fn zero_swap_prob_clones_the_fitter_parent() {
        let (tables, _, _) = test_setup(53);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        let a = crate::population::ModuleGraph::random((2, 3), &mut sampler, &mut rng).unwrap();
        let b = crate::population::ModuleGraph::random((2, 3), &mut sampler, &mut rng).unwrap();
        let child = uniform_crossover(&a, &b, 0.0, &mut rng);
        assert_eq!(child, a);
    }

    #[test]
    fn full_swap_replaces_exactly_the_shared_marks() {
        let (tables, _, _) = test_setup(55);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        let a = crate::population::ModuleGraph::random((3, 3), &mut sampler, &mut rng).unwrap();
        // b: clone of a (same marks) with all contents resampled, plus one
        // extra node with a fresh mark.
        let mut b = a.clone();
        for id in b.hidden_ids().collect::<Vec<_>>() {
            b.set_content(id, sampler(&mut rng));
        }
        let child = uniform_crossover(&a, &b, 1.0, &mut rng);
        // Explicit mark intersection oracle: every shared mark's content
        // must now equal b's, topology must equal a's.
        assert_eq!(
            child.edges().collect::<Vec<_>>(),
            a.edges().collect::<Vec<_>>()
        );
        let b_by_mark: BTreeMap<LineageMark, NodeId> =
            b.hidden_ids().map(|id| (b.node(id).mark, id)).collect();
        let mut swapped = 0;
        for id in child.hidden_ids() {
            let mark = child.node(id).mark;
            if let Some(bid) = b_by_mark.get(&mark) {
                assert_eq!(child.content(id), b.content(*bid));
                swapped += 1;
            }
        }
        assert_eq!(swapped, 3);
        assert!(child.validate().ok());
    }

    #[test]
    fn removing_the_only_node_falls_back_to_the_parent() {
        let (tables, _, _) = test_setup(57);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        let g = crate::population::ModuleGraph::random((1, 1), &mut sampler, &mut rng).unwrap();
        // Weights that always pick RemoveNode.
        let weights = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let (child, op) = mutate_traced(&g, &weights, &mut sampler, &mut rng);
        assert_eq!(op, MutationOp::RemoveNode);
        assert_eq!(child, g);
    }

    #[test]
    fn add_node_on_edge_extends_a_chain() {
        let (tables, _, _) = test_setup(59);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        // Build a fixed 1-hidden chain: input -> a -> output.
        let mut g = crate::population::ModuleGraph::empty();
        let a = g.add_hidden(sampler(&mut rng));
        g.add_edge(g.input(), a);
        g.add_edge(a, g.output());
        let weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let child = mutate(&g, &weights, &mut sampler, &mut rng);
        assert_eq!(child.hidden_count(), 2);
        assert_eq!(child.edge_count(), 3);
        assert!(child.validate().ok());
    }

    #[test]
    fn mutation_fuzz_always_yields_valid_graphs() {
        let (tables, _, _) = test_setup(61);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        let weights = default_mutation_weights();
        let mut g =
            crate::population::ModuleGraph::random((1, 3), &mut sampler, &mut rng).unwrap();
        let mut counts = BTreeMap::new();
        for i in 0..10_000 {
            let (next, op) = mutate_traced(&g, &weights, &mut sampler, &mut rng);
            assert!(next.validate().ok(), "iteration {i} produced an invalid graph");
            *counts.entry(format!("{op:?}")).or_insert(0usize) += 1;
            g = next;
        }
        // Operator frequencies uniform over 6 ops; chi-squared, 5 dof,
        // p = 0.01 critical value 15.09.
        let expected = 10_000.0 / 6.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 15.09, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn next_generation_preserves_size_and_elites() {
        let (tables, mut modules, _) = test_setup(63);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for m in &mut modules.members {
            m.score = score(rng.random_range(0.0..1.0), 1.0);
        }
        let mut species = SpeciesSet::new();
        let sid = species.fresh_id();
        assert_eq!(sid, SpeciesId(0));
        species.species.push(Species {
            id: sid,
            centroid: FeatureVector::new(50.0, 2.0, 3.0),
            shared_fitness: Some(0.5),
        });
        let rates = GenerationRates::new(0.2, 0.3, 0.5).unwrap();
        let config = VariationConfig::default();
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        let next = next_generation(&modules, &rates, &species, &config, &mut sampler, &mut rng);
        assert_eq!(next.len(), modules.len());
        // ceil(0.2 * 6) = 2 elites, preserved bit-identically.
        let elite_ids = select_elites(&modules, 0.2);
        for id in elite_ids {
            let before = modules.get(id).unwrap();
            let after = next.get(id).expect("elite survived");
            assert_eq!(before, after);
        }
        for m in &next.members {
            assert!(m.genotype.validate().ok());
        }
    }

    #[test]
    fn pure_elitism_reproduces_the_population() {
        let (tables, mut modules, _) = test_setup(65);
        for m in &mut modules.members {
            m.score = score(0.5, 1.0);
        }
        let species = SpeciesSet::new();
        let rates = GenerationRates::new(1.0, 0.0, 0.0).unwrap();
        let config = VariationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut sampler = |r: &mut ChaCha8Rng| tables.sample_intermediate_layer(r);
        let next = next_generation(&modules, &rates, &species, &config, &mut sampler, &mut rng);
        assert_eq!(next.len(), modules.len());
        for m in &modules.members {
            assert_eq!(next.get(m.id), Some(m));
        }
    }
}
