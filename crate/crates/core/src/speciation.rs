//! Speciation: structural feature extraction, K-means clustering and
//! nearest-centroid assignment with a distance threshold for founding new
//! species.
//!
//! Features are z-score normalized before any distance is computed; raw
//! network sizes and node counts differ by orders of magnitude.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GenotypeGraph;
use crate::tables::LayerSpec;

/// Internal Lloyd restarts; the lowest-inertia run wins.
const KMEANS_RESTARTS: usize = 10;

/// Structural description of a genotype used for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Sum of conv filters and dense units across layers.
    pub network_size: f64,
    /// Hidden node count (layers or module references).
    pub node_count: f64,
    /// Edge count, including edges touching the input and output nodes.
    pub edge_count: f64,
}

impl FeatureVector {
    pub fn new(network_size: f64, node_count: f64, edge_count: f64) -> Self {
        FeatureVector { network_size, node_count, edge_count }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.network_size, self.node_count, self.edge_count]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        FeatureVector { network_size: a[0], node_count: a[1], edge_count: a[2] }
    }
}

/// Size contribution of one layer: conv filters or dense units.
pub fn layer_size(spec: &LayerSpec) -> f64 {
    spec.get("filters")
        .or_else(|| spec.get("units"))
        .and_then(|v| v.as_float())
        .unwrap_or(0.0)
}

/// Features of a module graph: exact recounts of its own structure.
pub fn module_features(graph: &GenotypeGraph<LayerSpec>) -> FeatureVector {
    let size: f64 = graph
        .hidden_ids()
        .map(|id| layer_size(graph.content(id).expect("hidden node has content")))
        .sum();
    FeatureVector::new(size, graph.hidden_count() as f64, graph.edge_count() as f64)
}

/// Features of a blueprint graph. Blueprints have no concrete layers until
/// resolution, so the size component uses the centroid size of each
/// referenced species, looked up through `species_size`.
pub fn blueprint_features<C: Clone>(
    graph: &GenotypeGraph<C>,
    mut species_size: impl FnMut(&C) -> f64,
) -> FeatureVector {
    let size: f64 = graph
        .hidden_ids()
        .map(|id| species_size(graph.content(id).expect("hidden node has content")))
        .sum();
    FeatureVector::new(size, graph.hidden_count() as f64, graph.edge_count() as f64)
}

/// Per-population z-score scaling fitted on a feature sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mean: [f64; 3],
    std: [f64; 3],
}

impl Normalizer {
    pub fn fit(samples: &[FeatureVector]) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.to_array()) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 3];
        for s in samples {
            for (d, (v, m)) in std.iter_mut().zip(s.to_array().into_iter().zip(mean)) {
                *d += (v - m).powi(2) / n;
            }
        }
        for d in &mut std {
            *d = d.sqrt();
            if *d < 1e-12 {
                *d = 1.0; // constant feature, leave it centred
            }
        }
        Normalizer { mean, std }
    }

    pub fn apply(&self, f: FeatureVector) -> [f64; 3] {
        let a = f.to_array();
        [
            (a[0] - self.mean[0]) / self.std[0],
            (a[1] - self.mean[1]) / self.std[1],
            (a[2] - self.mean[2]) / self.std[2],
        ]
    }
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[derive(Debug, Error)]
pub enum SpeciationError {
    #[error("k = {k} exceeds the sample count {n}")]
    TooFewSamples { k: usize, n: usize },
}

/// Result of one clustering call.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Cluster index per input sample.
    pub assignments: Vec<usize>,
    /// Cluster centroids in normalized feature space.
    pub centroids: Vec<[f64; 3]>,
    /// Within-cluster sum of squares recorded once per Lloyd iteration of
    /// the winning restart.
    pub wcss_history: Vec<f64>,
}

/// Lloyd's K-means over z-score normalized features, squared Euclidean
/// distance, with random sample seeding. Runs a handful of restarts and
/// keeps the lowest-inertia clustering. Empty clusters are re-seeded to the
/// sample farthest from its centroid.
pub fn kmeans<R: Rng>(
    samples: &[FeatureVector],
    k: usize,
    tolerance: f64,
    max_iters: usize,
    rng: &mut R,
) -> Result<KmeansResult, SpeciationError> {
    if k == 0 || k > samples.len() {
        return Err(SpeciationError::TooFewSamples { k, n: samples.len() });
    }
    let norm = Normalizer::fit(samples);
    let points: Vec<[f64; 3]> = samples.iter().map(|s| norm.apply(*s)).collect();

    let mut best: Option<KmeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd_once(&points, k, tolerance, max_iters, rng);
        let better = match &best {
            None => true,
            Some(b) => run.wcss_history.last() < b.wcss_history.last(),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd_once<R: Rng>(
    points: &[[f64; 3]],
    k: usize,
    tolerance: f64,
    max_iters: usize,
    rng: &mut R,
) -> KmeansResult {
    // Seed with k distinct sample indices.
    let mut idx: Vec<usize> = (0..points.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut centroids: Vec<[f64; 3]> = idx[..k].iter().map(|&i| points[i]).collect();

    let mut assignments = vec![0usize; points.len()];
    let mut wcss_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        // Assignment step.
        let mut wcss = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (best_c, best_d) = centroids
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, sq_dist(*p, *ctr)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k >= 1");
            assignments[i] = best_c;
            wcss += best_d;
        }
        wcss_history.push(wcss);

        // Update step.
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
            counts[c] += 1;
        }
        let mut moved: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean = [
                sums[c][0] / counts[c] as f64,
                sums[c][1] / counts[c] as f64,
                sums[c][2] / counts[c] as f64,
            ];
            moved = moved.max(sq_dist(centroids[c], mean).sqrt());
            centroids[c] = mean;
        }
        // Re-seed empty clusters to the farthest sample.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = points
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    let da = sq_dist(*a.1, centroids[assignments[a.0]]);
                    let db = sq_dist(*b.1, centroids[assignments[b.0]]);
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .expect("non-empty sample set");
            centroids[c] = points[far];
            moved = f64::INFINITY; // force another iteration
        }
        if moved < tolerance {
            break;
        }
    }
    KmeansResult { assignments, centroids, wcss_history }
}

/// Identifier of a species, unique within one population across a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SpeciesId(pub u64);

impl std::fmt::Display for SpeciesId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// A cluster of genotypes with a raw-space centroid and a shared fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Species {
    pub id: SpeciesId,
    /// Centroid in raw feature space (mean of member features).
    pub centroid: FeatureVector,
    pub shared_fitness: Option<f64>,
}

/// The live species of one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SpeciesSet {
    pub species: Vec<Species>,
    next_id: u64,
}

impl SpeciesSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh_id(&mut self) -> SpeciesId {
        let id = SpeciesId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn get(&self, id: SpeciesId) -> Option<&Species> {
        self.species.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<SpeciesId> {
        self.species.iter().map(|s| s.id).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    /// Nearest centroid in normalized space wins; a member farther than
    /// `threshold` (in normalized units) from every centroid founds a new
    /// species with itself as sole member and centroid.
    pub fn assign(
        &mut self,
        member: FeatureVector,
        threshold: f64,
        norm: &Normalizer,
    ) -> SpeciesId {
        let p = norm.apply(member);
        let nearest = self
            .species
            .iter()
            .map(|s| (s.id, sq_dist(p, norm.apply(s.centroid)).sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((id, d)) if d <= threshold => id,
            _ => {
                let id = self.fresh_id();
                self.species.push(Species { id, centroid: member, shared_fitness: None });
                id
            }
        }
    }

    /// Nearest surviving species to a raw feature point; used to repair
    /// references to extinct species.
    pub fn nearest(&self, member: FeatureVector, norm: &Normalizer) -> Option<SpeciesId> {
        let p = norm.apply(member);
        self.species
            .iter()
            .map(|s| (s.id, sq_dist(p, norm.apply(s.centroid))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(id, _)| id)
    }

    /// Recomputes each centroid as the mean of its members' raw features
    /// and drops species without members.
    pub fn recompute_centroids(&mut self, members: &[(SpeciesId, FeatureVector)]) {
        self.species.retain_mut(|s| {
            let mine: Vec<[f64; 3]> = members
                .iter()
                .filter(|(id, _)| *id == s.id)
                .map(|(_, f)| f.to_array())
                .collect();
            if mine.is_empty() {
                return false;
            }
            let n = mine.len() as f64;
            let mut mean = [0.0; 3];
            for a in &mine {
                for (m, v) in mean.iter_mut().zip(a) {
                    *m += v / n;
                }
            }
            s.centroid = FeatureVector::from_array(mean);
            true
        });
    }
}
