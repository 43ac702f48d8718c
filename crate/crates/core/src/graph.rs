//! Directed acyclic graph genotypes shared by modules and blueprints.
//!
//! Both evolutionary levels use the same structure: a DAG with exactly one
//! input node, one output node, and hidden nodes carrying the level-specific
//! content (layer specs for modules, species references for blueprints).
//! Construction, mutation and crossover all have to respect the same rule
//! set, which `validate` checks explicitly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard cap on hidden nodes per graph. Keeps long fuzz and evolution runs
/// from growing pathological genotypes.
pub const MAX_HIDDEN_NODES: usize = 10;

/// Identifier of a node, unique within its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Globally monotone creation marker. Two nodes share a mark iff they
/// descend from the same creation event (cloning into offspring preserves
/// marks), which is what lets crossover align regions with common origins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineageMark(pub u64);

static LINEAGE_COUNTER: AtomicU64 = AtomicU64::new(0);

impl LineageMark {
    /// Draws the next mark from the global counter. Never reused.
    pub fn fresh() -> Self {
        LineageMark(LINEAGE_COUNTER.fetch_add(1, Ordering::Relaxed))
    }

    /// Current value of the global counter (marks handed out so far).
    pub fn counter() -> u64 {
        LINEAGE_COUNTER.load(Ordering::Relaxed)
    }

    /// Raises the global counter to at least `floor`. Used when resuming
    /// from a checkpoint so new marks stay above every serialized one.
    pub fn raise_counter(floor: u64) {
        LINEAGE_COUNTER.fetch_max(floor, Ordering::Relaxed);
    }
}

/// Structural role of a node inside its graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeRole<C> {
    Input,
    Output,
    Hidden(C),
}

impl<C> NodeRole<C> {
    pub fn content(&self) -> Option<&C> {
        match self {
            NodeRole::Hidden(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node<C> {
    pub mark: LineageMark,
    pub role: NodeRole<C>,
}

/// Identifier of a graph rule checked by [`GenotypeGraph::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleViolation {
    /// The graph contains a directed cycle.
    Cycle,
    /// Some node has more than two incoming edges.
    MaxInDegree,
    /// The input node has an incoming edge.
    InputInDegree,
    /// The output node has an outgoing edge.
    OutputOutDegree,
    /// Some node is not on an input-to-output path.
    Connectivity,
}

impl fmt::Display for RuleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleViolation::Cycle => "cycle",
            RuleViolation::MaxInDegree => "max-in-degree",
            RuleViolation::InputInDegree => "input-in-degree",
            RuleViolation::OutputOutDegree => "output-out-degree",
            RuleViolation::Connectivity => "connectivity",
        };
        f.write_str(s)
    }
}

/// Outcome of checking every graph rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<RuleViolation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node count range [{lo}, {hi}] is empty or outside [1, {max}]", max = MAX_HIDDEN_NODES)]
    BadNodeCountRange { lo: usize, hi: usize },
    #[error("graph is structurally corrupt: cycle detected during topological sort")]
    CorruptCycle,
}

/// A DAG genotype with one input node, one output node and content-carrying
/// hidden nodes. `C` is the hidden-node payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenotypeGraph<C> {
    nodes: BTreeMap<NodeId, Node<C>>,
    edges: BTreeSet<(NodeId, NodeId)>,
    input: NodeId,
    output: NodeId,
    next_id: u32,
}

impl<C: Clone> GenotypeGraph<C> {
    /// An input and an output node with no hidden nodes and no edges.
    /// Not valid on its own; callers add hidden nodes and wiring.
    pub fn empty() -> Self {
        let input = NodeId(0);
        let output = NodeId(1);
        let mut nodes = BTreeMap::new();
        nodes.insert(
            input,
            Node { mark: LineageMark::fresh(), role: NodeRole::Input },
        );
        nodes.insert(
            output,
            Node { mark: LineageMark::fresh(), role: NodeRole::Output },
        );
        GenotypeGraph { nodes, edges: BTreeSet::new(), input, output, next_id: 2 }
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn node(&self, id: NodeId) -> &Node<C> {
        &self.nodes[&id]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn hidden_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .filter(|(_, n)| matches!(n.role, NodeRole::Hidden(_)))
            .map(|(id, _)| *id)
    }

    pub fn hidden_count(&self) -> usize {
        self.hidden_ids().count()
    }

    pub fn content(&self, id: NodeId) -> Option<&C> {
        self.nodes[&id].role.content()
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn predecessors(&self, id: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|(_, t)| *t == id).map(|(s, _)| *s).collect()
    }

    pub fn successors(&self, id: NodeId) -> Vec<NodeId> {
        // edges is ordered by (from, to), so this range scan is exact
        self.edges
            .range((id, NodeId(0))..=(id, NodeId(u32::MAX)))
            .map(|(_, t)| *t)
            .collect()
    }

    pub fn in_degree(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|(_, t)| *t == id).count()
    }

    pub fn out_degree(&self, id: NodeId) -> usize {
        self.successors(id).len()
    }

    /// Adds a hidden node carrying `content` with a fresh lineage mark.
    pub fn add_hidden(&mut self, content: C) -> NodeId {
        self.add_hidden_with_mark(content, LineageMark::fresh())
    }

    /// Adds a hidden node with an explicit mark (clone inheritance).
    pub fn add_hidden_with_mark(&mut self, content: C, mark: LineageMark) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(id, Node { mark, role: NodeRole::Hidden(content) });
        id
    }

    pub fn add_edge(&mut self, from: NodeId, to: NodeId) {
        debug_assert!(self.nodes.contains_key(&from) && self.nodes.contains_key(&to));
        self.edges.insert((from, to));
    }

    pub fn remove_edge(&mut self, from: NodeId, to: NodeId) {
        self.edges.remove(&(from, to));
    }

    /// Removes a hidden node together with its incident edges.
    pub fn remove_hidden(&mut self, id: NodeId) {
        debug_assert!(matches!(self.nodes[&id].role, NodeRole::Hidden(_)));
        self.nodes.remove(&id);
        self.edges.retain(|(s, t)| *s != id && *t != id);
    }

    pub fn set_content(&mut self, id: NodeId, content: C) {
        if let Some(node) = self.nodes.get_mut(&id) {
            if matches!(node.role, NodeRole::Hidden(_)) {
                node.role = NodeRole::Hidden(content);
            }
        }
    }

    /// Generates a random valid graph. The hidden node count is drawn
    /// uniformly from `node_count_range` (inclusive); wiring is random
    /// subject to the graph rules. Falls back to a plain chain if random
    /// wiring keeps failing, so the call is total for legal ranges.
    pub fn random<R: Rng>(
        node_count_range: (usize, usize),
        content_sampler: &mut dyn FnMut(&mut R) -> C,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        let (lo, hi) = node_count_range;
        if lo < 1 || hi < lo || hi > MAX_HIDDEN_NODES {
            return Err(GraphError::BadNodeCountRange { lo, hi });
        }
        let n = rng.random_range(lo..=hi);
        for _ in 0..32 {
            if let Some(g) = Self::try_random_wiring(n, content_sampler, rng) {
                return Ok(g);
            }
        }
        // Chain fallback: input -> v1 -> ... -> vn -> output, always valid.
        let mut g = Self::empty();
        let mut prev = g.input;
        for _ in 0..n {
            let v = g.add_hidden(content_sampler(rng));
            g.add_edge(prev, v);
            prev = v;
        }
        g.add_edge(prev, g.output);
        Ok(g)
    }

    fn try_random_wiring<R: Rng>(
        n: usize,
        content_sampler: &mut dyn FnMut(&mut R) -> C,
        rng: &mut R,
    ) -> Option<Self> {
        let mut g = Self::empty();
        let mut order = vec![g.input];
        for _ in 0..n {
            let v = g.add_hidden(content_sampler(rng));
            // One incoming edge from a random earlier node.
            let parent = order[rng.random_range(0..order.len())];
            g.add_edge(parent, v);
            order.push(v);
        }
        // Occasional second incoming edge.
        for i in 1..order.len() {
            let v = order[i];
            if rng.random_range(0.0..1.0) < 0.3 {
                let candidates: Vec<NodeId> = order[..i]
                    .iter()
                    .copied()
                    .filter(|p| !g.has_edge(*p, v))
                    .collect();
                if !candidates.is_empty() {
                    let p = candidates[rng.random_range(0..candidates.len())];
                    g.add_edge(p, v);
                }
            }
        }
        // Funnel every sink forward into a later node or the output.
        order.push(g.output);
        for i in 1..=n {
            let v = order[i];
            if g.out_degree(v) > 0 {
                continue;
            }
            let candidates: Vec<NodeId> = order[i + 1..]
                .iter()
                .copied()
                .filter(|t| g.in_degree(*t) < 2 && !g.has_edge(v, *t))
                .collect();
            if candidates.is_empty() {
                return None;
            }
            let t = candidates[rng.random_range(0..candidates.len())];
            g.add_edge(v, t);
        }
        if g.in_degree(g.output) == 0 {
            return None;
        }
        if g.validate().ok() {
            Some(g)
        } else {
            None
        }
    }

    /// Checks every graph rule and reports each violated one.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.in_degree(self.input) > 0 {
            violations.push(RuleViolation::InputInDegree);
        }
        if self.out_degree(self.output) > 0 {
            violations.push(RuleViolation::OutputOutDegree);
        }
        if self.node_ids().any(|id| self.in_degree(id) > 2) {
            violations.push(RuleViolation::MaxInDegree);
        }
        let acyclic = self.kahn_order().is_some();
        if !acyclic {
            violations.push(RuleViolation::Cycle);
        }
        if acyclic && !self.fully_connected() {
            violations.push(RuleViolation::Connectivity);
        }
        ValidationReport { violations }
    }

    fn fully_connected(&self) -> bool {
        let from_input = self.reachable(self.input, false);
        let to_output = self.reachable(self.output, true);
        self.node_ids().all(|id| from_input.contains(&id) && to_output.contains(&id))
    }

    fn reachable(&self, start: NodeId, reverse: bool) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let next = if reverse { self.predecessors(id) } else { self.successors(id) };
            stack.extend(next);
        }
        seen
    }

    fn kahn_order(&self) -> Option<Vec<NodeId>> {
        let mut in_deg: BTreeMap<NodeId, usize> =
            self.node_ids().map(|id| (id, self.in_degree(id))).collect();
        // Ready nodes ordered by lineage mark so identical genotypes sort
        // identically regardless of id allocation history.
        let mut ready: BTreeSet<(LineageMark, NodeId)> = in_deg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| (self.nodes[id].mark, *id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&(mark, id)) = ready.iter().next() {
            ready.remove(&(mark, id));
            order.push(id);
            for s in self.successors(id) {
                let d = in_deg.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert((self.nodes[&s].mark, s));
                }
            }
        }
        if order.len() == self.nodes.len() {
            Some(order)
        } else {
            None
        }
    }

    /// Topological order of all nodes: input first, output last, every edge
    /// pointing forward, ties broken by ascending lineage mark.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut order = self.kahn_order().ok_or(GraphError::CorruptCycle)?;
        // The output has no successors, so it can surface before unrelated
        // nodes; pin it to the back (the input is the unique source already).
        if let Some(pos) = order.iter().position(|id| *id == self.output) {
            order.remove(pos);
            order.push(self.output);
        }
        Ok(order)
    }

    /// Graphviz DOT rendering with one label per node.
    pub fn to_dot(&self, name: &str, mut label: impl FnMut(&C) -> String) -> String {
        let mut out = String::new();
        out.push_str(&format!("digraph \"{}\" {{\n", name));
        out.push_str("  rankdir=TB;\n  node [shape=box];\n");
        for (id, node) in &self.nodes {
            let text = match &node.role {
                NodeRole::Input => "input".to_string(),
                NodeRole::Output => "output".to_string(),
                NodeRole::Hidden(c) => label(c),
            };
            out.push_str(&format!("  {} [label=\"{}\"];\n", id, text));
        }
        for (from, to) in &self.edges {
            out.push_str(&format!("  {} -> {};\n", from, to));
        }
        out.push_str("}\n");
        out
    }
}
