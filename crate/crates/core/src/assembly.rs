//! Flattening a blueprint plus its resolved modules into one layer-level
//! network graph.
//!
//! Assembly runs in four passes: splice module copies into the blueprint
//! (connector nodes with a single incoming signal are contracted away),
//! turn every remaining two-input fan-in into an explicit merge layer,
//! insert flatten adapters wherever a spatial signal feeds a dense layer,
//! and finally infer every tensor shape to prove the network is
//! well-formed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NodeId;
use crate::population::Individual;
use crate::tables::ParamValue;

/// Identifier of one layer in an assembled network.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct LayerId(pub u32);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv2d,
    Dense,
    Flatten,
    MergeConcat,
    OutputDense,
    /// Transient splice point left by [`assemble_raw`] where two signals
    /// meet at a module boundary; replaced by a merge layer in
    /// [`insert_merges`]. Never present in a finished graph.
    Junction,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Input => "input",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Flatten => "flatten",
            LayerKind::MergeConcat => "merge-concat",
            LayerKind::OutputDense => "output-dense",
            LayerKind::Junction => "junction",
        };
        f.write_str(s)
    }
}

/// Where an assembled layer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Inserted by assembly itself (input, output, merges, adapters).
    Synthetic,
    /// Copied from a module node sitting in a blueprint node.
    Genotype { blueprint_node: NodeId, module_node: NodeId },
}

/// One concrete layer of an assembled network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledLayer {
    pub kind: LayerKind,
    pub params: BTreeMap<String, ParamValue>,
    pub provenance: Provenance,
}

/// A tensor shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Height x width x channels feature map.
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Spatial(h, w, c) => h * w * c,
            Shape::Flat(n) => *n,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, Shape::Spatial(..))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial(h, w, c) => write!(f, "{h}x{w}x{c}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("blueprint node {0} has no resolved module")]
    UnresolvedNode(NodeId),
    #[error("unsupported layer type {0:?} in module")]
    UnsupportedLayerType(String),
    #[error("layer {0} is missing required parameter {1:?}")]
    MissingParam(LayerId, String),
    #[error("flat signal from {from} cannot feed spatial layer {to}")]
    FlatIntoConv { from: LayerId, to: LayerId },
    #[error("layer {layer}: {detail}")]
    BadShape { layer: LayerId, detail: String },
    #[error("assembled graph is corrupt: {0}")]
    Corrupt(String),
}

/// A layer-level network: the output of assembly and the input of the
/// training engine. Acyclic; after merge insertion every non-merge layer
/// has at most one incoming edge and merges have exactly two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    nodes: BTreeMap<LayerId, AssembledLayer>,
    edges: BTreeSet<(LayerId, LayerId)>,
    input: LayerId,
    output: LayerId,
    next_id: u32,
}

impl LayerGraph {
    /// A graph holding only the global input and the softmax output head.
    pub fn shell(class_count: usize) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            LayerId(0),
            AssembledLayer {
                kind: LayerKind::Input,
                params: BTreeMap::new(),
                provenance: Provenance::Synthetic,
            },
        );
        let mut out_params = BTreeMap::new();
        out_params.insert("units".to_string(), ParamValue::Int(class_count as i64));
        out_params.insert("activation".to_string(), ParamValue::Str("softmax".into()));
        nodes.insert(
            LayerId(1),
            AssembledLayer {
                kind: LayerKind::OutputDense,
                params: out_params,
                provenance: Provenance::Synthetic,
            },
        );
        LayerGraph {
            nodes,
            edges: BTreeSet::new(),
            input: LayerId(0),
            output: LayerId(1),
            next_id: 2,
        }
    }

    pub fn input(&self) -> LayerId {
        self.input
    }

    pub fn output(&self) -> LayerId {
        self.output
    }

    pub fn layer(&self, id: LayerId) -> &AssembledLayer {
        &self.nodes[&id]
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (LayerId, LayerId)> + '_ {
        self.edges.iter().copied()
    }

    /// Incoming neighbors in ascending id order; for merges this fixes the
    /// concatenation order.
    pub fn predecessors(&self, id: LayerId) -> Vec<LayerId> {
        self.edges
            .iter()
            .filter(|(_, t)| *t == id)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn successors(&self, id: LayerId) -> Vec<LayerId> {
        self.edges
            .range((id, LayerId(0))..=(id, LayerId(u32::MAX)))
            .map(|(_, t)| *t)
            .collect()
    }

    pub fn in_degree(&self, id: LayerId) -> usize {
        self.edges.iter().filter(|(_, t)| *t == id).count()
    }

    pub fn add_layer(&mut self, layer: AssembledLayer) -> LayerId {
        let id = LayerId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(id, layer);
        id
    }

    pub fn add_edge(&mut self, from: LayerId, to: LayerId) {
        debug_assert!(self.nodes.contains_key(&from) && self.nodes.contains_key(&to));
        self.edges.insert((from, to));
    }

    pub fn remove_edge(&mut self, from: LayerId, to: LayerId) {
        self.edges.remove(&(from, to));
    }

    fn remove_layer(&mut self, id: LayerId) {
        self.nodes.remove(&id);
        self.edges.retain(|(s, t)| *s != id && *t != id);
    }

    /// Kahn's algorithm with ascending-id tie break; deterministic.
    pub fn topological_order(&self) -> Result<Vec<LayerId>, AssemblyError> {
        let mut in_deg: BTreeMap<LayerId, usize> =
            self.nodes.keys().map(|id| (*id, 0)).collect();
        for (_, t) in &self.edges {
            *in_deg.get_mut(t).unwrap() += 1;
        }
        let mut ready: BTreeSet<LayerId> = in_deg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| *id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&id) = ready.iter().next() {
            ready.remove(&id);
            order.push(id);
            for succ in self.successors(id) {
                let d = in_deg.get_mut(&succ).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(succ);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(AssemblyError::Corrupt("cycle in layer graph".into()));
        }
        Ok(order)
    }

    /// Count of layers with the given kind.
    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.nodes.values().filter(|l| l.kind == kind).count()
    }

    /// Graphviz rendering with kind and key params on each node label.
    pub fn to_dot(&self, name: &str) -> String {
        let mut s = format!("digraph {name} {{\n  rankdir=TB;\n");
        for (id, layer) in &self.nodes {
            let detail = match layer.kind {
                LayerKind::Conv2d => format!(
                    "\\n{}x{} k{}",
                    layer.params.get("filters").map(|v| v.to_string()).unwrap_or_default(),
                    layer.params.get("filters").map(|_| "").unwrap_or(""),
                    layer.params.get("kernel_size").map(|v| v.to_string()).unwrap_or_default(),
                ),
                LayerKind::Dense | LayerKind::OutputDense => format!(
                    "\\nunits {}",
                    layer.params.get("units").map(|v| v.to_string()).unwrap_or_default()
                ),
                _ => String::new(),
            };
            s.push_str(&format!("  {id} [label=\"{}{}\"];\n", layer.kind, detail));
        }
        for (from, to) in &self.edges {
            s.push_str(&format!("  {from} -> {to};\n"));
        }
        s.push_str("}\n");
        s
    }
}

fn layer_kind(layer_type: &str) -> Result<LayerKind, AssemblyError> {
    match layer_type {
        "conv" => Ok(LayerKind::Conv2d),
        "dense" => Ok(LayerKind::Dense),
        other => Err(AssemblyError::UnsupportedLayerType(other.to_string())),
    }
}

/// Splices every resolved module copy into the blueprint and contracts
/// single-input connector nodes. The result may still contain
/// [`LayerKind::Junction`] nodes wherever two signals meet; those are
/// resolved by [`insert_merges`].
pub fn assemble_raw(
    individual: &Individual,
    class_count: usize,
) -> Result<LayerGraph, AssemblyError> {
    let bp = &individual.blueprint;
    let mut g = LayerGraph::shell(class_count);

    // Per blueprint node: the layer that receives its incoming signal and
    // the layer that emits its outgoing signal.
    let mut entry: BTreeMap<NodeId, LayerId> = BTreeMap::new();
    let mut exit: BTreeMap<NodeId, LayerId> = BTreeMap::new();
    entry.insert(bp.output(), g.output());
    exit.insert(bp.input(), g.input());

    for b in bp.hidden_ids().collect::<Vec<_>>() {
        let (_, module) = individual
            .resolved_modules
            .get(&b)
            .ok_or(AssemblyError::UnresolvedNode(b))?;
        let junction = |g: &mut LayerGraph| {
            g.add_layer(AssembledLayer {
                kind: LayerKind::Junction,
                params: BTreeMap::new(),
                provenance: Provenance::Synthetic,
            })
        };
        let j_in = junction(&mut g);
        let j_out = junction(&mut g);
        entry.insert(b, j_in);
        exit.insert(b, j_out);
        // Copy the module's layer nodes.
        let mut local: BTreeMap<NodeId, LayerId> = BTreeMap::new();
        local.insert(module.input(), j_in);
        local.insert(module.output(), j_out);
        for m in module.hidden_ids().collect::<Vec<_>>() {
            let spec = module.content(m).expect("hidden node has a layer spec");
            let id = g.add_layer(AssembledLayer {
                kind: layer_kind(&spec.layer_type)?,
                params: spec.params.clone(),
                provenance: Provenance::Genotype { blueprint_node: b, module_node: m },
            });
            local.insert(m, id);
        }
        for (u, v) in module.edges() {
            g.add_edge(local[&u], local[&v]);
        }
    }

    for (x, y) in bp.edges() {
        g.add_edge(exit[&x], entry[&y]);
    }

    // Contract junctions carrying a single signal: splice the source
    // straight through to every consumer. Junctions with two incoming
    // signals stay and later become merges.
    loop {
        let candidate = g
            .nodes
            .iter()
            .find(|(id, l)| l.kind == LayerKind::Junction && g.in_degree(**id) <= 1)
            .map(|(id, _)| *id);
        let Some(j) = candidate else { break };
        let preds = g.predecessors(j);
        let succs = g.successors(j);
        let p = *preds.first().ok_or_else(|| {
            AssemblyError::Corrupt(format!("junction {j} has no incoming signal"))
        })?;
        g.remove_layer(j);
        for s in succs {
            g.add_edge(p, s);
        }
    }
    Ok(g)
}

/// Replaces every two-input fan-in with an explicit merge layer: junctions
/// become merges in place, and a real layer with two incoming edges gets a
/// merge inserted ahead of it.
pub fn insert_merges(mut g: LayerGraph) -> LayerGraph {
    for id in g.layer_ids().collect::<Vec<_>>() {
        let kind = g.layer(id).kind;
        let fan_in = g.in_degree(id);
        if kind == LayerKind::Junction {
            debug_assert_eq!(fan_in, 2);
            g.nodes.get_mut(&id).unwrap().kind = LayerKind::MergeConcat;
        } else if fan_in == 2 && kind != LayerKind::MergeConcat {
            let preds = g.predecessors(id);
            let merge = g.add_layer(AssembledLayer {
                kind: LayerKind::MergeConcat,
                params: BTreeMap::new(),
                provenance: Provenance::Synthetic,
            });
            for p in preds {
                g.remove_edge(p, id);
                g.add_edge(p, merge);
            }
            g.add_edge(merge, id);
        }
    }
    g
}

/// Inserts a flatten layer on every edge that carries a spatial feature
/// map into a flat consumer: dense layers, the output head, and the flat
/// side of a mixed merge. Rejects flat signals feeding conv layers.
pub fn insert_adapters(
    mut g: LayerGraph,
    input_shape: Shape,
) -> Result<LayerGraph, AssemblyError> {
    let order = g.topological_order()?;
    let mut spatial: BTreeMap<LayerId, bool> = BTreeMap::new();
    let flatten_edge = |g: &mut LayerGraph, from: LayerId, to: LayerId| {
        let f = g.add_layer(AssembledLayer {
            kind: LayerKind::Flatten,
            params: BTreeMap::new(),
            provenance: Provenance::Synthetic,
        });
        g.remove_edge(from, to);
        g.add_edge(from, f);
        g.add_edge(f, to);
        f
    };
    for id in order {
        let kind = g.layer(id).kind;
        let preds = g.predecessors(id);
        let is_spatial = match kind {
            LayerKind::Input => input_shape.is_spatial(),
            LayerKind::Conv2d => {
                for p in &preds {
                    if !spatial[p] {
                        return Err(AssemblyError::FlatIntoConv { from: *p, to: id });
                    }
                }
                true
            }
            LayerKind::Dense | LayerKind::OutputDense => {
                for p in preds {
                    if spatial[&p] {
                        let f = flatten_edge(&mut g, p, id);
                        spatial.insert(f, false);
                    }
                }
                false
            }
            LayerKind::Flatten => false,
            LayerKind::MergeConcat => {
                debug_assert_eq!(preds.len(), 2);
                let (a, b) = (preds[0], preds[1]);
                match (spatial[&a], spatial[&b]) {
                    (true, true) => true,
                    (false, false) => false,
                    (sa, _) => {
                        // Mixed merge: flatten the spatial side first.
                        let sp = if sa { a } else { b };
                        let f = flatten_edge(&mut g, sp, id);
                        spatial.insert(f, false);
                        false
                    }
                }
            }
            LayerKind::Junction => {
                return Err(AssemblyError::Corrupt(format!(
                    "junction {id} survived merge insertion"
                )))
            }
        };
        spatial.insert(id, is_spatial);
    }
    Ok(g)
}

fn int_param(
    g: &LayerGraph,
    id: LayerId,
    name: &str,
) -> Result<usize, AssemblyError> {
    let v = g
        .layer(id)
        .params
        .get(name)
        .and_then(|v| v.as_int())
        .ok_or_else(|| AssemblyError::MissingParam(id, name.to_string()))?;
    if v <= 0 {
        return Err(AssemblyError::BadShape {
            layer: id,
            detail: format!("{name} = {v} must be positive"),
        });
    }
    Ok(v as usize)
}

/// Forward shape inference in topological order. Conv layers use same
/// padding, so spatial dims only shrink through stride; a merge of two
/// feature maps pools the larger one down to the smaller before channel
/// concatenation.
pub fn shape_check(
    g: &LayerGraph,
    input_shape: Shape,
) -> Result<BTreeMap<LayerId, Shape>, AssemblyError> {
    let mut shapes: BTreeMap<LayerId, Shape> = BTreeMap::new();
    for id in g.topological_order()? {
        let kind = g.layer(id).kind;
        let preds = g.predecessors(id);
        let one = |shapes: &BTreeMap<LayerId, Shape>| -> Result<Shape, AssemblyError> {
            if preds.len() != 1 {
                return Err(AssemblyError::BadShape {
                    layer: id,
                    detail: format!("expected exactly 1 input, found {}", preds.len()),
                });
            }
            Ok(shapes[&preds[0]])
        };
        let shape = match kind {
            LayerKind::Input => {
                if input_shape.len() == 0 {
                    return Err(AssemblyError::BadShape {
                        layer: id,
                        detail: "empty input shape".into(),
                    });
                }
                input_shape
            }
            LayerKind::Conv2d => {
                let Shape::Spatial(h, w, _) = one(&shapes)? else {
                    return Err(AssemblyError::FlatIntoConv { from: preds[0], to: id });
                };
                let filters = int_param(g, id, "filters")?;
                let stride = int_param(g, id, "stride")?;
                int_param(g, id, "kernel_size")?;
                // Same padding: out = ceil(in / stride).
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                if oh == 0 || ow == 0 {
                    return Err(AssemblyError::BadShape {
                        layer: id,
                        detail: format!("spatial dims collapsed to {oh}x{ow}"),
                    });
                }
                Shape::Spatial(oh, ow, filters)
            }
            LayerKind::Dense | LayerKind::OutputDense => {
                let Shape::Flat(_) = one(&shapes)? else {
                    return Err(AssemblyError::BadShape {
                        layer: id,
                        detail: "dense layer fed a spatial signal".into(),
                    });
                };
                Shape::Flat(int_param(g, id, "units")?)
            }
            LayerKind::Flatten => Shape::Flat(one(&shapes)?.len()),
            LayerKind::MergeConcat => {
                if preds.len() != 2 {
                    return Err(AssemblyError::BadShape {
                        layer: id,
                        detail: format!("merge with {} inputs", preds.len()),
                    });
                }
                match (shapes[&preds[0]], shapes[&preds[1]]) {
                    (Shape::Spatial(h1, w1, c1), Shape::Spatial(h2, w2, c2)) => {
                        Shape::Spatial(h1.min(h2), w1.min(w2), c1 + c2)
                    }
                    (Shape::Flat(n1), Shape::Flat(n2)) => Shape::Flat(n1 + n2),
                    _ => {
                        return Err(AssemblyError::BadShape {
                            layer: id,
                            detail: "merge of spatial and flat signals".into(),
                        })
                    }
                }
            }
            LayerKind::Junction => {
                return Err(AssemblyError::Corrupt(format!(
                    "junction {id} in finished graph"
                )))
            }
        };
        shapes.insert(id, shape);
    }
    Ok(shapes)
}

/// Full assembly pipeline: splice, merge, adapt and prove shapes. Pure in
/// its inputs; the same individual always assembles to the same graph.
pub fn assemble(
    individual: &Individual,
    input_shape: Shape,
    class_count: usize,
) -> Result<LayerGraph, AssemblyError> {
    let g = assemble_raw(individual, class_count)?;
    let g = insert_merges(g);
    let g = insert_adapters(g, input_shape)?;
    shape_check(&g, input_shape)?;
    Ok(g)
}
