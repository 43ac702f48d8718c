//! A minimal differentiable network engine: just enough forward, backward
//! and optimizer machinery to train assembled layer graphs at desk scale.
//!
//! Activations flow between layers as row-major `[batch, features]`
//! matrices; spatial layers interpret their rows as height x width x
//! channels blocks. Convolutions run as im2col plus one matrix product.
//! Training is 32-bit by default; the engine is generic over the scalar so
//! gradient checks can run in 64-bit.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::distr::uniform::SampleUniform;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::assembly::{AssemblyError, LayerGraph, LayerId, LayerKind, Shape};
use crate::data::Dataset;
use crate::tables::TrainingHyperparams;
use crate::variation::FitnessScore;

/// Scalar type the engine computes in.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + SampleUniform
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Neg<Output = Self>
    + std::ops::SubAssign
    + std::ops::AddAssign
    + Send
    + Sync
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("layer {0}: unsupported activation {1:?}")]
    UnsupportedActivation(LayerId, String),
    #[error("batch feature length {found} does not match input layer ({expected})")]
    BatchShape { expected: usize, found: usize },
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("unknown optimizer {0:?}")]
    UnknownOptimizer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    fn parse(name: &str, layer: LayerId) -> Result<Self, NnError> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            other => Err(NnError::UnsupportedActivation(layer, other.to_string())),
        }
    }

    fn apply<F: Scalar>(&self, pre: &Array2<F>) -> Array2<F> {
        let zero = F::from_f64(0.0);
        let one = F::from_f64(1.0);
        match self {
            Activation::Relu => pre.mapv(|v| if v > zero { v } else { zero }),
            Activation::Tanh => pre.mapv(|v| v.tanh()),
            // Slope-1 logistic: 1 / (1 + e^-v).
            Activation::Sigmoid => pre.mapv(|v| one / (one + (-v).exp())),
            Activation::Linear => pre.clone(),
        }
    }

    /// Derivative from the pre-activation and the activation output.
    fn derivative<F: Scalar>(&self, pre: &Array2<F>, act: &Array2<F>) -> Array2<F> {
        let zero = F::from_f64(0.0);
        let one = F::from_f64(1.0);
        match self {
            Activation::Relu => pre.mapv(|v| if v > zero { one } else { zero }),
            Activation::Tanh => act.mapv(|y| one - y * y),
            Activation::Sigmoid => act.mapv(|y| y * (one - y)),
            Activation::Linear => Array2::from_elem(pre.dim(), one),
        }
    }
}

/// Spatial geometry of one conv layer, fixed at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(in_shape: Shape, out_shape: Shape, kernel: usize, stride: usize) -> Self {
        let Shape::Spatial(in_h, in_w, in_c) = in_shape else { unreachable!() };
        let Shape::Spatial(out_h, out_w, filters) = out_shape else { unreachable!() };
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        ConvGeometry {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            filters,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

/// What one layer does at run time.
#[derive(Debug, Clone)]
enum LayerOp {
    Input,
    Conv { geom: ConvGeometry, activation: Activation, dropout: f64 },
    Dense { activation: Activation },
    Flatten,
    Merge(MergePlan),
}

/// Geometry of a two-input merge: each side optionally max-pooled down to
/// the target spatial dims, then concatenated on the channel axis (flat
/// inputs concatenate directly).
#[derive(Debug, Clone, PartialEq, Eq)]
struct MergePlan {
    left: LayerId,
    right: LayerId,
    left_shape: Shape,
    right_shape: Shape,
    out_shape: Shape,
}

/// One layer's trainable tensors. Bias is a 1-row matrix so optimizer
/// bookkeeping is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub weights: Array2<F>,
    pub bias: Array2<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Result<Self, NnError> {
        match name.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(NnError::UnknownOptimizer(other.to_string())),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMS_RHO: f64 = 0.9;
const OPT_EPSILON: f64 = 1e-8;

/// First/second moment accumulators for one tensor.
#[derive(Debug, Clone)]
struct Moments<F> {
    m: Array2<F>,
    v: Array2<F>,
}

/// A buildable, trainable network instance.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar> {
    order: Vec<LayerId>,
    ops: BTreeMap<LayerId, LayerOp>,
    shapes: BTreeMap<LayerId, Shape>,
    preds: BTreeMap<LayerId, Vec<LayerId>>,
    pub params: BTreeMap<LayerId, LayerParams<F>>,
    output: LayerId,
    input: LayerId,
    class_count: usize,
    moments: BTreeMap<(LayerId, u8), Moments<F>>,
    step_count: usize,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

/// Per-epoch metrics from [`TrainState::train`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardPass<F> {
    acts: BTreeMap<LayerId, Array2<F>>,
    pre: BTreeMap<LayerId, Array2<F>>,
    cols: BTreeMap<LayerId, Array2<F>>,
    masks: BTreeMap<LayerId, Array2<F>>,
    pool_idx: BTreeMap<(LayerId, u8), Vec<usize>>,
    /// Softmax class probabilities, rows summing to 1.
    pub probs: Array2<F>,
}

fn uniform_init<F: Scalar, R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Array2<F> {
    let lo = F::from_f64(-limit);
    let hi = F::from_f64(limit);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

impl<F: Scalar> TrainState<F> {
    /// Builds parameter tensors for every layer of a shape-checked graph.
    /// Relu layers get He-uniform init, tanh/sigmoid and the softmax head
    /// Glorot-uniform.
    pub fn build_network(
        graph: &LayerGraph,
        input_shape: Shape,
        rng: ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let shapes = crate::assembly::shape_check(graph, input_shape)?;
        let order = graph.topological_order()?;
        let mut rng = rng;
        let mut ops = BTreeMap::new();
        let mut preds_map = BTreeMap::new();
        let mut params = BTreeMap::new();
        let Shape::Flat(class_count) = shapes[&graph.output()] else {
            unreachable!("output head is flat")
        };
        for &id in &order {
            let layer = graph.layer(id);
            let preds = graph.predecessors(id);
            let op = match layer.kind {
                LayerKind::Input => LayerOp::Input,
                LayerKind::Flatten => LayerOp::Flatten,
                LayerKind::MergeConcat => LayerOp::Merge(MergePlan {
                    left: preds[0],
                    right: preds[1],
                    left_shape: shapes[&preds[0]],
                    right_shape: shapes[&preds[1]],
                    out_shape: shapes[&id],
                }),
                LayerKind::Conv2d => {
                    let geom = ConvGeometry::new(
                        shapes[&preds[0]],
                        shapes[&id],
                        layer.params["kernel_size"].as_int().unwrap() as usize,
                        layer.params["stride"].as_int().unwrap() as usize,
                    );
                    let activation = Activation::parse(
                        layer.params.get("activation").and_then(|v| v.as_str()).unwrap_or("relu"),
                        id,
                    )?;
                    let dropout = layer
                        .params
                        .get("dropout")
                        .and_then(|v| v.as_float())
                        .unwrap_or(0.0);
                    let fan_in = geom.patch_len() as f64;
                    let fan_out = geom.filters as f64;
                    let limit = init_limit(activation, fan_in, fan_out);
                    params.insert(
                        id,
                        LayerParams {
                            weights: uniform_init(geom.patch_len(), geom.filters, limit, &mut rng),
                            bias: Array2::from_elem((1, geom.filters), F::from_f64(0.0)),
                        },
                    );
                    LayerOp::Conv { geom, activation, dropout }
                }
                LayerKind::Dense | LayerKind::OutputDense => {
                    let in_len = shapes[&preds[0]].len();
                    let units = shapes[&id].len();
                    let activation = if layer.kind == LayerKind::OutputDense {
                        // Head is linear here; softmax happens in the loss.
                        Activation::Linear
                    } else {
                        Activation::parse(
                            layer
                                .params
                                .get("activation")
                                .and_then(|v| v.as_str())
                                .unwrap_or("relu"),
                            id,
                        )?
                    };
                    let init_act = if layer.kind == LayerKind::OutputDense {
                        Activation::Sigmoid // Glorot for the softmax head.
                    } else {
                        activation
                    };
                    let limit = init_limit(init_act, in_len as f64, units as f64);
                    params.insert(
                        id,
                        LayerParams {
                            weights: uniform_init(in_len, units, limit, &mut rng),
                            bias: Array2::from_elem((1, units), F::from_f64(0.0)),
                        },
                    );
                    LayerOp::Dense { activation }
                }
                LayerKind::Junction => {
                    return Err(AssemblyError::Corrupt(format!("junction {id}")).into())
                }
            };
            ops.insert(id, op);
            preds_map.insert(id, preds);
        }
        Ok(TrainState {
            order,
            ops,
            shapes: shapes.clone(),
            preds: preds_map,
            params,
            output: graph.output(),
            input: graph.input(),
            class_count,
            moments: BTreeMap::new(),
            step_count: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    pub fn shapes(&self) -> &BTreeMap<LayerId, Shape> {
        &self.shapes
    }

    /// Runs the network on a batch. In training mode, dropout masks are
    /// drawn from the state rng; in inference dropout is the identity.
    pub fn forward(&mut self, batch: &Array2<F>, training: bool) -> Result<ForwardPass<F>, NnError> {
        let expected = self.shapes[&self.input].len();
        if batch.ncols() != expected {
            return Err(NnError::BatchShape { expected, found: batch.ncols() });
        }
        let mut acts: BTreeMap<LayerId, Array2<F>> = BTreeMap::new();
        let mut pre = BTreeMap::new();
        let mut cols_map = BTreeMap::new();
        let mut masks = BTreeMap::new();
        let mut pool_idx = BTreeMap::new();
        for &id in &self.order {
            let out = match &self.ops[&id] {
                LayerOp::Input => batch.clone(),
                LayerOp::Flatten => acts[&self.preds[&id][0]].clone(),
                LayerOp::Dense { activation, .. } => {
                    let x = &acts[&self.preds[&id][0]];
                    let p = &self.params[&id];
                    let z = x.dot(&p.weights) + &p.bias;
                    let a = activation.apply(&z);
                    pre.insert(id, z);
                    a
                }
                LayerOp::Conv { geom, activation, dropout } => {
                    let x = &acts[&self.preds[&id][0]];
                    let cols = im2col(x, geom);
                    let p = &self.params[&id];
                    let z2 = cols.dot(&p.weights) + &p.bias;
                    let batch_n = x.nrows();
                    let z = z2
                        .into_shape_with_order((batch_n, geom.out_h * geom.out_w * geom.filters))
                        .expect("contiguous reshape");
                    let mut a = activation.apply(&z);
                    if training && *dropout > 0.0 {
                        let keep = 1.0 - *dropout;
                        let scale = F::from_f64(1.0 / keep);
                        let zero = F::from_f64(0.0);
                        let mask = Array2::from_shape_fn(a.dim(), |_| {
                            if self.rng.random_range(0.0..1.0) < keep { scale } else { zero }
                        });
                        a = &a * &mask;
                        masks.insert(id, mask);
                    }
                    cols_map.insert(id, cols);
                    pre.insert(id, z);
                    a
                }
                LayerOp::Merge(plan) => {
                    let (left, lidx) = pool_to(
                        &acts[&plan.left],
                        plan.left_shape,
                        plan.out_shape,
                    );
                    let (right, ridx) = pool_to(
                        &acts[&plan.right],
                        plan.right_shape,
                        plan.out_shape,
                    );
                    if let Some(i) = lidx {
                        pool_idx.insert((id, 0), i);
                    }
                    if let Some(i) = ridx {
                        pool_idx.insert((id, 1), i);
                    }
                    concat(&left, &right, plan.out_shape)
                }
            };
            acts.insert(id, out);
        }
        let logits = acts[&self.output].clone();
        let probs = softmax(&logits);
        Ok(ForwardPass { acts, pre, cols: cols_map, masks, pool_idx, probs })
    }

    /// Gradients of the mean categorical cross-entropy over the batch with
    /// respect to every parameter tensor. Returns (gradients, loss).
    pub fn backward(
        &self,
        pass: &ForwardPass<F>,
        labels: &[usize],
    ) -> (BTreeMap<LayerId, LayerParams<F>>, f64) {
        let n = labels.len();
        let loss = cross_entropy(&pass.probs, labels);
        // d loss / d logits = (p - y) / n.
        let mut d_logits = pass.probs.clone();
        let inv_n = F::from_f64(1.0 / n as f64);
        for (i, &label) in labels.iter().enumerate() {
            d_logits[[i, label]] -= F::from_f64(1.0);
        }
        let d_logits = d_logits.mapv(|v| v * inv_n);

        let mut upstream: BTreeMap<LayerId, Array2<F>> = BTreeMap::new();
        upstream.insert(self.output, d_logits);
        let mut grads: BTreeMap<LayerId, LayerParams<F>> = BTreeMap::new();
        let add_up = |map: &mut BTreeMap<LayerId, Array2<F>>, id: LayerId, d: Array2<F>| {
            match map.entry(id) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(d);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    *e.get_mut() = e.get() + &d;
                }
            }
        };
        for &id in self.order.iter().rev() {
            let Some(d_out) = upstream.remove(&id) else { continue };
            match &self.ops[&id] {
                LayerOp::Input => {}
                LayerOp::Flatten => {
                    add_up(&mut upstream, self.preds[&id][0], d_out);
                }
                LayerOp::Dense { activation, .. } => {
                    let src = self.preds[&id][0];
                    let x = &pass.acts[&src];
                    let d_pre = &d_out * &activation.derivative(&pass.pre[&id], &pass.acts[&id]);
                    let p = &self.params[&id];
                    grads.insert(
                        id,
                        LayerParams {
                            weights: x.t().dot(&d_pre),
                            bias: d_pre.sum_axis(Axis(0)).insert_axis(Axis(0)),
                        },
                    );
                    add_up(&mut upstream, src, d_pre.dot(&p.weights.t()));
                }
                LayerOp::Conv { geom, activation, .. } => {
                    let src = self.preds[&id][0];
                    let mut d_act = d_out;
                    if let Some(mask) = pass.masks.get(&id) {
                        d_act = &d_act * mask;
                    }
                    let d_pre =
                        &d_act * &activation.derivative(&pass.pre[&id], &pass.acts[&id]);
                    let batch_n = d_pre.nrows();
                    let d2 = d_pre
                        .into_shape_with_order((batch_n * geom.out_h * geom.out_w, geom.filters))
                        .expect("contiguous reshape");
                    let cols = &pass.cols[&id];
                    let p = &self.params[&id];
                    grads.insert(
                        id,
                        LayerParams {
                            weights: cols.t().dot(&d2),
                            bias: d2.sum_axis(Axis(0)).insert_axis(Axis(0)),
                        },
                    );
                    let d_cols = d2.dot(&p.weights.t());
                    add_up(&mut upstream, src, col2im(&d_cols, geom, batch_n));
                }
                LayerOp::Merge(plan) => {
                    let (d_left, d_right) = split_concat(&d_out, plan);
                    let d_left = unpool(
                        d_left,
                        plan.left_shape,
                        pass.pool_idx.get(&(id, 0)),
                    );
                    let d_right = unpool(
                        d_right,
                        plan.right_shape,
                        pass.pool_idx.get(&(id, 1)),
                    );
                    add_up(&mut upstream, plan.left, d_left);
                    add_up(&mut upstream, plan.right, d_right);
                }
            }
        }
        (grads, loss)
    }

    /// Applies one optimizer update to every parameter tensor.
    pub fn optimizer_step(
        &mut self,
        grads: &BTreeMap<LayerId, LayerParams<F>>,
        kind: OptimizerKind,
        learning_rate: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count;
        let ids: Vec<LayerId> = self.params.keys().copied().collect();
        for id in ids {
            let Some(g) = grads.get(&id) else { continue };
            for (slot, grad) in [(0u8, &g.weights), (1u8, &g.bias)] {
                let param = if slot == 0 {
                    self.params.get_mut(&id).map(|p| &mut p.weights).unwrap()
                } else {
                    self.params.get_mut(&id).map(|p| &mut p.bias).unwrap()
                };
                match kind {
                    OptimizerKind::Sgd => {
                        *param -= &grad.mapv(|v| v * F::from_f64(learning_rate));
                    }
                    OptimizerKind::Adam => {
                        let mom = self.moments.entry((id, slot)).or_insert_with(|| Moments {
                            m: Array2::from_elem(grad.dim(), F::from_f64(0.0)),
                            v: Array2::from_elem(grad.dim(), F::from_f64(0.0)),
                        });
                        let b1 = F::from_f64(ADAM_BETA1);
                        let b2 = F::from_f64(ADAM_BETA2);
                        let one = F::from_f64(1.0);
                        mom.m = mom.m.mapv(|m| m * b1) + grad.mapv(|g| g * (one - b1));
                        mom.v = mom.v.mapv(|v| v * b2)
                            + grad.mapv(|g| g * g * (one - b2));
                        let bc1 = F::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
                        let bc2 = F::from_f64(1.0 - ADAM_BETA2.powi(t as i32));
                        let eps = F::from_f64(OPT_EPSILON);
                        let lr = F::from_f64(learning_rate);
                        let update = ndarray::Zip::from(&mom.m)
                            .and(&mom.v)
                            .map_collect(|&m, &v| {
                                let m_hat = m / bc1;
                                let v_hat = v / bc2;
                                lr * m_hat / (v_hat.sqrt() + eps)
                            });
                        *param -= &update;
                    }
                    OptimizerKind::RmsProp => {
                        let mom = self.moments.entry((id, slot)).or_insert_with(|| Moments {
                            m: Array2::from_elem(grad.dim(), F::from_f64(0.0)),
                            v: Array2::from_elem(grad.dim(), F::from_f64(0.0)),
                        });
                        let rho = F::from_f64(RMS_RHO);
                        let one = F::from_f64(1.0);
                        mom.v = mom.v.mapv(|v| v * rho) + grad.mapv(|g| g * g * (one - rho));
                        let eps = F::from_f64(OPT_EPSILON);
                        let lr = F::from_f64(learning_rate);
                        let update = ndarray::Zip::from(grad)
                            .and(&mom.v)
                            .map_collect(|&g, &v| lr * g / (v.sqrt() + eps));
                        *param -= &update;
                    }
                }
            }
        }
    }

    /// Mini-batch training with per-epoch shuffling from the state rng.
    pub fn train(
        &mut self,
        train: &Dataset,
        validation: &Dataset,
        hyper: &TrainingHyperparams,
    ) -> Result<History, NnError> {
        if train.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        let kind = OptimizerKind::parse(&hyper.optimizer)?;
        let mut history = History::default();
        let mut indices: Vec<usize> = (0..train.len()).collect();
        for _ in 0..hyper.epochs {
            // Fisher-Yates from the recorded rng stream.
            for i in (1..indices.len()).rev() {
                let j = self.rng.random_range(0..=i);
                indices.swap(i, j);
            }
            for chunk in indices.chunks(hyper.batch_size.max(1)) {
                let (x, y) = gather_batch(train, chunk);
                let pass = self.forward(&x, true)?;
                let (grads, _) = self.backward(&pass, &y);
                self.optimizer_step(&grads, kind, hyper.learning_rate);
            }
            self.epoch += 1;
            let train_score = self.evaluate(train)?;
            let val_score = self.evaluate(validation)?;
            history.train_loss.push(train_score.loss);
            history.train_accuracy.push(train_score.accuracy);
            history.val_loss.push(val_score.loss);
            history.val_accuracy.push(val_score.accuracy);
        }
        Ok(history)
    }

    /// Accuracy (argmax match fraction) and mean cross-entropy over a set.
    pub fn evaluate(&mut self, dataset: &Dataset) -> Result<FitnessScore, NnError> {
        if dataset.is_empty() {
            return Ok(FitnessScore::new(0.0, 0.0));
        }
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        let all: Vec<usize> = (0..dataset.len()).collect();
        for chunk in all.chunks(256) {
            let (x, y) = gather_batch(dataset, chunk);
            let pass = self.forward(&x, false)?;
            loss_sum += cross_entropy(&pass.probs, &y) * chunk.len() as f64;
            for (row, &label) in pass.probs.rows().into_iter().zip(&y) {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
        }
        Ok(FitnessScore::new(
            correct as f64 / dataset.len() as f64,
            loss_sum / dataset.len() as f64,
        ))
    }
}

fn init_limit(activation: Activation, fan_in: f64, fan_out: f64) -> f64 {
    match activation {
        // He-uniform for relu, Glorot-uniform otherwise.
        Activation::Relu => (6.0 / fan_in).sqrt(),
        _ => (6.0 / (fan_in + fan_out)).sqrt(),
    }
}

/// Converts a batch of datasets rows into the engine's input matrix.
pub fn gather_batch<F: Scalar>(dataset: &Dataset, indices: &[usize]) -> (Array2<F>, Vec<usize>) {
    let len = dataset.sample(0).len();
    let mut x = Array2::from_elem((indices.len(), len), F::from_f64(0.0));
    let mut y = Vec::with_capacity(indices.len());
    for (r, &i) in indices.iter().enumerate() {
        for (c, &v) in dataset.sample(i).iter().enumerate() {
            x[[r, c]] = F::from_f64(v as f64);
        }
        y.push(dataset.labels[i]);
    }
    (x, y)
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mut max = row[0];
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        let mut sum = F::from_f64(0.0);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Mean categorical cross-entropy of probabilities against integer labels.
pub fn cross_entropy<F: Scalar>(probs: &Array2<F>, labels: &[usize]) -> f64 {
    let tiny = 1e-12;
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(probs[[i, l]].to_f64().max(tiny)).ln())
        .sum();
    sum / labels.len() as f64
}

/// Unfolds a batch of feature maps into convolution patches:
/// `[batch * out_h * out_w, kernel * kernel * in_c]`, zero padded.
fn im2col<F: Scalar>(x: &Array2<F>, geom: &ConvGeometry) -> Array2<F> {
    let batch = x.nrows();
    let mut cols = Array2::from_elem(
        (batch * geom.out_h * geom.out_w, geom.patch_len()),
        F::from_f64(0.0),
    );
    for b in 0..batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let row = (b * geom.out_h + oy) * geom.out_w + ox;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad_top as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad_left as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * geom.in_w + ix as usize) * geom.in_c;
                        let dst = (ky * geom.kernel + kx) * geom.in_c;
                        for c in 0..geom.in_c {
                            cols[[row, dst + c]] = x[[b, src + c]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
fn col2im<F: Scalar>(d_cols: &Array2<F>, geom: &ConvGeometry, batch: usize) -> Array2<F> {
    let mut dx = Array2::from_elem(
        (batch, geom.in_h * geom.in_w * geom.in_c),
        F::from_f64(0.0),
    );
    for b in 0..batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let row = (b * geom.out_h + oy) * geom.out_w + ox;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad_top as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad_left as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * geom.in_w + ix as usize) * geom.in_c;
                        let src = (ky * geom.kernel + kx) * geom.in_c;
                        for c in 0..geom.in_c {
                            dx[[b, dst + c]] += d_cols[[row, src + c]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adaptive max-pool of a spatial activation down to the merge target
/// dims. Returns the pooled activation and, when pooling actually
/// happened, the flat argmax index per output element for the backward
/// pass. Identity for flat signals and already-matching maps.
fn pool_to<F: Scalar>(
    x: &Array2<F>,
    from: Shape,
    target: Shape,
) -> (Array2<F>, Option<Vec<usize>>) {
    let (Shape::Spatial(h, w, c), Shape::Spatial(th, tw, _)) = (from, target) else {
        return (x.clone(), None);
    };
    if h == th && w == tw {
        return (x.clone(), None);
    }
    let batch = x.nrows();
    let mut out = Array2::from_elem((batch, th * tw * c), F::from_f64(0.0));
    let mut argmax = vec![0usize; batch * th * tw * c];
    for b in 0..batch {
        for oy in 0..th {
            let y0 = oy * h / th;
            let y1 = ((oy + 1) * h).div_ceil(th);
            for ox in 0..tw {
                let x0 = ox * w / tw;
                let x1 = ((ox + 1) * w).div_ceil(tw);
                for ch in 0..c {
                    let mut best_idx = (y0 * w + x0) * c + ch;
                    let mut best = x[[b, best_idx]];
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let idx = (yy * w + xx) * c + ch;
                            if x[[b, idx]] > best {
                                best = x[[b, idx]];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * tw + ox) * c + ch;
                    out[[b, o]] = best;
                    argmax[b * th * tw * c + o] = best_idx;
                }
            }
        }
    }
    (out, Some(argmax))
}

/// Routes merge gradients back through the adaptive pool (or straight
/// through when no pooling happened).
fn unpool<F: Scalar>(d: Array2<F>, orig: Shape, argmax: Option<&Vec<usize>>) -> Array2<F> {
    let Some(argmax) = argmax else { return d };
    let batch = d.nrows();
    let per_row = d.ncols();
    let mut out = Array2::from_elem((batch, orig.len()), F::from_f64(0.0));
    for b in 0..batch {
        for o in 0..per_row {
            out[[b, argmax[b * per_row + o]]] += d[[b, o]];
        }
    }
    out
}

/// Channel-axis concatenation for spatial inputs (per-pixel interleave),
/// plain feature concatenation for flat ones. Both inputs are already at
/// the target spatial dims.
fn concat<F: Scalar>(left: &Array2<F>, right: &Array2<F>, out_shape: Shape) -> Array2<F> {
    match out_shape {
        Shape::Flat(_) => ndarray::concatenate(Axis(1), &[left.view(), right.view()])
            .expect("flat concat"),
        Shape::Spatial(h, w, c_total) => {
            let batch = left.nrows();
            let pixels = h * w;
            let c1 = left.ncols() / pixels;
            let c2 = right.ncols() / pixels;
            debug_assert_eq!(c1 + c2, c_total);
            let mut out = Array2::from_elem((batch, pixels * c_total), F::from_f64(0.0));
            for b in 0..batch {
                for p in 0..pixels {
                    for ch in 0..c1 {
                        out[[b, p * c_total + ch]] = left[[b, p * c1 + ch]];
                    }
                    for ch in 0..c2 {
                        out[[b, p * c_total + c1 + ch]] = right[[b, p * c2 + ch]];
                    }
                }
            }
            out
        }
    }
}

/// Splits a merge gradient back into its two (pooled-size) inputs.
fn split_concat<F: Scalar>(d: &Array2<F>, plan: &MergePlan) -> (Array2<F>, Array2<F>) {
    match plan.out_shape {
        Shape::Flat(_) => {
            let n1 = plan.left_shape.len();
            (
                d.slice(ndarray::s![.., ..n1]).to_owned(),
                d.slice(ndarray::s![.., n1..]).to_owned(),
            )
        }
        Shape::Spatial(h, w, c_total) => {
            let Shape::Spatial(_, _, c1) = plan.left_shape else { unreachable!() };
            let c2 = c_total - c1;
            let batch = d.nrows();
            let pixels = h * w;
            let mut dl = Array2::from_elem((batch, pixels * c1), F::from_f64(0.0));
            let mut dr = Array2::from_elem((batch, pixels * c2), F::from_f64(0.0));
            for b in 0..batch {
                for p in 0..pixels {
                    for ch in 0..c1 {
                        dl[[b, p * c1 + ch]] = d[[b, p * c_total + ch]];
                    }
                    for ch in 0..c2 {
                        dr[[b, p * c2 + ch]] = d[[b, p * c_total + c1 + ch]];
                    }
                }
            }
            (dl, dr)
        }
    }
}
