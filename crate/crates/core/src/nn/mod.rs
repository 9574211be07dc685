//! Layer definitions, forward execution with cached traces, and reverse-mode
//! gradients for both parameters and inputs. Input gradients are first-class
//! because every attack consumes them.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::XorShiftRng;
use crate::tensor::Tensor;
use crate::tent::{self, SharingMode, TentParams};

use batchnorm::{BatchNormParams, BnBatchStats, BnCache};

pub use loss::softmax_cross_entropy;

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Execution mode. Eval mode turns dropout into the identity and makes
/// batch normalization use its running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer kind plus hyperparameters. Parameter tensors live in [`LayerParams`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Linear { in_features: usize, out_features: usize },
    BatchNorm { features: usize },
    MaxPool2d { pool: usize },
    Dropout { rate: f32 },
    Relu,
    Tent { mode: SharingMode },
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::Linear { .. } => "Linear",
            LayerSpec::BatchNorm { .. } => "BatchNorm",
            LayerSpec::MaxPool2d { .. } => "MaxPool2d",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Tent { .. } => "Tent",
            LayerSpec::Flatten => "Flatten",
        }
    }
}

/// Parameter tensors for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { weight: Tensor, bias: Tensor },
    Linear { weight: Tensor, bias: Tensor },
    BatchNorm(BatchNormParams),
    Tent(TentParams),
    None,
}

/// Gradients mirroring [`LayerParams`].
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Conv { dweight: Tensor, dbias: Tensor },
    Linear { dweight: Tensor, dbias: Tensor },
    BatchNorm { dgamma: Tensor, dbeta: Tensor },
    Tent { ddelta: Tensor },
    None,
}

pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

/// Marks which parameter tensor a flat slot refers to; the optimizer treats
/// tent deltas specially (decay + clamp).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    LinearWeight,
    LinearBias,
    BnGamma,
    BnBeta,
    TentDelta,
}

/// Ordered sequence of layers with validated shapes.
pub struct ModelGraph {
    layers: Vec<Layer>,
    input_shape: Vec<usize>, // per-sample [C, H, W]
    class_count: usize,
    graph_id: u64,
    params_version: u64,
}

impl ModelGraph {
    /// Validate layer compatibility and allocate zeroed parameters.
    pub fn new(specs: Vec<LayerSpec>, input_shape: Vec<usize>, class_count: usize) -> Result<ModelGraph> {
        let mut shape = input_shape.clone(); // per-sample
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let params = match &spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(Error::dimension(
                            format!("layer {i} Conv2d input"),
                            &shape,
                            &[*in_channels],
                        ));
                    }
                    if shape[1] < *kernel || shape[2] < *kernel {
                        return Err(Error::dimension(
                            format!("layer {i} Conv2d kernel exceeds input"),
                            &shape,
                            &[*kernel, *kernel],
                        ));
                    }
                    shape = vec![*out_channels, shape[1] - kernel + 1, shape[2] - kernel + 1];
                    LayerParams::Conv {
                        weight: Tensor::zeros(vec![*out_channels, *in_channels, *kernel, *kernel]),
                        bias: Tensor::zeros(vec![*out_channels]),
                    }
                }
                LayerSpec::Linear { in_features, out_features } => {
                    if shape.len() != 1 || shape[0] != *in_features {
                        return Err(Error::dimension(
                            format!("layer {i} Linear input"),
                            &shape,
                            &[*in_features],
                        ));
                    }
                    shape = vec![*out_features];
                    LayerParams::Linear {
                        weight: Tensor::zeros(vec![*out_features, *in_features]),
                        bias: Tensor::zeros(vec![*out_features]),
                    }
                }
                LayerSpec::BatchNorm { features } => {
                    if shape.is_empty() || shape[0] != *features {
                        return Err(Error::dimension(
                            format!("layer {i} BatchNorm features"),
                            &shape,
                            &[*features],
                        ));
                    }
                    LayerParams::BatchNorm(BatchNormParams::new(*features))
                }
                LayerSpec::MaxPool2d { pool } => {
                    if shape.len() != 3 || shape[1] % pool != 0 || shape[2] % pool != 0 {
                        return Err(Error::dimension(
                            format!("layer {i} MaxPool2d extents"),
                            &shape,
                            &[*pool],
                        ));
                    }
                    shape = vec![shape[0], shape[1] / pool, shape[2] / pool];
                    LayerParams::None
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::domain(format!("layer {i} dropout rate {rate}")));
                    }
                    LayerParams::None
                }
                LayerSpec::Relu => LayerParams::None,
                LayerSpec::Tent { mode } => LayerParams::Tent(TentParams::new(*mode, shape[0])),
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    LayerParams::None
                }
            };
            layers.push(Layer { spec, params });
        }
        if shape != [class_count] {
            return Err(Error::dimension("graph output vs class count", &shape, &[class_count]));
        }
        Ok(ModelGraph {
            layers,
            input_shape,
            class_count,
            graph_id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            params_version: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params_version(&self) -> u64 {
        self.params_version
    }

    /// Callers that mutate parameters must bump the version so stale traces
    /// are rejected by [`model_backward`].
    pub fn bump_params_version(&mut self) {
        self.params_version += 1;
    }

    /// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = XorShiftRng::derive(seed, 0xC0DE);
        for layer in &mut self.layers {
            match &mut layer.params {
                LayerParams::Conv { weight, .. } => {
                    let s = weight.shape();
                    let fan_in = (s[1] * s[2] * s[3]) as f32;
                    let std = (2.0 / fan_in).sqrt();
                    for v in weight.data_mut() {
                        *v = rng.normal() * std;
                    }
                }
                LayerParams::Linear { weight, .. } => {
                    let fan_in = weight.shape()[1] as f32;
                    let std = (2.0 / fan_in).sqrt();
                    for v in weight.data_mut() {
                        *v = rng.normal() * std;
                    }
                }
                _ => {}
            }
        }
        self.bump_params_version();
    }

    /// Trainable parameter tensors in declaration order, with their kinds.
    pub fn trainable_params_mut(&mut self) -> Vec<(&mut Tensor, ParamKind)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.params {
                LayerParams::Conv { weight, bias } => {
                    out.push((weight, ParamKind::ConvWeight));
                    out.push((bias, ParamKind::ConvBias));
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((weight, ParamKind::LinearWeight));
                    out.push((bias, ParamKind::LinearBias));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((&mut bn.gamma, ParamKind::BnGamma));
                    out.push((&mut bn.beta, ParamKind::BnBeta));
                }
                LayerParams::Tent(t) => out.push((t.deltas_mut(), ParamKind::TentDelta)),
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn trainable_params(&self) -> Vec<(&Tensor, ParamKind)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.params {
                LayerParams::Conv { weight, bias } => {
                    out.push((weight, ParamKind::ConvWeight));
                    out.push((bias, ParamKind::ConvBias));
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((weight, ParamKind::LinearWeight));
                    out.push((bias, ParamKind::LinearBias));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((&bn.gamma, ParamKind::BnGamma));
                    out.push((&bn.beta, ParamKind::BnBeta));
                }
                LayerParams::Tent(t) => out.push((t.deltas(), ParamKind::TentDelta)),
                LayerParams::None => {}
            }
        }
        out
    }

    /// Every parameter tensor including running statistics, in declaration
    /// order; this is the checkpoint blob order.
    pub fn all_state_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.params {
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm(bn) => {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                    out.push(&bn.running_mean);
                    out.push(&bn.running_var);
                }
                LayerParams::Tent(t) => out.push(t.deltas()),
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn all_state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.params {
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                    out.push(&mut bn.running_mean);
                    out.push(&mut bn.running_var);
                }
                LayerParams::Tent(t) => out.push(t.deltas_mut()),
                LayerParams::None => {}
            }
        }
        out
    }

    /// Per-layer tent deltas, for reports and checkpoint headers.
    pub fn tent_deltas(&self) -> Vec<(usize, Vec<f32>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match &l.params {
                LayerParams::Tent(t) => Some((i, t.deltas().data().to_vec())),
                _ => None,
            })
            .collect()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }
}

/// Which activation the canonical classifier uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tent,
}

/// The four-conv, two-linear MNIST classifier: conv3x3(32), conv3x3(32),
/// pool, conv3x3(64), conv3x3(64), pool, fc(200), fc(200), fc(10), valid
/// padding throughout, dropout 0.5 after each hidden linear activation.
/// Batch normalization precedes each activation when requested; tents always
/// get it because they need normalized inputs to stay active.
pub fn build_mnist_net(activation: Activation, with_batchnorm: bool) -> ModelGraph {
    let with_bn = with_batchnorm || activation == Activation::Tent;
    let act = |specs: &mut Vec<LayerSpec>, features: usize| {
        if with_bn {
            specs.push(LayerSpec::BatchNorm { features });
        }
        match activation {
            Activation::Relu => specs.push(LayerSpec::Relu),
            Activation::Tent => specs.push(LayerSpec::Tent { mode: SharingMode::Shared }),
        }
    };
    let mut specs = Vec::new();
    specs.push(LayerSpec::Conv2d { in_channels: 1, out_channels: 32, kernel: 3 });
    act(&mut specs, 32);
    specs.push(LayerSpec::Conv2d { in_channels: 32, out_channels: 32, kernel: 3 });
    act(&mut specs, 32);
    specs.push(LayerSpec::MaxPool2d { pool: 2 });
    specs.push(LayerSpec::Conv2d { in_channels: 32, out_channels: 64, kernel: 3 });
    act(&mut specs, 64);
    specs.push(LayerSpec::Conv2d { in_channels: 64, out_channels: 64, kernel: 3 });
    act(&mut specs, 64);
    specs.push(LayerSpec::MaxPool2d { pool: 2 });
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::Linear { in_features: 1024, out_features: 200 });
    act(&mut specs, 200);
    specs.push(LayerSpec::Dropout { rate: 0.5 });
    specs.push(LayerSpec::Linear { in_features: 200, out_features: 200 });
    act(&mut specs, 200);
    specs.push(LayerSpec::Dropout { rate: 0.5 });
    specs.push(LayerSpec::Linear { in_features: 200, out_features: 10 });
    ModelGraph::new(specs, vec![1, 28, 28], 10).expect("canonical architecture is well-formed")
}

/// Per-layer values cached during forward for the backward pass. The inputs
/// kept for ReLU/Tent layers double as the pre-activation record consumed by
/// the risk analyses.
pub enum LayerTrace {
    Conv { input: Tensor },
    Linear { input: Tensor },
    BatchNorm { cache: BnCache },
    MaxPool { indices: Vec<u32>, in_shape: Vec<usize> },
    Dropout { mask: Option<Vec<f32>> },
    Relu { input: Tensor },
    Tent { input: Tensor },
    Flatten { in_shape: Vec<usize> },
}

pub struct ForwardTrace {
    graph_id: u64,
    params_version: u64,
    mode: Mode,
    input: Tensor,
    entries: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layer_count(&self) -> usize {
        self.entries.len()
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Pre-activation tensors for every ReLU/Tent layer, with the layer index
    /// and the tent deltas when applicable.
    pub fn pre_activations<'a>(
        &'a self,
        graph: &'a ModelGraph,
    ) -> Vec<(usize, &'a Tensor, Option<&'a [f32]>)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match e {
                LayerTrace::Relu { input } => Some((i, input, None)),
                LayerTrace::Tent { input } => match &graph.layers[i].params {
                    LayerParams::Tent(t) => Some((i, input, Some(t.deltas().data()))),
                    _ => None,
                },
                _ => None,
            })
            .collect()
    }
}

/// Forward pass. Train mode draws dropout masks from `rng_seed` and updates
/// batch-norm running statistics; eval mode is a pure function of
/// (weights, batch). Inputs are expected in [0,1] for image batches, but the
/// range is a caller obligation, not a check: attack internals legitimately
/// evaluate intermediate points outside the box.
pub fn model_forward(
    graph: &mut ModelGraph,
    batch: &Tensor,
    mode: Mode,
    rng_seed: u64,
) -> Result<(Tensor, ForwardTrace)> {
    let (logits, trace, updates) = forward_pure(graph, batch, mode, rng_seed)?;
    for (layer_idx, stats) in updates {
        if let LayerParams::BatchNorm(bn) = &mut graph.layers[layer_idx].params {
            batchnorm::update_running_stats(bn, &stats);
        }
    }
    Ok((logits, trace))
}

/// Eval-mode forward without the mutable borrow.
pub fn model_forward_eval(graph: &ModelGraph, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    let (logits, trace, _) = forward_pure(graph, batch, Mode::Eval, 0)?;
    Ok((logits, trace))
}

fn forward_pure(
    graph: &ModelGraph,
    batch: &Tensor,
    mode: Mode,
    rng_seed: u64,
) -> Result<(Tensor, ForwardTrace, Vec<(usize, BnBatchStats)>)> {
    if batch.rank() != graph.input_shape.len() + 1 || batch.shape()[1..] != graph.input_shape[..] {
        return Err(Error::dimension("model_forward input", batch.shape(), &graph.input_shape));
    }
    let mut rng = XorShiftRng::derive(rng_seed, 0xD80);
    let mut entries = Vec::with_capacity(graph.layers.len());
    let mut updates = Vec::new();
    let mut x = batch.clone();
    for (i, layer) in graph.layers.iter().enumerate() {
        let (out, trace) = match (&layer.spec, &layer.params) {
            (LayerSpec::Conv2d { .. }, LayerParams::Conv { weight, bias }) => {
                let y = conv::conv2d_forward(&x, weight, bias)?;
                (y, LayerTrace::Conv { input: x })
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                let y = linear::linear_forward(&x, weight, bias)?;
                (y, LayerTrace::Linear { input: x })
            }
            (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn)) => match mode {
                Mode::Train => {
                    let (y, cache, stats) = batchnorm::batchnorm_forward_train(&x, bn)?;
                    updates.push((i, stats));
                    (y, LayerTrace::BatchNorm { cache })
                }
                Mode::Eval => {
                    let (y, cache) = batchnorm::batchnorm_forward_eval(&x, bn)?;
                    (y, LayerTrace::BatchNorm { cache })
                }
            },
            (LayerSpec::MaxPool2d { pool }, _) => {
                let in_shape = x.shape().to_vec();
                let (y, indices) = pool::maxpool_forward(&x, *pool)?;
                (y, LayerTrace::MaxPool { indices, in_shape })
            }
            (LayerSpec::Dropout { rate }, _) => match mode {
                Mode::Train => {
                    let keep_scale = 1.0 / (1.0 - rate);
                    let mask: Vec<f32> = (0..x.len())
                        .map(|_| if rng.next_f32() < *rate { 0.0 } else { keep_scale })
                        .collect();
                    let mut y = x.clone();
                    for (v, &m) in y.data_mut().iter_mut().zip(mask.iter()) {
                        *v *= m;
                    }
                    (y, LayerTrace::Dropout { mask: Some(mask) })
                }
                Mode::Eval => (x.clone(), LayerTrace::Dropout { mask: None }),
            },
            (LayerSpec::Relu, _) => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                (y, LayerTrace::Relu { input: x })
            }
            (LayerSpec::Tent { .. }, LayerParams::Tent(t)) => {
                let y = tent::tent_forward(&x, t);
                (y, LayerTrace::Tent { input: x })
            }
            (LayerSpec::Flatten, _) => {
                let in_shape = x.shape().to_vec();
                let n = in_shape[0];
                let flat: usize = in_shape[1..].iter().product();
                let y = x.clone().reshape(vec![n, flat])?;
                (y, LayerTrace::Flatten { in_shape })
            }
            _ => return Err(Error::Trace(format!("layer {i} spec/params mismatch"))),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite {
                location: format!("layer {i} ({})", layer.spec.kind_name()),
            });
        }
        entries.push(trace);
        x = out;
    }
    let trace = ForwardTrace {
        graph_id: graph.graph_id,
        params_version: graph.params_version,
        mode,
        input: batch.clone(),
        entries,
    };
    Ok((x, trace, updates))
}

/// Full backward pass: gradients for every parameter tensor plus the
/// gradient with respect to the input batch.
pub fn model_backward(
    graph: &ModelGraph,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<(Vec<LayerGrads>, Tensor)> {
    let (grads, dx) = backward_impl(graph, trace, dlogits, true)?;
    Ok((grads.expect("param grads requested"), dx))
}

/// Input gradient only; attack inner loops skip the parameter GEMMs.
pub fn model_backward_input(
    graph: &ModelGraph,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<Tensor> {
    let (_, dx) = backward_impl(graph, trace, dlogits, false)?;
    Ok(dx)
}

fn backward_impl(
    graph: &ModelGraph,
    trace: &ForwardTrace,
    dlogits: &Tensor,
    want_param_grads: bool,
) -> Result<(Option<Vec<LayerGrads>>, Tensor)> {
    if trace.graph_id != graph.graph_id {
        return Err(Error::Trace("trace produced by a different graph".into()));
    }
    if trace.params_version != graph.params_version {
        return Err(Error::Trace(
            "stale trace: parameters changed since the forward pass".into(),
        ));
    }
    if trace.entries.len() != graph.layers.len() {
        return Err(Error::Trace("trace layer count mismatch".into()));
    }
    let train = trace.mode == Mode::Train;
    let mut grad = dlogits.clone();
    let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(graph.layers.len());
    for (layer, entry) in graph.layers.iter().zip(trace.entries.iter()).rev() {
        let lg;
        grad = match (&layer.spec, &layer.params, entry) {
            (LayerSpec::Conv2d { .. }, LayerParams::Conv { weight, .. }, LayerTrace::Conv { input }) => {
                let (dx, wg) = conv::conv2d_backward(input, weight, &grad, want_param_grads)?;
                lg = wg
                    .map(|(dw, db)| LayerGrads::Conv { dweight: dw, dbias: db })
                    .unwrap_or(LayerGrads::None);
                dx
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear { weight, .. }, LayerTrace::Linear { input }) => {
                let (dx, wg) = linear::linear_backward(input, weight, &grad, want_param_grads)?;
                lg = wg
                    .map(|(dw, db)| LayerGrads::Linear { dweight: dw, dbias: db })
                    .unwrap_or(LayerGrads::None);
                dx
            }
            (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn), LayerTrace::BatchNorm { cache }) => {
                let (dx, wg) = batchnorm::batchnorm_backward(&grad, cache, bn, train, want_param_grads)?;
                lg = wg
                    .map(|(dgamma, dbeta)| LayerGrads::BatchNorm { dgamma, dbeta })
                    .unwrap_or(LayerGrads::None);
                dx
            }
            (LayerSpec::MaxPool2d { .. }, _, LayerTrace::MaxPool { indices, in_shape }) => {
                lg = LayerGrads::None;
                pool::maxpool_backward(&grad, indices, in_shape)?
            }
            (LayerSpec::Dropout { .. }, _, LayerTrace::Dropout { mask }) => {
                lg = LayerGrads::None;
                match mask {
                    Some(m) => {
                        let mut dx = grad;
                        for (v, &mv) in dx.data_mut().iter_mut().zip(m.iter()) {
                            *v *= mv;
                        }
                        dx
                    }
                    None => grad,
                }
            }
            (LayerSpec::Relu, _, LayerTrace::Relu { input }) => {
                lg = LayerGrads::None;
                let mut dx = grad;
                for (v, &xv) in dx.data_mut().iter_mut().zip(input.data().iter()) {
                    if xv <= 0.0 {
                        *v = 0.0;
                    }
                }
                dx
            }
            (LayerSpec::Tent { .. }, LayerParams::Tent(t), LayerTrace::Tent { input }) => {
                lg = if want_param_grads {
                    LayerGrads::Tent {
                        ddelta: tent::tent_backward_delta(input, t, &grad)?,
                    }
                } else {
                    LayerGrads::None
                };
                tent::tent_backward_input(input, t, &grad)?
            }
            (LayerSpec::Flatten, _, LayerTrace::Flatten { in_shape }) => {
                lg = LayerGrads::None;
                grad.reshape(in_shape.clone())?
            }
            _ => return Err(Error::Trace("trace entry does not match layer".into())),
        };
        layer_grads.push(lg);
    }
    layer_grads.reverse();
    grad.check_finite("model_backward input gradient")?;
    Ok((want_param_grads.then_some(layer_grads), grad))
}

/// Flatten layer gradients into the order of [`ModelGraph::trainable_params`].
pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for g in grads {
        match g {
            LayerGrads::Conv { dweight, dbias } | LayerGrads::Linear { dweight, dbias } => {
                out.push(dweight);
                out.push(dbias);
            }
            LayerGrads::BatchNorm { dgamma, dbeta } => {
                out.push(dgamma);
                out.push(dbeta);
            }
            LayerGrads::Tent { ddelta } => out.push(ddelta),
            LayerGrads::None => {}
        }
    }
    out
}

/// Argmax class predictions in eval mode.
pub fn predict(graph: &ModelGraph, batch: &Tensor) -> Result<Vec<usize>> {
    let (logits, _) = model_forward_eval(graph, batch)?;
    crate::tensor::argmax_rows(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_net_layer_counts() {
        let org = build_mnist_net(Activation::Relu, false);
        assert_eq!(org.layers().len(), 18);
        let bn = build_mnist_net(Activation::Relu, true);
        assert_eq!(bn.layers().len(), 24);
        let tent = build_mnist_net(Activation::Tent, true);
        assert_eq!(tent.layers().len(), 24);
        // batch-norm always precedes tents
        let tent_nobn = build_mnist_net(Activation::Tent, false);
        assert_eq!(tent_nobn.layers().len(), 24);
        for (i, l) in tent.layers().iter().enumerate() {
            if matches!(l.spec, LayerSpec::Tent { .. }) {
                assert!(matches!(tent.layers()[i - 1].spec, LayerSpec::BatchNorm { .. }));
            }
        }
    }

    #[test]
    fn shape_validation_rejects_mismatch() {
        let specs = vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3 },
            LayerSpec::Conv2d { in_channels: 8, out_channels: 4, kernel: 3 }, // wrong in_channels
        ];
        assert!(ModelGraph::new(specs, vec![1, 8, 8], 10).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut g = build_mnist_net(Activation::Relu, true);
        g.init_weights(3);
        let mut rng = XorShiftRng::new(9);
        let data: Vec<f32> = (0..2 * 784).map(|_| rng.next_f32()).collect();
        let batch = Tensor::from_vec(vec![2, 1, 28, 28], data).unwrap();
        let (l1, _) = model_forward_eval(&g, &batch).unwrap();
        let (l2, _) = model_forward_eval(&g, &batch).unwrap();
        assert_eq!(l1.data(), l2.data());
        assert_eq!(l1.shape(), &[2, 10]);
    }

    #[test]
    fn single_sample_logits_shape() {
        let mut g = build_mnist_net(Activation::Tent, true);
        g.init_weights(4);
        let batch = Tensor::zeros(vec![1, 1, 28, 28]);
        let (logits, _) = model_forward_eval(&g, &batch).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
    }

    #[test]
    fn zero_dlogits_zero_grads() {
        let mut g = build_mnist_net(Activation::Relu, false);
        g.init_weights(5);
        let batch = Tensor::filled(vec![1, 1, 28, 28], 0.5);
        let (logits, trace) = model_forward_eval(&g, &batch).unwrap();
        let dlogits = Tensor::zeros(logits.shape().to_vec());
        let (grads, dx) = model_backward(&g, &trace, &dlogits).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for t in flatten_grads(&grads) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut g = build_mnist_net(Activation::Relu, false);
        g.init_weights(6);
        let batch = Tensor::filled(vec![1, 1, 28, 28], 0.5);
        let (logits, trace) = model_forward_eval(&g, &batch).unwrap();
        g.bump_params_version();
        let dlogits = Tensor::zeros(logits.shape().to_vec());
        assert!(matches!(
            model_backward(&g, &trace, &dlogits),
            Err(Error::Trace(_))
        ));
    }

    #[test]
    fn trace_from_other_graph_is_rejected() {
        let mut a = build_mnist_net(Activation::Relu, false);
        let mut b = build_mnist_net(Activation::Relu, false);
        a.init_weights(1);
        b.init_weights(1);
        let batch = Tensor::filled(vec![1, 1, 28, 28], 0.5);
        let (logits, trace) = model_forward_eval(&a, &batch).unwrap();
        let dlogits = Tensor::zeros(logits.shape().to_vec());
        assert!(model_backward(&b, &trace, &dlogits).is_err());
    }

    #[test]
    fn tent_zero_activation_collapses_to_final_bias() {
        // Deltas at the lower bound and pre-activations far outside every
        // tent: each activation emits zero, so the logits equal the last
        // linear layer's bias, traced by hand through the zero path.
        let mut g = build_mnist_net(Activation::Tent, true);
        for layer in g.layers_mut() {
            match &mut layer.params {
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    weight.data_mut().fill(5.0);
                    bias.data_mut().fill(7.0);
                }
                LayerParams::Tent(t) => {
                    t.deltas_mut().data_mut().fill(0.05);
                }
                _ => {}
            }
        }
        g.bump_params_version();
        // last linear bias gets a recognizable pattern
        let last = g.layers_mut().iter_mut().rev().find(|l| matches!(l.spec, LayerSpec::Linear { .. })).unwrap();
        if let LayerParams::Linear { bias, .. } = &mut last.params {
            for (i, v) in bias.data_mut().iter_mut().enumerate() {
                *v = i as f32 - 4.5;
            }
        }
        let batch = Tensor::filled(vec![1, 1, 28, 28], 1.0);
        let (logits, _) = model_forward_eval(&g, &batch).unwrap();
        let want: Vec<f32> = (0..10).map(|i| i as f32 - 4.5).collect();
        assert_eq!(logits.data(), &want[..]);
    }

    #[test]
    fn dropout_train_expectation_matches_eval() {
        // dropout directly before the output layer: averaging train-mode
        // logits over many masks approaches the eval logits
        let specs = vec![
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 16, out_features: 12 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Linear { in_features: 12, out_features: 3 },
        ];
        let mut g = ModelGraph::new(specs, vec![1, 4, 4], 3).unwrap();
        g.init_weights(7);
        let mut rng = XorShiftRng::new(8);
        let data: Vec<f32> = (0..16).map(|_| rng.next_f32()).collect();
        let batch = Tensor::from_vec(vec![1, 1, 4, 4], data).unwrap();
        let (eval_logits, _) = model_forward_eval(&g, &batch).unwrap();
        let mut acc = vec![0.0f64; 3];
        let n_masks = 10_000;
        for s in 0..n_masks {
            let (l, _) = model_forward(&mut g, &batch, Mode::Train, s as u64).unwrap();
            for (a, &v) in acc.iter_mut().zip(l.data().iter()) {
                *a += v as f64;
            }
        }
        for (a, &e) in acc.iter().zip(eval_logits.data().iter()) {
            let mean = *a / n_masks as f64;
            let rel = (mean - e as f64).abs() / e.abs().max(0.05) as f64;
            assert!(rel < 0.02, "mean {mean} vs eval {e}");
        }
    }
}
