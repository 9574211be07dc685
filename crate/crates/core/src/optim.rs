//! Optimizers and the training loops: plain epochs and the adversarial
//! variant that replaces every mini-batch with its PGD perturbation before
//! the gradient step.

use std::time::Instant;

use crate::attack::{pgd, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, flatten_grads, model_forward, LayerGrads, LayerParams, Mode, ModelGraph};
use crate::rng::XorShiftRng;
use crate::tensor::{argmax_rows, Tensor};
use crate::tent::delta_decay_grad;

/// Adam hyperparameters; the canonical recipe fixes the learning rate.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with one moment pair per trainable tensor.
pub struct Adam {
    hyper: AdamHyper,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(graph: &ModelGraph, hyper: AdamHyper) -> Adam {
        let shapes: Vec<Vec<usize>> = graph
            .trainable_params()
            .iter()
            .map(|(t, _)| t.shape().to_vec())
            .collect();
        Adam {
            hyper,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable tensor; tent deltas are clamped to
    /// their bounds immediately after.
    pub fn step(&mut self, graph: &mut ModelGraph, grads: &[LayerGrads]) -> Result<()> {
        let flat = flatten_grads(grads);
        let mut params = graph.trainable_params_mut();
        if flat.len() != params.len() {
            return Err(Error::Trace(format!(
                "gradient count {} vs parameter count {}",
                flat.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (slot, (param, _)) in params.iter_mut().enumerate() {
            let g = flat[slot];
            g.check_finite("adam gradient")?;
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = param.data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= h.lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        drop(params);
        clamp_tents(graph);
        graph.bump_params_version();
        Ok(())
    }
}

/// SGD with momentum: v = momentum*v + g; theta -= lr*v. Kept for parity
/// with the residual-network recipe; the canonical runs use Adam.
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(graph: &ModelGraph, lr: f32, momentum: f32) -> SgdMomentum {
        let velocity = graph
            .trainable_params()
            .iter()
            .map(|(t, _)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        SgdMomentum { lr, momentum, velocity }
    }

    pub fn step(&mut self, graph: &mut ModelGraph, grads: &[LayerGrads]) -> Result<()> {
        let flat = flatten_grads(grads);
        let mut params = graph.trainable_params_mut();
        if flat.len() != params.len() {
            return Err(Error::Trace(format!(
                "gradient count {} vs parameter count {}",
                flat.len(),
                params.len()
            )));
        }
        for (slot, (param, _)) in params.iter_mut().enumerate() {
            let g = flat[slot];
            g.check_finite("sgd gradient")?;
            let v = self.velocity[slot].data_mut();
            let p = param.data_mut();
            for j in 0..p.len() {
                v[j] = self.momentum * v[j] + g.data()[j];
                p[j] -= self.lr * v[j];
            }
        }
        drop(params);
        clamp_tents(graph);
        graph.bump_params_version();
        Ok(())
    }
}

fn clamp_tents(graph: &mut ModelGraph) {
    for layer in graph.layers_mut() {
        if let LayerParams::Tent(t) = &mut layer.params {
            t.clamp_deltas();
        }
    }
}

fn tents_in_bounds(graph: &ModelGraph) -> bool {
    graph.layers().iter().all(|l| match &l.params {
        LayerParams::Tent(t) => t.deltas_in_bounds(),
        _ => true,
    })
}

/// Inner-PGD parameters for adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PgdTrainConfig {
    pub iterations: usize,
    pub eps: f32,
    pub step_size: f32,
    pub random_start: bool,
}

impl Default for PgdTrainConfig {
    fn default() -> Self {
        PgdTrainConfig { iterations: 40, eps: 0.3, step_size: 0.1, random_start: false }
    }
}

/// Training recipe. The canonical protocol is 40 epochs, batch 100,
/// Adam at 0.001; `train_subset` optionally restricts each epoch to the
/// first n samples of the (already shuffled) training split for scaled runs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub delta_weight_decay: f32,
    pub adversarial: Option<PgdTrainConfig>,
    pub seed: u64,
    pub learning_rate: f32,
    pub train_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 100,
            delta_weight_decay: 0.0,
            adversarial: None,
            seed: 0,
            learning_rate: 0.001,
            train_subset: None,
        }
    }
}

/// Per-epoch record. Wall seconds are reported separately from the
/// deterministic metrics so primary outputs stay byte-stable.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_acc: f32,
    pub wall_seconds: f64,
}

/// Add the decay pull wd*delta to every tent delta gradient in place.
fn apply_delta_decay(graph: &ModelGraph, grads: &mut [LayerGrads], wd: f32) {
    if wd == 0.0 {
        return;
    }
    for (layer, grad) in graph.layers().iter().zip(grads.iter_mut()) {
        if let (LayerParams::Tent(t), LayerGrads::Tent { ddelta }) = (&layer.params, grad) {
            let decay = delta_decay_grad(t, wd);
            for (g, d) in ddelta.data_mut().iter_mut().zip(decay.data().iter()) {
                *g += d;
            }
        }
    }
}

/// Seed for the dropout stream of one train step.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ ((step as u64) << 8) ^ 0x7EA1
}

fn epoch_order(dataset_len: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset_len).collect();
    XorShiftRng::derive(cfg.seed, 0xE70C ^ epoch as u64).shuffle(&mut order);
    if let Some(n) = cfg.train_subset {
        order.truncate(n);
    }
    order
}

/// One pass over the shuffled training data. Returns (mean loss, accuracy).
pub fn train_epoch(
    graph: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Adam,
    epoch: usize,
) -> Result<(f32, f32)> {
    run_epoch(graph, data, cfg, opt, epoch, false)
}

/// Madry-style epoch: every mini-batch is replaced by its PGD perturbation
/// (crafted against the current weights in eval mode) before the train-mode
/// gradient step. Clean inputs never contribute to the step.
pub fn adversarial_train_epoch(
    graph: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Adam,
    epoch: usize,
) -> Result<(f32, f32)> {
    run_epoch(graph, data, cfg, opt, epoch, true)
}

fn run_epoch(
    graph: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Adam,
    epoch: usize,
    adversarial: bool,
) -> Result<(f32, f32)> {
    let order = epoch_order(data.len(), cfg, epoch);
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut step_idx = 0usize;
    let mut start = 0usize;
    while start < order.len() {
        let end = (start + cfg.batch_size).min(order.len());
        let (mut batch, labels) = data.gather(&order[start..end]);
        if adversarial {
            let adv_cfg = cfg.adversarial.unwrap_or_default();
            let mut attack = AttackConfig::new(AttackMethod::Pgd);
            attack.eps = adv_cfg.eps;
            attack.step_size = adv_cfg.step_size;
            attack.max_iter = adv_cfg.iterations;
            attack.random_start = adv_cfg.random_start;
            attack.seed = step_seed(cfg.seed, epoch, step_idx) ^ 0xADF;
            let result = pgd(graph, &batch, &labels, &attack)
                .map_err(|e| Error::Config(format!("inner PGD failed at batch {step_idx}: {e}")))?;
            batch = result.perturbed;
        }
        let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let (logits, trace) =
            model_forward(graph, &batch, Mode::Train, step_seed(cfg.seed, epoch, step_idx))
                .map_err(|e| Error::Config(format!("forward failed at batch {step_idx}: {e}")))?;
        let (loss, dlogits) = nn::softmax_cross_entropy(&logits, &labels_usize)?;
        let (mut grads, _) = nn::model_backward(graph, &trace, &dlogits)?;
        apply_delta_decay(graph, &mut grads, cfg.delta_weight_decay);
        opt.step(graph, &grads)?;
        debug_assert!(tents_in_bounds(graph));

        let preds = argmax_rows(&logits)?;
        correct += preds.iter().zip(labels_usize.iter()).filter(|(p, l)| p == l).count();
        loss_sum += loss as f64 * labels.len() as f64;
        seen += labels.len();
        start = end;
        step_idx += 1;
    }
    Ok(((loss_sum / seen.max(1) as f64) as f32, correct as f32 / seen.max(1) as f32))
}

/// Eval-mode accuracy over a dataset in batches.
pub fn evaluate_accuracy(graph: &ModelGraph, data: &Dataset, batch_size: usize) -> Result<f32> {
    let mut correct = 0usize;
    for (batch, labels) in crate::data::batch_iterator(data, batch_size, false, 0) {
        let preds = nn::predict(graph, &batch)?;
        correct += preds
            .iter()
            .zip(labels.iter())
            .filter(|(&p, &l)| p == l as usize)
            .count();
    }
    Ok(correct as f32 / data.len().max(1) as f32)
}

/// Index of the best validation accuracy; ties go to the earliest epoch.
pub fn pick_best_model(history: &[f32]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::domain("pick_best_model on empty history"));
    }
    let mut best = 0usize;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v > history[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Outcome of a full training run; the graph is left holding the weights of
/// the best validation epoch.
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Full training driver: epochs, per-epoch validation, best-epoch snapshot
/// restore.
pub fn train_model(
    graph: &mut ModelGraph,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut opt = Adam::new(graph, AdamHyper { lr: cfg.learning_rate, ..AdamHyper::default() });
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut val_history = Vec::with_capacity(cfg.epochs);
    let mut best_snapshot: Option<(usize, Vec<Tensor>)> = None;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let (train_loss, train_acc) = if cfg.adversarial.is_some() {
            adversarial_train_epoch(graph, train, cfg, &mut opt, epoch)?
        } else {
            train_epoch(graph, train, cfg, &mut opt, epoch)?
        };
        let val_acc = evaluate_accuracy(graph, val, cfg.batch_size)?;
        let wall = t0.elapsed().as_secs_f64();
        val_history.push(val_acc);
        let best = pick_best_model(&val_history)?;
        if best == epoch {
            let snapshot = graph.all_state_tensors().into_iter().cloned().collect();
            best_snapshot = Some((epoch, snapshot));
        }
        metrics.push(EpochMetrics { epoch, train_loss, train_acc, val_acc, wall_seconds: wall });
    }
    let (best_epoch, snapshot) = best_snapshot.ok_or_else(|| Error::domain("no epochs trained"))?;
    for (dst, src) in graph.all_state_tensors_mut().into_iter().zip(snapshot.iter()) {
        *dst = src.clone();
    }
    graph.bump_params_version();
    Ok(TrainOutcome { metrics, best_epoch })
}
