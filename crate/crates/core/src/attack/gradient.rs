//! Loss-gradient sign attacks: single-step FGSM and the iterative BIM/PGD
//! family with per-step projection onto the eps ball.

use crate::error::Result;
use crate::nn::ModelGraph;
use crate::rng::XorShiftRng;
use crate::tensor::Tensor;

use super::{
    finish_batch, loss_input_grad, project_linf, sign0, zero_grad_flags, AdversarialBatch,
    AttackConfig,
};

/// x' = clip(x + eps * sign(grad_x L), [0,1]).
pub fn fgsm(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let (_, gx) = loss_input_grad(graph, batch, labels)?;
    let n = batch.shape()[0];
    let row = batch.len() / n.max(1);
    let zero_grad: Vec<bool> = (0..n)
        .map(|i| gx.data()[i * row..(i + 1) * row].iter().all(|&v| v == 0.0))
        .collect();
    let mut adv = batch.clone();
    for (v, &g) in adv.data_mut().iter_mut().zip(gx.data().iter()) {
        *v += cfg.eps * sign0(g);
    }
    let adv = project_linf(&adv, batch, cfg.eps)?;
    let failed = vec![false; n];
    finish_batch(graph, batch.clone(), adv, labels.to_vec(), zero_grad, failed)
}

/// Shared BIM/PGD iteration: step along the gradient sign, project back to
/// the eps ball and the [0,1] box each iteration.
fn iterative_linf(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
    random_start: bool,
) -> Result<AdversarialBatch> {
    let zero_grad = zero_grad_flags(graph, batch, labels)?;
    let mut adv = if random_start {
        let mut rng = XorShiftRng::derive(cfg.seed, 0x96D);
        let mut start = batch.clone();
        for v in start.data_mut() {
            *v += rng.uniform(-cfg.eps, cfg.eps);
        }
        project_linf(&start, batch, cfg.eps)?
    } else {
        batch.clone()
    };
    for _ in 0..cfg.max_iter {
        let (_, gx) = loss_input_grad(graph, &adv, labels)?;
        for (v, &g) in adv.data_mut().iter_mut().zip(gx.data().iter()) {
            *v += cfg.step_size * sign0(g);
        }
        adv = project_linf(&adv, batch, cfg.eps)?;
    }
    let failed = vec![false; batch.shape()[0]];
    finish_batch(graph, batch.clone(), adv, labels.to_vec(), zero_grad, failed)
}

/// Iterated FGSM with projection, starting at the clean input.
pub fn bim(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    iterative_linf(graph, batch, labels, cfg, false)
}

/// Same iteration as BIM with an optional seeded uniform start inside the
/// eps ball; with `random_start` off this is bit-identical to [`bim`].
pub fn pgd(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    iterative_linf(graph, batch, labels, cfg, cfg.random_start)
}
