//! Carlini & Wagner attacks: the l2 variant with tanh change of variables
//! and binary search over the misclassification weight c, and the l-inf
//! variant with a shrinking per-pixel threshold tau.

use crate::error::Result;
use crate::nn::{self, ModelGraph};
use crate::tensor::Tensor;

use super::{finish_batch, project_linf, zero_grad_flags, AdversarialBatch, AttackConfig};

const C_UPPER_INIT: f32 = 1e10;

/// Best Z among classes other than `label`; ties to the lowest index.
fn runner_up(logits: &[f32], label: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f32::NEG_INFINITY;
    for (k, &v) in logits.iter().enumerate() {
        if k != label && v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

/// Forward the batch and per sample return (margin g, runner-up class,
/// prediction) where g = Z_label - max_{k != label} Z_k.
fn margins(
    graph: &ModelGraph,
    x: &Tensor,
    labels: &[u8],
) -> Result<(Tensor, nn::ForwardTrace, Vec<f32>, Vec<usize>, Vec<usize>)> {
    let (logits, trace) = nn::model_forward_eval(graph, x)?;
    let classes = graph.class_count();
    let n = labels.len();
    let mut g = Vec::with_capacity(n);
    let mut kstar = Vec::with_capacity(n);
    let preds = crate::tensor::argmax_rows(&logits)?;
    for i in 0..n {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let label = labels[i] as usize;
        let k = runner_up(row, label);
        g.push(row[label] - row[k]);
        kstar.push(k);
    }
    Ok((logits, trace, g, kstar, preds))
}

/// Gradient of the hinge margin max(g, -confidence) with respect to the
/// logits: +1 at the true class, -1 at the runner-up, when g > -confidence.
fn margin_dlogits(
    n: usize,
    classes: usize,
    labels: &[u8],
    g: &[f32],
    kstar: &[usize],
    confidence: f32,
) -> Tensor {
    let mut dlogits = Tensor::zeros(vec![n, classes]);
    for i in 0..n {
        if g[i] > -confidence {
            dlogits.data_mut()[i * classes + labels[i] as usize] = 1.0;
            dlogits.data_mut()[i * classes + kstar[i]] = -1.0;
        }
    }
    dlogits
}

/// Untargeted CW l2. Change of variables x' = (tanh(w)+1)/2 keeps iterates
/// inside the box; an outer binary search per sample tunes c; the result is
/// the smallest-l2 success seen anywhere, or the original input flagged as
/// failed.
pub fn cw_l2(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let n = batch.shape()[0];
    let row: usize = batch.shape()[1..].iter().product();
    let classes = graph.class_count();
    let zero_grad = zero_grad_flags(graph, batch, labels)?;

    // atanh(2x-1), with the argument pulled inside the open interval
    let atanh_x: Vec<f32> = batch
        .data()
        .iter()
        .map(|&x| {
            let t = (2.0 * x - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
            0.5 * ((1.0 + t) / (1.0 - t)).ln()
        })
        .collect();

    let mut c = vec![cfg.initial_c; n];
    let mut c_lower = vec![0.0f32; n];
    let mut c_upper = vec![C_UPPER_INIT; n];
    let mut best_adv = batch.clone();
    let mut best_l2 = vec![f32::INFINITY; n];
    let mut ever_succeeded = vec![false; n];

    for _bs in 0..cfg.binary_search_steps {
        let mut w = atanh_x.clone();
        let mut success_this_step = vec![false; n];
        for _it in 0..cfg.inner_iterations {
            // x' = (tanh(w)+1)/2 and its derivative factor
            let mut x_adv = Tensor::zeros(batch.shape().to_vec());
            let mut dxdw = vec![0.0f32; w.len()];
            for (j, &wv) in w.iter().enumerate() {
                let t = wv.tanh();
                x_adv.data_mut()[j] = (t + 1.0) * 0.5;
                dxdw[j] = (1.0 - t * t) * 0.5;
            }
            let (_, trace, g, kstar, preds) = margins(graph, &x_adv, labels)?;
            // record successes at this iterate
            for i in 0..n {
                let success = preds[i] != labels[i] as usize && g[i] <= -cfg.confidence;
                if success {
                    success_this_step[i] = true;
                    ever_succeeded[i] = true;
                    let mut sq = 0.0f64;
                    for j in 0..row {
                        let d = x_adv.data()[i * row + j] - batch.data()[i * row + j];
                        sq += (d as f64) * (d as f64);
                    }
                    let l2 = sq.sqrt() as f32;
                    if l2 < best_l2[i] {
                        best_l2[i] = l2;
                        best_adv.data_mut()[i * row..(i + 1) * row]
                            .copy_from_slice(&x_adv.data()[i * row..(i + 1) * row]);
                    }
                }
            }
            // objective gradient: 2(x'-x) + c * d g / d x'
            let dlogits = margin_dlogits(n, classes, labels, &g, &kstar, cfg.confidence);
            let dg_dx = nn::model_backward_input(graph, &trace, &dlogits)?;
            for i in 0..n {
                for j in 0..row {
                    let idx = i * row + j;
                    let dist_grad = 2.0 * (x_adv.data()[idx] - batch.data()[idx]);
                    let total = dist_grad + c[i] * dg_dx.data()[idx];
                    w[idx] -= cfg.inner_lr * total * dxdw[idx];
                }
            }
        }
        // binary search update on c, per sample
        for i in 0..n {
            if success_this_step[i] {
                c_upper[i] = c_upper[i].min(c[i]);
                c[i] = (c_lower[i] + c_upper[i]) * 0.5;
            } else {
                c_lower[i] = c_lower[i].max(c[i]);
                if c_upper[i] < C_UPPER_INIT {
                    c[i] = (c_lower[i] + c_upper[i]) * 0.5;
                } else {
                    c[i] *= 10.0;
                }
            }
        }
    }

    let failed: Vec<bool> = ever_succeeded.iter().map(|&s| !s).collect();
    finish_batch(graph, batch.clone(), best_adv, labels.to_vec(), zero_grad, failed)
}

/// Untargeted CW l-inf: minimize c*g(x') + sum_i max(0, |x'_i - x_i| - tau),
/// shrinking tau while the attack keeps succeeding and doubling c after an
/// unsuccessful outer step. The final pick is projected onto the eps ball.
pub fn cw_linf(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let n = batch.shape()[0];
    let row: usize = batch.shape()[1..].iter().product();
    let classes = graph.class_count();
    let zero_grad = zero_grad_flags(graph, batch, labels)?;

    let mut x_adv = batch.clone();
    let mut tau = vec![cfg.eps; n];
    let mut c = vec![cfg.initial_c; n];
    let mut best_adv = batch.clone();
    let mut best_linf = vec![f32::INFINITY; n];
    let mut ever_succeeded = vec![false; n];

    for _outer in 0..cfg.outer_steps {
        let mut success_this_step = vec![false; n];
        for _it in 0..cfg.inner_iterations {
            let (_, trace, g, kstar, preds) = margins(graph, &x_adv, labels)?;
            for i in 0..n {
                let success = preds[i] != labels[i] as usize && g[i] <= -cfg.confidence;
                if success {
                    success_this_step[i] = true;
                    ever_succeeded[i] = true;
                    let mut mx = 0.0f32;
                    for j in 0..row {
                        mx = mx.max((x_adv.data()[i * row + j] - batch.data()[i * row + j]).abs());
                    }
                    if mx < best_linf[i] {
                        best_linf[i] = mx;
                        best_adv.data_mut()[i * row..(i + 1) * row]
                            .copy_from_slice(&x_adv.data()[i * row..(i + 1) * row]);
                    }
                }
            }
            let dlogits = margin_dlogits(n, classes, labels, &g, &kstar, cfg.confidence);
            let dg_dx = nn::model_backward_input(graph, &trace, &dlogits)?;
            for i in 0..n {
                for j in 0..row {
                    let idx = i * row + j;
                    let delta = x_adv.data()[idx] - batch.data()[idx];
                    let hinge = if delta.abs() > tau[i] { super::sign0(delta) } else { 0.0 };
                    let step = cfg.inner_lr * (c[i] * dg_dx.data()[idx] + hinge);
                    x_adv.data_mut()[idx] = (x_adv.data()[idx] - step).clamp(0.0, 1.0);
                }
            }
        }
        for i in 0..n {
            if success_this_step[i] {
                tau[i] *= cfg.tau_shrink;
            } else {
                c[i] *= 2.0;
            }
        }
    }

    let failed: Vec<bool> = ever_succeeded.iter().map(|&s| !s).collect();
    let projected = project_linf(&best_adv, batch, cfg.eps)?;
    finish_batch(graph, batch.clone(), projected, labels.to_vec(), zero_grad, failed)
}
