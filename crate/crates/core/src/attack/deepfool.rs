//! DeepFool: iterative linearization toward the nearest class boundary of
//! the model's own prediction, untargeted.

use crate::error::Result;
use crate::nn::{self, ModelGraph};
use crate::tensor::{argmax_rows, Tensor};

use super::{finish_batch, zero_grad_flags, AdversarialBatch, AttackConfig};

pub fn deepfool(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let n = batch.shape()[0];
    let row: usize = batch.shape()[1..].iter().product();
    let classes = graph.class_count();
    let zero_grad = zero_grad_flags(graph, batch, labels)?;

    let clean_pred = nn::predict(graph, batch)?;
    // Samples the model already misclassifies need no perturbation.
    let mut active: Vec<usize> = (0..n).filter(|&i| clean_pred[i] == labels[i] as usize).collect();
    let mut failed = vec![false; n];
    for i in 0..n {
        if clean_pred[i] != labels[i] as usize {
            failed[i] = false; // already adversarial at zero perturbation
        }
    }

    let mut current = batch.clone();
    let mut flipped = vec![false; n];

    for _ in 0..cfg.max_iter {
        if active.is_empty() {
            break;
        }
        // forward the active sub-batch once
        let mut sub_shape = batch.shape().to_vec();
        sub_shape[0] = active.len();
        let mut sub = Vec::with_capacity(active.len() * row);
        for &i in &active {
            sub.extend_from_slice(&current.data()[i * row..(i + 1) * row]);
        }
        let sub = Tensor::from_vec(sub_shape, sub)?;
        let (logits, trace) = nn::model_forward_eval(graph, &sub)?;
        let preds = argmax_rows(&logits)?;

        // one batched input-gradient pass per class
        let mut class_grads: Vec<Tensor> = Vec::with_capacity(classes);
        for k in 0..classes {
            let mut dlogits = Tensor::zeros(vec![active.len(), classes]);
            for a in 0..active.len() {
                dlogits.data_mut()[a * classes + k] = 1.0;
            }
            class_grads.push(nn::model_backward_input(graph, &trace, &dlogits)?);
        }

        let mut still_active = Vec::with_capacity(active.len());
        for (a, &i) in active.iter().enumerate() {
            let ref_pred = clean_pred[i];
            if preds[a] != ref_pred {
                flipped[i] = true;
                continue;
            }
            let f = &logits.data()[a * classes..(a + 1) * classes];
            let g_ref = &class_grads[ref_pred].data()[a * row..(a + 1) * row];
            // nearest linearized boundary: argmin |f_k - f_ref| / ||g_k - g_ref||
            let mut best: Option<(usize, f32, f32, f32)> = None; // (k, ratio, |fdiff|, ||w||^2)
            for (k, grads_k) in class_grads.iter().enumerate() {
                if k == ref_pred {
                    continue;
                }
                let g_k = &grads_k.data()[a * row..(a + 1) * row];
                let mut wnorm_sq = 0.0f32;
                for (gk, gr) in g_k.iter().zip(g_ref.iter()) {
                    let w = gk - gr;
                    wnorm_sq += w * w;
                }
                if wnorm_sq == 0.0 {
                    continue;
                }
                let fdiff = (f[k] - f[ref_pred]).abs();
                let ratio = fdiff / wnorm_sq.sqrt();
                if best.map_or(true, |(_, br, _, _)| ratio < br) {
                    best = Some((k, ratio, fdiff, wnorm_sq));
                }
            }
            match best {
                Some((k, _, fdiff, wnorm_sq)) => {
                    let g_k = &class_grads[k].data()[a * row..(a + 1) * row];
                    let scale = fdiff / wnorm_sq;
                    let cur = &mut current.data_mut()[i * row..(i + 1) * row];
                    for ((c, gk), gr) in cur.iter_mut().zip(g_k.iter()).zip(g_ref.iter()) {
                        *c += scale * (gk - gr);
                    }
                    still_active.push(i);
                }
                None => {
                    // every class gradient difference vanished: linearization
                    // is stuck, record the stagnation and stop this sample
                    failed[i] = true;
                }
            }
        }
        active = still_active;
    }

    for &i in &active {
        if !flipped[i] {
            failed[i] = true; // ran out of iterations without a flip
        }
    }

    // final perturbation scaled by (1 + overshoot), clipped to the box
    let mut adv = batch.clone();
    for (v, (&c, &o)) in adv
        .data_mut()
        .iter_mut()
        .zip(current.data().iter().zip(batch.data().iter()))
    {
        *v = (o + (1.0 + cfg.overshoot) * (c - o)).clamp(0.0, 1.0);
    }
    finish_batch(graph, batch.clone(), adv, labels.to_vec(), zero_grad, failed)
}
