//! Batch normalization over axis 1 (channels for NCHW, features for NF),
//! with running statistics for eval mode.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Learnable scale/shift plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    pub fn new(features: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: Tensor::filled(vec![features], 1.0),
            beta: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::filled(vec![features], 1.0),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

/// Geometry of a normalized tensor: (outer=N, channels, inner per channel).
fn geometry(x: &Tensor, features: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != features {
        return Err(Error::dimension("batchnorm features", s, &[features]));
    }
    let inner: usize = s[2..].iter().product();
    Ok((s[0], features, inner))
}

/// Values cached by the forward pass for backprop.
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Per-channel batch statistics computed in train mode; applied to the
/// running estimates after the forward pass completes.
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Train-mode forward with batch statistics (biased variance). Returns the
/// batch stats so the caller can fold them into the running estimates with
/// momentum [`BN_MOMENTUM`]. A train batch with a single value per channel
/// has zero variance by construction and is rejected.
pub fn batchnorm_forward_train(
    x: &Tensor,
    p: &BatchNormParams,
) -> Result<(Tensor, BnCache, BnBatchStats)> {
    let (n, c, inner) = geometry(x, p.features())?;
    let m = n * inner;
    if m <= 1 {
        return Err(Error::DegenerateBatch(format!(
            "batchnorm train mode with {m} value(s) per channel"
        )));
    }
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f32;
        for s in 0..n {
            let base = (s * c + ch) * inner;
            for &v in &x.data()[base..base + inner] {
                acc += v;
            }
        }
        mean[ch] = acc / m as f32;
        let mut sq = 0.0f32;
        for s in 0..n {
            let base = (s * c + ch) * inner;
            for &v in &x.data()[base..base + inner] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / m as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (y, xhat) = normalize(x, n, c, inner, &mean, &inv_std, p);
    Ok((y, BnCache { xhat, inv_std }, BnBatchStats { mean, var }))
}

/// Eval-mode forward with running statistics; no state changes.
pub fn batchnorm_forward_eval(x: &Tensor, p: &BatchNormParams) -> Result<(Tensor, BnCache)> {
    let (n, c, inner) = geometry(x, p.features())?;
    let inv_std: Vec<f32> = p
        .running_var
        .data()
        .iter()
        .map(|&v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let (y, xhat) = normalize(x, n, c, inner, p.running_mean.data(), &inv_std, p);
    Ok((y, BnCache { xhat, inv_std }))
}

fn normalize(
    x: &Tensor,
    n: usize,
    c: usize,
    inner: usize,
    mean: &[f32],
    inv_std: &[f32],
    p: &BatchNormParams,
) -> (Tensor, Tensor) {
    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (p.gamma.data()[ch], p.beta.data()[ch]);
            let xs = &x.data()[base..base + inner];
            let xh = &mut xhat.data_mut()[base..base + inner];
            let ys = &mut y.data_mut()[base..base + inner];
            for i in 0..inner {
                let h = (xs[i] - mu) * is;
                xh[i] = h;
                ys[i] = g * h + b;
            }
        }
    }
    (y, xhat)
}

/// Fold batch statistics into the running estimates.
pub fn update_running_stats(p: &mut BatchNormParams, stats: &BnBatchStats) {
    for (r, &b) in p.running_mean.data_mut().iter_mut().zip(stats.mean.iter()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
    for (r, &b) in p.running_var.data_mut().iter_mut().zip(stats.var.iter()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// Backward pass. `train` selects the full batch-statistics gradient; eval
/// mode treats the normalization constants as fixed.
pub fn batchnorm_backward(
    dy: &Tensor,
    cache: &BnCache,
    p: &BatchNormParams,
    train: bool,
    want_param_grads: bool,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    let (n, c, inner) = geometry(dy, p.features())?;
    let m = (n * inner) as f32;
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);

    for ch in 0..c {
        let g = p.gamma.data()[ch];
        let is = cache.inv_std[ch];
        // per-channel sums in fixed sample order
        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for s in 0..n {
            let base = (s * c + ch) * inner;
            let dys = &dy.data()[base..base + inner];
            let xhs = &cache.xhat.data()[base..base + inner];
            for i in 0..inner {
                sum_dy += dys[i];
                sum_dy_xhat += dys[i] * xhs[i];
            }
        }
        if want_param_grads {
            dbeta.data_mut()[ch] = sum_dy;
            dgamma.data_mut()[ch] = sum_dy_xhat;
        }
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for s in 0..n {
            let base = (s * c + ch) * inner;
            let dys = &dy.data()[base..base + inner];
            let xhs = &cache.xhat.data()[base..base + inner];
            let dxs = &mut dx.data_mut()[base..base + inner];
            if train {
                for i in 0..inner {
                    dxs[i] = g * is * (dys[i] - mean_dy - xhs[i] * mean_dy_xhat);
                }
            } else {
                for i in 0..inner {
                    dxs[i] = g * is * dys[i];
                }
            }
        }
    }
    let grads = want_param_grads.then_some((dgamma, dbeta));
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn normalizes_by_batch_stats() {
        // one channel, batch values 1 and 5: mean 3, biased var 4
        let x = t(&[2, 1], &[1.0, 5.0]);
        let p = BatchNormParams::new(1);
        let (y, _, stats) = batchnorm_forward_train(&x, &p).unwrap();
        assert!((stats.mean[0] - 3.0).abs() < 1e-6);
        assert!((stats.var[0] - 4.0).abs() < 1e-6);
        let want = 2.0 / (4.0f32 + BN_EPS).sqrt();
        assert!((y.data()[0] + want).abs() < 1e-6);
        assert!((y.data()[1] - want).abs() < 1e-6);
    }

    #[test]
    fn gamma_zero_gives_beta() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut p = BatchNormParams::new(2);
        p.gamma.data_mut().fill(0.0);
        p.beta.data_mut().copy_from_slice(&[0.5, -0.5]);
        let (y, _, _) = batchnorm_forward_train(&x, &p).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn eval_mode_is_pure() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut p = BatchNormParams::new(2);
        p.running_mean.data_mut().copy_from_slice(&[1.0, 2.0]);
        p.running_var.data_mut().copy_from_slice(&[2.0, 0.5]);
        let before = p.clone();
        let (y1, _) = batchnorm_forward_eval(&x, &p).unwrap();
        let (y2, _) = batchnorm_forward_eval(&x, &p).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(p, before);
    }

    #[test]
    fn degenerate_batch_is_error() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let p = BatchNormParams::new(3);
        assert!(matches!(
            batchnorm_forward_train(&x, &p),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn running_stats_momentum() {
        let mut p = BatchNormParams::new(1);
        update_running_stats(
            &mut p,
            &BnBatchStats {
                mean: vec![10.0],
                var: vec![5.0],
            },
        );
        assert!((p.running_mean.data()[0] - 1.0).abs() < 1e-6);
        assert!((p.running_var.data()[0] - (0.9 + 0.5)).abs() < 1e-6);
    }
}
