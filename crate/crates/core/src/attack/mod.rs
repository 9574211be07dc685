//! White-box adversaries: FGSM, BIM, PGD, DeepFool and the two Carlini &
//! Wagner attacks, plus the l-inf ball projection and under-attack
//! evaluation. Attacks run against the eval-mode forward pass (running
//! batch-norm statistics, dropout off) and are deterministic given
//! (weights, input, seed).

mod cw;
mod deepfool;
mod gradient;

pub use cw::{cw_l2, cw_linf};
pub use deepfool::deepfool;
pub use gradient::{bim, fgsm, pgd};

use crate::error::{Error, Result};
use crate::nn::{self, ModelGraph};
use crate::tensor::Tensor;

/// The six adversaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    DeepFool,
    CwL2,
    CwLinf,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 6] = [
        AttackMethod::Fgsm,
        AttackMethod::Bim,
        AttackMethod::Pgd,
        AttackMethod::DeepFool,
        AttackMethod::CwL2,
        AttackMethod::CwLinf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::DeepFool => "deepfool",
            AttackMethod::CwL2 => "cw_l2",
            AttackMethod::CwLinf => "cw_linf",
        }
    }

    /// Column label in the robustness report.
    pub fn column(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "FGSM",
            AttackMethod::Bim => "BIM",
            AttackMethod::Pgd => "PGD",
            AttackMethod::DeepFool => "DF",
            AttackMethod::CwL2 => "CW_l2",
            AttackMethod::CwLinf => "CW_linf",
        }
    }

    pub fn parse(s: &str) -> Result<AttackMethod> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "bim" => Ok(AttackMethod::Bim),
            "pgd" => Ok(AttackMethod::Pgd),
            "deepfool" | "df" => Ok(AttackMethod::DeepFool),
            "cw_l2" | "cwl2" => Ok(AttackMethod::CwL2),
            "cw_linf" | "cwlinf" => Ok(AttackMethod::CwLinf),
            other => Err(Error::Config(format!("unknown attack method '{other}'"))),
        }
    }

    /// Whether the method honors the l-inf budget `eps`.
    pub fn eps_bounded(&self) -> bool {
        !matches!(self, AttackMethod::DeepFool | AttackMethod::CwL2)
    }
}

/// Adversary parameters. Method-specific constants carry the documented
/// defaults and are overridable per run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// l-inf radius in pixel units (ignored by DeepFool and CW l2).
    pub eps: f32,
    /// Per-iteration step for BIM/PGD.
    pub step_size: f32,
    /// Iteration budget for BIM/PGD/DeepFool.
    pub max_iter: usize,
    /// PGD: uniform random start inside the eps ball.
    pub random_start: bool,
    pub seed: u64,
    /// DeepFool: final perturbation is scaled by (1 + overshoot).
    pub overshoot: f32,
    /// CW: required logit margin for a perturbation to count as a success.
    pub confidence: f32,
    /// CW: inner gradient-descent learning rate.
    pub inner_lr: f32,
    /// CW l2: binary-search steps over the misclassification weight c.
    pub binary_search_steps: usize,
    /// CW: initial misclassification weight c.
    pub initial_c: f32,
    /// CW: gradient-descent iterations per outer step.
    pub inner_iterations: usize,
    /// CW linf: shrink factor applied to tau after a successful outer step.
    pub tau_shrink: f32,
    /// CW linf: outer steps (tau shrinks or c doubles each).
    pub outer_steps: usize,
}

impl AttackConfig {
    pub fn new(method: AttackMethod) -> AttackConfig {
        AttackConfig {
            method,
            eps: 0.3,
            step_size: 0.1,
            max_iter: 100,
            random_start: false,
            seed: 0,
            overshoot: 0.02,
            confidence: 0.0,
            inner_lr: 0.01,
            binary_search_steps: 10,
            initial_c: 0.01,
            inner_iterations: 10,
            tau_shrink: 0.9,
            outer_steps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// One attacked batch with everything reporting needs.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<u8>,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
    pub l2: Vec<f32>,
    pub linf: Vec<f32>,
    /// Input gradient of the classification loss was exactly zero at the
    /// clean input; flat-gradient "wins" show up here instead of silently.
    pub zero_grad: Vec<bool>,
    /// The adversary found no misclassifying perturbation for this sample.
    pub failed: Vec<bool>,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of samples still classified correctly after the attack.
    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let correct = self
            .adv_pred
            .iter()
            .zip(self.labels.iter())
            .filter(|(&p, &l)| p == l as usize)
            .count();
        correct as f64 / self.labels.len() as f64
    }

    pub fn zero_grad_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.zero_grad.iter().filter(|&&z| z).count() as f64 / self.labels.len() as f64
    }

    fn merge(mut batches: Vec<AdversarialBatch>) -> Result<AdversarialBatch> {
        if batches.is_empty() {
            return Err(Error::domain("no batches to merge"));
        }
        let mut first = batches.remove(0);
        for b in batches {
            let mut shape = first.originals.shape().to_vec();
            shape[0] += b.originals.shape()[0];
            let mut odata = first.originals.into_data();
            odata.extend_from_slice(b.originals.data());
            first.originals = Tensor::from_vec(shape.clone(), odata)?;
            let mut pdata = first.perturbed.into_data();
            pdata.extend_from_slice(b.perturbed.data());
            first.perturbed = Tensor::from_vec(shape, pdata)?;
            first.labels.extend(b.labels);
            first.clean_pred.extend(b.clean_pred);
            first.adv_pred.extend(b.adv_pred);
            first.l2.extend(b.l2);
            first.linf.extend(b.linf);
            first.zero_grad.extend(b.zero_grad);
            first.failed.extend(b.failed);
        }
        Ok(first)
    }
}

/// Largest value whose measured f32 difference from `o` stays <= eps; the
/// naive `o + eps` can round upward past the ball by an ulp.
#[inline]
fn ball_hi(o: f32, eps: f32) -> f32 {
    let mut hi = o + eps;
    while hi - o > eps {
        hi = f32::next_down(hi);
    }
    hi
}

#[inline]
fn ball_lo(o: f32, eps: f32) -> f32 {
    let mut lo = o - eps;
    while o - lo > eps {
        lo = f32::next_up(lo);
    }
    lo
}

/// Clip `x_adv` into the eps box around `x_orig`, then into [0,1]. The box
/// bounds are rounding-corrected so the measured per-pixel difference never
/// exceeds eps.
pub fn project_linf(x_adv: &Tensor, x_orig: &Tensor, eps: f32) -> Result<Tensor> {
    if x_adv.shape() != x_orig.shape() {
        return Err(Error::dimension("project_linf", x_adv.shape(), x_orig.shape()));
    }
    let mut out = x_adv.clone();
    for (v, &o) in out.data_mut().iter_mut().zip(x_orig.data().iter()) {
        *v = v.clamp(ball_lo(o, eps), ball_hi(o, eps)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// sign with sign(0) = 0.
#[inline]
pub(crate) fn sign0(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cross-entropy loss and its input gradient at `x`, eval mode.
pub(crate) fn loss_input_grad(
    graph: &ModelGraph,
    x: &Tensor,
    labels: &[u8],
) -> Result<(f32, Tensor)> {
    let (logits, trace) = nn::model_forward_eval(graph, x)?;
    let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let (loss, dlogits) = nn::softmax_cross_entropy(&logits, &labels_usize)?;
    let gx = nn::model_backward_input(graph, &trace, &dlogits)?;
    Ok((loss, gx))
}

/// Per-sample flags: the loss input gradient at the clean input is exactly
/// zero in every component.
pub(crate) fn zero_grad_flags(graph: &ModelGraph, x: &Tensor, labels: &[u8]) -> Result<Vec<bool>> {
    let (_, gx) = loss_input_grad(graph, x, labels)?;
    let n = x.shape()[0];
    let row = x.len() / n.max(1);
    Ok((0..n)
        .map(|i| gx.data()[i * row..(i + 1) * row].iter().all(|&v| v == 0.0))
        .collect())
}

/// Per-sample l2 and l-inf perturbation norms.
pub(crate) fn perturbation_norms(orig: &Tensor, adv: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let n = orig.shape()[0];
    let row = orig.len() / n.max(1);
    let mut l2 = Vec::with_capacity(n);
    let mut linf = Vec::with_capacity(n);
    for i in 0..n {
        let o = &orig.data()[i * row..(i + 1) * row];
        let a = &adv.data()[i * row..(i + 1) * row];
        let mut sq = 0.0f64;
        let mut mx = 0.0f32;
        for (ov, av) in o.iter().zip(a.iter()) {
            let d = av - ov;
            sq += (d as f64) * (d as f64);
            mx = mx.max(d.abs());
        }
        l2.push(sq.sqrt() as f32);
        linf.push(mx);
    }
    (l2, linf)
}

/// Assemble the result record for a finished attack.
pub(crate) fn finish_batch(
    graph: &ModelGraph,
    originals: Tensor,
    perturbed: Tensor,
    labels: Vec<u8>,
    zero_grad: Vec<bool>,
    failed: Vec<bool>,
) -> Result<AdversarialBatch> {
    let clean_pred = nn::predict(graph, &originals)?;
    let adv_pred = nn::predict(graph, &perturbed)?;
    let (l2, linf) = perturbation_norms(&originals, &perturbed);
    Ok(AdversarialBatch {
        originals,
        perturbed,
        labels,
        clean_pred,
        adv_pred,
        l2,
        linf,
        zero_grad,
        failed,
    })
}

/// Dispatch one attack over one batch.
pub fn run_attack(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    match cfg.method {
        AttackMethod::Fgsm => fgsm(graph, batch, labels, cfg),
        AttackMethod::Bim => bim(graph, batch, labels, cfg),
        AttackMethod::Pgd => pgd(graph, batch, labels, cfg),
        AttackMethod::DeepFool => deepfool(graph, batch, labels, cfg),
        AttackMethod::CwL2 => cw_l2(graph, batch, labels, cfg),
        AttackMethod::CwLinf => cw_linf(graph, batch, labels, cfg),
    }
}

/// Run the attack over a labeled set in batches; the perturbed stream is
/// merged in input order. Returns (accuracy under attack, merged record).
pub fn evaluate_under_attack(
    graph: &ModelGraph,
    images: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<(f64, AdversarialBatch)> {
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::dimension("evaluate_under_attack", images.shape(), &[labels.len()]));
    }
    let row: usize = images.shape()[1..].iter().product();
    let mut batches = Vec::new();
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_vec(shape, images.data()[start * row..end * row].to_vec())?;
        let chunk_labels = &labels[start..end];
        let result = run_attack(graph, &chunk, chunk_labels, cfg).map_err(|e| {
            Error::Config(format!("attack {} failed on samples [{start},{end}): {e}", cfg.method.name()))
        })?;
        batches.push(result);
        start = end;
    }
    let merged = AdversarialBatch::merge(batches)?;
    Ok((merged.accuracy(), merged))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn project_interior_unchanged() {
        let x = t(&[1, 4], &[0.2, 0.5, 0.6, 0.9]);
        let p = project_linf(&x, &x, 0.3).unwrap();
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn project_box_then_range() {
        let orig = t(&[1, 1], &[0.9]);
        let adv = t(&[1, 1], &[1.4]);
        let p = project_linf(&adv, &orig, 0.3).unwrap();
        assert_eq!(p.data(), &[1.0]); // min(1.2, 1.0)
    }

    #[test]
    fn project_eps_zero_returns_clipped_original() {
        let orig = t(&[1, 2], &[0.5, 0.25]);
        let adv = t(&[1, 2], &[0.9, 0.1]);
        let p = project_linf(&adv, &orig, 0.0).unwrap();
        assert_eq!(p.data(), orig.data());
    }

    #[test]
    fn sign0_convention() {
        assert_eq!(sign0(3.5), 1.0);
        assert_eq!(sign0(-0.1), -1.0);
        assert_eq!(sign0(0.0), 0.0);
        assert_eq!(sign0(-0.0), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::new(AttackMethod::Pgd);
        assert!(cfg.validate().is_ok());
        cfg.eps = -0.1;
        assert!(cfg.validate().is_err());
        cfg.eps = 0.3;
        cfg.max_iter = 0;
        assert!(cfg.validate().is_err());
    }
}
