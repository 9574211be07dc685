//! Numeric open-space-risk analysis: truncated risk integrals contrasting a
//! monotonic activation with the compactly supported tent, and the
//! pre-activation distribution comparison between clean and attacked inputs.
//!
//! The 1-D integrals treat each activation as a weak recognition function:
//! the known-space edge is `a = v + r` (v: largest response input seen in
//! training, r: the ball radius), and the truncated numerator
//! `int_a^z act(x) dx` either diverges with z or stops growing.

use crate::error::{Error, Result};
use crate::nn::{model_forward_eval, ModelGraph};
use crate::tensor::Tensor;

/// Activation under risk analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    Tent { delta: f64 },
}

impl ActivationKind {
    /// Positive part of the activation response, the recognition function.
    pub fn response(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tent { delta } => (delta - x.abs()).max(0.0),
        }
    }
}

/// Truncated risk numerator `int_a^z act(x) dx` in closed form (64-bit).
///
/// ReLU: (z^2 - a^2) / 2. Tent: zero once `a >= delta`, otherwise the
/// triangle tail `(delta-a)^2/2` capped at z.
pub fn truncated_risk(kind: ActivationKind, a: f64, z: f64) -> Result<f64> {
    if a < 0.0 {
        return Err(Error::domain(format!("truncated_risk needs a >= 0, got {a}")));
    }
    if z < a {
        return Err(Error::domain(format!("truncated_risk needs z >= a, got z={z} a={a}")));
    }
    Ok(match kind {
        ActivationKind::Relu => (z * z - a * a) / 2.0,
        ActivationKind::Tent { delta } => {
            if a >= delta {
                0.0
            } else {
                let tail = (delta - a) * (delta - a) / 2.0;
                let beyond = (delta - z).max(0.0);
                tail - beyond * beyond / 2.0
            }
        }
    })
}

/// Adaptive Simpson quadrature; the independent 64-bit check for the closed
/// forms above.
pub fn adaptive_quadrature<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
    }
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            left + right + diff / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    if lo >= hi {
        return 0.0;
    }
    recurse(f, lo, hi, simpson(f, lo, hi), tol, 48)
}

/// One truncated-risk curve over increasing z sample points.
#[derive(Debug, Clone)]
pub struct RiskCurve {
    pub kind: ActivationKind,
    /// Known-space edge a = v + r.
    pub a: f64,
    pub z_points: Vec<f64>,
    pub values: Vec<f64>,
}

impl RiskCurve {
    pub fn compute(kind: ActivationKind, a: f64, z_points: &[f64]) -> Result<RiskCurve> {
        let values = z_points
            .iter()
            .map(|&z| truncated_risk(kind, a, z))
            .collect::<Result<Vec<f64>>>()?;
        Ok(RiskCurve { kind, a, z_points: z_points.to_vec(), values })
    }
}

/// Divergence verdict plus the bookkeeping fields reported alongside it.
#[derive(Debug, Clone)]
pub struct RiskReport {
    pub relu: RiskCurve,
    pub tent: RiskCurve,
    pub relu_unbounded: bool,
    pub tent_bounded: bool,
    /// Total tent mass above the support: always <= delta^2.
    pub tent_total: f64,
    /// Quadrature of f(x;delta)/delta^2 over [-delta, delta]; unit by design.
    pub normalized_tent_area: f64,
    /// Denominators int over the bounding interval [-a, a] for each curve;
    /// the verdict uses the numerator only, which dominates.
    pub relu_denominator: f64,
    pub tent_denominator: f64,
    /// Weight for the empirical term of the open set risk; illustrative only.
    pub lambda_r: f64,
    /// Empirical risk placeholder; populated by callers that measured one.
    pub empirical_risk: Option<f64>,
}

/// Verdict text for a report.
pub fn verdict_line(r: &RiskReport) -> String {
    format!(
        "monotonic: {}; tent: {}",
        if r.relu_unbounded { "unbounded" } else { "bounded" },
        if r.tent_bounded { "bounded" } else { "unbounded" }
    )
}

/// Compute both curves over the grid and test the growth direction: the
/// monotonic curve must keep a positive, non-decreasing slope while the tent
/// curve is flat past z = delta.
pub fn risk_divergence_report(a: f64, z_grid: &[f64], delta: f64) -> Result<RiskReport> {
    if z_grid.len() < 2 {
        return Err(Error::domain("risk grid needs at least two points"));
    }
    for w in z_grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::domain("risk grid must be strictly increasing"));
        }
    }
    let relu = RiskCurve::compute(ActivationKind::Relu, a, z_grid)?;
    let tent_kind = ActivationKind::Tent { delta };
    let tent = RiskCurve::compute(tent_kind, a, z_grid)?;

    let first_slope = (relu.values[1] - relu.values[0]) / (z_grid[1] - z_grid[0]);
    let n = z_grid.len();
    let last_slope = (relu.values[n - 1] - relu.values[n - 2]) / (z_grid[n - 1] - z_grid[n - 2]);
    let relu_unbounded = first_slope > 0.0 && last_slope >= first_slope;

    // flat beyond the support edge
    let tent_bounded = tent
        .z_points
        .iter()
        .zip(tent.values.iter())
        .filter(|(&z, _)| z >= delta)
        .all(|(_, &v)| (v - truncated_risk(tent_kind, a, delta.max(a)).unwrap()).abs() == 0.0);

    let tent_total = truncated_risk(tent_kind, 0.0, delta)? * 2.0;
    let normalized_tent_area = adaptive_quadrature(
        &|x| tent_kind.response(x) / (delta * delta),
        -delta,
        delta,
        1e-10,
    );
    let relu_denominator = adaptive_quadrature(&|x| ActivationKind::Relu.response(x), -a, a, 1e-10);
    let tent_denominator = adaptive_quadrature(&|x| tent_kind.response(x), -a, a, 1e-10);

    Ok(RiskReport {
        relu,
        tent,
        relu_unbounded,
        tent_bounded,
        tent_total,
        normalized_tent_area,
        relu_denominator,
        tent_denominator,
        lambda_r: 1.0,
        empirical_risk: None,
    })
}

/// Pre-activation histogram for one activation layer: clean and adversarial
/// populations binned over their union range.
#[derive(Debug, Clone)]
pub struct ActivationHistogram {
    pub layer_index: usize,
    /// Tent sizes when the layer is a tent.
    pub deltas: Option<Vec<f32>>,
    pub bin_lo: f64,
    pub bin_width: f64,
    pub clean_counts: Vec<u64>,
    pub adv_counts: Vec<u64>,
    /// 99.9th-percentile |pre-activation| of each population (nearest-rank).
    pub clean_p999_abs: f64,
    pub adv_p999_abs: f64,
}

impl ActivationHistogram {
    pub fn bins(&self) -> usize {
        self.clean_counts.len()
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        (self.bin_lo + i as f64 * self.bin_width, self.bin_lo + (i + 1) as f64 * self.bin_width)
    }
}

fn percentile_abs_999(values: &[f32]) -> f64 {
    let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = abs.len();
    let rank = ((0.999 * n as f64).ceil() as usize).clamp(1, n);
    abs[rank - 1] as f64
}

fn bin_values(values: &[f32], lo: f64, width: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &v in values {
        let mut idx = ((v as f64 - lo) / width).floor() as isize;
        if idx < 0 {
            idx = 0;
        }
        if idx as usize >= bins {
            idx = bins as isize - 1; // value at the top edge lands in the last bin
        }
        counts[idx as usize] += 1;
    }
    counts
}

/// Collect pre-activation values per activation layer for a whole set,
/// batched to bound memory.
fn collect_pre_activations(
    graph: &ModelGraph,
    images: &Tensor,
    batch_size: usize,
) -> Result<Vec<(usize, Option<Vec<f32>>, Vec<f32>)>> {
    let n = images.shape()[0];
    let row: usize = images.shape()[1..].iter().product();
    let mut layers: Vec<(usize, Option<Vec<f32>>, Vec<f32>)> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_vec(shape, images.data()[start * row..end * row].to_vec())?;
        let (_, trace) = model_forward_eval(graph, &chunk)?;
        let pre = trace.pre_activations(graph);
        if layers.is_empty() {
            for (idx, tensor, deltas) in &pre {
                layers.push((*idx, deltas.map(|d| d.to_vec()), Vec::with_capacity(tensor.len() * (n / (end - start)).max(1))));
            }
        }
        for ((_, tensor, _), slot) in pre.iter().zip(layers.iter_mut()) {
            slot.2.extend_from_slice(tensor.data());
        }
        start = end;
    }
    Ok(layers)
}

/// One histogram pair per activation layer over uniform bins spanning the
/// union range of both populations.
pub fn activation_histograms(
    graph: &ModelGraph,
    clean: &Tensor,
    adversarial: &Tensor,
    bins: usize,
) -> Result<Vec<ActivationHistogram>> {
    if clean.shape()[0] == 0 || adversarial.shape()[0] == 0 {
        return Err(Error::domain("activation_histograms needs non-empty sets"));
    }
    if clean.shape() != adversarial.shape() {
        return Err(Error::dimension("activation_histograms sets", clean.shape(), adversarial.shape()));
    }
    let clean_layers = collect_pre_activations(graph, clean, 100)?;
    let adv_layers = collect_pre_activations(graph, adversarial, 100)?;
    let mut out = Vec::with_capacity(clean_layers.len());
    for ((idx, deltas, cv), (_, _, av)) in clean_layers.into_iter().zip(adv_layers.into_iter()) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in cv.iter().chain(av.iter()) {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        if hi <= lo {
            hi = lo + 1e-6;
        }
        let width = (hi - lo) / bins as f64;
        out.push(ActivationHistogram {
            layer_index: idx,
            deltas,
            bin_lo: lo,
            bin_width: width,
            clean_counts: bin_values(&cv, lo, width, bins),
            adv_counts: bin_values(&av, lo, width, bins),
            clean_p999_abs: percentile_abs_999(&cv),
            adv_p999_abs: percentile_abs_999(&av),
        })
    }
    Ok(out)
}

/// Ratio of the adversarial 99.9th-percentile |pre-activation| to the clean
/// one. Identical populations give exactly 1.
pub fn range_shift_metric(h: &ActivationHistogram) -> f64 {
    if h.clean_p999_abs == 0.0 {
        if h.adv_p999_abs == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        h.adv_p999_abs / h.clean_p999_abs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_closed_form() {
        assert_eq!(truncated_risk(ActivationKind::Relu, 1.0, 3.0).unwrap(), 4.0);
    }

    #[test]
    fn tent_zero_outside_support() {
        let t = ActivationKind::Tent { delta: 1.0 };
        assert_eq!(truncated_risk(t, 1.0, 5.0).unwrap(), 0.0);
        assert_eq!(truncated_risk(t, 2.0, 100.0).unwrap(), 0.0);
    }

    #[test]
    fn tent_triangle_tail() {
        let t = ActivationKind::Tent { delta: 1.0 };
        // int_{0.5}^{inf} (1-x)+ dx = 0.125
        let v = truncated_risk(t, 0.5, 10.0).unwrap();
        assert!((v - 0.125).abs() < 1e-12);
        // capped at z inside the support
        let v = truncated_risk(t, 0.5, 0.75).unwrap();
        let want = 0.125 - 0.25 * 0.25 / 2.0;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn relu_divergence_sequence() {
        let vals: Vec<f64> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&z| truncated_risk(ActivationKind::Relu, 1.0, z).unwrap())
            .collect();
        assert_eq!(vals, vec![49.5, 4999.5, 499999.5]);
        assert!(vals[0] < vals[1] && vals[1] < vals[2]);
    }

    #[test]
    fn domain_errors() {
        assert!(truncated_risk(ActivationKind::Relu, 3.0, 1.0).is_err());
        assert!(truncated_risk(ActivationKind::Relu, -1.0, 1.0).is_err());
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        let mut rng = crate::rng::XorShiftRng::new(31);
        for _ in 0..100 {
            let a = rng.next_f64() * 2.0;
            let z = a + rng.next_f64() * 50.0 + 1e-3;
            let delta = 0.05 + rng.next_f64() * 0.95;
            let relu = truncated_risk(ActivationKind::Relu, a, z).unwrap();
            let q = adaptive_quadrature(&|x| ActivationKind::Relu.response(x), a, z, 1e-12);
            assert!((relu - q).abs() <= 1e-8 * relu.abs().max(1e-12), "relu {relu} vs {q}");
            let tk = ActivationKind::Tent { delta };
            let tent = truncated_risk(tk, a, z).unwrap();
            let q = adaptive_quadrature(&|x| tk.response(x), a, z, 1e-14);
            assert!((tent - q).abs() <= 1e-8 * tent.abs().max(1e-12), "tent {tent} vs {q}");
        }
    }

    #[test]
    fn normalized_tent_unit_area() {
        for &delta in &[0.05f64, 0.5, 1.0] {
            let tk = ActivationKind::Tent { delta };
            let area = adaptive_quadrature(&|x| tk.response(x) / (delta * delta), -delta, delta, 1e-12);
            assert!((area - 1.0).abs() < 1e-6, "delta {delta}: area {area}");
        }
    }

    #[test]
    fn divergence_report_verdict() {
        let grid: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let r = risk_divergence_report(0.5, &grid, 1.0).unwrap();
        assert!(r.relu_unbounded);
        assert!(r.tent_bounded);
        assert!(r.tent_total <= 1.0 * 1.0 + 1e-12);
        assert!((r.normalized_tent_area - 1.0).abs() < 1e-6);
        assert_eq!(verdict_line(&r), "monotonic: unbounded; tent: bounded");
    }

    #[test]
    fn risk_monotone_in_z() {
        let mut rng = crate::rng::XorShiftRng::new(32);
        for _ in 0..200 {
            let a = rng.next_f64();
            let z1 = a + rng.next_f64() * 3.0;
            let z2 = z1 + rng.next_f64() * 3.0;
            let delta = 0.05 + rng.next_f64();
            for kind in [ActivationKind::Relu, ActivationKind::Tent { delta }] {
                let v1 = truncated_risk(kind, a, z1).unwrap();
                let v2 = truncated_risk(kind, a, z2).unwrap();
                assert!(v2 >= v1);
            }
        }
    }

    #[test]
    fn binning_three_values() {
        // direct binning: values -0.5, 0.2, 1.1 over [-1,2) in 3 bins
        let counts = bin_values(&[-0.5, 0.2, 1.1], -1.0, 1.0, 3);
        assert_eq!(counts, vec![1, 1, 1]);
    }

    #[test]
    fn percentile_nearest_rank() {
        let vals: Vec<f32> = (1..=1000).map(|v| v as f32).collect();
        assert_eq!(percentile_abs_999(&vals), 999.0);
    }

    #[test]
    fn identical_populations_shift_one() {
        let h = ActivationHistogram {
            layer_index: 0,
            deltas: None,
            bin_lo: 0.0,
            bin_width: 0.1,
            clean_counts: vec![1; 10],
            adv_counts: vec![1; 10],
            clean_p999_abs: 2.0,
            adv_p999_abs: 2.0,
        };
        assert_eq!(range_shift_metric(&h), 1.0);
        let h2 = ActivationHistogram { adv_p999_abs: 4.0, ..h };
        assert_eq!(range_shift_metric(&h2), 2.0);
    }
}
