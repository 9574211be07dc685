//! The tent activation `f(x; delta) = max(0, delta - |x|)` with its exact
//! partial derivatives and the management of the learnable `delta` sizes:
//! sharing across channels, hard clamp bounds and weight decay.
//!
//! The function is symmetric, peaks at `f(0) = delta`, and is exactly zero
//! outside `[-delta, delta]`; that compact support is what bounds the
//! response a far-away input can elicit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hard lower bound applied to every delta after each optimizer step.
pub const DELTA_LOWER: f32 = 0.05;
/// Hard upper bound applied to every delta after each optimizer step.
pub const DELTA_UPPER: f32 = 1.0;
/// All tents start at this size.
pub const DELTA_INIT: f32 = 1.0;

/// Whether one delta serves the whole layer or each channel owns its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    Shared,
    PerChannel,
}

/// Learnable tent sizes for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TentParams {
    deltas: Tensor,
    mode: SharingMode,
    pub lower_bound: f32,
    pub upper_bound: f32,
}

impl TentParams {
    /// New layer parameters, every delta at [`DELTA_INIT`] exactly.
    pub fn new(mode: SharingMode, channels: usize) -> TentParams {
        let n = match mode {
            SharingMode::Shared => 1,
            SharingMode::PerChannel => channels,
        };
        TentParams {
            deltas: Tensor::filled(vec![n], DELTA_INIT),
            mode,
            lower_bound: DELTA_LOWER,
            upper_bound: DELTA_UPPER,
        }
    }

    pub fn mode(&self) -> SharingMode {
        self.mode
    }

    pub fn deltas(&self) -> &Tensor {
        &self.deltas
    }

    pub fn deltas_mut(&mut self) -> &mut Tensor {
        &mut self.deltas
    }

    /// Delta used for flat element index `i` of an input whose axis-1 extent
    /// is `channels` with `inner` trailing elements per channel.
    #[inline]
    fn delta_for(&self, i: usize, channels: usize, inner: usize) -> f32 {
        match self.mode {
            SharingMode::Shared => self.deltas.data()[0],
            SharingMode::PerChannel => {
                let c = (i / inner) % channels;
                self.deltas.data()[c]
            }
        }
    }

    /// Clamp every delta into `[lower_bound, upper_bound]`; call after each
    /// optimizer step that touched deltas.
    pub fn clamp_deltas(&mut self) {
        let (lo, hi) = (self.lower_bound, self.upper_bound);
        for d in self.deltas.data_mut() {
            *d = d.clamp(lo, hi);
        }
    }

    pub fn deltas_in_bounds(&self) -> bool {
        self.deltas
            .data()
            .iter()
            .all(|&d| d >= self.lower_bound && d <= self.upper_bound)
    }
}

/// Channel geometry of an activation input: axis-1 extent and trailing
/// elements per channel. Rank-1 inputs are treated as a single channel.
fn channel_geometry(x: &Tensor) -> (usize, usize) {
    if x.rank() >= 2 {
        let channels = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        (channels, inner)
    } else {
        (1, x.len())
    }
}

/// `f(x) = max(0, delta - |x|)` elementwise.
pub fn tent_forward(x: &Tensor, p: &TentParams) -> Tensor {
    let (channels, inner) = channel_geometry(x);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let d = p.delta_for(i, channels, inner);
        *v = (d - v.abs()).max(0.0);
    }
    out
}

/// Input partial: `-sgn(x)` where `0 < |x| <= delta`, else 0 (including at
/// `x = 0` exactly), times `upstream`.
pub fn tent_backward_input(x: &Tensor, p: &TentParams, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::dimension(
            "tent_backward_input",
            x.shape(),
            upstream.shape(),
        ));
    }
    let (channels, inner) = channel_geometry(x);
    let mut out = upstream.clone();
    for (i, (g, &xv)) in out.data_mut().iter_mut().zip(x.data().iter()).enumerate() {
        let d = p.delta_for(i, channels, inner);
        let a = xv.abs();
        *g = if xv != 0.0 && a <= d {
            -xv.signum() * *g
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Delta partial: 1 where `|x| <= delta` else 0, times `upstream`, summed
/// over every element sharing a delta (flat iteration order).
pub fn tent_backward_delta(x: &Tensor, p: &TentParams, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::dimension(
            "tent_backward_delta",
            x.shape(),
            upstream.shape(),
        ));
    }
    let (channels, inner) = channel_geometry(x);
    let mut grad = Tensor::zeros(vec![p.deltas().len()]);
    let gd = grad.data_mut();
    for (i, (&xv, &u)) in x.data().iter().zip(upstream.data().iter()).enumerate() {
        let d = p.delta_for(i, channels, inner);
        if xv.abs() <= d {
            let slot = match p.mode {
                SharingMode::Shared => 0,
                SharingMode::PerChannel => (i / inner) % channels,
            };
            gd[slot] += u;
        }
    }
    Ok(grad)
}

/// L2-style decay pull `wd * delta`, to be added to the delta loss gradient
/// before the optimizer step.
pub fn delta_decay_grad(p: &TentParams, wd: f32) -> Tensor {
    let mut out = p.deltas().clone();
    for v in out.data_mut() {
        *v *= wd;
    }
    out
}
