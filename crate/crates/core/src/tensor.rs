//! Dense row-major f32 tensors and the arithmetic primitives the rest of the
//! workbench builds on.
//!
//! Conventions: row-major layout, NCHW for image tensors, and a fixed
//! ascending-k summation order per output element in [`matmul`] so repeated
//! runs are bit-identical.

use crate::error::{Error, Result};

/// Dense n-dimensional array of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    name: Option<String>,
}

impl Tensor {
    /// Build from parts; `product(shape)` must equal `data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::domain(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            name: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            name: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            name: None,
        }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
            name: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Tensor {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::dimension("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, location: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                location: location.to_string(),
            })
        }
    }
}

/// Elementwise binary operations for [`map_zip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinOp {
    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Max => a.max(b),
        }
    }
}

/// Reductions for [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
    /// Ties break to the lowest index.
    Argmax,
}

/// out[m,n] += sum_k a[m,k] * b[k,n].
///
/// Register-tiled (4 output rows by 32 columns held in accumulators across
/// the whole k sweep); for a fixed output element the products are summed in
/// ascending-k order, so results are bit-identical across runs.
pub(crate) fn gemm_axpy(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const NB: usize = 32;
    const MR: usize = 4;
    let mut nb = 0;
    while nb < n {
        let width = NB.min(n - nb);
        if width == NB {
            let mut row = 0;
            while row + MR <= m {
                let mut acc = [[0.0f32; NB]; MR];
                for kk in 0..k {
                    let b_seg: &[f32; NB] =
                        b[kk * n + nb..kk * n + nb + NB].try_into().unwrap();
                    for r in 0..MR {
                        let av = a[(row + r) * k + kk];
                        for j in 0..NB {
                            acc[r][j] += av * b_seg[j];
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    let o = &mut out[(row + r) * n + nb..(row + r) * n + nb + NB];
                    for j in 0..NB {
                        o[j] += acc_row[j];
                    }
                }
                row += MR;
            }
            while row < m {
                let mut acc = [0.0f32; NB];
                for kk in 0..k {
                    let av = a[row * k + kk];
                    let b_seg = &b[kk * n + nb..kk * n + nb + NB];
                    for j in 0..NB {
                        acc[j] += av * b_seg[j];
                    }
                }
                let o = &mut out[row * n + nb..row * n + nb + NB];
                for j in 0..NB {
                    o[j] += acc[j];
                }
                row += 1;
            }
        } else {
            // narrow column tail
            for row in 0..m {
                for kk in 0..k {
                    let av = a[row * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let b_seg = &b[kk * n + nb..kk * n + nb + width];
                    let o = &mut out[row * n + nb..row * n + nb + width];
                    for (ov, &bv) in o.iter_mut().zip(b_seg.iter()) {
                        *ov += av * bv;
                    }
                }
            }
        }
        nb += width;
    }
}

/// Standard matrix product `a[M,K] x b[K,N]`, ascending-k summation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dimension("matmul", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = Tensor::zeros(vec![m, n]);
    gemm_axpy(&a.data, m, k, &b.data, n, &mut out.data);
    out.check_finite("matmul")?;
    Ok(out)
}

/// 2-D transpose, materialized.
pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::dimension("transpose2d", &a.shape, &[]));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

/// Elementwise combine. `b` must have the same shape as `a`, be a scalar
/// (one element), or be a per-channel vector matching `a`'s axis-1 extent
/// (broadcast along the remaining axes). No other broadcasting.
pub fn map_zip(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let mut out = a.clone();
    out.name = None;
    if b.shape == a.shape {
        for (o, &bv) in out.data.iter_mut().zip(b.data.iter()) {
            *o = op.apply(*o, bv);
        }
    } else if b.len() == 1 {
        let bv = b.data[0];
        for o in out.data.iter_mut() {
            *o = op.apply(*o, bv);
        }
    } else if b.rank() == 1 && a.rank() >= 2 && b.len() == a.shape[1] {
        // per-channel along axis 1
        let channels = a.shape[1];
        let inner: usize = a.shape[2..].iter().product();
        let outer = a.shape[0];
        for s in 0..outer {
            for c in 0..channels {
                let bv = b.data[c];
                let base = (s * channels + c) * inner;
                for o in out.data[base..base + inner].iter_mut() {
                    *o = op.apply(*o, bv);
                }
            }
        }
    } else {
        return Err(Error::dimension("map_zip broadcast", &a.shape, &b.shape));
    }
    out.check_finite("map_zip")?;
    Ok(out)
}

/// Reduce along `axis` (or over everything when `axis` is `None`).
/// Argmax returns indices as integral f32 values; ties break low.
pub fn reduce(a: &Tensor, op: Reduce, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => {
            if a.is_empty() {
                return Err(Error::domain("reduce over empty tensor"));
            }
            let v = reduce_slice(&a.data, 1, op);
            let out = Tensor::from_vec(vec![1], vec![v])?;
            out.check_finite("reduce")?;
            Ok(out)
        }
        Some(ax) => {
            if ax >= a.rank() {
                return Err(Error::domain(format!(
                    "axis {} out of range for rank {}",
                    ax,
                    a.rank()
                )));
            }
            if a.shape[ax] == 0 {
                return Err(Error::domain("reduce along empty axis"));
            }
            let outer: usize = a.shape[..ax].iter().product();
            let extent = a.shape[ax];
            let inner: usize = a.shape[ax + 1..].iter().product();
            let mut out_shape = a.shape.clone();
            out_shape.remove(ax);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            let mut out = Tensor::zeros(out_shape);
            for o in 0..outer {
                for i in 0..inner {
                    // walk the axis with stride `inner`
                    let base = o * extent * inner + i;
                    let v = reduce_strided(&a.data, base, extent, inner, op);
                    out.data[o * inner + i] = v;
                }
            }
            out.check_finite("reduce")?;
            Ok(out)
        }
    }
}

fn reduce_slice(data: &[f32], stride: usize, op: Reduce) -> f32 {
    reduce_strided(data, 0, data.len() / stride, stride, op)
}

fn reduce_strided(data: &[f32], base: usize, count: usize, stride: usize, op: Reduce) -> f32 {
    match op {
        Reduce::Sum | Reduce::Mean => {
            let mut acc = 0.0f32;
            for j in 0..count {
                acc += data[base + j * stride];
            }
            if op == Reduce::Mean {
                acc / count as f32
            } else {
                acc
            }
        }
        Reduce::Max => {
            let mut best = data[base];
            for j in 1..count {
                let v = data[base + j * stride];
                if v > best {
                    best = v;
                }
            }
            best
        }
        Reduce::Argmax => {
            let mut best = data[base];
            let mut idx = 0usize;
            for j in 1..count {
                let v = data[base + j * stride];
                if v > best {
                    best = v;
                    idx = j;
                }
            }
            idx as f32
        }
    }
}

/// Argmax over the last axis of a [N, K] tensor, ties to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::dimension("argmax_rows", logits.shape(), &[]));
    }
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if k == 0 {
        return Err(Error::domain("argmax over empty rows"));
    }
    let mut out = Vec::with_capacity(n);
    for row in 0..n {
        let r = &logits.data[row * k..(row + 1) * k];
        let mut best = r[0];
        let mut idx = 0usize;
        for (j, &v) in r.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                idx = j;
            }
        }
        out.push(idx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&i2, &b).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_forced_arithmetic() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(vec![2, 2]);
        let b = t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        assert_eq!(matmul(&z, &b).unwrap().data(), &[0.0; 6]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        match matmul(&a, &b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn map_zip_add_and_relu_block() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(map_zip(&a, &b, BinOp::Add).unwrap().data(), &[4.0, 6.0]);

        let x = t(&[2], &[-1.0, 0.5]);
        let zero = Tensor::scalar(0.0);
        assert_eq!(map_zip(&x, &zero, BinOp::Max).unwrap().data(), &[0.0, 0.5]);

        let one = Tensor::scalar(1.0);
        assert_eq!(map_zip(&x, &one, BinOp::Mul).unwrap().data(), x.data());
    }

    #[test]
    fn map_zip_per_channel_broadcast() {
        // [1, 2, 2] with channel vector [10, 20]
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(
            map_zip(&a, &b, BinOp::Add).unwrap().data(),
            &[11.0, 12.0, 23.0, 24.0]
        );
    }

    #[test]
    fn map_zip_bad_broadcast_is_error() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]); // axis-1 extent is 3, not 2
        assert!(map_zip(&a, &b, BinOp::Add).is_err());
    }

    #[test]
    fn reduce_examples() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(reduce(&a, Reduce::Sum, None).unwrap().data(), &[6.0]);

        let ties = t(&[3], &[0.1, 0.9, 0.9]);
        assert_eq!(reduce(&ties, Reduce::Argmax, None).unwrap().data(), &[1.0]);

        let c = Tensor::filled(vec![4], 2.5);
        assert_eq!(reduce(&c, Reduce::Mean, None).unwrap().data(), &[2.5]);
    }

    #[test]
    fn reduce_along_axis() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(reduce(&a, Reduce::Sum, Some(0)).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(reduce(&a, Reduce::Sum, Some(1)).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(reduce(&a, Reduce::Max, Some(1)).unwrap().data(), &[3.0, 6.0]);
    }

    #[test]
    fn reduce_empty_axis_is_domain_error() {
        let a = Tensor::zeros(vec![2, 0]);
        assert!(reduce(&a, Reduce::Sum, Some(1)).is_err());
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let a = t(&[1, 1], &[f32::MAX]);
        let b = t(&[1, 1], &[f32::MAX]);
        assert!(matches!(
            map_zip(&a, &b, BinOp::Add),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_overflow_is_error() {
        let a = t(&[1, 2], &[f32::MAX, f32::MAX]);
        let b = t(&[2, 1], &[2.0, 2.0]);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn transpose_square_and_rect() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = transpose2d(&a).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn two_runs_bit_identical() {
        let mut rng = crate::rng::XorShiftRng::new(5);
        let data: Vec<f32> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a = t(&[8, 8], &data);
        let r1 = matmul(&a, &a).unwrap();
        let r2 = matmul(&a, &a).unwrap();
        assert_eq!(r1.data(), r2.data());
    }
}
