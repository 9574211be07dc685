//! 2-D convolution (cross-correlation), valid padding, stride 1.
//!
//! Each sample is lowered to a column matrix and multiplied with the kernel
//! matrix using the fixed-order gemm kernel, so accumulation order is
//! deterministic.

use crate::error::{Error, Result};
use crate::tensor::{gemm_axpy, Tensor};

/// im2col, kernel-major: cols[(c*k*k + ky*k + kx) * P + p] = x[c, oy+ky, ox+kx]
/// where p = oy*ow + ox. `x` is one sample, [C, H, W] flattened.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let p = oh * ow;
    debug_assert_eq!(cols.len(), c * k * k * p);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &plane[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Position-major variant: cols_t[p * (C*k*k) + row] = same element.
fn im2col_positions(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols_t: &mut [f32]) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let ck2 = c * k * k;
    debug_assert_eq!(cols_t.len(), oh * ow * ck2);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut cols_t[(oy * ow + ox) * ck2..(oy * ow + ox + 1) * ck2];
            let mut e = 0;
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for ky in 0..k {
                    let src = &plane[(oy + ky) * w + ox..(oy + ky) * w + ox + k];
                    dst[e..e + k].copy_from_slice(src);
                    e += k;
                }
            }
        }
    }
}

/// Forward: `x` [N,C,H,W], `w` [F,C,k,k], `b` [F] -> [N,F,H-k+1,W-k+1].
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::dimension("conv2d_forward rank", xs, ws));
    }
    let (n, c, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, wc, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != c || k != k2 {
        return Err(Error::dimension("conv2d_forward channels/kernel", xs, ws));
    }
    if k > h || k > wid {
        return Err(Error::dimension("conv2d_forward kernel larger than input", xs, ws));
    }
    if b.len() != f {
        return Err(Error::dimension("conv2d_forward bias", b.shape(), ws));
    }
    let oh = h - k + 1;
    let ow = wid - k + 1;
    let p = oh * ow;
    let ck2 = c * k * k;

    let mut out = Tensor::zeros(vec![n, f, oh, ow]);
    let mut cols = vec![0.0f32; ck2 * p];
    for s in 0..n {
        let xi = &x.data()[s * c * h * wid..(s + 1) * c * h * wid];
        im2col(xi, c, h, wid, k, &mut cols);
        let oi = &mut out.data_mut()[s * f * p..(s + 1) * f * p];
        gemm_axpy(w.data(), f, ck2, &cols, p, oi);
        for fi in 0..f {
            let bv = b.data()[fi];
            for v in oi[fi * p..(fi + 1) * p].iter_mut() {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Backward. Returns (dx, dw, db); `dw`/`db` are skipped when
/// `want_param_grads` is false (attack inner loops only need dx).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want_param_grads: bool,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, _, k, _) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = h - k + 1;
    let ow = wid - k + 1;
    let p = oh * ow;
    let ck2 = c * k * k;
    if dy.shape() != [n, f, oh, ow] {
        return Err(Error::dimension("conv2d_backward dy", dy.shape(), &[n, f, oh, ow]));
    }

    // Kernel flipped and transposed for the input gradient:
    // wflip[c][f*k*k + ky*k + kx] = w[f, c, k-1-ky, k-1-kx]
    let fk2 = f * k * k;
    let mut wflip = vec![0.0f32; c * fk2];
    for fi in 0..f {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    wflip[ci * fk2 + fi * k * k + ky * k + kx] =
                        w.data()[((fi * c + ci) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                }
            }
        }
    }

    let ph = oh + 2 * (k - 1);
    let pw = ow + 2 * (k - 1);
    let mut dx = Tensor::zeros(vec![n, c, h, wid]);
    let mut dw = Tensor::zeros(vec![f, c, k, k]);
    let mut db = Tensor::zeros(vec![f]);

    let mut dy_pad = vec![0.0f32; f * ph * pw];
    let mut cols_pad = vec![0.0f32; fk2 * h * wid];
    let mut cols_t = vec![0.0f32; p * ck2];
    for s in 0..n {
        let dyi = &dy.data()[s * f * p..(s + 1) * f * p];

        // dx: full correlation of dy with flipped kernels via zero padding
        dy_pad.iter_mut().for_each(|v| *v = 0.0);
        for fi in 0..f {
            for oy in 0..oh {
                let src = &dyi[fi * p + oy * ow..fi * p + (oy + 1) * ow];
                let dst_base = fi * ph * pw + (oy + k - 1) * pw + (k - 1);
                dy_pad[dst_base..dst_base + ow].copy_from_slice(src);
            }
        }
        im2col(&dy_pad, f, ph, pw, k, &mut cols_pad);
        let dxi = &mut dx.data_mut()[s * c * h * wid..(s + 1) * c * h * wid];
        gemm_axpy(&wflip, c, fk2, &cols_pad, h * wid, dxi);

        if want_param_grads {
            let xi = &x.data()[s * c * h * wid..(s + 1) * c * h * wid];
            im2col_positions(xi, c, h, wid, k, &mut cols_t);
            gemm_axpy(dyi, f, p, &cols_t, ck2, dw.data_mut());
            for fi in 0..f {
                let mut acc = 0.0f32;
                for v in &dyi[fi * p..(fi + 1) * p] {
                    acc += v;
                }
                db.data_mut()[fi] += acc;
            }
        }
    }
    let grads = want_param_grads.then_some((dw, db));
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn zero_kernel_bias_only() {
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let w = t(&[1, 1, 2, 2], &[0.0; 4]);
        let b = t(&[1], &[0.5]);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    /// Brute-force index-loop oracle for valid cross-correlation.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (n, c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = (h - k + 1, wid - k + 1);
        let mut out = Tensor::zeros(vec![n, f, oh, ow]);
        for s in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[fi] as f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let xv = x.data()
                                        [((s * c + ci) * h + oy + ky) * wid + ox + kx];
                                    let wv = w.data()[((fi * c + ci) * k + ky) * k + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        out.data_mut()[((s * f + fi) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn full_kernel_is_dot_product() {
        let mut rng = crate::rng::XorShiftRng::new(14);
        let x_data: Vec<f32> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w_data: Vec<f32> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = t(&[1, 1, 3, 3], &x_data);
        let w = t(&[1, 1, 3, 3], &w_data);
        let b = t(&[1], &[0.25]);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        let want = conv_oracle(&x, &w, &b);
        assert!((y.data()[0] - want.data()[0]).abs() < 1e-5);
    }

    #[test]
    fn matches_oracle_on_random_shapes() {
        let mut rng = crate::rng::XorShiftRng::new(15);
        for &(n, c, h, w_, f, k) in
            &[(2usize, 3usize, 6usize, 5usize, 4usize, 3usize), (1, 1, 4, 4, 2, 2), (3, 2, 5, 7, 3, 3)]
        {
            let x_data: Vec<f32> = (0..n * c * h * w_).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let w_data: Vec<f32> = (0..f * c * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b_data: Vec<f32> = (0..f).map(|_| rng.uniform(-0.5, 0.5)).collect();
            let x = t(&[n, c, h, w_], &x_data);
            let wt = t(&[f, c, k, k], &w_data);
            let b = t(&[f], &b_data);
            let y = conv2d_forward(&x, &wt, &b).unwrap();
            let want = conv_oracle(&x, &wt, &b);
            for (a, e) in y.data().iter().zip(want.data().iter()) {
                assert!((a - e).abs() < 1e-4, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = t(&[1, 2, 3, 3], &[0.0; 18]);
        let w = t(&[1, 3, 2, 2], &[0.0; 12]);
        let b = t(&[1], &[0.0]);
        assert!(conv2d_forward(&x, &w, &b).is_err());
    }
}
