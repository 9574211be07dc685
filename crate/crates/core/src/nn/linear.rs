//! Fully connected layer: y = x W^T + b with W stored [out, in].

use crate::error::{Error, Result};
use crate::tensor::{gemm_axpy, transpose2d, Tensor};

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dimension("linear_forward", x.shape(), w.shape()));
    }
    let (n, in_f) = (x.shape()[0], x.shape()[1]);
    let out_f = w.shape()[0];
    if b.len() != out_f {
        return Err(Error::dimension("linear_forward bias", b.shape(), w.shape()));
    }
    let wt = transpose2d(w)?; // [in, out]
    let mut y = Tensor::zeros(vec![n, out_f]);
    gemm_axpy(x.data(), n, in_f, wt.data(), out_f, y.data_mut());
    for row in 0..n {
        let ys = &mut y.data_mut()[row * out_f..(row + 1) * out_f];
        for (v, &bv) in ys.iter_mut().zip(b.data().iter()) {
            *v += bv;
        }
    }
    Ok(y)
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want_param_grads: bool,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    let (n, in_f) = (x.shape()[0], x.shape()[1]);
    let out_f = w.shape()[0];
    if dy.shape() != [n, out_f] {
        return Err(Error::dimension("linear_backward dy", dy.shape(), &[n, out_f]));
    }
    // dx = dy W
    let mut dx = Tensor::zeros(vec![n, in_f]);
    gemm_axpy(dy.data(), n, out_f, w.data(), in_f, dx.data_mut());

    let grads = if want_param_grads {
        // dw = dy^T x
        let dyt = transpose2d(dy)?; // [out, n]
        let mut dw = Tensor::zeros(vec![out_f, in_f]);
        gemm_axpy(dyt.data(), out_f, n, x.data(), in_f, dw.data_mut());
        let mut db = Tensor::zeros(vec![out_f]);
        for row in 0..n {
            let dys = &dy.data()[row * out_f..(row + 1) * out_f];
            for (g, &v) in db.data_mut().iter_mut().zip(dys.iter()) {
                *g += v;
            }
        }
        Some((dw, db))
    } else {
        None
    };
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn forward_known_values() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.5, -0.5]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5]);
    }

    #[test]
    fn input_grad_is_w_transposed_chain() {
        // y = W x for a single sample: dx = dy W
        let x = t(&[1, 3], &[1.0, -1.0, 2.0]);
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let dy = t(&[1, 2], &[1.0, 1.0]);
        let (dx, grads) = linear_backward(&x, &w, &dy, true).unwrap();
        assert_eq!(dx.data(), &[5.0, 7.0, 9.0]);
        let (dw, db) = grads.unwrap();
        assert_eq!(db.data(), &[1.0, 1.0]);
        assert_eq!(dw.data(), &[1.0, -1.0, 2.0, 1.0, -1.0, 2.0]);
    }
}
