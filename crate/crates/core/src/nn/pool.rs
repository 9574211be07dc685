//! 2x2 max-pooling with stride 2. Ties go to the first index in row-major
//! window order, and the winning flat input indices are kept for backprop.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn maxpool_forward(x: &Tensor, pool: usize) -> Result<(Tensor, Vec<u32>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dimension("maxpool_forward rank", s, &[]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % pool != 0 || w % pool != 0 {
        return Err(Error::dimension("maxpool_forward extents not divisible", s, &[pool, pool]));
    }
    let (oh, ow) = (h / pool, w / pool);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut indices = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let xin = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for py in 0..pool {
                    for px in 0..pool {
                        let idx = (oy * pool + py) * w + ox * pool + px;
                        let v = xin[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = best;
                indices[o] = (plane * h * w + best_idx) as u32;
            }
        }
    }
    Ok((out, indices))
}

/// Scatter upstream gradients back to the winning positions.
pub fn maxpool_backward(dy: &Tensor, indices: &[u32], in_shape: &[usize]) -> Result<Tensor> {
    if dy.len() != indices.len() {
        return Err(Error::dimension("maxpool_backward", dy.shape(), &[indices.len()]));
    }
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let data = dx.data_mut();
    for (&g, &idx) in dy.data().iter().zip(indices.iter()) {
        data[idx as usize] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_window() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, idx) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn constant_window_tie_takes_first() {
        let x = t(&[1, 1, 2, 2], &[7.0, 7.0, 7.0, 7.0]);
        let (y, idx) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn ramp_matches_window_oracle() {
        // exhaustive window-loop oracle on a 4x4 ramp
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = t(&[1, 1, 4, 4], &data);
        let (y, _) = maxpool_forward(&x, 2).unwrap();
        let mut want = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f32::NEG_INFINITY;
                for py in 0..2 {
                    for px in 0..2 {
                        m = m.max(data[(oy * 2 + py) * 4 + ox * 2 + px]);
                    }
                }
                want.push(m);
            }
        }
        assert_eq!(y.data(), &want[..]);
    }

    #[test]
    fn odd_extent_is_error() {
        let x = t(&[1, 1, 3, 4], &[0.0; 12]);
        assert!(maxpool_forward(&x, 2).is_err());
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 4.0]);
        let (_, idx) = maxpool_forward(&x, 2).unwrap();
        let dy = t(&[1, 1, 1, 1], &[2.5]);
        let dx = maxpool_backward(&dy, &idx, &[1, 1, 2, 2]).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }
}
