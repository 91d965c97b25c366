//! Differentiable spatial resizing.
//!
//! Bilinear and area interpolation are expressed as fixed row/column
//! interpolation matrices applied with `broadcast_matmul`, so gradients flow
//! through matmul's backward. Bilinear uses half-pixel (align_corners=false)
//! source coordinates; for power-of-two factors the weights are dyadic
//! rationals, which keeps constant maps exactly constant.

use candle_core::Tensor;

use crate::error::Result;

/// Row-major (n_out, n_in) bilinear interpolation matrix.
fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0f64; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for d in 0..n_out {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[d * n_in + i0] += 1.0 - frac;
        m[d * n_in + i1] += frac;
    }
    m
}

/// Row-major (n_out, n_in) area-interpolation matrix: each output cell
/// averages the input cells it overlaps, weighted by overlap length.
fn area_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0f64; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for d in 0..n_out {
        let lo = d as f64 * scale;
        let hi = (d + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = ((hi.ceil() as usize).max(first + 1)).min(n_in);
        for i in first..last {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            m[d * n_in + i] = overlap / scale;
        }
    }
    m
}

fn apply_separable(x: &Tensor, rows: Vec<f64>, cols: Vec<f64>, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let dev = x.device();
    let dtype = x.dtype();
    let lh = Tensor::from_vec(rows, (out_h, h), dev)?.to_dtype(dtype)?;
    let rw = Tensor::from_vec(cols, (out_w, w), dev)?.to_dtype(dtype)?.t()?.contiguous()?;
    let xs = x.reshape((b * c, h, w))?;
    let y = lh.broadcast_matmul(&xs)?;
    let y = y.broadcast_matmul(&rw)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Bilinear resize of a (B, C, H, W) tensor to (out_h, out_w).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    apply_separable(x, bilinear_weights(h, out_h), bilinear_weights(w, out_w), out_h, out_w)
}

/// x2 bilinear upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    bilinear_resize(x, h * 2, w * 2)
}

/// Area-interpolation resize (mass-preserving averaging); for integer
/// downsampling factors this is exact average pooling.
pub fn area_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    apply_separable(x, area_weights(h, out_h), area_weights(w, out_w), out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn grid(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let n = b * c * h * w;
        let data: Vec<f32> = (0..n).map(|i| i as f32 * 0.1).collect();
        Tensor::from_vec(data, (b, c, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn constant_maps_stay_constant_under_power_of_two_upsampling() {
        let x = Tensor::ones((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        for target in [8usize, 16, 32] {
            let y = bilinear_resize(&x, target, target).unwrap();
            let vals = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(vals.iter().all(|&v| v == 1.0), "constant broken at {target}");
        }
    }

    #[test]
    fn area_downsample_integer_factor_is_average_pooling() {
        let x = grid(1, 1, 4, 4);
        let y = area_resize(&x, 2, 2).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // 2x2 blocks of 0.1*[0,1,4,5], [2,3,6,7], [8,9,12,13], [10,11,14,15]
        let expect = [0.25f32, 0.45, 1.05, 1.25];
        for (a, e) in v.iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn area_preserves_mass() {
        let x = grid(1, 1, 6, 6);
        let y = area_resize(&x, 4, 4).unwrap();
        let sx = x.mean_all().unwrap().to_scalar::<f32>().unwrap();
        let sy = y.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((sx - sy).abs() < 1e-5, "{sx} vs {sy}");
    }

    #[test]
    fn identity_when_size_matches() {
        let x = grid(2, 3, 4, 4);
        let y = bilinear_resize(&x, 4, 4).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn upsample_matches_hand_values() {
        // 1D check along width: input [0, 1], half-pixel doubling gives
        // [0, 0.25, 0.75, 1].
        let x = Tensor::from_vec(vec![0f32, 1.0], (1, 1, 1, 2), &Device::Cpu).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let expect = [0.0f32, 0.25, 0.75, 1.0];
        for (a, e) in v.iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{v:?}");
        }
    }
}
