//! Per-sample depthwise convolution with externally supplied kernels.
//!
//! The kernel tensor carries one (k x k) filter per sample and channel.
//! Application is unrolled into k*k shifted views of the zero-padded input,
//! each weighted by the matching kernel entry; this is differentiable through
//! both the input and the kernels, and every sample's arithmetic is
//! independent of the rest of the batch.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Applies per-sample depthwise kernels (B, C, k, k) to x (B, C, H, W) with
/// the given dilation and same-size zero padding. k must be odd; this is
/// checked when the kernel generator is constructed, and again here.
pub fn depthwise_dynamic_conv2d(x: &Tensor, kernels: &Tensor, dilation: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (kb, kc, kh, kw) = kernels.dims4()?;
    if kb != b || kc != c || kh != kw {
        return Err(Error::ShapeMismatch {
            context: "dynamic kernels".into(),
            expected: format!("({b}, {c}, k, k)"),
            actual: format!("({kb}, {kc}, {kh}, {kw})"),
        });
    }
    let k = kh;
    if k % 2 == 0 {
        return Err(Error::Contract(format!(
            "dynamic kernel size must be odd for same-size padding, got {k}"
        )));
    }
    let pad = dilation * (k - 1) / 2;
    let xp = x
        .pad_with_zeros(2, pad, pad)?
        .pad_with_zeros(3, pad, pad)?;
    let mut acc: Option<Tensor> = None;
    for i in 0..k {
        for j in 0..k {
            let view = xp.narrow(2, i * dilation, h)?.narrow(3, j * dilation, w)?;
            let wij = kernels.narrow(2, i, 1)?.narrow(3, j, 1)?;
            let term = view.broadcast_mul(&wij)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(acc.expect("k >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn dirac_kernels(b: usize, c: usize, k: usize) -> Tensor {
        let mut data = vec![0f32; b * c * k * k];
        let center = (k / 2) * k + k / 2;
        for bc in 0..b * c {
            data[bc * k * k + center] = 1.0;
        }
        Tensor::from_vec(data, (b, c, k, k), &Device::Cpu).unwrap()
    }

    #[test]
    fn dirac_kernel_is_identity_for_every_dilation() {
        let x = Tensor::randn(0f32, 1.0, (2, 3, 6, 6), &Device::Cpu).unwrap();
        for dilation in [1usize, 3, 5] {
            let y = depthwise_dynamic_conv2d(&x, &dirac_kernels(2, 3, 3), dilation).unwrap();
            assert_eq!(
                x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                "dilation {dilation}"
            );
        }
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let x = Tensor::randn(0f32, 1.0, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let k = Tensor::zeros((1, 2, 3, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = depthwise_dynamic_conv2d(&x, &k, 1).unwrap();
        assert!(y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() == 0.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros((1, 1, 4, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        let k = Tensor::zeros((1, 1, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(depthwise_dynamic_conv2d(&x, &k, 1).is_err());
    }

    #[test]
    fn matches_naive_reference() {
        // 1-channel 4x4 input, dilation 1: compare against a hand loop.
        let x = Tensor::randn(0f32, 1.0, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let kern = Tensor::randn(0f32, 1.0, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let y = depthwise_dynamic_conv2d(&x, &kern, 1).unwrap();

        let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let kv = kern.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for oy in 0..4i64 {
            for ox in 0..4i64 {
                let mut acc = 0f32;
                for di in -1..=1i64 {
                    for dj in -1..=1i64 {
                        let (sy, sx) = (oy + di, ox + dj);
                        if (0..4).contains(&sy) && (0..4).contains(&sx) {
                            acc += xv[(sy * 4 + sx) as usize]
                                * kv[((di + 1) * 3 + dj + 1) as usize];
                        }
                    }
                }
                let got = yv[(oy * 4 + ox) as usize];
                assert!((acc - got).abs() < 1e-5, "({oy},{ox}): {acc} vs {got}");
            }
        }
    }
}
