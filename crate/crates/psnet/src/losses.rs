//! Training objective: BCE + SSIM saliency loss with side-output supervision
//! of the semantic and importance masks on both branches.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{BranchForward, ForwardOutputs};
use crate::nn::area_resize;

const BCE_EPS: f64 = 1e-7;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{:?}", a.dims()),
            actual: format!("{:?}", b.dims()),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy with epsilon clamping.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same_shape("bce_loss", pred, gt)?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let one = Tensor::ones_like(&p)?;
    let term = ((gt * p.log()?)? + ((&one - gt)? * (&one - &p)?.log()?)?)?;
    Ok(term.mean_all()?.neg()?)
}

/// Gaussian window (1, 1, n, n), normalized to sum 1.
fn gaussian_window(n: usize, sigma: f64, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let half = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / sum).collect();
    let mut w = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = g[i] * g[j];
        }
    }
    Ok(Tensor::from_vec(w, (1, 1, n, n), dev)?.to_dtype(dtype)?)
}

/// Edge-inclusive symmetric padding along one spatial dim, repeated until the
/// dim reaches `target`; only exercised by inputs smaller than the window.
fn symmetric_pad_to(x: &Tensor, dim: usize, target: usize) -> Result<Tensor> {
    let mut cur = x.clone();
    while cur.dims()[dim] < target {
        let n = cur.dims()[dim];
        let need = target - n;
        let left = (need / 2 + need % 2).min(n);
        let right = (need / 2).min(n).max(if need > 0 && left == 0 { 1 } else { 0 });
        let flip = |t: &Tensor, take: usize, from_start: bool| -> Result<Tensor> {
            let seg = if from_start {
                t.narrow(dim, 0, take)?
            } else {
                t.narrow(dim, n - take, take)?
            };
            let idx: Vec<u32> = (0..take as u32).rev().collect();
            let idx = Tensor::from_vec(idx, (take,), t.device())?;
            Ok(seg.contiguous()?.index_select(&idx, dim)?)
        };
        let mut parts: Vec<Tensor> = Vec::new();
        if left > 0 {
            parts.push(flip(&cur, left, true)?);
        }
        parts.push(cur.clone());
        if right > 0 {
            parts.push(flip(&cur, right, false)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        cur = Tensor::cat(&refs, dim)?;
    }
    Ok(cur)
}

/// 1 - SSIM with an 11x11 Gaussian window (sigma 1.5), computed on the [0,1]
/// dynamic range over valid window positions. Inputs smaller than the window
/// are symmetrically reflected first.
pub fn ssim_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same_shape("ssim_loss", pred, gt)?;
    let (_, c, _, _) = pred.dims4()?;
    if c != 1 {
        return Err(Error::ShapeMismatch {
            context: "ssim_loss".into(),
            expected: "single channel".into(),
            actual: format!("{c} channels"),
        });
    }
    let mut x = pred.clone();
    let mut y = gt.to_dtype(pred.dtype())?;
    for dim in [2usize, 3] {
        if x.dims()[dim] < SSIM_WINDOW {
            x = symmetric_pad_to(&x, dim, SSIM_WINDOW)?;
            y = symmetric_pad_to(&y, dim, SSIM_WINDOW)?;
        }
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA, x.dtype(), x.device())?;
    let filt = |t: &Tensor| -> Result<Tensor> { Ok(t.conv2d(&win, 0, 1, 1, 1)?) };

    let mu_x = filt(&x)?;
    let mu_y = filt(&y)?;
    let mu_xx = (&mu_x * &mu_x)?;
    let mu_yy = (&mu_y * &mu_y)?;
    let mu_xy = (&mu_x * &mu_y)?;
    let sigma_x = (filt(&(&x * &x)?)? - &mu_xx)?;
    let sigma_y = (filt(&(&y * &y)?)? - &mu_yy)?;
    let sigma_xy = (filt(&(&x * &y)?)? - &mu_xy)?;

    let num = (((mu_xy * 2.0)? + SSIM_C1)? * ((&sigma_xy * 2.0)? + SSIM_C2)?)?;
    let den = (((mu_xx + mu_yy)? + SSIM_C1)? * ((sigma_x + sigma_y)? + SSIM_C2)?)?;
    let ssim = (num / den)?;
    Ok((1.0 - ssim.mean_all()?)?)
}

/// Joint saliency loss of the final and branch predictions.
pub fn sal_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((bce_loss(pred, gt)? + ssim_loss(pred, gt)?)?)
}

/// Downsamples a binary ground-truth map to (h, w) by area interpolation and
/// re-binarizes at 0.5. The result is detached (supervision target).
pub fn downsample_gt(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let ds = area_resize(&gt.detach(), h, w)?;
    let half = (Tensor::ones_like(&ds)? * 0.5)?;
    Ok(ds.ge(&half)?.to_dtype(gt.dtype())?)
}

fn resize_target(gt_full: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = like.dims4()?;
    let t = downsample_gt(gt_full, h, w)?;
    debug_assert_eq!(&t.dims()[2..], &like.dims()[2..]);
    Ok(t)
}

/// Side-output-supervised loss of one branch (Eq. 24 shape): L_sal on the
/// branch map plus weighted BCE terms on the semantic and importance masks,
/// each against the ground truth downsampled to the map's size.
pub fn branch_loss(
    s_branch: &Tensor,
    mask5: Option<&Tensor>,
    masks_s: &[Tensor; 4],
    gt_full: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor> {
    let (total, _) = branch_loss_parts(s_branch, mask5, masks_s, gt_full, lambda1, lambda2)?;
    Ok(total)
}

fn branch_loss_parts(
    s_branch: &Tensor,
    mask5: Option<&Tensor>,
    masks_s: &[Tensor; 4],
    gt_full: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let mut parts = BTreeMap::new();
    let gt_s = resize_target(gt_full, s_branch)?;
    let sal = sal_loss(s_branch, &gt_s)?;
    parts.insert("sal".to_string(), scalar(&sal)?);
    let mut total = sal;
    if let Some(m5) = mask5 {
        let gt5 = resize_target(gt_full, m5)?;
        let l5 = bce_loss(m5, &gt5)?;
        parts.insert("mask5".to_string(), scalar(&l5)?);
        total = (total + (l5 * lambda1)?)?;
    }
    let mut side: Option<Tensor> = None;
    for (idx, m) in masks_s.iter().enumerate() {
        let gt_i = resize_target(gt_full, m)?;
        let l = bce_loss(m, &gt_i)?;
        parts.insert(format!("mask{}s", idx + 2), scalar(&l)?);
        side = Some(match side {
            None => l,
            Some(acc) => (acc + l)?,
        });
    }
    if let Some(side) = side {
        total = (total + (side * lambda2)?)?;
    }
    Ok((total, parts))
}

/// Scalar losses plus the tensor to differentiate.
pub struct LossBundle {
    /// Backward target.
    pub total: Tensor,
    pub l_sal_final: f64,
    pub l_appearance: f64,
    pub l_motion: f64,
    /// Sum of the three fields above (exactly additive by construction).
    pub l_total: f64,
    /// Per-term breakdown for logging.
    pub terms: BTreeMap<String, f64>,
}

impl LossBundle {
    /// Structured key-value record for the training log.
    pub fn log_record(&self, step: usize) -> String {
        let mut s = format!("step={step} l_total={:.6}", self.l_total);
        s.push_str(&format!(
            " l_sal_final={:.6} l_appearance={:.6} l_motion={:.6}",
            self.l_sal_final, self.l_appearance, self.l_motion
        ));
        for (k, v) in &self.terms {
            s.push_str(&format!(" {k}={v:.6}"));
        }
        s
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.detach().to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: term.to_string(),
            step: 0,
            last_good: None,
        });
    }
    Ok(())
}

/// Total objective over a full forward pass (Eq. 25 shape): final saliency
/// loss at ground-truth resolution plus both branch losses. Ablation
/// configurations simply lack some side outputs and drop those terms.
pub fn total_loss(outputs: &ForwardOutputs, gt_full: &Tensor, cfg: &ModelConfig) -> Result<LossBundle> {
    check_same_shape("total_loss ground truth", &outputs.pre_s_full, gt_full)?;
    let sal_final = sal_loss(&outputs.pre_s_full, gt_full)?;
    let l_sal_final = scalar(&sal_final)?;
    check_finite("sal_final", l_sal_final)?;

    let branch = |name: &str, b: &BranchForward| -> Result<(Tensor, f64, BTreeMap<String, f64>)> {
        let (t, parts) = branch_loss_parts(
            &b.s,
            b.mask5.as_ref(),
            &b.masks_s,
            gt_full,
            cfg.lambda1,
            cfg.lambda2,
        )?;
        let v = scalar(&t)?;
        check_finite(name, v)?;
        let parts = parts
            .into_iter()
            .map(|(k, v)| (format!("{name}.{k}"), v))
            .collect();
        Ok((t, v, parts))
    };
    let (app_t, l_appearance, app_parts) = branch("appearance", &outputs.appearance)?;
    let (mot_t, l_motion, mot_parts) = branch("motion", &outputs.motion)?;

    let total = ((sal_final + app_t)? + mot_t)?;
    let mut terms = BTreeMap::new();
    terms.insert("sal_final".to_string(), l_sal_final);
    terms.extend(app_parts);
    terms.extend(mot_parts);
    for (k, v) in &terms {
        check_finite(k, *v)?;
    }
    Ok(LossBundle {
        total,
        l_sal_final,
        l_appearance,
        l_motion,
        l_total: l_sal_final + l_appearance + l_motion,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(data: Vec<f32>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn half_prediction_gives_ln2_for_any_binary_target() {
        let pred = Tensor::full(0.5f32, (1, 1, 4, 4), &Device::Cpu).unwrap();
        for gt_val in [0f32, 1f32] {
            let gt = Tensor::full(gt_val, (1, 1, 4, 4), &Device::Cpu).unwrap();
            let loss = value(&bce_loss(&pred, &gt).unwrap());
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "{loss}");
        }
        let gt = t(vec![1., 0., 0., 1., 1., 1., 0., 0., 1., 0., 0., 1., 1., 1., 0., 0.], (1, 1, 4, 4));
        let loss = value(&bce_loss(&pred, &gt).unwrap());
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let gt = t(vec![1., 0., 1., 0.], (1, 1, 2, 2));
        let loss = value(&bce_loss(&gt, &gt).unwrap());
        assert!(loss <= 1.3e-7, "{loss}");
    }

    #[test]
    fn hand_computed_2x2_case() {
        let pred = t(vec![0.9, 0.1, 0.8, 0.2], (1, 1, 2, 2));
        let gt = t(vec![1., 0., 1., 0.], (1, 1, 2, 2));
        let loss = value(&bce_loss(&pred, &gt).unwrap());
        // mean of -ln .9, -ln .9, -ln .8, -ln .8
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
        assert!((expect - 0.164252).abs() < 1e-5);
    }

    #[test]
    fn bce_shape_mismatch_errors() {
        let a = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(bce_loss(&a, &b).is_err());
    }

    #[test]
    fn ssim_of_identical_maps_is_zero() {
        for (h, w) in [(16usize, 16usize), (32, 12), (8, 8), (4, 20)] {
            let n = h * w;
            let data: Vec<f32> = (0..n).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
            let x = t(data, (1, 1, h, w));
            let loss = value(&ssim_loss(&x, &x).unwrap());
            assert!(loss.abs() <= 1e-7, "({h},{w}): {loss}");
        }
    }

    #[test]
    fn ssim_of_equal_constants_is_zero() {
        let x = Tensor::full(0.5f32, (1, 1, 6, 6), &Device::Cpu).unwrap();
        let loss = value(&ssim_loss(&x, &x).unwrap());
        assert!(loss.abs() <= 1e-7, "{loss}");
    }

    #[test]
    fn anti_correlated_checkerboard_loss_is_at_least_one() {
        let n = 12;
        let mut gt = vec![0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                gt[i * n + j] = ((i + j) % 2) as f32;
            }
        }
        let pred: Vec<f32> = gt.iter().map(|v| 1.0 - v).collect();
        let loss = value(&ssim_loss(&t(pred, (1, 1, n, n)), &t(gt, (1, 1, n, n))).unwrap());
        assert!(loss >= 1.0, "anti-correlated loss {loss} < 1");
        assert!(loss <= 2.0 + 1e-6);
    }

    #[test]
    fn branch_loss_assembles_weighted_terms() {
        // s at 16x16, mask5 at 2x2, masks at 16/8/4/2; everything 0.5 and a
        // binary GT: each BCE term is ln 2 and SSIM contributes the
        // constant-versus-structure penalty computed by ssim_loss itself.
        let dev = Device::Cpu;
        let half = |n: usize| Tensor::full(0.5f32, (1, 1, n, n), &dev).unwrap();
        let mut gt = vec![0f32; 64 * 64];
        for (i, v) in gt.iter_mut().enumerate() {
            if (i / 64) < 32 {
                *v = 1.0;
            }
        }
        let gt = t(gt, (1, 1, 64, 64));
        let masks = [half(16), half(8), half(4), half(2)];
        let m5 = half(2);
        let loss = value(
            &branch_loss(&half(16), Some(&m5), &masks, &gt, 0.6, 0.4).unwrap(),
        );
        let gt16 = downsample_gt(&gt, 16, 16).unwrap();
        let ssim_term = value(&ssim_loss(&half(16), &gt16).unwrap());
        let ln2 = std::f64::consts::LN_2;
        let expect = (ln2 + ssim_term) + 0.6 * ln2 + 0.4 * 4.0 * ln2;
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
    }

    #[test]
    fn downsampled_targets_match_supervised_map_sizes() {
        let gt = Tensor::ones((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        for n in [16usize, 8, 4, 2] {
            let d = downsample_gt(&gt, n, n).unwrap();
            assert_eq!(d.dims(), &[1, 1, n, n]);
            let vals = d.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(vals.iter().all(|&v| v == 0.0 || v == 1.0), "binary after resize");
        }
    }
}
