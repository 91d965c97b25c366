//! Shared test support: brute-force metric oracles written straight from the
//! definitions (plain loops, no shared code with the implementations) and a
//! central-difference gradient checker.

#![allow(dead_code)]

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use ndarray::Array2;

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

pub fn mae_oracle(s: &Array2<f32>, g: &Array2<f32>) -> f64 {
    let (h, w) = s.dim();
    let mut total = 0f64;
    for y in 0..h {
        for x in 0..w {
            total += (s[(y, x)] as f64 - g[(y, x)] as f64).abs();
        }
    }
    total / (h * w) as f64
}

/// 256-threshold sweep computed by recounting every pixel at every threshold.
/// Returns None when the ground truth has no foreground.
pub fn max_f_oracle(s: &Array2<f32>, g: &Array2<f32>) -> Option<f64> {
    let (h, w) = s.dim();
    let mut any_fg = false;
    for y in 0..h {
        for x in 0..w {
            if g[(y, x)] == 1.0 {
                any_fg = true;
            }
        }
    }
    if !any_fg {
        return None;
    }
    let mut best = 0f64;
    for t in 0..256usize {
        let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
        for y in 0..h {
            for x in 0..w {
                let q = (s[(y, x)] * 255.0).round() as usize;
                let positive = q >= t;
                let fg = g[(y, x)] == 1.0;
                if positive && fg {
                    tp += 1;
                } else if positive {
                    fp += 1;
                } else if fg {
                    fnn += 1;
                }
            }
        }
        let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let r = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
        let f = if 0.3 * p + r > 0.0 { 1.3 * p * r / (0.3 * p + r) } else { 0.0 };
        if f > best {
            best = f;
        }
    }
    Some(best)
}

fn mean_of(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn sample_std(vals: &[f64]) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let m = mean_of(vals);
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() as f64 - 1.0)).sqrt()
}

fn object_term(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let x = mean_of(vals);
    let sigma = sample_std(vals);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn region_ssim_term(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean_of(p);
    let y = mean_of(g);
    let d = n - 1.0 + f64::EPSILON;
    let mut sx = 0f64;
    let mut sy = 0f64;
    let mut sxy = 0f64;
    for (a, b) in p.iter().zip(g.iter()) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure written straight from the definition: object term from
/// foreground/background means and deviations, region term from SSIM over
/// the four centroid quadrants with area weights, alpha = 0.5.
pub fn s_measure_oracle(s: &Array2<f32>, g: &Array2<f32>) -> f64 {
    let (h, w) = s.dim();
    let n = (h * w) as f64;
    let mut fg_total = 0f64;
    let mut s_total = 0f64;
    for y in 0..h {
        for x in 0..w {
            fg_total += g[(y, x)] as f64;
            s_total += s[(y, x)] as f64;
        }
    }
    if fg_total == 0.0 {
        return 1.0 - s_total / n;
    }
    if fg_total == n {
        return s_total / n;
    }

    // Object-aware term.
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if g[(y, x)] == 1.0 {
                fg_vals.push(s[(y, x)] as f64);
            } else {
                bg_vals.push(1.0 - s[(y, x)] as f64);
            }
        }
    }
    let u = fg_total / n;
    let s_object = u * object_term(&fg_vals) + (1.0 - u) * object_term(&bg_vals);

    // Region-aware term: 1-based centroid with round-half-away-from-zero.
    let mut col_acc = 0f64;
    let mut row_acc = 0f64;
    for y in 0..h {
        for x in 0..w {
            let v = g[(y, x)] as f64;
            col_acc += v * (x as f64 + 1.0);
            row_acc += v * (y as f64 + 1.0);
        }
    }
    let cx = ((col_acc / fg_total).round() as usize).clamp(1, w);
    let cy = ((row_acc / fg_total).round() as usize).clamp(1, h);

    let collect = |y0: usize, y1: usize, x0: usize, x1: usize| -> (Vec<f64>, Vec<f64>) {
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                ps.push(s[(y, x)] as f64);
                gs.push(g[(y, x)] as f64);
            }
        }
        (ps, gs)
    };
    let area = n;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let mut s_region = 0f64;
    for (weight, (y0, y1, x0, x1)) in [
        (w1, (0, cy, 0, cx)),
        (w2, (0, cy, cx, w)),
        (w3, (cy, h, 0, cx)),
        (w4, (cy, h, cx, w)),
    ] {
        if y1 > y0 && x1 > x0 {
            let (ps, gs) = collect(y0, y1, x0, x1);
            s_region += weight * region_ssim_term(&ps, &gs);
        }
    }

    (0.5 * s_object + 0.5 * s_region).max(0.0)
}

/// Reference SSIM loss: valid 11x11 Gaussian windows (sigma 1.5), plain
/// double loop at f64.
pub fn ssim_loss_oracle(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let n = 11usize;
    let sigma = 1.5f64;
    let half = (n as f64 - 1.0) / 2.0;
    let mut g1d: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g1d.iter().sum();
    for v in &mut g1d {
        *v /= s;
    }
    let (h, w) = pred.dim();
    assert!(h >= n && w >= n, "oracle expects inputs at least the window size");
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0f64;
    let mut count = 0usize;
    for oy in 0..=(h - n) {
        for ox in 0..=(w - n) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wgt = g1d[i] * g1d[j];
                    let a = pred[(oy + i, ox + j)];
                    let b = gt[(oy + i, ox + j)];
                    mx += wgt * a;
                    my += wgt * b;
                    mxx += wgt * a * a;
                    myy += wgt * b * b;
                    mxy += wgt * a * b;
                }
            }
            let sx = mxx - mx * mx;
            let sy = myy - my * my;
            let sxy = mxy - mx * my;
            let ssim = ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sx + sy + c2));
            total += ssim;
            count += 1;
        }
    }
    1.0 - total / count as f64
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

pub struct FdOutcome {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
}

/// Central-difference check of analytic gradients for the chosen
/// (variable, element) pairs. `loss` recomputes the objective from the
/// current variable values; the variables are restored afterwards.
pub fn finite_diff_check(
    vars: &[(String, Var)],
    picks: &[(usize, usize)],
    grads: &GradStore,
    mut loss: impl FnMut() -> f64,
    h: f64,
    tol: f64,
) -> FdOutcome {
    let mut failures = 0;
    let mut worst = 0f64;
    for &(vi, ei) in picks {
        let (name, var) = &vars[vi];
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g
                .flatten_all()
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[ei],
            None => 0.0,
        };
        let base: Vec<f64> = var
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let shape = var.as_tensor().dims().to_vec();
        let dtype = var.as_tensor().dtype();
        let dev = var.as_tensor().device().clone();
        let set_elem = |value: f64| {
            let mut vals = base.clone();
            vals[ei] = value;
            let t = Tensor::from_vec(vals, shape.as_slice(), &dev)
                .unwrap()
                .to_dtype(dtype)
                .unwrap();
            var.set(&t).unwrap();
        };
        set_elem(base[ei] + h);
        let plus = loss();
        set_elem(base[ei] - h);
        let minus = loss();
        set_elem(base[ei]);
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if err > worst {
            worst = err;
        }
        if err > tol {
            failures += 1;
            eprintln!("fd mismatch {name}[{ei}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {err:.3e})");
        }
    }
    FdOutcome {
        checked: picks.len(),
        failures,
        worst_rel_err: worst,
    }
}

/// Deterministic (variable, element) picks covering distinct variables.
pub fn pick_elements(vars: &[(String, Var)], count: usize, seed: u64) -> Vec<(usize, usize)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for k in 0..count {
        let vi = if count >= vars.len() && k < vars.len() {
            k // at least one element from every variable when possible
        } else {
            rng.gen_range(0..vars.len())
        };
        let n = vars[vi].1.elem_count();
        picks.push((vi, rng.gen_range(0..n)));
    }
    picks
}
