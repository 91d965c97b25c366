//! Saliency evaluation: maximum F-measure (beta^2 = 0.3, 256 thresholds on
//! 8-bit quantized predictions), structure measure (alpha = 0.5), and mean
//! absolute error, plus directory-tree evaluation and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::imageio;
use crate::error::{Error, Result};

pub const BETA_SQ: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
pub const THRESHOLDS: usize = 256;

fn check_inputs(s: &Array2<f32>, g: &Array2<f32>) -> Result<()> {
    if s.dim() != g.dim() {
        return Err(Error::ShapeMismatch {
            context: "metric inputs".into(),
            expected: format!("{:?}", s.dim()),
            actual: format!("{:?}", g.dim()),
        });
    }
    if s.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract("saliency values must lie in [0,1]".into()));
    }
    if g.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("ground truth must be binary".into()));
    }
    Ok(())
}

/// Mean absolute error between a saliency map and a binary mask.
pub fn mae(s: &Array2<f32>, g: &Array2<f32>) -> Result<f64> {
    check_inputs(s, g)?;
    let n = s.len() as f64;
    let sum: f64 = s
        .iter()
        .zip(g.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / n)
}

/// Precision/recall/F arrays over the 256-threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
}

impl FCurve {
    fn zeros() -> Self {
        Self {
            precision: vec![0.0; THRESHOLDS],
            recall: vec![0.0; THRESHOLDS],
            f: vec![0.0; THRESHOLDS],
        }
    }
}

/// Maximum F-measure over thresholds {0..255}/255 after 8-bit quantization.
/// Returns `None` for an all-background ground truth (undefined for the
/// frame; callers exclude it from aggregation).
pub fn max_f_measure(s: &Array2<f32>, g: &Array2<f32>) -> Result<Option<(f64, FCurve)>> {
    check_inputs(s, g)?;
    let mut fg_hist = [0u64; THRESHOLDS];
    let mut bg_hist = [0u64; THRESHOLDS];
    for (&sv, &gv) in s.iter().zip(g.iter()) {
        let q = ((sv * 255.0).round() as usize).min(255);
        if gv == 1.0 {
            fg_hist[q] += 1;
        } else {
            bg_hist[q] += 1;
        }
    }
    let total_fg: u64 = fg_hist.iter().sum();
    if total_fg == 0 {
        return Ok(None);
    }
    let mut curve = FCurve::zeros();
    let mut best = 0f64;
    let mut tp: u64 = fg_hist.iter().sum();
    let mut fp: u64 = bg_hist.iter().sum();
    for t in 0..THRESHOLDS {
        if t > 0 {
            tp -= fg_hist[t - 1];
            fp -= bg_hist[t - 1];
        }
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = tp as f64 / total_fg as f64;
        let denom = BETA_SQ * precision + recall;
        let f = if denom > 0.0 {
            (1.0 + BETA_SQ) * precision * recall / denom
        } else {
            0.0
        };
        curve.precision[t] = precision;
        curve.recall[t] = recall;
        curve.f[t] = f;
        best = best.max(f);
    }
    Ok(Some((best, curve)))
}

fn mean(v: impl Iterator<Item = f64>, n: f64) -> f64 {
    v.sum::<f64>() / n
}

fn region_values<'a>(
    s: &'a Array2<f32>,
    g: &'a Array2<f32>,
    want_fg: bool,
) -> impl Iterator<Item = f64> + 'a {
    s.iter().zip(g.iter()).filter_map(move |(&sv, &gv)| {
        if (gv == 1.0) == want_fg {
            Some(if want_fg { sv as f64 } else { 1.0 - sv as f64 })
        } else {
            None
        }
    })
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let x = mean(values.iter().copied(), n as f64);
    let sigma = if n > 1 {
        let var = values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        var.sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(s: &Array2<f32>, g: &Array2<f32>) -> f64 {
    let fg: Vec<f64> = region_values(s, g, true).collect();
    let bg: Vec<f64> = region_values(s, g, false).collect();
    let u = g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Foreground centroid, 1-based with MATLAB-style rounding.
fn centroid(g: &Array2<f32>) -> (usize, usize) {
    let (h, w) = g.dim();
    let total: f64 = g.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return (((w as f64) / 2.0).round() as usize, ((h as f64) / 2.0).round() as usize);
    }
    let mut col_sum = 0f64;
    let mut row_sum = 0f64;
    for y in 0..h {
        for x in 0..w {
            let v = g[(y, x)] as f64;
            col_sum += v * (x as f64 + 1.0);
            row_sum += v * (y as f64 + 1.0);
        }
    }
    (
        (col_sum / total).round() as usize,
        (row_sum / total).round() as usize,
    )
}

fn region_ssim(p: &Array2<f32>, g: &Array2<f32>) -> f64 {
    let n = p.len() as f64;
    let x = mean(p.iter().map(|&v| v as f64), n);
    let y = mean(g.iter().map(|&v| v as f64), n);
    let denom = n - 1.0 + f64::EPSILON;
    let sigma_x = p.iter().map(|&v| (v as f64 - x).powi(2)).sum::<f64>() / denom;
    let sigma_y = g.iter().map(|&v| (v as f64 - y).powi(2)).sum::<f64>() / denom;
    let sigma_xy = p
        .iter()
        .zip(g.iter())
        .map(|(&a, &b)| (a as f64 - x) * (b as f64 - y))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x + sigma_y);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(s: &Array2<f32>, g: &Array2<f32>) -> f64 {
    let (h, w) = g.dim();
    let (cx, cy) = centroid(g);
    let (cx, cy) = (cx.clamp(1, w), cy.clamp(1, h));
    let area = (h * w) as f64;
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let mut total = 0f64;
    let mut w_acc = 0f64;
    for (idx, (ys, xs)) in quads.iter().enumerate() {
        let (rh, rw) = (ys.len(), xs.len());
        let weight = if idx < 3 {
            (rh * rw) as f64 / area
        } else {
            1.0 - w_acc
        };
        if idx < 3 {
            w_acc += weight;
        }
        if rh == 0 || rw == 0 {
            continue;
        }
        let ps = s.slice(ndarray::s![ys.clone(), xs.clone()]).to_owned();
        let gs = g.slice(ndarray::s![ys.clone(), xs.clone()]).to_owned();
        total += weight * region_ssim(&ps, &gs);
    }
    total
}

/// Structure measure: alpha-weighted object and region terms, with the
/// degenerate all-background / all-foreground conventions.
pub fn s_measure(s: &Array2<f32>, g: &Array2<f32>) -> Result<f64> {
    check_inputs(s, g)?;
    let n = g.len() as f64;
    let fg_mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
    let s_mean = s.iter().map(|&v| v as f64).sum::<f64>() / n;
    if fg_mean == 0.0 {
        return Ok(1.0 - s_mean);
    }
    if fg_mean == 1.0 {
        return Ok(s_mean);
    }
    let q = S_ALPHA * s_object(s, g) + (1.0 - S_ALPHA) * s_region(s, g);
    Ok(q.max(0.0))
}

/// Per-sequence or aggregate (max-F, S-measure, MAE); max-F is absent when
/// every contributing frame had an all-background ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub max_f: Option<f64>,
    pub s_measure: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sequence: BTreeMap<String, MetricTriple>,
    pub aggregate: MetricTriple,
    pub frames: usize,
    /// Frames excluded from the max-F aggregate (all-background GT).
    pub undefined_max_f_frames: usize,
    /// Mean precision/recall/F curves over the defined frames.
    pub f_curve: FCurve,
}

#[derive(Default)]
struct Accum {
    mae_sum: f64,
    s_sum: f64,
    frames: usize,
    f_sum: f64,
    f_frames: usize,
}

impl Accum {
    fn add(&mut self, mae: f64, s: f64, f: Option<f64>) {
        self.mae_sum += mae;
        self.s_sum += s;
        self.frames += 1;
        if let Some(f) = f {
            self.f_sum += f;
            self.f_frames += 1;
        }
    }

    fn triple(&self) -> MetricTriple {
        MetricTriple {
            max_f: if self.f_frames > 0 {
                Some(self.f_sum / self.f_frames as f64)
            } else {
                None
            },
            s_measure: self.s_sum / self.frames.max(1) as f64,
            mae: self.mae_sum / self.frames.max(1) as f64,
        }
    }
}

/// Frames of one sequence under the evaluation ground-truth root. Two
/// layouts are accepted: a mirror of the prediction tree
/// (`gt_root/{seq}/%05d.png`) or a dataset tree (`gt_root/{seq}/gt/%05d.png`,
/// where the last frame of each sequence has no prediction and is skipped).
fn gt_frames(seq_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let nested = seq_dir.join("gt");
    let mut frames = Vec::new();
    let dir = if nested.is_dir() { &nested } else { seq_dir };
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png") | Some("jpg") | Some("jpeg")) {
            frames.push((path.file_stem().unwrap().to_string_lossy().to_string(), path));
        }
    }
    frames.sort();
    if nested.is_dir() && !frames.is_empty() {
        frames.pop(); // frame-pair convention: last frame has no prediction
    }
    Ok(frames)
}

/// Evaluates a prediction tree against a ground-truth tree.
pub fn evaluate_dataset(pred_root: &Path, gt_root: &Path) -> Result<MetricReport> {
    if !gt_root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", gt_root.display())));
    }
    let mut sequences: Vec<PathBuf> = std::fs::read_dir(gt_root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    sequences.sort();

    let mut per_sequence = BTreeMap::new();
    let mut overall = Accum::default();
    let mut undefined = 0usize;
    let mut curve_sum = FCurve::zeros();
    let mut curve_frames = 0usize;

    for seq_dir in &sequences {
        let seq = seq_dir.file_name().unwrap().to_string_lossy().to_string();
        let frames = gt_frames(seq_dir)?;
        if frames.is_empty() {
            continue;
        }
        let mut acc = Accum::default();
        for (stem, gt_path) in &frames {
            let pred_path = ["png", "jpg", "jpeg"]
                .iter()
                .map(|e| pred_root.join(&seq).join(format!("{stem}.{e}")))
                .find(|p| p.exists())
                .ok_or_else(|| Error::MissingFile(pred_root.join(&seq).join(format!("{stem}.png"))))?;
            let pred = imageio::load_gray(&pred_path)?;
            let (gt, _) = imageio::binarize(&imageio::load_gray(gt_path)?);
            let m = mae(&pred, &gt)?;
            let s = s_measure(&pred, &gt)?;
            let f = match max_f_measure(&pred, &gt)? {
                Some((best, curve)) => {
                    for t in 0..THRESHOLDS {
                        curve_sum.precision[t] += curve.precision[t];
                        curve_sum.recall[t] += curve.recall[t];
                        curve_sum.f[t] += curve.f[t];
                    }
                    curve_frames += 1;
                    Some(best)
                }
                None => {
                    undefined += 1;
                    None
                }
            };
            acc.add(m, s, f);
            overall.add(m, s, f);
        }
        per_sequence.insert(seq, acc.triple());
    }

    if overall.frames == 0 {
        return Err(Error::Dataset(format!(
            "no evaluable frames under {}",
            gt_root.display()
        )));
    }
    if undefined > 0 {
        log::warn!("{undefined} frame(s) had all-background ground truth; excluded from max-F");
    }
    let mut f_curve = curve_sum;
    if curve_frames > 0 {
        for t in 0..THRESHOLDS {
            f_curve.precision[t] /= curve_frames as f64;
            f_curve.recall[t] /= curve_frames as f64;
            f_curve.f[t] /= curve_frames as f64;
        }
    }
    Ok(MetricReport {
        per_sequence,
        aggregate: overall.triple(),
        frames: overall.frames,
        undefined_max_f_frames: undefined,
        f_curve,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "  n/a".to_string(),
    }
}

/// Writes the human-readable table at `path` and the machine-readable JSON
/// next to it; returns (table path, json path).
pub fn write_report(report: &MetricReport, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let (txt_path, json_path) = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        (path.with_extension("txt"), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.with_extension("json"))
    };
    if let Some(dir) = txt_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut table = String::new();
    table.push_str(&format!(
        "{:<24} {:>8} {:>8} {:>8}\n",
        "sequence", "maxF", "Sm", "MAE"
    ));
    for (seq, t) in &report.per_sequence {
        table.push_str(&format!(
            "{:<24} {:>8} {:>8.4} {:>8.4}\n",
            seq,
            fmt_opt(t.max_f),
            t.s_measure,
            t.mae
        ));
    }
    table.push_str(&format!(
        "{:<24} {:>8} {:>8.4} {:>8.4}\n",
        "aggregate",
        fmt_opt(report.aggregate.max_f),
        report.aggregate.s_measure,
        report.aggregate.mae
    ));
    table.push_str(&format!(
        "frames: {}  undefined max-F frames: {}\n",
        report.frames, report.undefined_max_f_frames
    ));
    std::fs::write(&txt_path, table)?;
    let json = serde_json::to_vec_pretty(report)?;
    std::fs::write(&json_path, json)?;
    Ok((txt_path, json_path))
}

pub fn read_report_json(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read(path)?;
    Ok(serde_json::from_slice(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(data: Vec<f32>, h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_vec((h, w), data).unwrap()
    }

    #[test]
    fn mae_trivials() {
        let g = arr(vec![1., 0., 1., 0.], 2, 2);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        let ones = Array2::from_elem((3, 3), 1.0f32);
        let zeros = Array2::zeros((3, 3));
        assert_eq!(mae(&ones, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn mae_exhaustive_4x4() {
        let s = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32 / 16.0);
        let g = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 1.0 } else { 0.0 });
        // Brute-force oracle.
        let mut sum = 0f64;
        for y in 0..4 {
            for x in 0..4 {
                sum += (s[(y, x)] as f64 - g[(y, x)] as f64).abs();
            }
        }
        let expect = sum / 16.0;
        assert!((mae(&s, &g).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mae_size_mismatch_errors() {
        let a = Array2::zeros((2, 2));
        let b = Array2::zeros((3, 3));
        assert!(mae(&a, &b).is_err());
    }

    #[test]
    fn max_f_of_exact_binary_prediction_is_one() {
        let g = arr(vec![1., 0., 1., 0., 1., 1., 0., 0., 0.], 3, 3);
        let (best, _) = max_f_measure(&g, &g).unwrap().unwrap();
        assert!((best - 1.0).abs() < 1e-12, "{best}");
    }

    #[test]
    fn zero_prediction_scores_only_the_all_positive_baseline() {
        let s = Array2::zeros((3, 3));
        let mut g = Array2::zeros((3, 3));
        g[(1, 1)] = 1.0;
        // With the >= binarization, threshold 0 marks everything positive, so
        // a contrast-free prediction still scores the all-positive baseline;
        // every other threshold yields TP = 0.
        let (best, curve) = max_f_measure(&s, &g).unwrap().unwrap();
        let p = 1.0 / 9.0;
        let baseline = (1.0 + BETA_SQ) * p * 1.0 / (BETA_SQ * p + 1.0);
        assert!((best - baseline).abs() < 1e-12, "{best} vs {baseline}");
        // Above threshold 0 there are no positives at all.
        assert_eq!(curve.f[1], 0.0);
    }

    #[test]
    fn max_f_matches_per_threshold_recount() {
        let s = Array2::from_shape_fn((4, 4), |(y, x)| ((y * 4 + x) as f32) / 15.0);
        let g = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 1.0 } else { 0.0 });
        let (best, curve) = max_f_measure(&s, &g).unwrap().unwrap();
        let mut oracle_best = 0f64;
        for t in 0..256usize {
            let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
            for y in 0..4 {
                for x in 0..4 {
                    let q = (s[(y, x)] * 255.0).round() as usize;
                    let pos = q >= t;
                    match (pos, g[(y, x)] == 1.0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fnn += 1,
                        _ => {}
                    }
                }
            }
            let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let r = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
            let f = if BETA_SQ * p + r > 0.0 {
                1.3 * p * r / (BETA_SQ * p + r)
            } else {
                0.0
            };
            assert!((curve.f[t] - f).abs() < 1e-12, "t={t}");
            oracle_best = oracle_best.max(f);
        }
        assert_eq!(best, oracle_best);
    }

    #[test]
    fn recall_is_non_increasing_in_threshold() {
        let s = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 31 + x * 7) % 64) as f32 / 63.0);
        let g = Array2::from_shape_fn((8, 8), |(y, x)| if (x + y) % 3 == 0 { 1.0 } else { 0.0 });
        let (_, curve) = max_f_measure(&s, &g).unwrap().unwrap();
        for t in 1..256 {
            assert!(curve.recall[t] <= curve.recall[t - 1] + 1e-15);
        }
    }

    #[test]
    fn all_background_gt_is_undefined() {
        let s = Array2::from_elem((4, 4), 0.3f32);
        let g = Array2::zeros((4, 4));
        assert!(max_f_measure(&s, &g).unwrap().is_none());
    }

    #[test]
    fn binary_prediction_max_f_equals_single_threshold_f() {
        let s = arr(vec![1., 0., 0., 1., 1., 0., 0., 0., 1.], 3, 3);
        let g = arr(vec![1., 1., 0., 1., 0., 0., 0., 0., 1.], 3, 3);
        let (best, _) = max_f_measure(&s, &g).unwrap().unwrap();
        // Single-threshold F of the binary map itself.
        let (tp, fp, fnn) = (3.0, 1.0, 1.0);
        let p: f64 = tp / (tp + fp);
        let r: f64 = tp / (tp + fnn);
        let f = 1.3 * p * r / (BETA_SQ * p + r);
        assert!((best - f).abs() < 1e-12, "{best} vs {f}");
    }

    #[test]
    fn s_measure_perfect_binary_is_one() {
        let g = Array2::from_shape_fn((8, 8), |(y, x)| if y >= 2 && x >= 3 && y < 6 { 1.0 } else { 0.0 });
        let s = s_measure(&g, &g).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn s_measure_degenerate_conventions() {
        let g = Array2::zeros((4, 4));
        let s0 = Array2::zeros((4, 4));
        let s1 = Array2::from_elem((4, 4), 1.0f32);
        assert_eq!(s_measure(&s0, &g).unwrap(), 1.0);
        assert_eq!(s_measure(&s1, &g).unwrap(), 0.0);
        let g1 = Array2::from_elem((4, 4), 1.0f32);
        assert_eq!(s_measure(&s1, &g1).unwrap(), 1.0);
        assert_eq!(s_measure(&s0, &g1).unwrap(), 0.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut per_sequence = BTreeMap::new();
        per_sequence.insert(
            "a".to_string(),
            MetricTriple { max_f: Some(0.125), s_measure: 0.6253627193817, mae: 0.03125 },
        );
        let report = MetricReport {
            per_sequence,
            aggregate: MetricTriple { max_f: Some(0.125), s_measure: 0.6253627193817, mae: 0.03125 },
            frames: 2,
            undefined_max_f_frames: 0,
            f_curve: FCurve::zeros(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        let (txt, json) = write_report(&report, &path).unwrap();
        assert!(txt.exists());
        let back = read_report_json(&json).unwrap();
        assert_eq!(back, report);
    }
}
