//! Inference over frame sequences: saliency PNGs, optional importance-weight
//! dumps, and saliency overlays.

use std::path::Path;

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::backbone::Branch;
use crate::data::{batch_to_tensors, imageio, load_dataset, Modality};
use crate::error::{Error, Result};
use crate::model::{ModelRole, PsNet};

#[derive(Debug, Clone, Default)]
pub struct InferOptions {
    /// Write per-frame importance-weight statistics next to each map.
    pub dump_importance: bool,
    /// Run a single branch (stage-1/2 checkpoints, debugging).
    pub branch: Option<Branch>,
}

#[derive(Serialize)]
struct ImportanceStats {
    mean: f64,
    min: f64,
    max: f64,
}

/// (B,1,H,W) prediction tensor (first sample) to an (H,W) array.
pub fn tensor_to_gray(t: &Tensor) -> Result<Array2<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let vals = t
        .narrow(0, 0, 1)?
        .flatten_all()?
        .to_dtype(candle_core::DType::F32)?
        .to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), vals)
        .map_err(|e| Error::Dataset(format!("bad prediction shape: {e}")))?)
}

/// Runs the model over every frame pair under `input_root` and writes one
/// 8-bit grayscale PNG per pair at `output_root/{seq}/{frame}.png`.
/// Returns the number of maps written.
pub fn infer(model: &PsNet, input_root: &Path, output_root: &Path, opts: &InferOptions) -> Result<usize> {
    let modality = match opts.branch {
        Some(Branch::Appearance) => Modality::RgbOnly,
        Some(Branch::Motion) => Modality::FlowOnly,
        None => Modality::Both,
    };
    if opts.branch.is_none() && model.role() != ModelRole::Full {
        return Err(Error::Contract(
            "two-stream inference needs a stage-3 checkpoint; pass a branch for single-stream models"
                .into(),
        ));
    }
    let samples = load_dataset(input_root, modality, model.cfg.input_size)?;
    let mut written = 0;
    for sample in &samples {
        let (rgb, flow, _) = batch_to_tensors(&[sample], &model.cfg.normalization, model.cfg.dtype.dtype())?;
        let (map, w) = match opts.branch {
            Some(branch) => {
                let x = if branch == Branch::Appearance { &rgb } else { &flow };
                let out = model.forward_branch(branch, x, false)?;
                (tensor_to_gray(&out.s_full)?, None)
            }
            None => {
                let out = model.forward(&rgb, &flow, false)?;
                (tensor_to_gray(&out.pre_s_full)?, out.w)
            }
        };
        let stem = format!("{:05}", sample.frame_index);
        let out_path = output_root.join(&sample.sequence_id).join(format!("{stem}.png"));
        imageio::save_gray(&out_path, &map)?;
        if opts.dump_importance {
            if let Some(w) = w {
                let vals = w.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
                let stats = ImportanceStats {
                    mean: vals.iter().sum::<f64>() / vals.len() as f64,
                    min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
                    max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
                let json_path = output_root.join(&sample.sequence_id).join(format!("{stem}.w.json"));
                std::fs::write(&json_path, serde_json::to_vec_pretty(&stats)?)?;
            }
        }
        written += 1;
    }
    if written == 0 {
        return Err(Error::Dataset(format!(
            "no frame pairs under {}",
            input_root.display()
        )));
    }
    Ok(written)
}

/// Tints each frame by its predicted saliency (red where salient) and writes
/// the blend; `rgb_root` may be a dataset root (seq/rgb/) or a mirror tree.
pub fn overlay(pred_root: &Path, rgb_root: &Path, output_root: &Path) -> Result<usize> {
    let mut written = 0;
    let mut sequences: Vec<_> = std::fs::read_dir(pred_root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    sequences.sort();
    for seq_dir in &sequences {
        let seq = seq_dir.file_name().unwrap().to_string_lossy().to_string();
        let mut frames: Vec<_> = std::fs::read_dir(seq_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
            .collect();
        frames.sort();
        for pred_path in &frames {
            let stem = pred_path.file_stem().unwrap().to_string_lossy().to_string();
            let candidates = [
                rgb_root.join(&seq).join(format!("{stem}.png")),
                rgb_root.join(&seq).join("rgb").join(format!("{stem}.png")),
                rgb_root.join(&seq).join(format!("{stem}.jpg")),
                rgb_root.join(&seq).join("rgb").join(format!("{stem}.jpg")),
            ];
            let rgb_path = candidates
                .iter()
                .find(|p| p.exists())
                .ok_or_else(|| Error::MissingFile(candidates[0].clone()))?;
            let rgb = imageio::load_rgb(rgb_path)?;
            let pred = imageio::load_gray(pred_path)?;
            let (c, h, w) = rgb.dim();
            if pred.dim() != (h, w) {
                return Err(Error::ShapeMismatch {
                    context: format!("overlay {seq}/{stem}"),
                    expected: format!("{h}x{w}"),
                    actual: format!("{:?}", pred.dim()),
                });
            }
            let mut out = Array3::zeros((c, h, w));
            for y in 0..h {
                for x in 0..w {
                    let p = pred[(y, x)];
                    out[(0, y, x)] = rgb[(0, y, x)] * (1.0 - p) + p;
                    out[(1, y, x)] = rgb[(1, y, x)] * (1.0 - p);
                    out[(2, y, x)] = rgb[(2, y, x)] * (1.0 - p);
                }
            }
            imageio::save_rgb(&output_root.join(&seq).join(format!("{stem}.png")), &out)?;
            written += 1;
        }
    }
    if written == 0 {
        return Err(Error::Dataset(format!(
            "no predictions under {}",
            pred_root.display()
        )));
    }
    Ok(written)
}

// Integration coverage lives in tests/pipeline.rs, where trained checkpoints
// and synthetic sequences are available.
