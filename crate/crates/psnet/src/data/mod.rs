//! Dataset ingestion, flow encoding, synthetic clips, and augmentation.
//!
//! Disk layout: `root/{Sequence}/rgb/%05d.png`, `root/{Sequence}/flow/%05d.png`,
//! `root/{Sequence}/gt/%05d.png`. GT is 8-bit single-channel; flow is the
//! 8-bit color-encoded rendering. Single-modality stages load the same layout
//! with the unused directory absent.

pub mod augment;
pub mod flow;
pub mod imageio;
pub mod synth;

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3};

use crate::config::Normalization;
use crate::error::{Error, Result};

pub use augment::{apply_augment, augment, SCALES};
pub use flow::{flow_to_rgb, wheel_color};
pub use synth::{
    generate_clip, render_clip, write_clip, BackgroundKind, DistractorSpec, RenderedClip,
    ShapeKind, SyntheticClipSpec,
};

/// One aligned (frame, flow rendering, mask) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    /// (3, H, W) in [0,1].
    pub rgb: Array3<f32>,
    /// (3, H, W) color-encoded flow in [0,1].
    pub flow_rgb: Array3<f32>,
    /// (H, W) binary mask.
    pub gt: Array2<f32>,
    /// Analytic flow field when the sample is synthetic.
    pub flow_field: Option<(Array2<f32>, Array2<f32>)>,
    pub sequence_id: String,
    pub frame_index: usize,
}

/// Which streams a loading pass must provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// RGB + flow + GT; the last frame of each sequence is dropped.
    Both,
    /// RGB + GT (static pretraining); every frame is a sample.
    RgbOnly,
    /// Flow + GT (temporal pretraining); every flow frame is a sample.
    FlowOnly,
}

fn image_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png") | Some("jpg") | Some("jpeg")) {
            let stem = path.file_stem().unwrap().to_string_lossy().to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn find_frame(dir: &Path, stem: &str) -> Option<PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

/// Loads every sample under `root`, ordered by (sequence, frame). Sizes not
/// divisible by 32 are resized to `input_size` with a logged note; gray GT
/// pixels are binarized at 0.5 with a logged count.
pub fn load_dataset(root: &Path, modality: Modality, input_size: (usize, usize)) -> Result<Vec<VideoSample>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut sequences: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    sequences.sort();
    if sequences.is_empty() {
        return Err(Error::Dataset(format!(
            "no sequences under {}",
            root.display()
        )));
    }

    let mut samples = Vec::new();
    let mut gray_pixels = 0usize;
    for seq_dir in &sequences {
        let seq = seq_dir
            .file_name()
            .unwrap()
            .to_string_lossy()
            .to_string();
        let rgb_dir = seq_dir.join("rgb");
        let flow_dir = seq_dir.join("flow");
        let gt_dir = seq_dir.join("gt");

        let primary = match modality {
            Modality::FlowOnly => &flow_dir,
            _ => &rgb_dir,
        };
        let frames = image_stems(primary)?;
        if frames.is_empty() {
            return Err(Error::Dataset(format!(
                "sequence {seq} has no frames under {}",
                primary.display()
            )));
        }
        let n = frames.len();
        for (idx, (stem, primary_path)) in frames.iter().enumerate() {
            let gt_path = find_frame(&gt_dir, stem)
                .ok_or_else(|| Error::MissingFile(gt_dir.join(format!("{stem}.png"))))?;
            let (gt_raw, gray) = imageio::binarize(&imageio::load_gray(&gt_path)?);
            gray_pixels += gray;

            let (rgb, flow_rgb) = match modality {
                Modality::Both => {
                    let flow_path = match find_frame(&flow_dir, stem) {
                        Some(p) => p,
                        None if idx + 1 == n => continue, // last frame: no pair
                        None => {
                            return Err(Error::MissingFile(
                                flow_dir.join(format!("{stem}.png")),
                            ))
                        }
                    };
                    (imageio::load_rgb(primary_path)?, imageio::load_rgb(&flow_path)?)
                }
                Modality::RgbOnly => {
                    let rgb = imageio::load_rgb(primary_path)?;
                    let zeros = Array3::zeros(rgb.dim());
                    (rgb, zeros)
                }
                Modality::FlowOnly => {
                    let flow = imageio::load_rgb(primary_path)?;
                    let zeros = Array3::zeros(flow.dim());
                    (zeros, flow)
                }
            };

            let mut sample = VideoSample {
                rgb,
                flow_rgb,
                gt: gt_raw,
                flow_field: None,
                sequence_id: seq.clone(),
                frame_index: idx,
            };
            validate_aligned(&sample)?;
            let (h, w) = sample.gt.dim();
            if h % 32 != 0 || w % 32 != 0 {
                log::info!(
                    "resizing {seq}/{stem} from {h}x{w} to {}x{} (not divisible by 32)",
                    input_size.0,
                    input_size.1
                );
                sample = resize_sample(&sample, input_size)?;
            }
            samples.push(sample);
        }
    }
    if gray_pixels > 0 {
        log::info!("binarized {gray_pixels} gray ground-truth pixels at 0.5");
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable samples under {}",
            root.display()
        )));
    }
    Ok(samples)
}

fn validate_aligned(s: &VideoSample) -> Result<()> {
    let (_, h, w) = s.rgb.dim();
    if s.flow_rgb.dim() != (3, h, w) || s.gt.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            context: format!("sample {}/{}", s.sequence_id, s.frame_index),
            expected: format!("3x{h}x{w} maps"),
            actual: format!("flow {:?}, gt {:?}", s.flow_rgb.dim(), s.gt.dim()),
        });
    }
    Ok(())
}

fn resize_sample(s: &VideoSample, size: (usize, usize)) -> Result<VideoSample> {
    let (th, tw) = size;
    let rgb = resize3(&s.rgb, th, tw);
    let flow_rgb = resize3(&s.flow_rgb, th, tw);
    let gt = {
        let g = augment_nearest(&s.gt, th, tw);
        g.map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
    };
    Ok(VideoSample {
        rgb,
        flow_rgb,
        gt,
        flow_field: None,
        sequence_id: s.sequence_id.clone(),
        frame_index: s.frame_index,
    })
}

fn resize3(src: &Array3<f32>, th: usize, tw: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    Array3::from_shape_fn((c, th, tw), |(ch, y, x)| {
        let sy = ((y as f32 + 0.5) * h as f32 / th as f32 - 0.5).max(0.0);
        let sx = ((x as f32 + 0.5) * w as f32 / tw as f32 - 0.5).max(0.0);
        let (y0, x0) = ((sy.floor() as usize).min(h - 1), (sx.floor() as usize).min(w - 1));
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
        src[(ch, y0, x0)] * (1.0 - fy) * (1.0 - fx)
            + src[(ch, y0, x1)] * (1.0 - fy) * fx
            + src[(ch, y1, x0)] * fy * (1.0 - fx)
            + src[(ch, y1, x1)] * fy * fx
    })
}

fn augment_nearest(src: &Array2<f32>, th: usize, tw: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = ((y as f32 + 0.5) * h as f32 / th as f32 - 0.5)
            .round()
            .clamp(0.0, h as f32 - 1.0) as usize;
        let sx = ((x as f32 + 0.5) * w as f32 / tw as f32 - 0.5)
            .round()
            .clamp(0.0, w as f32 - 1.0) as usize;
        src[(sy, sx)]
    })
}

/// Standardized input tensors for a batch of samples:
/// (rgb (B,3,H,W), flow (B,3,H,W), gt (B,1,H,W)).
pub fn batch_to_tensors(
    samples: &[&VideoSample],
    norm: &Normalization,
    dtype: DType,
) -> Result<(Tensor, Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let (h, w) = samples[0].gt.dim();
    let b = samples.len();
    let dev = candle_core::Device::Cpu;
    let mut rgb = Vec::with_capacity(b * 3 * h * w);
    let mut flow = Vec::with_capacity(b * 3 * h * w);
    let mut gt = Vec::with_capacity(b * h * w);
    for s in samples {
        if s.gt.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                context: "batch_to_tensors".into(),
                expected: format!("{h}x{w}"),
                actual: format!("{:?}", s.gt.dim()),
            });
        }
        for c in 0..3 {
            let (m, sd) = (norm.mean_rgb[c], norm.std_rgb[c]);
            rgb.extend(s.rgb.index_axis(ndarray::Axis(0), c).iter().map(|v| (v - m) / sd));
        }
        for c in 0..3 {
            let (m, sd) = (norm.mean_flow[c], norm.std_flow[c]);
            flow.extend(s.flow_rgb.index_axis(ndarray::Axis(0), c).iter().map(|v| (v - m) / sd));
        }
        gt.extend(s.gt.iter().copied());
    }
    let rgb = Tensor::from_vec(rgb, (b, 3, h, w), &dev)?.to_dtype(dtype)?;
    let flow = Tensor::from_vec(flow, (b, 3, h, w), &dev)?.to_dtype(dtype)?;
    let gt = Tensor::from_vec(gt, (b, 1, h, w), &dev)?.to_dtype(dtype)?;
    Ok((rgb, flow, gt))
}
