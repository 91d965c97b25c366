//! Training-time augmentation: multi-scale resize with restore-to-size and
//! independent horizontal/vertical flips applied identically to all maps.

use std::sync::Once;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::flow::flow_to_rgb;
use super::VideoSample;
use crate::error::Result;

pub const SCALES: [f32; 3] = [0.75, 1.0, 1.25];

static FLOW_FLIP_NOTE: Once = Once::new();

fn bilinear2(src: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = ((y as f32 + 0.5) * h as f32 / oh as f32 - 0.5).max(0.0);
        let sx = ((x as f32 + 0.5) * w as f32 / ow as f32 - 0.5).max(0.0);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y0, x0) = (y0.min(h - 1), x0.min(w - 1));
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
        src[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
            + src[(y0, x1)] * (1.0 - fy) * fx
            + src[(y1, x0)] * fy * (1.0 - fx)
            + src[(y1, x1)] * fy * fx
    })
}

fn nearest2(src: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = ((y as f32 + 0.5) * h as f32 / oh as f32 - 0.5).round().clamp(0.0, h as f32 - 1.0);
        let sx = ((x as f32 + 0.5) * w as f32 / ow as f32 - 0.5).round().clamp(0.0, w as f32 - 1.0);
        src[(sy as usize, sx as usize)]
    })
}

fn per_channel(src: &Array3<f32>, f: impl Fn(&Array2<f32>) -> Array2<f32>) -> Array3<f32> {
    let views: Vec<Array2<f32>> = (0..src.dim().0)
        .map(|c| f(&src.index_axis(ndarray::Axis(0), c).to_owned()))
        .collect();
    let (h, w) = views[0].dim();
    Array3::from_shape_fn((src.dim().0, h, w), |(c, y, x)| views[c][(y, x)])
}

fn flip2(src: &Array2<f32>, horizontal: bool, vertical: bool) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        src[(sy, sx)]
    })
}

/// Zero-pads (centered) or center-crops to (th, tw).
fn restore2(src: &Array2<f32>, th: usize, tw: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = y as i64 - (th as i64 - h as i64) / 2;
        let sx = x as i64 - (tw as i64 - w as i64) / 2;
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            src[(sy as usize, sx as usize)]
        } else {
            0.0
        }
    })
}

/// Deterministic augmentation core; the random wrapper draws its parameters.
pub fn apply_augment(
    sample: &VideoSample,
    scale: f32,
    hflip: bool,
    vflip: bool,
    target: (usize, usize),
) -> Result<VideoSample> {
    let (th, tw) = target;
    let (h, w) = sample.gt.dim();
    let (sh, sw) = (
        ((h as f32 * scale).round() as usize).max(1),
        ((w as f32 * scale).round() as usize).max(1),
    );

    let resize_rgb = |m: &Array3<f32>| {
        if (sh, sw) == (h, w) {
            m.clone()
        } else {
            per_channel(m, |p| bilinear2(p, sh, sw))
        }
    };
    let restore_rgb =
        |m: Array3<f32>| per_channel(&m, |p| restore2(p, th, tw));
    let flip_rgb = |m: Array3<f32>| per_channel(&m, |p| flip2(p, hflip, vflip));

    let rgb = flip_rgb(restore_rgb(resize_rgb(&sample.rgb)));

    let gt_scaled = if (sh, sw) == (h, w) {
        sample.gt.clone()
    } else {
        nearest2(&sample.gt, sh, sw)
    };
    let gt = flip2(&restore2(&gt_scaled, th, tw), hflip, vflip);

    let (flow_rgb, flow_field) = match &sample.flow_field {
        Some((u, v)) => {
            // Analytic flow: transform the field, mirror the flipped
            // component's sign, re-render.
            let scale_field = |f: &Array2<f32>| {
                if (sh, sw) == (h, w) {
                    f.clone()
                } else {
                    bilinear2(f, sh, sw)
                }
            };
            let mut u2 = flip2(&restore2(&scale_field(u), th, tw), hflip, vflip);
            let mut v2 = flip2(&restore2(&scale_field(v), th, tw), hflip, vflip);
            if hflip {
                u2.mapv_inplace(|x| -x);
            }
            if vflip {
                v2.mapv_inplace(|x| -x);
            }
            let rendered = flow_to_rgb(&u2, &v2)?;
            (rendered, Some((u2, v2)))
        }
        None => {
            if hflip || vflip {
                FLOW_FLIP_NOTE.call_once(|| {
                    log::warn!(
                        "flipping color-encoded flow as an image; directional hue is not re-mirrored"
                    );
                });
            }
            (flip_rgb(restore_rgb(resize_rgb(&sample.flow_rgb))), None)
        }
    };

    Ok(VideoSample {
        rgb,
        flow_rgb,
        gt,
        flow_field,
        sequence_id: sample.sequence_id.clone(),
        frame_index: sample.frame_index,
    })
}

/// Draws one scale from {0.75, 1, 1.25} and two independent flip coins.
pub fn augment(sample: &VideoSample, rng: &mut ChaCha8Rng, target: (usize, usize)) -> Result<VideoSample> {
    let scale = SCALES[rng.gen_range(0..SCALES.len())];
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    apply_augment(sample, scale, hflip, vflip, target)
}
