//! Synthetic moving-shape clips with analytic ground truth and flow.
//!
//! One target shape translates over a textured static background, optionally
//! alongside distractor shapes. The ground truth marks the target only; the
//! flow field holds each moving region's velocity and is rendered through the
//! color wheel, which reproduces the appearance/motion dissociations the
//! model has to separate (e.g. moving distractor, static target).

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flow::flow_to_rgb;
use super::VideoSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeKind {
    Disk { radius: f32 },
    Rectangle { half_w: f32, half_h: f32 },
    Polygon { radius: f32, vertices: usize },
}

impl ShapeKind {
    fn extent(&self) -> f32 {
        match self {
            ShapeKind::Disk { radius } => *radius,
            ShapeKind::Rectangle { half_w, half_h } => half_w.max(*half_h),
            ShapeKind::Polygon { radius, .. } => *radius,
        }
    }

    fn contains(&self, dx: f32, dy: f32, rotation: f32) -> bool {
        match self {
            ShapeKind::Disk { radius } => dx * dx + dy * dy <= radius * radius,
            ShapeKind::Rectangle { half_w, half_h } => dx.abs() <= *half_w && dy.abs() <= *half_h,
            ShapeKind::Polygon { radius, vertices } => {
                let n = (*vertices).max(3);
                // Convex regular polygon: inside iff on the inner side of
                // every edge.
                let vert = |k: usize| {
                    let a = rotation + k as f32 * std::f32::consts::TAU / n as f32;
                    (radius * a.cos(), radius * a.sin())
                };
                for k in 0..n {
                    let (x1, y1) = vert(k);
                    let (x2, y2) = vert((k + 1) % n);
                    let cross = (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Checker,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub shape: ShapeKind,
    pub velocity: (f32, f32),
    /// Start center; drawn from the clip rng when absent.
    pub start: Option<(f32, f32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClipSpec {
    pub seed: u64,
    pub n_frames: usize,
    /// (H, W), both divisible by 32.
    pub size: (usize, usize),
    pub shape: ShapeKind,
    /// Target velocity in pixels per frame (vx, vy).
    pub velocity: (f32, f32),
    pub background: BackgroundKind,
    #[serde(default)]
    pub distractors: Vec<DistractorSpec>,
    /// Target start center; drawn from the clip rng when absent.
    #[serde(default)]
    pub start: Option<(f32, f32)>,
    #[serde(default = "default_sequence_id")]
    pub sequence_id: String,
}

fn default_sequence_id() -> String {
    "clip".to_string()
}

impl SyntheticClipSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h % 32 != 0 {
            return Err(Error::NotDivisible { axis: "height", size: h, divisor: 32 });
        }
        if w % 32 != 0 {
            return Err(Error::NotDivisible { axis: "width", size: w, divisor: 32 });
        }
        if self.n_frames < 2 {
            return Err(Error::Config(format!(
                "n_frames must be at least 2, got {}",
                self.n_frames
            )));
        }
        Ok(())
    }
}

struct Actor {
    shape: ShapeKind,
    start: (f32, f32),
    velocity: (f32, f32),
    rotation: f32,
    color: [f32; 3],
    /// Target actors define the ground truth.
    is_target: bool,
}

impl Actor {
    fn center(&self, frame: usize) -> (f32, f32) {
        (
            self.start.0 + self.velocity.0 * frame as f32,
            self.start.1 + self.velocity.1 * frame as f32,
        )
    }
}

/// All frames of a rendered clip (one more RGB/GT frame than flow fields).
pub struct RenderedClip {
    pub rgb: Vec<Array3<f32>>,
    pub gt: Vec<Array2<f32>>,
    pub flow: Vec<(Array2<f32>, Array2<f32>)>,
    pub sequence_id: String,
}

fn background(kind: BackgroundKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    match kind {
        BackgroundKind::Flat => Array3::from_elem((3, h, w), 0.35),
        BackgroundKind::Gradient => Array3::from_shape_fn((3, h, w), |(c, y, x)| match c {
            0 => 0.2 + 0.4 * x as f32 / w as f32,
            1 => 0.2 + 0.4 * y as f32 / h as f32,
            _ => 0.3,
        }),
        BackgroundKind::Checker => Array3::from_shape_fn((3, h, w), |(_, y, x)| {
            if (x / 8 + y / 8) % 2 == 0 {
                0.28
            } else {
                0.42
            }
        }),
        BackgroundKind::Noise => {
            let base: Array2<f32> =
                Array2::from_shape_fn((h, w), |_| rng.gen_range(0.2f32..0.5));
            Array3::from_shape_fn((3, h, w), |(_, y, x)| base[(y, x)])
        }
    }
}

const PALETTE: [[f32; 3]; 4] = [
    [0.92, 0.15, 0.12],
    [0.10, 0.45, 0.95],
    [0.95, 0.80, 0.10],
    [0.15, 0.85, 0.35],
];

/// Rasterizes every frame of the clip; deterministic in the spec seed.
pub fn render_clip(spec: &SyntheticClipSpec) -> Result<RenderedClip> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = background(spec.background, h, w, &mut rng);

    fn draw_start(
        rng: &mut ChaCha8Rng,
        shape: &ShapeKind,
        given: Option<(f32, f32)>,
        h: usize,
        w: usize,
    ) -> (f32, f32) {
        match given {
            Some(s) => s,
            None => {
                let m = shape.extent() + 2.0;
                (
                    rng.gen_range(m..(w as f32 - m)),
                    rng.gen_range(m..(h as f32 - m)),
                )
            }
        }
    }

    let mut actors = Vec::new();
    for d in &spec.distractors {
        let start = draw_start(&mut rng, &d.shape, d.start, h, w);
        actors.push(Actor {
            shape: d.shape,
            start,
            velocity: d.velocity,
            rotation: rng.gen_range(0f32..std::f32::consts::TAU),
            color: PALETTE[1 + rng.gen_range(0usize..3)],
            is_target: false,
        });
    }
    // Target drawn last so it occludes distractors.
    let start = draw_start(&mut rng, &spec.shape, spec.start, h, w);
    actors.push(Actor {
        shape: spec.shape,
        start,
        velocity: spec.velocity,
        rotation: rng.gen_range(0f32..std::f32::consts::TAU),
        color: PALETTE[0],
        is_target: true,
    });

    // Validation: every actor must keep some overlap with the frame.
    for actor in &actors {
        for t in 0..spec.n_frames {
            let (cx, cy) = actor.center(t);
            let e = actor.shape.extent();
            if cx + e < 0.0 || cy + e < 0.0 || cx - e >= w as f32 || cy - e >= h as f32 {
                return Err(Error::Config(format!(
                    "shape leaves the frame entirely at frame {t} (center {cx:.1},{cy:.1})"
                )));
            }
        }
    }

    let mut rgb_frames = Vec::new();
    let mut gt_frames = Vec::new();
    let mut flow_fields = Vec::new();
    for t in 0..spec.n_frames {
        let mut rgb = bg.clone();
        let mut gt = Array2::zeros((h, w));
        let mut u = Array2::zeros((h, w));
        let mut v = Array2::zeros((h, w));
        for actor in &actors {
            let (cx, cy) = actor.center(t);
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if actor.shape.contains(dx, dy, actor.rotation) {
                        for c in 0..3 {
                            rgb[(c, y, x)] = actor.color[c];
                        }
                        gt[(y, x)] = if actor.is_target { 1.0 } else { 0.0 };
                        u[(y, x)] = actor.velocity.0;
                        v[(y, x)] = actor.velocity.1;
                    }
                }
            }
        }
        rgb_frames.push(rgb);
        gt_frames.push(gt);
        if t + 1 < spec.n_frames {
            flow_fields.push((u, v));
        }
    }
    Ok(RenderedClip {
        rgb: rgb_frames,
        gt: gt_frames,
        flow: flow_fields,
        sequence_id: spec.sequence_id.clone(),
    })
}

/// Generates the trainable samples of a clip: one per frame pair, the last
/// frame dropped.
pub fn generate_clip(spec: &SyntheticClipSpec) -> Result<Vec<VideoSample>> {
    let clip = render_clip(spec)?;
    let mut samples = Vec::new();
    for (t, (u, v)) in clip.flow.iter().enumerate() {
        samples.push(VideoSample {
            rgb: clip.rgb[t].clone(),
            flow_rgb: flow_to_rgb(u, v)?,
            gt: clip.gt[t].clone(),
            flow_field: Some((u.clone(), v.clone())),
            sequence_id: clip.sequence_id.clone(),
            frame_index: t,
        });
    }
    Ok(samples)
}

/// Writes a rendered clip in the dataset layout
/// root/{seq}/{rgb,flow,gt}/%05d.png (flow has one file fewer).
pub fn write_clip(clip: &RenderedClip, root: &std::path::Path) -> Result<()> {
    use super::imageio::{save_gray, save_rgb};
    let seq = root.join(&clip.sequence_id);
    for (t, rgb) in clip.rgb.iter().enumerate() {
        save_rgb(&seq.join(format!("rgb/{t:05}.png")), rgb)?;
        save_gray(&seq.join(format!("gt/{t:05}.png")), &clip.gt[t])?;
    }
    for (t, (u, v)) in clip.flow.iter().enumerate() {
        save_rgb(&seq.join(format!("flow/{t:05}.png")), &flow_to_rgb(u, v)?)?;
    }
    Ok(())
}
