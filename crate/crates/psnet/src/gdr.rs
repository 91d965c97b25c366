//! Gather Diffusion Reinforcement.
//!
//! A coarse semantic mask from the top encoder level filters every pyramid
//! level, a bidirectional (top-down then bottom-up) pass fuses scales, the
//! fused map is flattened to level-2 resolution, and a diffusion chain of
//! strided convolutions redistributes it back to per-level reinforced
//! features.

use candle_core::Tensor;
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{
    bilinear_resize, conv1x1, conv3x3, conv3x3_s2, mask_sigmoid, upsample2x, Conv2d, ParamStore,
};

pub struct GdrOutput {
    /// Semantic mask at level-5 resolution, values in (0,1); supervised.
    pub mask5: Tensor,
    /// Fused cross-scale features at level-2 resolution.
    pub fused: Tensor,
    /// Reinforced features for levels 2..5.
    pub reinforced: [Tensor; 4],
}

pub struct Gdr {
    mask_conv1: Conv2d,
    mask_conv2: Conv2d,
    lateral: [Conv2d; 4],
    top_down: [Conv2d; 4],
    bottom_up: [Conv2d; 4],
    fuse: Conv2d,
    diffuse_convs: [Conv2d; 4],
}

fn four(v: Vec<Conv2d>) -> Result<[Conv2d; 4]> {
    v.try_into()
        .map_err(|_| Error::Contract("expected exactly 4 per-level convs".into()))
}

impl Gdr {
    pub fn new(ps: &ParamStore, c_d: usize) -> Result<Self> {
        let mask_conv1 = conv3x3(ps, "mask.conv1", c_d, c_d)?;
        let mask_conv2 = conv3x3(ps, "mask.conv2", c_d, 1)?;
        let mut lateral = Vec::new();
        let mut top_down = Vec::new();
        let mut bottom_up = Vec::new();
        for i in 2..=5usize {
            lateral.push(conv1x1(ps, &format!("lateral{i}"), c_d, c_d)?);
            top_down.push(conv3x3(ps, &format!("top_down{i}"), c_d, c_d)?);
            bottom_up.push(conv3x3(ps, &format!("bottom_up{i}"), c_d, c_d)?);
        }
        let fuse = conv3x3(ps, "fuse", 4 * c_d, c_d)?;
        let mut diffuse = vec![conv3x3(ps, "diffuse2", c_d, c_d)?];
        for i in 3..=5usize {
            diffuse.push(conv3x3_s2(ps, &format!("diffuse{i}"), c_d, c_d)?);
        }
        Ok(Self {
            mask_conv1,
            mask_conv2,
            lateral: four(lateral)?,
            top_down: four(top_down)?,
            bottom_up: four(bottom_up)?,
            fuse,
            diffuse_convs: four(diffuse)?,
        })
    }

    /// Coarse semantic mask from the projected level-5 features.
    pub fn semantic_mask(&self, f5: &Tensor) -> Result<Tensor> {
        mask_sigmoid(&self.mask_conv2.forward(&self.mask_conv1.forward(f5)?)?)
    }

    /// Masks each level with the semantic mask upsampled to that level's size.
    pub fn semantic_filter(&self, pyr: &FeaturePyramid, mask5: &Tensor) -> Result<[Tensor; 4]> {
        let mut out = Vec::new();
        for i in 2..=5usize {
            let f = pyr.level(i);
            let (_, _, h, w) = f.dims4()?;
            let m = bilinear_resize(mask5, h, w)?;
            out.push(f.broadcast_mul(&m)?);
        }
        Ok(out.try_into().expect("4 levels"))
    }

    /// Bidirectional cross-scale fusion down to a single level-2 map.
    pub fn gather(&self, pyr: &FeaturePyramid, mask5: &Tensor) -> Result<Tensor> {
        let filtered = self.semantic_filter(pyr, mask5)?;

        // Top-down: deeper maps are upsampled x2 before the addition.
        let mut ys_rev: Vec<Tensor> = Vec::new(); // y5, y4, y3, y2
        for i in (2..=5usize).rev() {
            let lat = self.lateral[i - 2].forward(&filtered[i - 2])?;
            let pre = match ys_rev.last() {
                None => lat,
                Some(deeper) => (lat + upsample2x(deeper)?)?,
            };
            ys_rev.push(self.top_down[i - 2].forward(&pre)?);
        }
        ys_rev.reverse(); // [y2, y3, y4, y5]

        // Bottom-up: shallower maps are average-pooled x2 before the addition.
        let mut yps: Vec<Tensor> = Vec::new(); // y2', y3', y4', y5'
        for i in 2..=5usize {
            let pre = match yps.last() {
                None => ys_rev[0].clone(),
                Some(shallower) => (&ys_rev[i - 2] + shallower.avg_pool2d(2)?)?,
            };
            yps.push(self.bottom_up[i - 2].forward(&pre)?);
        }

        // Flatten everything to level-2 resolution and fuse.
        let (_, _, h2, w2) = yps[0].dims4()?;
        let mut cat = Vec::new();
        for yp in &yps {
            cat.push(bilinear_resize(yp, h2, w2)?);
        }
        let refs: Vec<&Tensor> = cat.iter().collect();
        self.fuse.forward(&Tensor::cat(&refs, 1)?)
    }

    /// Redistributes the fused map back to per-level reinforced features:
    /// stride 1 at level 2, then a stride-2 chain for levels 3..5.
    pub fn diffuse(&self, fused: &Tensor) -> Result<[Tensor; 4]> {
        let f2 = self.diffuse_convs[0].forward(fused)?;
        let f3 = self.diffuse_convs[1].forward(&f2)?;
        let f4 = self.diffuse_convs[2].forward(&f3)?;
        let f5 = self.diffuse_convs[3].forward(&f4)?;
        Ok([f2, f3, f4, f5])
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<GdrOutput> {
        let mask5 = self.semantic_mask(pyr.level(5))?;
        let fused = self.gather(pyr, &mask5)?;
        let reinforced = self.diffuse(&fused)?;
        for (idx, r) in reinforced.iter().enumerate() {
            let want = pyr.level(idx + 2).dims4()?;
            let got = r.dims4()?;
            if (want.2, want.3) != (got.2, got.3) {
                return Err(Error::ShapeMismatch {
                    context: format!("reinforced level {}", idx + 2),
                    expected: format!("{}x{}", want.2, want.3),
                    actual: format!("{}x{}", got.2, got.3),
                });
            }
        }
        Ok(GdrOutput {
            mask5,
            fused,
            reinforced,
        })
    }
}

/// Output of the dominant-feature reinforcement stage.
pub struct ReinforceOutput {
    /// Present only when the stage predicts a semantic mask (GDR).
    pub mask5: Option<Tensor>,
    pub reinforced: [Tensor; 4],
}

/// Strategy producing per-level reinforced dominant features.
pub trait Reinforcer {
    fn name(&self) -> &'static str;
    fn forward(&self, pyr: &FeaturePyramid) -> Result<ReinforceOutput>;
}

pub struct GdrReinforcer {
    pub gdr: Gdr,
}

impl Reinforcer for GdrReinforcer {
    fn name(&self) -> &'static str {
        "gdr"
    }

    fn forward(&self, pyr: &FeaturePyramid) -> Result<ReinforceOutput> {
        let out = self.gdr.forward(pyr)?;
        Ok(ReinforceOutput {
            mask5: Some(out.mask5),
            reinforced: out.reinforced,
        })
    }
}

/// Ablation stand-in: the projected encoder features pass through unchanged.
pub struct PassthroughReinforcer;

impl Reinforcer for PassthroughReinforcer {
    fn name(&self) -> &'static str {
        "pass"
    }

    fn forward(&self, pyr: &FeaturePyramid) -> Result<ReinforceOutput> {
        Ok(ReinforceOutput {
            mask5: None,
            reinforced: pyr.levels().clone(),
        })
    }
}

pub(crate) fn ctor_gdr(ps: &ParamStore, c_d: usize) -> Result<Box<dyn Reinforcer>> {
    Ok(Box::new(GdrReinforcer {
        gdr: Gdr::new(ps, c_d)?,
    }))
}

pub(crate) fn ctor_pass(_ps: &ParamStore, _c_d: usize) -> Result<Box<dyn Reinforcer>> {
    Ok(Box::new(PassthroughReinforcer))
}

pub fn build_reinforcer(name: &str, ps: &ParamStore, c_d: usize) -> Result<Box<dyn Reinforcer>> {
    crate::registry::reinforcers().get(name)?(ps, c_d)
}
