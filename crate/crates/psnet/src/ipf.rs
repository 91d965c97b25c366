//! Importance Perception Fusion and the interchangeable branch-fusion
//! strategies.
//!
//! Every strategy keeps the common-response product of the two level-2
//! decoder outputs and differs only in how the importance-weighted map is
//! formed: "ipf" learns a channel weight from level-5 encoder statistics,
//! "add"/"concat" are the plain variants, and "channel-attention" learns the
//! weight from the decoder features themselves.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{conv1x1, conv3x3, global_avg_pool, mask_sigmoid, Conv2d, Linear, ParamStore};

/// Maps produced by a fusion strategy.
pub struct FusedMaps {
    /// Final prediction at level-2 resolution, values in (0,1).
    pub pre_s: Tensor,
    /// Importance-weighted (or otherwise fused) features.
    pub f_fused: Tensor,
    /// Common response f2_a * f2_m.
    pub f_c: Tensor,
    /// Channel-wise importance weight, when the strategy learns one.
    pub w: Option<Tensor>,
}

pub trait FusionStrategy {
    fn name(&self) -> &'static str;
    fn forward(
        &self,
        f2_a: &Tensor,
        f2_m: &Tensor,
        f5_a: &Tensor,
        f5_m: &Tensor,
    ) -> Result<FusedMaps>;
}

fn check_pair(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{:?}", a.dims()),
            actual: format!("{:?}", b.dims()),
        });
    }
    Ok(())
}

/// Two stacked 3x3 convolutions and a sigmoid over the concatenated common
/// and fused maps; shared shape across all strategies.
struct PredictionHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl PredictionHead {
    fn new(ps: &ParamStore, c_d: usize) -> Result<Self> {
        Ok(Self {
            conv1: conv3x3(ps, "conv1", 2 * c_d, c_d)?,
            conv2: conv3x3(ps, "conv2", c_d, 1)?,
        })
    }

    fn forward(&self, f_c: &Tensor, f_fused: &Tensor) -> Result<Tensor> {
        let cat = Tensor::cat(&[f_c, f_fused], 1)?;
        mask_sigmoid(&self.conv2.forward(&self.conv1.forward(&cat)?)?)
    }
}

/// Convex combination of the two streams by a per-channel weight in (0,1).
fn weighted_blend(f2_a: &Tensor, f2_m: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = f2_a.dims4()?;
    let w4 = w.reshape((b, c, 1, 1))?;
    let one_minus = (1.0 - &w4)?;
    Ok((f2_a.broadcast_mul(&w4)? + f2_m.broadcast_mul(&one_minus)?)?)
}

/// The importance-perception fusion: weight learned from level-5 encoder
/// statistics of both streams.
pub struct IpfFusion {
    fc: Linear,
    head: PredictionHead,
}

impl IpfFusion {
    pub fn new(ps: &ParamStore, c_d: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(&ps.scope("fc"), 2 * c_d, c_d)?,
            head: PredictionHead::new(&ps.scope("head"), c_d)?,
        })
    }

    /// W = sigmoid(FC(Cat[GAP(f5_a), GAP(f5_m)])), shape (B, C_d).
    pub fn importance_weight(&self, f5_a: &Tensor, f5_m: &Tensor) -> Result<Tensor> {
        check_pair("importance_weight level-5 inputs", f5_a, f5_m)?;
        let stats = Tensor::cat(&[global_avg_pool(f5_a)?, global_avg_pool(f5_m)?], D::Minus1)?;
        mask_sigmoid(&self.fc.forward(&stats)?)
    }

    /// Blends the decoder outputs with an explicit weight; exposed so the
    /// endpoint identities are testable with forced weights.
    pub fn fuse_with_weight(
        &self,
        f2_a: &Tensor,
        f2_m: &Tensor,
        w: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        check_pair("ipf_fuse decoder inputs", f2_a, f2_m)?;
        let f_imp = weighted_blend(f2_a, f2_m, w)?;
        let f_c = (f2_a * f2_m)?;
        Ok((f_imp, f_c))
    }
}

impl FusionStrategy for IpfFusion {
    fn name(&self) -> &'static str {
        "ipf"
    }

    fn forward(
        &self,
        f2_a: &Tensor,
        f2_m: &Tensor,
        f5_a: &Tensor,
        f5_m: &Tensor,
    ) -> Result<FusedMaps> {
        let w = self.importance_weight(f5_a, f5_m)?;
        let (f_imp, f_c) = self.fuse_with_weight(f2_a, f2_m, &w)?;
        let pre_s = self.head.forward(&f_c, &f_imp)?;
        Ok(FusedMaps {
            pre_s,
            f_fused: f_imp,
            f_c,
            w: Some(w),
        })
    }
}

/// Element-wise addition of the two streams ("Parallel-A").
pub struct AddFusion {
    head: PredictionHead,
}

impl FusionStrategy for AddFusion {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, f2_a: &Tensor, f2_m: &Tensor, _: &Tensor, _: &Tensor) -> Result<FusedMaps> {
        check_pair("add fusion inputs", f2_a, f2_m)?;
        let f_fused = (f2_a + f2_m)?;
        let f_c = (f2_a * f2_m)?;
        let pre_s = self.head.forward(&f_c, &f_fused)?;
        Ok(FusedMaps {
            pre_s,
            f_fused,
            f_c,
            w: None,
        })
    }
}

/// Concatenation + 1x1 convolution ("Parallel-C").
pub struct ConcatFusion {
    proj: Conv2d,
    head: PredictionHead,
}

impl FusionStrategy for ConcatFusion {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, f2_a: &Tensor, f2_m: &Tensor, _: &Tensor, _: &Tensor) -> Result<FusedMaps> {
        check_pair("concat fusion inputs", f2_a, f2_m)?;
        let f_fused = self.proj.forward(&Tensor::cat(&[f2_a, f2_m], 1)?)?;
        let f_c = (f2_a * f2_m)?;
        let pre_s = self.head.forward(&f_c, &f_fused)?;
        Ok(FusedMaps {
            pre_s,
            f_fused,
            f_c,
            w: None,
        })
    }
}

/// Channel-attention weight learned from the decoder features themselves
/// ("Parallel-F"): squeeze-excitation over the concatenated statistics.
pub struct ChannelAttentionFusion {
    fc1: Linear,
    fc2: Linear,
    head: PredictionHead,
}

impl FusionStrategy for ChannelAttentionFusion {
    fn name(&self) -> &'static str {
        "channel-attention"
    }

    fn forward(&self, f2_a: &Tensor, f2_m: &Tensor, _: &Tensor, _: &Tensor) -> Result<FusedMaps> {
        check_pair("channel-attention fusion inputs", f2_a, f2_m)?;
        let stats = Tensor::cat(&[global_avg_pool(f2_a)?, global_avg_pool(f2_m)?], D::Minus1)?;
        let w = mask_sigmoid(&self.fc2.forward(&self.fc1.forward(&stats)?.relu()?)?)?;
        let f_fused = weighted_blend(f2_a, f2_m, &w)?;
        let f_c = (f2_a * f2_m)?;
        let pre_s = self.head.forward(&f_c, &f_fused)?;
        Ok(FusedMaps {
            pre_s,
            f_fused,
            f_c,
            w: Some(w),
        })
    }
}

pub(crate) fn ctor_ipf(ps: &ParamStore, c_d: usize) -> Result<Box<dyn FusionStrategy>> {
    Ok(Box::new(IpfFusion::new(ps, c_d)?))
}

pub(crate) fn ctor_add(ps: &ParamStore, c_d: usize) -> Result<Box<dyn FusionStrategy>> {
    Ok(Box::new(AddFusion {
        head: PredictionHead::new(&ps.scope("head"), c_d)?,
    }))
}

pub(crate) fn ctor_concat(ps: &ParamStore, c_d: usize) -> Result<Box<dyn FusionStrategy>> {
    Ok(Box::new(ConcatFusion {
        proj: conv1x1(ps, "proj", 2 * c_d, c_d)?,
        head: PredictionHead::new(&ps.scope("head"), c_d)?,
    }))
}

pub(crate) fn ctor_channel_attention(ps: &ParamStore, c_d: usize) -> Result<Box<dyn FusionStrategy>> {
    Ok(Box::new(ChannelAttentionFusion {
        fc1: Linear::new(&ps.scope("fc1"), 2 * c_d, c_d / 2)?,
        fc2: Linear::new(&ps.scope("fc2"), c_d / 2, c_d)?,
        head: PredictionHead::new(&ps.scope("head"), c_d)?,
    }))
}

pub fn build_fusion(name: &str, ps: &ParamStore, c_d: usize) -> Result<Box<dyn FusionStrategy>> {
    crate::registry::fusions().get(name)?(ps, c_d)
}

/// Per-branch saliency head: sigma(C3(C3(f2_dec))), separate parameters per
/// branch.
pub struct BranchHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl BranchHead {
    pub fn new(ps: &ParamStore, c_d: usize) -> Result<Self> {
        Ok(Self {
            conv1: conv3x3(ps, "conv1", c_d, c_d)?,
            conv2: conv3x3(ps, "conv2", c_d, 1)?,
        })
    }

    pub fn forward(&self, f2_dec: &Tensor) -> Result<Tensor> {
        mask_sigmoid(&self.conv2.forward(&self.conv1.forward(f2_dec)?)?)
    }
}
