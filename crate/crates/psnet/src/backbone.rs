//! Dual-stream encoders and channel projection.
//!
//! Both streams share one architecture but never share parameters: each is
//! built under its own parameter scope. Encoders emit levels 2..5 at strides
//! 4/8/16/32 (a stride-2 level-1 map, where the architecture produces one, is
//! computed and discarded).

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{conv1x1, BatchNorm2d, Conv2d, ConvNormRelu, ParamStore};

/// Which input stream a pyramid came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Appearance,
    Motion,
}

impl Branch {
    pub fn scope_name(self) -> &'static str {
        match self {
            Branch::Appearance => "appearance",
            Branch::Motion => "motion",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Appearance => Branch::Motion,
            Branch::Motion => Branch::Appearance,
        }
    }
}

/// Multi-level feature maps for levels 2..5.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: [Tensor; 4],
    pub branch: Branch,
    pub projected: bool,
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 4], branch: Branch, projected: bool) -> Self {
        Self {
            levels,
            branch,
            projected,
        }
    }

    /// Feature map of level `i`, i in 2..=5.
    pub fn level(&self, i: usize) -> &Tensor {
        assert!((2..=5).contains(&i), "pyramid level {i} out of range");
        &self.levels[i - 2]
    }

    pub fn levels(&self) -> &[Tensor; 4] {
        &self.levels
    }

    /// Checks the stride arithmetic against the input size.
    pub fn validate_sizes(&self, input_h: usize, input_w: usize) -> Result<()> {
        for i in 2..=5usize {
            let (_, _, h, w) = self.level(i).dims4()?;
            let (eh, ew) = (input_h >> i, input_w >> i);
            if (h, w) != (eh, ew) {
                return Err(Error::ShapeMismatch {
                    context: format!("pyramid level {i}"),
                    expected: format!("{eh}x{ew}"),
                    actual: format!("{h}x{w}"),
                });
            }
        }
        Ok(())
    }
}

/// A backbone producing the four pyramid levels.
pub trait Encoder {
    fn name(&self) -> &'static str;
    /// Channel counts of levels 2..5.
    fn channels(&self) -> [usize; 4];
    fn forward_levels(&self, x: &Tensor, train: bool) -> Result<[Tensor; 4]>;
}

/// Runs `encoder` on a 3-channel image batch after checking the size
/// contract, and tags the result with its branch.
pub fn encode(
    encoder: &dyn Encoder,
    x: &Tensor,
    branch: Branch,
    train: bool,
) -> Result<FeaturePyramid> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            context: "encoder input".into(),
            expected: "3 channels".into(),
            actual: format!("{c} channels"),
        });
    }
    if h % 32 != 0 {
        return Err(Error::NotDivisible {
            axis: "height",
            size: h,
            divisor: 32,
        });
    }
    if w % 32 != 0 {
        return Err(Error::NotDivisible {
            axis: "width",
            size: w,
            divisor: 32,
        });
    }
    let levels = encoder.forward_levels(x, train)?;
    let pyr = FeaturePyramid::new(levels, branch, false);
    pyr.validate_sizes(h, w)?;
    Ok(pyr)
}

// ---------------------------------------------------------------------------
// Tiny backbone (desk-scale tests)
// ---------------------------------------------------------------------------

/// Randomly initialized small backbone: a stride-4 stem emits level 2 at
/// `width` channels, then three stride-2 stages double the width per level.
pub struct TinyBackbone {
    stem: ConvNormRelu,
    stages: Vec<Vec<ConvNormRelu>>,
    width: usize,
}

impl TinyBackbone {
    pub fn new(ps: &ParamStore, width: usize, depth: usize) -> Result<Self> {
        let depth = depth.max(1);
        let stem = ConvNormRelu::new(&ps.scope("stem"), 3, width, 7, 4)?;
        let mut stages = Vec::new();
        for s in 0..3 {
            let scope = ps.scope(&format!("stage{s}"));
            let in_c = width << s;
            let out_c = width << (s + 1);
            let mut units = vec![ConvNormRelu::new(&scope.scope("unit0"), in_c, out_c, 3, 2)?];
            for u in 1..depth {
                units.push(ConvNormRelu::new(
                    &scope.scope(&format!("unit{u}")),
                    out_c,
                    out_c,
                    3,
                    1,
                )?);
            }
            stages.push(units);
        }
        Ok(Self { stem, stages, width })
    }
}

impl Encoder for TinyBackbone {
    fn name(&self) -> &'static str {
        "tiny"
    }

    fn channels(&self) -> [usize; 4] {
        [self.width, self.width * 2, self.width * 4, self.width * 8]
    }

    fn forward_levels(&self, x: &Tensor, train: bool) -> Result<[Tensor; 4]> {
        let f2 = self.stem.forward(x, train)?;
        let mut levels = vec![f2];
        for stage in &self.stages {
            let mut h = levels.last().unwrap().clone();
            for unit in stage {
                h = unit.forward(&h, train)?;
            }
            levels.push(h);
        }
        let [f2, f3, f4, f5]: [Tensor; 4] = levels.try_into().map_err(|_| {
            Error::Contract("tiny backbone must produce exactly 4 levels".into())
        })?;
        Ok([f2, f3, f4, f5])
    }
}

// ---------------------------------------------------------------------------
// ResNet-50
// ---------------------------------------------------------------------------

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(ps: &ParamStore, in_c: usize, width: usize, stride: usize) -> Result<Self> {
        let out_c = width * 4;
        let conv1 = Conv2d::new(&ps.scope("conv1"), in_c, width, 1, 1, 0, 1)?;
        let bn1 = BatchNorm2d::new(&ps.scope("bn1"), width)?;
        let conv2 = Conv2d::new(&ps.scope("conv2"), width, width, 3, stride, 1, 1)?;
        let bn2 = BatchNorm2d::new(&ps.scope("bn2"), width)?;
        let conv3 = Conv2d::new(&ps.scope("conv3"), width, out_c, 1, 1, 0, 1)?;
        let bn3 = BatchNorm2d::new(&ps.scope("bn3"), out_c)?;
        let downsample = if stride != 1 || in_c != out_c {
            let scope = ps.scope("downsample");
            Some((
                Conv2d::new(&scope.scope("conv"), in_c, out_c, 1, stride, 0, 1)?,
                BatchNorm2d::new(&scope.scope("bn"), out_c)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        h = self.bn2.forward(&self.conv2.forward(&h)?, train)?.relu()?;
        h = self.bn3.forward(&self.conv3.forward(&h)?, train)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// ResNet-50 trunk without the average-pooling and classification head.
pub struct ResNet50 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    layers: [Vec<Bottleneck>; 4],
}

impl ResNet50 {
    pub fn new(ps: &ParamStore) -> Result<Self> {
        let stem_conv = Conv2d::new(&ps.scope("stem.conv"), 3, 64, 7, 2, 3, 1)?;
        let stem_bn = BatchNorm2d::new(&ps.scope("stem.bn"), 64)?;
        let widths = [64usize, 128, 256, 512];
        let counts = [3usize, 4, 6, 3];
        let mut layers: Vec<Vec<Bottleneck>> = Vec::new();
        let mut in_c = 64;
        for (l, (&width, &count)) in widths.iter().zip(counts.iter()).enumerate() {
            let scope = ps.scope(&format!("layer{}", l + 1));
            let mut blocks = Vec::new();
            for b in 0..count {
                let stride = if b == 0 && l > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(
                    &scope.scope(&format!("block{b}")),
                    in_c,
                    width,
                    stride,
                )?);
                in_c = width * 4;
            }
            layers.push(blocks);
        }
        let layers: [Vec<Bottleneck>; 4] = layers
            .try_into()
            .map_err(|_| Error::Contract("resnet50 must have 4 stages".into()))?;
        Ok(Self {
            stem_conv,
            stem_bn,
            layers,
        })
    }

    /// Loads backbone weights from a safetensors file whose tensor names are
    /// relative to the encoder scope (e.g. `stem.conv.weight`).
    pub fn load_pretrained(ps: &ParamStore, scope_prefix: &str, path: &std::path::Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, ps.device())?;
        let tensors: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let rel = |full: &str| -> Option<String> {
            full.strip_prefix(scope_prefix)
                .and_then(|s| s.strip_prefix('.'))
                .map(|s| s.to_string())
        };
        let mut loaded = 0;
        for (name, var) in ps.trainable().into_iter().chain(ps.state_buffers()) {
            let Some(r) = rel(&name) else { continue };
            let value = tensors.get(&r).ok_or_else(|| {
                Error::Checkpoint(format!("pretrained file missing tensor '{r}'"))
            })?;
            var.set(&value.to_dtype(var.dtype())?)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Dense 3x3 max over the padded map followed by stride-2 subsampling;
/// equivalent to max_pool2d(kernel 3, stride 2, padding 1) and differentiable
/// through `maximum`.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    // Zero padding equals -inf padding here because the pool consumes
    // post-ReLU activations and every window contains a real cell.
    let xp = x
        .pad_with_zeros(2, 1, 1)?
        .pad_with_zeros(3, 1, 1)?;
    let mut best: Option<Tensor> = None;
    for i in 0..3 {
        for j in 0..3 {
            let v = xp.narrow(2, i, h)?.narrow(3, j, w)?;
            best = Some(match best {
                None => v,
                Some(b) => b.maximum(&v)?,
            });
        }
    }
    let dense = best.expect("nonempty");
    let idx_h: Vec<u32> = (0..h).step_by(2).map(|i| i as u32).collect();
    let idx_w: Vec<u32> = (0..w).step_by(2).map(|i| i as u32).collect();
    let ih = Tensor::from_vec(idx_h, ((h + 1) / 2,), x.device())?;
    let iw = Tensor::from_vec(idx_w, ((w + 1) / 2,), x.device())?;
    Ok(dense.index_select(&ih, 2)?.index_select(&iw, 3)?)
}

impl Encoder for ResNet50 {
    fn name(&self) -> &'static str {
        "resnet50"
    }

    fn channels(&self) -> [usize; 4] {
        [256, 512, 1024, 2048]
    }

    fn forward_levels(&self, x: &Tensor, train: bool) -> Result<[Tensor; 4]> {
        // Level 1 (stride 2); kept out of the pyramid.
        let f1 = self
            .stem_bn
            .forward(&self.stem_conv.forward(x)?, train)?
            .relu()?;
        let mut h = max_pool_3x3_s2(&f1)?;
        let mut levels = Vec::new();
        for stage in &self.layers {
            for block in stage {
                h = block.forward(&h, train)?;
            }
            levels.push(h.clone());
        }
        let [f2, f3, f4, f5]: [Tensor; 4] = levels
            .try_into()
            .map_err(|_| Error::Contract("resnet50 must produce 4 levels".into()))?;
        Ok([f2, f3, f4, f5])
    }
}

pub(crate) fn ctor_tiny(cfg: &ModelConfig, ps: &ParamStore, _prefix: &str) -> Result<Box<dyn Encoder>> {
    Ok(Box::new(TinyBackbone::new(ps, cfg.tiny_width, cfg.tiny_depth)?))
}

/// Builds a resnet50 encoder; loads pretrained weights when configured and
/// present, warning when absent.
pub(crate) fn ctor_resnet50(cfg: &ModelConfig, ps: &ParamStore, prefix: &str) -> Result<Box<dyn Encoder>> {
    let net = ResNet50::new(ps)?;
    if let Some(path) = &cfg.pretrained_weights {
        if path.exists() {
            let n = ResNet50::load_pretrained(ps, prefix, path)?;
            log::info!("loaded {n} pretrained tensors from {}", path.display());
        } else {
            log::warn!(
                "pretrained weights {} not found; falling back to random init",
                path.display()
            );
        }
    }
    Ok(Box::new(net))
}

/// Builds the encoder registered under `config.backbone`.
pub fn build_encoder(cfg: &ModelConfig, ps: &ParamStore, scope_prefix: &str) -> Result<Box<dyn Encoder>> {
    crate::registry::encoders().get(&cfg.backbone)?(cfg, ps, scope_prefix)
}

// ---------------------------------------------------------------------------
// Channel projection
// ---------------------------------------------------------------------------

struct ProjBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

/// Per-level learned 1x1 projection (+ norm + rectifier) to the uniform
/// decoder width.
pub struct Projection {
    blocks: [ProjBlock; 4],
}

impl Projection {
    pub fn new(ps: &ParamStore, in_channels: [usize; 4], c_d: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        for (idx, &in_c) in in_channels.iter().enumerate() {
            let scope = ps.scope(&format!("level{}", idx + 2));
            blocks.push(ProjBlock {
                conv: conv1x1(&scope, "conv", in_c, c_d)?,
                norm: BatchNorm2d::new(&scope.scope("norm"), c_d)?,
            });
        }
        let blocks: [ProjBlock; 4] = blocks
            .try_into()
            .map_err(|_| Error::Contract("projection needs 4 levels".into()))?;
        Ok(Self { blocks })
    }

    pub fn project_pyramid(&self, pyr: &FeaturePyramid, train: bool) -> Result<FeaturePyramid> {
        let mut levels = Vec::new();
        for (block, x) in self.blocks.iter().zip(pyr.levels()) {
            let y = block.norm.forward(&block.conv.forward(x)?, train)?.relu()?;
            levels.push(y);
        }
        let levels: [Tensor; 4] = levels.try_into().expect("4 levels");
        Ok(FeaturePyramid::new(levels, pyr.branch, true))
    }
}
