//! Full network assembly: two parallel decoding branches with opposite
//! dominant modalities, fused by a selectable strategy.

use candle_core::Tensor;

use crate::backbone::{build_encoder, encode, Branch, Encoder, FeaturePyramid, Projection};
use crate::config::ModelConfig;
use crate::crc::{build_cross_modal_block, CrossModalBlock};
use crate::error::{Error, Result};
use crate::gdr::{build_reinforcer, Reinforcer};
use crate::ipf::{build_fusion, BranchHead, FusionStrategy};
use crate::nn::{bilinear_resize, ParamStore};

/// Which components a model instance owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    /// Both branches plus fusion (stage 3 and inference).
    Full,
    /// Appearance encoder + reinforcement + head only (stage 1).
    SpatialPretrain,
    /// Motion encoder + reinforcement + head only (stage 2).
    TemporalPretrain,
}

impl ModelRole {
    pub fn for_stage(stage: u8) -> ModelRole {
        match stage {
            1 => ModelRole::SpatialPretrain,
            2 => ModelRole::TemporalPretrain,
            _ => ModelRole::Full,
        }
    }

    /// Checkpoint name prefixes holding this role's parameters.
    pub fn prefixes(self) -> Vec<&'static str> {
        match self {
            ModelRole::SpatialPretrain => vec![
                "encoder.appearance",
                "project.appearance",
                "reinforce.appearance",
                "head.appearance",
            ],
            ModelRole::TemporalPretrain => vec![
                "encoder.motion",
                "project.motion",
                "reinforce.motion",
                "head.motion",
            ],
            ModelRole::Full => vec![""],
        }
    }
}

struct Stream {
    encoder: Box<dyn Encoder>,
    projection: Projection,
    reinforcer: Box<dyn Reinforcer>,
    head: BranchHead,
    /// Decoder blocks for levels 2..5 (index 0 = level 2); absent in
    /// single-branch pretrain roles.
    blocks: Option<[Box<dyn CrossModalBlock>; 4]>,
}

/// Per-branch forward products.
pub struct BranchForward {
    /// Semantic mask from the reinforcement stage (absent without GDR).
    pub mask5: Option<Tensor>,
    /// Importance response maps for levels 2..5.
    pub masks_s: [Tensor; 4],
    /// Level-2 decoder features.
    pub f2_dec: Tensor,
    /// Branch saliency prediction at level-2 resolution.
    pub s: Tensor,
}

/// Everything the full forward pass produces.
pub struct ForwardOutputs {
    /// Final prediction at level-2 resolution.
    pub pre_s: Tensor,
    /// Final prediction upsampled to input resolution.
    pub pre_s_full: Tensor,
    pub f_imp: Tensor,
    pub f_c: Tensor,
    /// Channel importance weight (fusion strategies that learn one).
    pub w: Option<Tensor>,
    pub appearance: BranchForward,
    pub motion: BranchForward,
}

/// Single-branch pretrain products (stages 1/2).
pub struct PretrainForward {
    pub mask5: Option<Tensor>,
    /// Head prediction on the reinforced level-2 features.
    pub s: Tensor,
    /// Prediction upsampled to input resolution.
    pub s_full: Tensor,
}

pub struct PsNet {
    pub cfg: ModelConfig,
    store: ParamStore,
    role: ModelRole,
    appearance: Option<Stream>,
    motion: Option<Stream>,
    fusion: Option<Box<dyn FusionStrategy>>,
}

impl PsNet {
    pub fn new(cfg: &ModelConfig, role: ModelRole, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, cfg.dtype.dtype());
        Self::with_store(cfg, role, store)
    }

    fn build_stream(cfg: &ModelConfig, store: &ParamStore, branch: Branch, with_blocks: bool) -> Result<Stream> {
        let b = branch.scope_name();
        let enc_scope_name = format!("encoder.{b}");
        let encoder = build_encoder(cfg, &store.scope(&enc_scope_name), &enc_scope_name)?;
        let projection = Projection::new(
            &store.scope(&format!("project.{b}")),
            encoder.channels(),
            cfg.decoder_width,
        )?;
        let reinforcer = build_reinforcer(
            cfg.ablation.reinforcer(),
            &store.scope(&format!("reinforce.{b}")),
            cfg.decoder_width,
        )?;
        let head = BranchHead::new(&store.scope(&format!("head.{b}")), cfg.decoder_width)?;
        let blocks = if with_blocks {
            let mut v: Vec<Box<dyn CrossModalBlock>> = Vec::new();
            for level in 2..=5usize {
                v.push(build_cross_modal_block(
                    cfg.ablation.cross_modal_block(),
                    &store.scope(&format!("decode.{b}.level{level}")),
                    level,
                    cfg.decoder_width,
                    cfg.dyn_kernel_size,
                )?);
            }
            Some(
                v.try_into()
                    .map_err(|_| Error::Contract("four decoder levels".into()))?,
            )
        } else {
            None
        };
        Ok(Stream {
            encoder,
            projection,
            reinforcer,
            head,
            blocks,
        })
    }

    pub fn with_store(cfg: &ModelConfig, role: ModelRole, store: ParamStore) -> Result<Self> {
        let (appearance, motion, fusion) = match role {
            ModelRole::Full => {
                let a = Self::build_stream(cfg, &store, Branch::Appearance, true)?;
                let m = Self::build_stream(cfg, &store, Branch::Motion, true)?;
                let fusion = build_fusion(
                    cfg.ablation.fusion(),
                    &store.scope("fusion"),
                    cfg.decoder_width,
                )?;
                (Some(a), Some(m), Some(fusion))
            }
            ModelRole::SpatialPretrain => {
                let a = Self::build_stream(cfg, &store, Branch::Appearance, false)?;
                (Some(a), None, None)
            }
            ModelRole::TemporalPretrain => {
                let m = Self::build_stream(cfg, &store, Branch::Motion, false)?;
                (None, Some(m), None)
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            role,
            appearance,
            motion,
            fusion,
        })
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn stream(&self, branch: Branch) -> Result<&Stream> {
        let s = match branch {
            Branch::Appearance => self.appearance.as_ref(),
            Branch::Motion => self.motion.as_ref(),
        };
        s.ok_or_else(|| {
            Error::Contract(format!(
                "model role {:?} has no {} stream",
                self.role,
                branch.scope_name()
            ))
        })
    }

    /// Encodes and projects one input stream.
    fn encode_projected(&self, branch: Branch, x: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let stream = self.stream(branch)?;
        let pyr = encode(stream.encoder.as_ref(), x, branch, train)?;
        stream.projection.project_pyramid(&pyr, train)
    }

    /// Runs one decoding branch with the given dominant modality.
    fn decode_branch(
        &self,
        dominant: Branch,
        pyr_dom: &FeaturePyramid,
        pyr_aux: &FeaturePyramid,
        train: bool,
    ) -> Result<BranchForward> {
        let stream = self.stream(dominant)?;
        let blocks = stream
            .blocks
            .as_ref()
            .ok_or_else(|| Error::Contract("decode_branch requires decoder blocks".into()))?;
        let reinforce = stream.reinforcer.forward(pyr_dom)?;

        let mut prev: Option<Tensor> = None;
        let mut masks: Vec<Tensor> = vec![Tensor::new(&[0f32], pyr_dom.level(2).device())?; 4];
        for level in (2..=5usize).rev() {
            let out = blocks[level - 2].forward(
                pyr_dom.level(level),
                pyr_aux.level(level),
                &reinforce.reinforced[level - 2],
                prev.as_ref(),
                train,
            )?;
            masks[level - 2] = out.importance_mask;
            prev = Some(out.decoder_features);
        }
        let f2_dec = prev.expect("level 2 decoded");
        let s = stream.head.forward(&f2_dec)?;
        let masks_s: [Tensor; 4] = masks
            .try_into()
            .map_err(|_| Error::Contract("four importance masks".into()))?;
        Ok(BranchForward {
            mask5: reinforce.mask5,
            masks_s,
            f2_dec,
            s,
        })
    }

    /// Full two-branch forward pass on standardized inputs.
    pub fn forward(&self, rgb: &Tensor, flow: &Tensor, train: bool) -> Result<ForwardOutputs> {
        if self.role != ModelRole::Full {
            return Err(Error::Contract(format!(
                "forward requires a Full-role model, got {:?}",
                self.role
            )));
        }
        let (_, _, h, w) = rgb.dims4()?;
        let pa = self.encode_projected(Branch::Appearance, rgb, train)?;
        let pm = self.encode_projected(Branch::Motion, flow, train)?;

        let appearance = self.decode_branch(Branch::Appearance, &pa, &pm, train)?;
        let motion = self.decode_branch(Branch::Motion, &pm, &pa, train)?;

        let fusion = self.fusion.as_ref().expect("full role has fusion");
        let fused = fusion.forward(
            &appearance.f2_dec,
            &motion.f2_dec,
            pa.level(5),
            pm.level(5),
        )?;
        let pre_s_full = bilinear_resize(&fused.pre_s, h, w)?;
        Ok(ForwardOutputs {
            pre_s: fused.pre_s,
            pre_s_full,
            f_imp: fused.f_fused,
            f_c: fused.f_c,
            w: fused.w,
            appearance,
            motion,
        })
    }

    /// Single-branch forward used by the pretrain stages: reinforced level-2
    /// features straight into the branch head.
    pub fn forward_branch(&self, branch: Branch, x: &Tensor, train: bool) -> Result<PretrainForward> {
        let (_, _, h, w) = x.dims4()?;
        let stream = self.stream(branch)?;
        let pyr = self.encode_projected(branch, x, train)?;
        let reinforce = stream.reinforcer.forward(&pyr)?;
        let s = stream.head.forward(&reinforce.reinforced[0])?;
        let s_full = bilinear_resize(&s, h, w)?;
        Ok(PretrainForward {
            mask5: reinforce.mask5,
            s,
            s_full,
        })
    }
}
