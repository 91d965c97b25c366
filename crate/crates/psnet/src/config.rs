//! Model and training configuration.
//!
//! A single TOML file holds the `[model]`, `[train]`, and `[data]` sections;
//! every field has a default so partial files are valid. The `PSNET_SEED`
//! environment variable overrides the configured seed (handled by the CLI).

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named ablation variants, mirroring the model's selectable compositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// GDR + CRC + IPF fusion.
    Full,
    /// No GDR, baseline cross-modality block, IPF fusion.
    B,
    /// GDR, baseline cross-modality block, IPF fusion.
    BGdr,
    /// No GDR, CRC block, IPF fusion.
    BCrc,
    /// Full branches, element-wise addition fusion.
    ParallelA,
    /// Full branches, concatenation + 1x1 conv fusion.
    ParallelC,
    /// Full branches, channel-attention fusion from decoder features.
    ParallelF,
}

impl AblationMode {
    /// Name of the reinforcement stage in the strategy registry.
    pub fn reinforcer(self) -> &'static str {
        match self {
            AblationMode::B | AblationMode::BCrc => "pass",
            _ => "gdr",
        }
    }

    /// Name of the per-level cross-modality block in the strategy registry.
    pub fn cross_modal_block(self) -> &'static str {
        match self {
            AblationMode::B | AblationMode::BGdr => "baseline",
            _ => "crc",
        }
    }

    /// Name of the branch-fusion strategy in the strategy registry.
    pub fn fusion(self) -> &'static str {
        match self {
            AblationMode::ParallelA => "add",
            AblationMode::ParallelC => "concat",
            AblationMode::ParallelF => "channel-attention",
            _ => "ipf",
        }
    }

    pub fn all() -> [AblationMode; 7] {
        [
            AblationMode::Full,
            AblationMode::B,
            AblationMode::BGdr,
            AblationMode::BCrc,
            AblationMode::ParallelA,
            AblationMode::ParallelC,
            AblationMode::ParallelF,
        ]
    }
}

/// Floating-point width used for parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatKind {
    F32,
    F64,
}

impl FloatKind {
    pub fn dtype(self) -> DType {
        match self {
            FloatKind::F32 => DType::F32,
            FloatKind::F64 => DType::F64,
        }
    }
}

/// Per-channel input standardization applied before the encoders.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Normalization {
    pub mean_rgb: [f32; 3],
    pub std_rgb: [f32; 3],
    pub mean_flow: [f32; 3],
    pub std_flow: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        // ImageNet statistics for the RGB stream; the color-encoded flow
        // stream feeds the same kind of backbone, so it gets the same ones.
        Self {
            mean_rgb: [0.485, 0.456, 0.406],
            std_rgb: [0.229, 0.224, 0.225],
            mean_flow: [0.485, 0.456, 0.406],
            std_flow: [0.229, 0.224, 0.225],
        }
    }
}

/// Architecture configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder registered under this name: "resnet50" or "tiny".
    pub backbone: String,
    /// Channel width of the first tiny-backbone level (doubles per level).
    pub tiny_width: usize,
    /// Conv units per tiny-backbone stage.
    pub tiny_depth: usize,
    /// Optional pretrained weights (safetensors) for the resnet50 backbone.
    pub pretrained_weights: Option<PathBuf>,
    /// Uniform decoder channel width C_d.
    pub decoder_width: usize,
    /// Side length of the generated dynamic kernels (odd).
    pub dyn_kernel_size: usize,
    /// Network input size (height, width); both divisible by 32.
    pub input_size: (usize, usize),
    /// Weight of the top-level semantic-mask supervision term.
    pub lambda1: f64,
    /// Weight of the per-level importance-mask supervision terms.
    pub lambda2: f64,
    pub ablation: AblationMode,
    pub dtype: FloatKind,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "resnet50".to_string(),
            tiny_width: 8,
            tiny_depth: 1,
            pretrained_weights: None,
            decoder_width: 128,
            dyn_kernel_size: 3,
            input_size: (384, 384),
            lambda1: 0.6,
            lambda2: 0.4,
            ablation: AblationMode::Full,
            dtype: FloatKind::F32,
            normalization: Normalization::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used throughout the test suite.
    pub fn tiny() -> Self {
        Self {
            backbone: "tiny".to_string(),
            tiny_width: 8,
            tiny_depth: 1,
            decoder_width: 16,
            input_size: (64, 64),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
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
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder_width must be positive".into()));
        }
        if self.dyn_kernel_size % 2 == 0 || self.dyn_kernel_size == 0 {
            return Err(Error::Config(format!(
                "dyn_kernel_size must be odd, got {}",
                self.dyn_kernel_size
            )));
        }
        if self.decoder_width % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder_width must be divisible by 4 (dense growth, SE reduction), got {}",
                self.decoder_width
            )));
        }
        Ok(())
    }
}

/// One training stage (1 = spatial pretrain, 2 = temporal pretrain, 3 = joint).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainStageSpec {
    pub stage: u8,
    /// Dataset root for this stage.
    pub dataset: PathBuf,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate decay factor applied every `lr_decay_period` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub max_epochs: usize,
    /// Optional hard step cap; 0 means no cap.
    pub max_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoints from stages 1 and 2, required for stage 3 unless
    /// `from_scratch` is set.
    pub stage1_ckpt: Option<PathBuf>,
    pub stage2_ckpt: Option<PathBuf>,
    pub from_scratch: bool,
    pub augment: bool,
    /// Periodic checkpoint interval in steps.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for TrainStageSpec {
    fn default() -> Self {
        Self::defaults_for(3)
    }
}

impl TrainStageSpec {
    /// Stage defaults: stages 1/2 use batch 16, lr 0.002, x0.1 decay per 10
    /// epochs; stage 3 uses batch 8, lr 0.0002, 20 epochs.
    pub fn defaults_for(stage: u8) -> Self {
        let (batch_size, lr, max_epochs) = match stage {
            1 | 2 => (16, 0.002, 30),
            _ => (8, 0.0002, 20),
        };
        Self {
            stage,
            dataset: PathBuf::from("data"),
            batch_size,
            lr,
            lr_decay_factor: 0.1,
            lr_decay_period: 10,
            max_epochs,
            max_steps: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 17,
            stage1_ckpt: None,
            stage2_ckpt: None,
            from_scratch: false,
            augment: true,
            checkpoint_every: 100,
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1..3, got {}", self.stage)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.stage == 3
            && !self.from_scratch
            && (self.stage1_ckpt.is_none() || self.stage2_ckpt.is_none())
        {
            return Err(Error::Config(
                "stage 3 requires stage1_ckpt and stage2_ckpt (or from_scratch = true)".into(),
            ));
        }
        Ok(())
    }
}

/// Root of the configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainStageSpec,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let cfg: FileConfig = toml::from_str(&text)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Applies a seed override (used for the PSNET_SEED environment variable).
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }
}
