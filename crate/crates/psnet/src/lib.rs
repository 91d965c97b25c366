//! Parallel-symmetric two-stream network for video salient object detection.
//!
//! Two encoder streams (RGB appearance and color-encoded optical flow) feed
//! two mirror-image decoding branches, each with its own dominant modality:
//! a gather-diffusion stage reinforces the dominant features across scales,
//! per-level cross-modality blocks let the auxiliary stream refine and
//! complement them, and a selectable fusion strategy combines the branch
//! outputs into the final saliency map.
//!
//! The crate also ships the training protocol (three stages, SGD + momentum),
//! the BCE + SSIM objective with side-output supervision, the standard
//! saliency metrics (max F-measure, S-measure, MAE), a synthetic
//! moving-shape data generator, and file-level dataset/checkpoint plumbing.
//! Interchangeable parts — backbones, reinforcement stages, decoder blocks,
//! fusion strategies — are trait objects selected by name through
//! [`registry`].

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod crc;
pub mod data;
pub mod error;
pub mod gdr;
pub mod infer;
pub mod ipf;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod train;

pub use backbone::{encode, Branch, Encoder, FeaturePyramid, Projection};
pub use config::{AblationMode, FileConfig, FloatKind, ModelConfig, Normalization, TrainStageSpec};
pub use error::{Error, Result};
pub use model::{ForwardOutputs, ModelRole, PsNet};
