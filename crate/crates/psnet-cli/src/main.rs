//! psnet command-line interface: train / infer / eval / synth / overlay.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use psnet::backbone::Branch;
use psnet::checkpoint::{check_compatible, load_checkpoint};
use psnet::config::FileConfig;
use psnet::data::{render_clip, write_clip, SyntheticClipSpec};
use psnet::infer::{infer, overlay, InferOptions};
use psnet::metrics::{evaluate_dataset, write_report};
use psnet::model::{ModelRole, PsNet};
use psnet::train::train_stage;

#[derive(Parser)]
#[command(name = "psnet", about = "Two-stream video salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage (1: spatial pretrain, 2: temporal pretrain,
    /// 3: joint fine-tune).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint (parameters, step counter, rng).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write saliency maps for every frame pair under --input.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write per-frame importance-weight statistics.
        #[arg(long)]
        dump_importance: bool,
        /// Run a single branch ("appearance" or "motion") from a stage-1/2
        /// checkpoint.
        #[arg(long)]
        branch: Option<String>,
    },
    /// Evaluate predictions against ground truth and write a report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate synthetic clips from a TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Blend predictions over their RGB frames for inspection.
    Overlay {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Spec file for `synth`: either a single clip or a [[clips]] list.
#[derive(serde::Deserialize)]
struct SynthFile {
    #[serde(default)]
    clips: Vec<SyntheticClipSpec>,
    #[serde(flatten)]
    single: Option<SyntheticClipSpec>,
}

fn seed_override() -> Option<u64> {
    std::env::var("PSNET_SEED").ok().and_then(|v| v.parse().ok())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { stage, config, resume } => {
            let mut cfg = FileConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            cfg.train.stage = stage;
            if let Some(seed) = seed_override() {
                log::info!("PSNET_SEED={seed} overrides the configured seed");
                cfg.override_seed(seed);
            }
            let outcome = train_stage(&cfg.model, &cfg.train, resume.as_deref())?;
            println!(
                "stage {stage} finished after {} steps; final loss {:.6}; checkpoint {}",
                outcome.steps,
                outcome.final_loss,
                outcome.checkpoint.display()
            );
        }
        Command::Infer { ckpt, input, output, dump_importance, branch } => {
            let loaded = load_checkpoint(&ckpt)?;
            let branch = match branch.as_deref() {
                None => None,
                Some("appearance") => Some(Branch::Appearance),
                Some("motion") => Some(Branch::Motion),
                Some(other) => bail!("unknown branch '{other}' (appearance|motion)"),
            };
            let role = match branch {
                None => ModelRole::Full,
                Some(Branch::Appearance) => ModelRole::SpatialPretrain,
                Some(Branch::Motion) => ModelRole::TemporalPretrain,
            };
            let cfg = loaded.meta.config.clone();
            check_compatible(&loaded.meta, &cfg)?;
            let model = PsNet::new(&cfg, role, loaded.meta.rng_seed)?;
            model.store().load_values(&loaded.tensors, None)?;
            let n = infer(
                &model,
                &input,
                &output,
                &InferOptions { dump_importance, branch },
            )?;
            println!("wrote {n} saliency maps to {}", output.display());
        }
        Command::Eval { pred, gt, report } => {
            let r = evaluate_dataset(&pred, &gt)?;
            let (txt, json) = write_report(&r, &report)?;
            println!(
                "maxF {}  Sm {:.4}  MAE {:.4}  ({} frames; report: {}, {})",
                r.aggregate
                    .max_f
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
                r.aggregate.s_measure,
                r.aggregate.mae,
                r.frames,
                txt.display(),
                json.display()
            );
        }
        Command::Synth { spec, output } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let parsed: SynthFile = toml::from_str(&text)?;
            let mut clips = parsed.clips;
            if let Some(single) = parsed.single {
                clips.push(single);
            }
            if clips.is_empty() {
                bail!("spec file defines no clips");
            }
            let mut frames = 0;
            for clip_spec in &clips {
                let clip = render_clip(clip_spec)?;
                frames += clip.rgb.len();
                write_clip(&clip, &output)?;
            }
            println!("wrote {} clips ({frames} frames) to {}", clips.len(), output.display());
        }
        Command::Overlay { pred, rgb, output } => {
            let n = overlay(&pred, &rgb, &output)?;
            println!("wrote {n} overlays to {}", output.display());
        }
    }
    Ok(())
}
