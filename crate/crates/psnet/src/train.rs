//! Stage-wise training: appearance pretrain (1), motion pretrain (2), and
//! joint fine-tuning (3), with SGD + momentum + weight decay, epoch-wise
//! learning-rate decay, periodic checkpoints, and per-step structured loss
//! logging. Every stochastic choice (init, shuffling, augmentation) flows
//! from the stage seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Branch;
use crate::checkpoint::{check_compatible, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{ModelConfig, TrainStageSpec};
use crate::data::{augment, batch_to_tensors, load_dataset, Modality, VideoSample};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, sal_loss, total_loss, downsample_gt, LossBundle};
use crate::model::{ModelRole, PretrainForward, PsNet};

/// Stochastic gradient descent with momentum and decoupled-from-nothing
/// classic weight decay (v = m*v + g + wd*theta; theta -= lr*v).
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update; parameters without gradients are untouched.
    /// Returns how many parameters were updated.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<usize> {
        let mut updated = 0;
        for (name, var) in params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor();
            let mut d = grad.clone();
            if self.weight_decay != 0.0 {
                d = (d + (theta * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(name) {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + d)?,
                _ => d,
            };
            var.set(&(theta - (&v * self.lr)?)?)?;
            self.velocity.insert(name.clone(), v.detach());
            updated += 1;
        }
        Ok(updated)
    }
}

/// Pretrain objective (stages 1/2): saliency loss on the head output plus
/// the semantic-mask supervision when the reinforcement stage produces one.
pub fn pretrain_loss(out: &PretrainForward, gt_full: &Tensor, cfg: &ModelConfig) -> Result<LossBundle> {
    let (_, _, h, w) = out.s.dims4()?;
    let gt_s = downsample_gt(gt_full, h, w)?;
    let sal = sal_loss(&out.s, &gt_s)?;
    let mut terms = BTreeMap::new();
    let sal_v = scalar(&sal)?;
    terms.insert("sal".to_string(), sal_v);
    let mut total = sal;
    let mut total_v = sal_v;
    if let Some(m5) = &out.mask5 {
        let (_, _, mh, mw) = m5.dims4()?;
        let gt5 = downsample_gt(gt_full, mh, mw)?;
        let l5 = bce_loss(m5, &gt5)?;
        let v = scalar(&l5)?;
        terms.insert("mask5".to_string(), v);
        total = (total + (l5 * cfg.lambda1)?)?;
        total_v += cfg.lambda1 * v;
    }
    for (k, v) in &terms {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: k.clone(),
                step: 0,
                last_good: None,
            });
        }
    }
    Ok(LossBundle {
        total,
        l_sal_final: sal_v,
        l_appearance: 0.0,
        l_motion: 0.0,
        l_total: total_v,
        terms,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.detach().to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

fn stage_modality(stage: u8) -> Modality {
    match stage {
        1 => Modality::RgbOnly,
        2 => Modality::FlowOnly,
        _ => Modality::Both,
    }
}

/// Builds the model for a stage, wiring in pretrained checkpoints (stage 3)
/// or a resume checkpoint, and returns it with the restored step counter and
/// data-stream rng.
pub fn prepare_model(
    cfg: &ModelConfig,
    spec: &TrainStageSpec,
    resume: Option<&Path>,
) -> Result<(PsNet, usize, ChaCha8Rng)> {
    spec.validate()?;
    let role = ModelRole::for_stage(spec.stage);
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let init_seed: u64 = master.gen();
    let model = PsNet::new(cfg, role, init_seed)?;

    let mut start_step = 0usize;
    if let Some(resume_path) = resume {
        let loaded = load_checkpoint(resume_path)?;
        check_compatible(&loaded.meta, cfg)?;
        model.store().load_values(&loaded.tensors, None)?;
        start_step = loaded.meta.global_step;
        master = ChaCha8Rng::seed_from_u64(loaded.meta.rng_seed);
        master.set_word_pos(loaded.meta.rng_word_pos);
        log::info!("resumed from {} at step {start_step}", resume_path.display());
    } else if spec.stage == 3 && !spec.from_scratch {
        let s1 = spec.stage1_ckpt.as_ref().expect("validated");
        let s2 = spec.stage2_ckpt.as_ref().expect("validated");
        let c1 = load_checkpoint(s1)?;
        check_compatible(&c1.meta, cfg)?;
        let n1 = model
            .store()
            .load_values(&c1.tensors, Some(&ModelRole::SpatialPretrain.prefixes()))?;
        let c2 = load_checkpoint(s2)?;
        check_compatible(&c2.meta, cfg)?;
        let n2 = model
            .store()
            .load_values(&c2.tensors, Some(&ModelRole::TemporalPretrain.prefixes()))?;
        log::info!("loaded {n1} spatial and {n2} temporal pretrained tensors");
    }
    Ok((model, start_step, master))
}

/// Runs one training stage to completion.
pub fn train_stage(cfg: &ModelConfig, spec: &TrainStageSpec, resume: Option<&Path>) -> Result<TrainOutcome> {
    let (model, start_step, mut rng) = prepare_model(cfg, spec, resume)?;
    let samples = load_dataset(&spec.dataset, stage_modality(spec.stage), cfg.input_size)?;
    log::info!(
        "stage {}: {} samples, batch {}, lr {}, {} epochs",
        spec.stage,
        samples.len(),
        spec.batch_size,
        spec.lr,
        spec.max_epochs
    );

    let params = model.store().trainable();
    let mut opt = Sgd::new(spec.lr, spec.momentum, spec.weight_decay);
    let mut step = start_step;
    let mut trace = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    std::fs::create_dir_all(&spec.output_dir)?;

    let meta = |step: usize, rng: &ChaCha8Rng| CheckpointMeta {
        format_version: 1,
        stage: spec.stage,
        global_step: step,
        config: cfg.clone(),
        rng_seed: spec.seed,
        rng_word_pos: rng.get_word_pos(),
    };

    'epochs: for epoch in 0..spec.max_epochs {
        opt.lr = spec.lr * spec.lr_decay_factor.powi((epoch / spec.lr_decay_period.max(1)) as i32);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        // Fisher-Yates from the stage rng.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<VideoSample> = chunk
                .iter()
                .map(|&i| {
                    if spec.augment {
                        augment(&samples[i], &mut rng, cfg.input_size)
                    } else {
                        Ok(samples[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&VideoSample> = batch.iter().collect();
            let (rgb, flow, gt) = batch_to_tensors(&refs, &cfg.normalization, cfg.dtype.dtype())?;

            let bundle = match spec.stage {
                1 => pretrain_loss(&model.forward_branch(Branch::Appearance, &rgb, true)?, &gt, cfg),
                2 => pretrain_loss(&model.forward_branch(Branch::Motion, &flow, true)?, &gt, cfg),
                _ => total_loss(&model.forward(&rgb, &flow, true)?, &gt, cfg),
            };
            let bundle = bundle.map_err(|e| match e {
                Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
                    term,
                    step,
                    last_good: last_good.clone(),
                },
                other => other,
            })?;

            let grads = bundle.total.backward()?;
            opt.step(&params, &grads)?;
            step += 1;
            trace.push(bundle.l_total);
            log::info!("{}", bundle.log_record(step));

            if spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0 {
                let path = spec
                    .output_dir
                    .join(format!("stage{}-step{step:06}.ckpt", spec.stage));
                save_checkpoint(&path, model.store(), &meta(step, &rng))?;
                last_good = Some(path);
            }
            if spec.max_steps > 0 && step - start_step >= spec.max_steps {
                break 'epochs;
            }
        }
    }

    let final_path = spec.output_dir.join(format!("stage{}-final.ckpt", spec.stage));
    save_checkpoint(&final_path, model.store(), &meta(step, &rng))?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        final_loss: trace.last().copied().unwrap_or(f64::NAN),
        loss_trace: trace,
        steps: step - start_step,
    })
}
