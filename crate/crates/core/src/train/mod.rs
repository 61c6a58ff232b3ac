//! Denoising pre-training: the step, the loop, checkpointing, and the
//! sqrt-scaling compute-budget estimator.

mod checkpoint;
mod config_text;
mod optim;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, OptimizerState,
};
pub use config_text::{parse_config, ModelSpec, TrainConfig};
pub use optim::{AdamW, Ema};

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;

use crate::data::load_image_dir;
use crate::diffusion::{
    denoising_loss, forward_diffuse, make_schedule, regression_target, sample_noise,
    sample_timesteps, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::model::{build_model, UDiT};
use crate::rng::{derive, Stream};

/// Per-step training diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub t_mean: f64,
    pub grad_norm: f64,
}

/// One loss-log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEntry {
    pub step: u64,
    pub loss: f64,
    pub t_mean: f64,
}

/// Loss log in the `step<TAB>loss<TAB>t_mean` text format.
pub fn format_loss_log(entries: &[LossEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.step, e.loss, e.t_mean));
    }
    out
}

/// One optimization step: sample timesteps and noise for `step`, corrupt the
/// batch, regress the configured target, and apply optimizer + EMA updates.
pub fn train_step(
    model: &mut UDiT<f32>,
    opt: &mut AdamW<f32>,
    ema: &mut Ema<f32>,
    batch: &Array4<f32>,
    step: u64,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<StepStats> {
    let (b, c, h, w) = batch.dim();
    let mut t_rng = derive(cfg.seed, Stream::Timestep, step);
    let t = sample_timesteps(b, &mut t_rng);
    let mut n_rng = derive(cfg.seed, Stream::Noise, step);
    let eps = sample_noise::<f32>((b, c, h, w), &mut n_rng);

    let noisy = forward_diffuse(batch, &eps, &t, sched)?;
    let target = regression_target(batch, &eps, &t, cfg.param)?;
    let (pred, cache) = model.forward_train(&noisy.xt, &t)?;

    let diagnose = |detail: &str, grad_norm: f64| -> Error {
        let t_min = t.iter().cloned().fold(f64::INFINITY, f64::min);
        let t_max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Error::Train(format!(
            "aborted at step {step}: {detail} (t in [{t_min:.4}, {t_max:.4}], \
             grad norm = {grad_norm:.4e})"
        ))
    };
    let loss = match denoising_loss(&pred, &target, &t, cfg.weighting, sched) {
        Ok(l) => l,
        Err(e) => return Err(diagnose(&e.to_string(), f64::NAN)),
    };

    // dL/dpred = lambda_i * 2 (pred - r) / (numel * B)
    let numel = (c * h * w) as f64;
    let mut dpred = &pred - &target;
    for (i, mut img) in dpred.outer_iter_mut().enumerate() {
        let scale = (cfg.weighting.weight(t[i], sched) * 2.0 / (numel * b as f64)) as f32;
        img.mapv_inplace(|v| v * scale);
    }
    let (grads, _) = model.backward(&cache, &dpred);
    let grad_norm = grads.global_norm();
    if !loss.is_finite() || !grads.all_finite() {
        return Err(diagnose(&format!("non-finite loss {loss}"), grad_norm));
    }
    opt.update(model, &grads);
    ema.update_model(model);
    Ok(StepStats {
        loss,
        t_mean: t.mean().unwrap_or(0.0),
        grad_norm,
    })
}

/// Image indices for `step`, drawing through seeded per-epoch shuffles.
/// A batch may span an epoch boundary; everything is a pure function of
/// `(seed, step)`, which is what makes resumption exact.
pub fn batch_indices(n_images: usize, batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    assert!(n_images > 0 && batch_size > 0);
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size {
        let global = step * batch_size as u64 + j as u64;
        let epoch = global / n_images as u64;
        let pos = (global % n_images as u64) as usize;
        let perm = match &cached {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut p: Vec<usize> = (0..n_images).collect();
                let mut rng = derive(seed, Stream::Shuffle, epoch);
                p.shuffle(&mut rng);
                cached = Some((epoch, p));
                &cached.as_ref().unwrap().1
            }
        };
        out.push(perm[pos]);
    }
    out
}

fn gather_batch(images: &[Array3<f32>], indices: &[usize]) -> Array4<f32> {
    let views: Vec<_> = indices.iter().map(|&i| images[i].view()).collect();
    ndarray::stack(Axis(0), &views).expect("uniform image shapes")
}

/// Outcome of [`train_loop`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<LossEntry>,
}

/// Run (or resume) pre-training over an image directory.
///
/// Checkpoints are written to `out_path` atomically every
/// `checkpoint_interval` steps and once at the end; each carries weights, EMA
/// table, and optimizer state, so training resumed from any of them continues
/// the loss trace bit-identically.
pub fn train_loop(
    data_dir: &Path,
    cfg: &TrainConfig,
    out_path: &Path,
    resume_from: Option<&Path>,
    mut on_step: Option<&mut dyn FnMut(&LossEntry)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sched = make_schedule(cfg.schedule);
    let images: Vec<Array3<f32>> = load_image_dir(data_dir, Some(cfg.image_size))?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    if images.len() < cfg.batch_size {
        // allowed: epochs just repeat quickly
        if images.is_empty() {
            return Err(Error::Argument("no training images".into()));
        }
    }

    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut ema = Ema::new(cfg.ema_decay);
    let (mut model, start_step) = match resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_text != cfg.to_text() {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different configuration".into(),
                ));
            }
            let (model, _) = ck.build_model_f32(false)?;
            if let Some(tensors) = &ck.ema {
                ema.restore(tensors);
            }
            if let Some(state) = &ck.optimizer {
                opt.restore(state.step, &state.tensors)?;
            }
            (model, ck.step)
        }
        None => {
            let model = build_model::<f32>(&cfg.model.resolve()?, cfg.seed)?;
            (model, 0)
        }
    };
    if ema.is_empty() {
        ema.update_model(&model); // shadow starts at the initialization
    }

    let mut loss_log = Vec::new();
    let save = |model: &UDiT<f32>, step: u64, opt: &AdamW<f32>, ema: &Ema<f32>| -> Result<()> {
        let (opt_step, tensors) = opt.state_tensors();
        let ck = Checkpoint::capture(
            model,
            cfg,
            step,
            Some(ema.tensors()),
            Some(OptimizerState {
                step: opt_step,
                tensors,
            }),
        );
        ck.save(out_path)
    };

    for step in start_step..cfg.total_steps {
        let idx = batch_indices(images.len(), cfg.batch_size, step, cfg.seed);
        let batch = gather_batch(&images, &idx);
        let stats = train_step(&mut model, &mut opt, &mut ema, &batch, step, cfg, &sched)?;
        let entry = LossEntry {
            step: step + 1,
            loss: stats.loss,
            t_mean: stats.t_mean,
        };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&entry);
        }
        loss_log.push(entry);
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            save(&model, step + 1, &opt, &ema)?;
        }
    }
    save(&model, cfg.total_steps, &opt, &ema)?;
    let checkpoint = Checkpoint::load(out_path)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_log,
    })
}

/// Steps needed at `n_target` images given a measured `(n_ref, s_ref)`
/// convergence anchor: s_target = ceil(s_ref * sqrt(n_target / n_ref)).
pub fn estimate_steps(n_ref: u64, s_ref: u64, n_target: u64) -> Result<u64> {
    if n_ref == 0 || s_ref == 0 || n_target == 0 {
        return Err(Error::Argument(
            "estimate_steps requires positive n_ref, s_ref, n_target".into(),
        ));
    }
    let ratio = n_target as f64 / n_ref as f64;
    Ok((s_ref as f64 * ratio.sqrt()).ceil() as u64)
}
