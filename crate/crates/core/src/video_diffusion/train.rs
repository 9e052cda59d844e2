use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, Graph, Tensor};
use crate::error::{Error, Result};
use crate::latent_codec::{LatentClip, LatentCodec};
use crate::motion_curves::MotionCurveSet;
use crate::phantom_data::VideoClip;
use crate::training::{check_loss, LossLog};

use super::model::{frame_masks, ClipConditioning, DiffusionConfig, DiffusionModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_clips: usize,
    /// Frames per training window.
    pub frames: usize,
    /// Largest frame interval sampled when the stored clip is long enough.
    pub max_interval: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Writes `step-XXXXXX.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Decay of an exponential moving average of the weights; when non-zero
    /// the averaged weights replace the trained ones at the end of training.
    pub ema_decay: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            warmup_steps: 0,
            batch_clips: 1,
            frames: 12,
            max_interval: 4,
            clip_norm: 1.0,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
            ema_decay: 0.0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Clip with its latents, curves and per-frame masks, computed once.
#[derive(Clone, Debug)]
pub struct PreparedClip<'a> {
    pub clip: &'a VideoClip,
    pub latents: LatentClip,
    pub curves: MotionCurveSet,
    pub masks: [Vec<f64>; 2],
}

/// A training window: conditioning plus the clean latents `x0`.
pub struct Window<'a> {
    pub cond: ClipConditioning<'a>,
    pub x0: Vec<f32>,
}

impl<'a> PreparedClip<'a> {
    pub fn new(config: &DiffusionConfig, codec: &LatentCodec, clip: &'a VideoClip) -> Result<Self> {
        if clip.height != config.height || clip.width != config.width || clip.categories != config.categories {
            return Err(Error::Shape(format!(
                "clip is {}x{} with {} categories, model expects {}x{} with {}",
                clip.height, clip.width, clip.categories, config.height, config.width, config.categories
            )));
        }
        let latents = codec.encode(clip)?;
        let curves = MotionCurveSet::from_clip(clip);
        let masks = frame_masks(config, &curves);
        Ok(Self { clip, latents, curves, masks })
    }

    /// Frames `start, start + step, …` (`count` of them).
    pub fn window(&self, config: &DiffusionConfig, start: usize, step: usize, count: usize) -> Result<Window<'_>> {
        let n = self.clip.frames;
        if step == 0 || count == 0 || start + step * (count - 1) >= n {
            return Err(Error::InvalidArgument(format!("window {start}+{step}x{count} exceeds {n} frames")));
        }
        let c = self.curves.categories;
        let frames: Vec<usize> = (0..count).map(|i| start + i * step).collect();
        let curves = MotionCurveSet {
            frames: count,
            categories: c,
            coords: frames.iter().flat_map(|&t| self.curves.coords[t * c..(t + 1) * c].to_vec()).collect(),
            present: frames.iter().flat_map(|&t| self.curves.present[t * c..(t + 1) * c].to_vec()).collect(),
        };
        let pick = |level: usize| -> Vec<f64> {
            let per = self.masks[level].len() / n;
            frames.iter().flat_map(|&t| self.masks[level][t * per..(t + 1) * per].to_vec()).collect()
        };
        let masks = [pick(0), pick(1)];
        let x0 = frames.iter().flat_map(|&t| self.latents.frame(t).to_vec()).collect();
        let cond = ClipConditioning::with_masks(config, self.clip.frame(start), curves, self.latents.frame(start), masks)?;
        Ok(Window { cond, x0 })
    }

    /// Intervals `1..=max` for which a window of `count` frames fits.
    pub fn intervals(&self, count: usize, max: usize) -> Vec<usize> {
        (1..=max.max(1)).filter(|s| s * (count.max(1) - 1) < self.clip.frames).collect()
    }
}

pub fn prepare_clips<'a>(config: &DiffusionConfig, codec: &LatentCodec, clips: &'a [VideoClip]) -> Result<Vec<PreparedClip<'a>>> {
    clips.iter().map(|c| PreparedClip::new(config, codec, c)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffusionTrainReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// Trains `model` in place on noise-prediction MSE.
///
/// On a non-finite loss or gradient the current (last good) parameters are
/// written to `checkpoint_dir/last-good.ckpt` before returning
/// [`Error::Diverged`].
pub fn train_diffusion(
    model: &mut DiffusionModel,
    train: &DiffusionTrainConfig,
    data: &[PreparedClip],
    log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<DiffusionTrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("diffusion training needs at least one clip".into()));
    }
    if data.iter().any(|d| d.clip.frames < train.frames) {
        return Err(Error::InvalidArgument(format!("every clip needs at least {} frames", train.frames)));
    }
    let config = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xD1FF_0510);
    let mut opt = Adam::new(AdamConfig { lr: train.lr, clip_norm: train.clip_norm, ..Default::default() }, &model.store);
    let mut log = LossLog::new(log, train.log_every)?;
    let mut report = DiffusionTrainReport::default();
    let batch = train.batch_clips.max(1);
    let n = train.frames;
    let save = |model: &DiffusionModel, step: usize, name: &str| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.to_checkpoint(step as u64, train.seed).save(&dir.join(name))?;
        }
        Ok(())
    };
    if !(0.0..1.0).contains(&train.ema_decay) {
        return Err(Error::Config(format!("ema_decay {} must be in [0, 1)", train.ema_decay)));
    }
    let mut ema = (train.ema_decay > 0.0).then(|| model.store.clone());
    for step in 0..train.steps {
        let mut windows = Vec::with_capacity(batch);
        let mut timesteps = Vec::with_capacity(batch);
        for _ in 0..batch {
            let item = &data[rng.gen_range(0..data.len())];
            let intervals = item.intervals(n, train.max_interval);
            let s = intervals[rng.gen_range(0..intervals.len())];
            let start = rng.gen_range(0..item.clip.frames - s * (n - 1));
            windows.push(item.window(&config, start, s, n)?);
            timesteps.push(rng.gen_range(0..config.timesteps));
        }
        let mut x_t = Vec::new();
        let mut eps = Vec::new();
        for (w, &t) in windows.iter().zip(&timesteps) {
            let noise: Vec<f64> = (0..w.x0.len()).map(|_| rng.sample(StandardNormal)).collect();
            let x0: Vec<f64> = w.x0.iter().map(|&v| v as f64).collect();
            x_t.extend(model.schedule.q_sample(&x0, t, &noise)?.into_iter().map(|v| v as f32));
            eps.extend(noise.into_iter().map(|v| v as f32));
        }
        let (h, w) = config.latent_dims();
        let shape = [batch * n, h, w, config.latent_channels];
        let conds: Vec<ClipConditioning> = windows.into_iter().map(|w| w.cond).collect();

        let mut g = Graph::new();
        let xv = g.input(Tensor::new(&shape, x_t));
        let target = g.input(Tensor::new(&shape, eps));
        let ctx = model.net.context(&mut g, &model.store, &conds)?;
        let pred = model.net.forward_with_tokens(&mut g, &model.store, xv, &timesteps, ctx.tokens, &conds)?;
        let loss = g.mse(pred, target);
        let value = g.value(loss).data[0] as f64;
        let lr = train.lr_at(step);
        if let Err(e) = check_loss(step, value) {
            save(model, step, "last-good.ckpt")?;
            return Err(e);
        }
        let grads = g.backward(loss);
        grads.accumulate_into(&g, &mut model.store);
        let norm = model.store.grad_norm();
        if !norm.is_finite() {
            model.store.zero_grads();
            save(model, step, "last-good.ckpt")?;
            return Err(Error::Diverged { step, loss: norm });
        }
        opt.step(&mut model.store, lr);

        let structure = g.value(ctx.structure).clone();
        let d = structure.last_dim();
        let c = config.categories;
        for (b, cond) in conds.iter().enumerate() {
            for (k, &present) in cond.initial.present.iter().enumerate() {
                if present {
                    let row = b * c + k;
                    model.net.conditioner.bank.update(&mut model.store, k, &structure.data[row * d..(row + 1) * d]);
                }
            }
        }
        if let Some(avg) = ema.as_mut() {
            // Short warmup so early averages are not dominated by the init.
            let d = train.ema_decay.min((1 + step) as f64 / (10 + step) as f64) as f32;
            for id in model.store.ids().collect::<Vec<_>>() {
                let src = &model.store.value(id).data;
                let dst = &mut avg.value_mut(id).data;
                if model.store.trainable(id) {
                    dst.iter_mut().zip(src).for_each(|(a, &w)| *a = d * *a + (1.0 - d) * w);
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
        report.losses.push(value);
        report.grad_norms.push(norm);
        log.record(step, value, lr, step + 1 == train.steps)?;
        if train.checkpoint_every > 0 && (step + 1) % train.checkpoint_every == 0 {
            save(model, step + 1, &format!("step-{:06}.ckpt", step + 1))?;
        }
    }
    if let Some(avg) = ema {
        model.store.load_values_from(&avg)?;
    }
    Ok(report)
}
