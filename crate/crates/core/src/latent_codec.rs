//! Small per-frame convolutional autoencoder mapping frames to the latent
//! grid the diffusion model works in.
//!
//! The encoder halves the resolution `log2(s)` times with strided 3×3
//! convolutions; the decoder mirrors it with nearest-neighbour upsampling.
//! With `s = 1` both sides collapse to a single pointwise convolution.
//! Latents are standardized per channel with statistics stored alongside the
//! weights (identity until [`LatentCodec::fit_latent_stats`] is called).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::phantom_data::VideoClip;
use crate::training::{check_loss, LossLog};

pub const CODEC_KIND: &str = "codec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Spatial downsampling factor `s` (a power of two).
    pub downsample: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Adds a log-variance head, reparameterized sampling and a KL term.
    pub variational: bool,
    pub kl_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { downsample: 4, latent_channels: 4, base_channels: 16, variational: false, kl_weight: 1e-4 }
    }
}

impl CodecConfig {
    fn levels(&self) -> Result<usize> {
        if !self.downsample.is_power_of_two() || self.downsample > 16 {
            return Err(Error::Config(format!("codec downsample {} must be a power of two up to 16", self.downsample)));
        }
        if self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("codec channel counts must be positive".into()));
        }
        Ok(self.downsample.trailing_zeros() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Frames per optimizer step.
    pub batch_frames: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, lr: 2e-3, batch_frames: 8, seed: 0, log_every: 50 }
    }
}

/// `frames × h × w × channels` latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl LatentClip {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.h * self.w * self.channels;
        &self.data[t * n..(t + 1) * n]
    }
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub config: CodecConfig,
    pub store: ParamStore<f32>,
    enc: Vec<Conv2d>,
    enc_mean: Conv2d,
    enc_logvar: Option<Conv2d>,
    dec: Vec<Conv2d>,
    latent_mean: ParamId,
    latent_std: ParamId,
}

impl LatentCodec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let levels = config.levels()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let cl = config.latent_channels;
        let ch = |l: usize| config.base_channels << l;
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        let (enc_mean, enc_logvar);
        if levels == 0 {
            enc_mean = Conv2d::new(&mut store, &mut init, "enc.head", 1, cl, 1, 1);
            enc_logvar = config.variational.then(|| Conv2d::zeroed(&mut store, "enc.logvar", 1, cl, 1));
            dec.push(Conv2d::new(&mut store, &mut init, "dec.out", cl, 1, 1, 1));
        } else {
            enc.push(Conv2d::new(&mut store, &mut init, "enc.in", 1, ch(0), 3, 1));
            for l in 0..levels {
                enc.push(Conv2d::new(&mut store, &mut init, &format!("enc.down{l}"), ch(l), ch(l + 1), 3, 2));
                enc.push(Conv2d::new(&mut store, &mut init, &format!("enc.conv{l}"), ch(l + 1), ch(l + 1), 3, 1));
            }
            enc_mean = Conv2d::new(&mut store, &mut init, "enc.head", ch(levels), cl, 1, 1);
            enc_logvar = config.variational.then(|| Conv2d::zeroed(&mut store, "enc.logvar", ch(levels), cl, 1));
            dec.push(Conv2d::new(&mut store, &mut init, "dec.in", cl, ch(levels), 3, 1));
            for l in (0..levels).rev() {
                dec.push(Conv2d::new(&mut store, &mut init, &format!("dec.up{l}"), ch(l + 1), ch(l), 3, 1));
                dec.push(Conv2d::new(&mut store, &mut init, &format!("dec.conv{l}"), ch(l), ch(l), 3, 1));
            }
            dec.push(Conv2d::new(&mut store, &mut init, "dec.out", ch(0), 1, 3, 1));
        }
        let latent_mean = store.add_buffer("latent.mean", Tensor::zeros(&[cl]));
        let latent_std = store.add_buffer("latent.std", Tensor::full(&[cl], 1.0));
        Ok(Self { config, store, enc, enc_mean, enc_logvar, dec, latent_mean, latent_std })
    }

    fn levels(&self) -> usize {
        self.config.downsample.trailing_zeros() as usize
    }

    /// Raw (unstandardized) latent mean and optional log-variance for
    /// `[B, H, W, 1]` frames.
    fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> (Var, Option<Var>) {
        let mut h = x;
        for conv in &self.enc {
            h = conv.forward(g, &self.store, h);
            h = g.silu(h);
        }
        let mean = self.enc_mean.forward(g, &self.store, h);
        let logvar = self.enc_logvar.as_ref().map(|c| c.forward(g, &self.store, h));
        (mean, logvar)
    }

    fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Var {
        if self.levels() == 0 {
            return self.dec[0].forward(g, &self.store, z);
        }
        let last = self.dec.len() - 1;
        let mut h = z;
        for (i, conv) in self.dec.iter().enumerate() {
            if i > 0 && i < last && i % 2 == 1 {
                h = g.upsample2x(h);
            }
            h = conv.forward(g, &self.store, h);
            if i < last {
                h = g.silu(h);
            }
        }
        h
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.config.downsample;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame size {h}x{w} is not divisible by the downsample factor {s}")));
        }
        Ok((h / s, w / s))
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (lh, lw) = self.check_dims(h, w)?;
        Ok((lh, lw, self.config.latent_channels))
    }

    fn raw_latents(&self, frames: &[f32], n: usize, h: usize, w: usize) -> Result<Vec<f32>> {
        if frames.len() != n * h * w {
            return Err(Error::Shape(format!("expected {n}x{h}x{w} pixels, got {}", frames.len())));
        }
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[n, h, w, 1], frames.to_vec()));
        let (mean, _) = self.encode_graph(&mut g, x);
        Ok(g.value(mean).data.clone())
    }

    /// Standardized latents of `n` frames of size `h × w`.
    pub fn encode_frames(&self, frames: &[f32], n: usize, h: usize, w: usize) -> Result<LatentClip> {
        let (lh, lw) = self.check_dims(h, w)?;
        let mut data = self.raw_latents(frames, n, h, w)?;
        let (mean, std) = (&self.store.value(self.latent_mean).data, &self.store.value(self.latent_std).data);
        let c = self.config.latent_channels;
        for (i, v) in data.iter_mut().enumerate() {
            *v = (*v - mean[i % c]) / std[i % c];
        }
        Ok(LatentClip { frames: n, h: lh, w: lw, channels: c, data })
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<LatentClip> {
        self.encode_frames(&clip.pixels, clip.frames, clip.height, clip.width)
    }

    /// Decoded frames (`frames × H × W`, clamped to `[0, 1]`).
    pub fn decode(&self, latents: &LatentClip) -> Result<Vec<f32>> {
        if latents.channels != self.config.latent_channels || latents.data.len() != latents.frames * latents.h * latents.w * latents.channels {
            return Err(Error::Shape("latent clip does not match the codec".into()));
        }
        let (mean, std) = (&self.store.value(self.latent_mean).data, &self.store.value(self.latent_std).data);
        let c = latents.channels;
        let raw: Vec<f32> = latents.data.iter().enumerate().map(|(i, &v)| v * std[i % c] + mean[i % c]).collect();
        let mut g = Graph::inference();
        let z = g.input(Tensor::new(&[latents.frames, latents.h, latents.w, c], raw));
        let y = self.decode_graph(&mut g, z);
        Ok(g.value(y).data.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Sets the per-channel standardization from the raw latents of `clips`.
    pub fn fit_latent_stats(&mut self, clips: &[VideoClip]) -> Result<()> {
        let c = self.config.latent_channels;
        let (mut sum, mut sq, mut count) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for clip in clips {
            let raw = self.raw_latents(&clip.pixels, clip.frames, clip.height, clip.width)?;
            for (i, &v) in raw.iter().enumerate() {
                sum[i % c] += v as f64;
                sq[i % c] += (v as f64).powi(2);
            }
            count += raw.len() / c;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cannot fit latent statistics on an empty dataset".into()));
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
        let std: Vec<f32> =
            sum.iter().zip(&sq).map(|(s, q)| ((q / count as f64 - (s / count as f64).powi(2)).max(0.0).sqrt().max(1e-4)) as f32).collect();
        self.store.value_mut(self.latent_mean).data = mean;
        self.store.value_mut(self.latent_std).data = std;
        Ok(())
    }

    /// Mean absolute reconstruction error over all pixels of `clips`.
    pub fn reconstruction_mae(&self, clips: &[VideoClip]) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for clip in clips {
            let rec = self.decode(&self.encode(clip)?)?;
            total += rec.iter().zip(&clip.pixels).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            n += rec.len();
        }
        Ok(total / n.max(1) as f64)
    }

    pub fn config_text(&self) -> String {
        serde_json::to_string(&self.config).expect("codec config serializes")
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        Checkpoint { kind: CODEC_KIND.into(), config: self.config_text(), step, seed, meta: "{}".into(), params: self.store.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CODEC_KIND {
            return Err(Error::ConfigMismatch(format!("expected a codec checkpoint, found {}", ck.kind)));
        }
        let config: CodecConfig = serde_json::from_str(&ck.config)?;
        let mut codec = Self::new(config, 0)?;
        codec.store.load_values_from(&ck.params)?;
        Ok(codec)
    }

    /// Hash identifying this codec's configuration and weights.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        self.store.write_to(&mut buf).expect("in-memory write");
        crate::checkpoint::config_hash(&(self.config_text() + &buf.iter().map(|b| format!("{b:02x}")).collect::<String>()))
    }
}

/// Per-step losses of a codec training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecTrainReport {
    pub losses: Vec<f64>,
}

/// Trains a codec on random frames of `clips` with a pixel MSE loss (plus a
/// KL term in variational mode).
pub fn train_codec(
    config: &CodecConfig,
    train: &CodecTrainConfig,
    clips: &[VideoClip],
    log: Option<&mut dyn Write>,
) -> Result<(LatentCodec, CodecTrainReport)> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("codec training needs at least one clip".into()));
    }
    let mut codec = LatentCodec::new(config.clone(), train.seed)?;
    let (h, w) = (clips[0].height, clips[0].width);
    codec.check_dims(h, w)?;
    if clips.iter().any(|c| c.height != h || c.width != w) {
        return Err(Error::Shape("all clips must share one frame size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x00C0_DEC0);
    let mut opt = Adam::new(AdamConfig { lr: train.lr, ..Default::default() }, &codec.store);
    let mut log = LossLog::new(log, train.log_every)?;
    let mut report = CodecTrainReport::default();
    let batch = train.batch_frames.max(1);
    for step in 0..train.steps {
        let mut pixels = Vec::with_capacity(batch * h * w);
        for _ in 0..batch {
            let clip = &clips[rng.gen_range(0..clips.len())];
            pixels.extend_from_slice(clip.frame(rng.gen_range(0..clip.frames)));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[batch, h, w, 1], pixels));
        let (mean, logvar) = codec.encode_graph(&mut g, x);
        let (z, kl) = match logvar {
            Some(lv) => {
                let shape = g.shape(mean).to_vec();
                let n: usize = shape.iter().product();
                let eps: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let eps = g.input(Tensor::new(&shape, eps));
                let half = g.scale(lv, 0.5);
                let std = g.exp(half);
                let noise = g.mul(std, eps);
                let z = g.add(mean, noise);
                // 0.5·mean(μ² + e^{lv} − 1 − lv)
                let mu2 = g.mul(mean, mean);
                let var = g.exp(lv);
                let a = g.add(mu2, var);
                let b = g.sub(a, lv);
                let m = g.mean(b);
                let kl = g.scale(m, 0.5);
                (z, Some(kl))
            }
            None => (mean, None),
        };
        let y = codec.decode_graph(&mut g, z);
        let rec = g.mse(y, x);
        let loss = match kl {
            Some(kl) => {
                let k = g.scale(kl, config.kl_weight as f32);
                g.add(rec, k)
            }
            None => rec,
        };
        let value = g.value(loss).data[0] as f64;
        check_loss(step, value)?;
        let grads = g.backward(loss);
        grads.accumulate_into(&g, &mut codec.store);
        opt.step(&mut codec.store, train.lr);
        report.losses.push(value);
        log.record(step, value, train.lr, step + 1 == train.steps)?;
    }
    Ok((codec, report))
}
