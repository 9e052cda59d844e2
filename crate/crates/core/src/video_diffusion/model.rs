use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, ParamStore, Scalar, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{Conditioner, ConditioningConfig, InitialFrame};
use crate::error::{Error, Result};
use crate::masked_attention::{build_gaussian_masks, MaskMode, MaskOptions};
use crate::motion_curves::{MotionCurveSet, MotionEncoder, MotionEncoderConfig};
use crate::nn::{sinusoidal_embedding, Activation, Conv2d, GroupNorm, Mlp};

use super::schedule::NoiseSchedule;
use super::unet::{BlockContext, ResBlock, SpatioTemporalBlock};

pub const DENOISER_KIND: &str = "denoiser";

/// What the network's last layer outputs. Every variant is converted to a
/// noise estimate inside the forward pass, so the training loss and the
/// sampler always see `ε̂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// `ε̂` directly.
    #[default]
    Epsilon,
    /// `v = √ᾱ·ε − √(1−ᾱ)·x0`; then `ε̂ = √ᾱ·v̂ + √(1−ᾱ)·x_t`.
    Velocity,
}

/// Everything that fixes the denoiser's architecture and diffusion process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub height: usize,
    pub width: usize,
    pub categories: usize,
    /// Codec downsampling factor and latent channels.
    pub downsample: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    pub mask: MaskOptions,
    pub mask_mode: MaskMode,
    /// Disabling masks gives plain cross-attention.
    pub use_masks: bool,
    /// Appends normalized x/y coordinate planes to the UNet input.
    pub coord_channels: bool,
    pub prediction: Prediction,
    pub motion: MotionEncoderConfig,
    pub conditioning: ConditioningConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            categories: 4,
            downsample: 4,
            latent_channels: 4,
            base_channels: 64,
            time_dim: 128,
            groups: 8,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 50,
            mask: MaskOptions::default(),
            mask_mode: MaskMode::Multiplicative,
            use_masks: true,
            coord_channels: false,
            prediction: Prediction::Epsilon,
            motion: MotionEncoderConfig::default(),
            conditioning: ConditioningConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn latent_dims(&self) -> (usize, usize) {
        (self.height / self.downsample, self.width / self.downsample)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.latent_dims();
        if self.downsample == 0 || self.height % self.downsample != 0 || self.width % self.downsample != 0 {
            return Err(Error::Config(format!("frame {}x{} not divisible by {}", self.height, self.width, self.downsample)));
        }
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("latent grid {h}x{w} must be even")));
        }
        if self.categories == 0 || self.latent_channels == 0 || self.base_channels == 0 || self.time_dim == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if self.motion.dim != self.conditioning.dim {
            return Err(Error::Config(format!(
                "motion embedding width {} differs from structure embedding width {}",
                self.motion.dim, self.conditioning.dim
            )));
        }
        if !(self.mask.sigma > 0.0) {
            return Err(Error::Config("mask sigma must be positive".into()));
        }
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("diffusion config serializes")
    }
}

/// Conditioning of one clip: initial frame, target curves, the frame-0
/// latent and Gaussian masks at both UNet resolutions.
#[derive(Clone, Debug)]
pub struct ClipConditioning<'a> {
    pub initial: InitialFrame<'a>,
    pub curves: MotionCurveSet,
    pub first_latent: &'a [f32],
    /// `[level][frame · h_l·w_l · C]` in attention layout.
    pub masks: [Vec<f64>; 2],
}

/// Attention-layout masks of every frame of `curves` at both UNet levels.
pub fn frame_masks(config: &DiffusionConfig, curves: &MotionCurveSet) -> [Vec<f64>; 2] {
    let (h, w) = config.latent_dims();
    let mut out = [Vec::new(), Vec::new()];
    for t in 0..curves.frames {
        let (boxes, present) = curves.frame_boxes(t, config.height, config.width);
        let stack = build_gaussian_masks(&boxes, &present, config.mask, h, w, config.height, config.width);
        out[0].extend(stack.attention_layout::<f64>());
        out[1].extend(stack.downsample(2).attention_layout::<f64>());
    }
    out
}

impl<'a> ClipConditioning<'a> {
    /// Initial-frame boxes come from frame 0 of `curves`.
    pub fn new(config: &DiffusionConfig, initial_pixels: &'a [f32], curves: MotionCurveSet, first_latent: &'a [f32]) -> Result<Self> {
        let masks = frame_masks(config, &curves);
        Self::with_masks(config, initial_pixels, curves, first_latent, masks)
    }

    pub fn with_masks(
        config: &DiffusionConfig,
        initial_pixels: &'a [f32],
        curves: MotionCurveSet,
        first_latent: &'a [f32],
        masks: [Vec<f64>; 2],
    ) -> Result<Self> {
        let (h, w) = config.latent_dims();
        if initial_pixels.len() != config.height * config.width {
            return Err(Error::Shape(format!("initial frame must be {}x{}", config.height, config.width)));
        }
        if first_latent.len() != h * w * config.latent_channels {
            return Err(Error::Shape(format!("frame-0 latent must be {h}x{w}x{}", config.latent_channels)));
        }
        if curves.categories != config.categories || curves.frames == 0 {
            return Err(Error::Shape(format!("curves must have {} categories and at least one frame", config.categories)));
        }
        let c = config.categories;
        if masks[0].len() != curves.frames * h * w * c || masks[1].len() != curves.frames * h * w * c / 4 {
            return Err(Error::Shape("mask stack does not match the curves".into()));
        }
        let (boxes, present) = curves.frame_boxes(0, config.height, config.width);
        let initial = InitialFrame { pixels: initial_pixels, height: config.height, width: config.width, boxes, present };
        Ok(Self { initial, curves, first_latent, masks })
    }
}

/// Conditioning tokens for a batch plus the per-clip structure embeddings
/// they were built from.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub tokens: Var,
    pub structure: Var,
}

/// Motion encoder, conditioner and the spatio-temporal UNet.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DiffusionConfig,
    pub motion: MotionEncoder,
    pub conditioner: Conditioner,
    pub time_mlp: Mlp,
    pub conv_in: Conv2d,
    pub down_block: SpatioTemporalBlock,
    pub down: Conv2d,
    pub mid_block: SpatioTemporalBlock,
    pub mid_res: ResBlock,
    pub up: Conv2d,
    pub up_block: SpatioTemporalBlock,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

impl Denoiser {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, config: DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (c0, c1) = (c.base_channels, 2 * c.base_channels);
        let (td, dc, gr) = (c.time_dim, c.conditioning.cond_dim, c.groups);
        let cin = 2 * c.latent_channels + if c.coord_channels { 2 } else { 0 };
        let motion = MotionEncoder::new(store, init, "motion", c.motion.clone(), c.categories)?;
        let conditioner = Conditioner::new(store, init, "cond", c.conditioning.clone(), c.categories);
        Ok(Self {
            motion,
            conditioner,
            time_mlp: Mlp::new(store, init, "time", &[td, td, td], Activation::Silu),
            conv_in: Conv2d::new(store, init, "unet.in", cin, c0, 3, 1),
            down_block: SpatioTemporalBlock::new(store, init, "unet.down0", c0, c0, td, dc, gr),
            down: Conv2d::new(store, init, "unet.downsample", c0, c1, 3, 2),
            mid_block: SpatioTemporalBlock::new(store, init, "unet.mid0", c1, c1, td, dc, gr),
            mid_res: ResBlock::new(store, init, "unet.mid1", c1, c1, td, gr),
            up: Conv2d::new(store, init, "unet.upsample", c1, c0, 3, 1),
            up_block: SpatioTemporalBlock::new(store, init, "unet.up0", 2 * c0, c0, td, dc, gr),
            norm_out: GroupNorm::new(store, "unet.norm_out", c0, gr),
            conv_out: Conv2d::zeroed(store, "unet.out", c0, c.latent_channels, 3),
            config,
        })
    }

    /// Tokens `[B·N·C, D_cond]` for a batch of clips sharing one frame count.
    pub fn context<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, conds: &[ClipConditioning]) -> Result<Context> {
        let frames = batch_frames(conds)?;
        let c = self.config.categories;
        let mut motion_rows = Vec::with_capacity(conds.len());
        for cond in conds {
            motion_rows.push(self.motion.embed(g, store, &cond.curves)?);
        }
        let motion = if motion_rows.len() == 1 { motion_rows[0] } else { g.concat_rows(&motion_rows) };
        let initial: Vec<InitialFrame> = conds.iter().map(|c| c.initial.clone()).collect();
        let (structure, _) = self.conditioner.encode_structures(g, store, &initial)?;
        let rows = conds.len() * frames * c;
        let idx: Vec<usize> = (0..rows).map(|r| (r / (frames * c)) * c + r % c).collect();
        let broadcast = g.gather_rows(structure, &idx);
        let tokens = self.conditioner.align(g, store, broadcast, motion)?;
        Ok(Context { tokens, structure })
    }

    /// Predicted noise `[B·N, h, w, c_l]` for `x_t` with per-clip timesteps.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_t: Var,
        timesteps: &[usize],
        conds: &[ClipConditioning],
    ) -> Result<Var> {
        let ctx = self.context(g, store, conds)?;
        self.forward_with_tokens(g, store, x_t, timesteps, ctx.tokens, conds)
    }

    /// As [`Denoiser::forward`] with precomputed conditioning tokens.
    pub fn forward_with_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_t: Var,
        timesteps: &[usize],
        tokens: Var,
        conds: &[ClipConditioning],
    ) -> Result<Var> {
        let cfg = &self.config;
        let frames = batch_frames(conds)?;
        let clips = conds.len();
        let rows = clips * frames;
        let (h, w) = cfg.latent_dims();
        let cl = cfg.latent_channels;
        if timesteps.len() != clips {
            return Err(Error::Shape(format!("{} timesteps for {clips} clips", timesteps.len())));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= cfg.timesteps) {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..{}", cfg.timesteps)));
        }
        if g.shape(x_t) != [rows, h, w, cl] {
            return Err(Error::Shape(format!("x_t must be [{rows}, {h}, {w}, {cl}], got {:?}", g.shape(x_t))));
        }
        if g.shape(tokens) != [rows * cfg.categories, cfg.conditioning.cond_dim] {
            return Err(Error::Shape(format!("tokens have shape {:?}", g.shape(tokens))));
        }

        // frame-0 latent repeated over frames, plus optional coordinates
        let mut first = Vec::with_capacity(rows * h * w * cl);
        for cond in conds {
            for _ in 0..frames {
                first.extend(cond.first_latent.iter().map(|&v| T::lit(v as f64)));
            }
        }
        let first = g.input(Tensor::new(&[rows, h, w, cl], first));
        let mut parts = vec![x_t, first];
        if cfg.coord_channels {
            let mut coords = Vec::with_capacity(rows * h * w * 2);
            for _ in 0..rows {
                for y in 0..h {
                    for x in 0..w {
                        coords.push(T::lit((x as f64 + 0.5) / w as f64 * 2.0 - 1.0));
                        coords.push(T::lit((y as f64 + 0.5) / h as f64 * 2.0 - 1.0));
                    }
                }
            }
            parts.push(g.input(Tensor::new(&[rows, h, w, 2], coords)));
        }
        let x = g.concat_last(&parts);

        let steps: Vec<f64> = conds.iter().enumerate().flat_map(|(i, _)| std::iter::repeat(timesteps[i] as f64).take(frames)).collect();
        let temb = g.input(Tensor::from_f64(&[rows, cfg.time_dim], &sinusoidal_embedding(&steps, cfg.time_dim)));
        let temb = self.time_mlp.forward(g, store, temb);
        let temb = g.silu(temb);

        let frame_pos: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let (c0, c1) = (cfg.base_channels, 2 * cfg.base_channels);
        let pos0 = g.input(Tensor::from_f64(&[frames, c0], &sinusoidal_embedding(&frame_pos, c0)));
        let pos1 = g.input(Tensor::from_f64(&[frames, c1], &sinusoidal_embedding(&frame_pos, c1)));
        let (mask0, mask1) = if cfg.use_masks {
            let gather = |level: usize| -> Vec<T> {
                conds.iter().flat_map(|c| c.masks[level].iter().map(|&v| T::lit(v))).collect()
            };
            let m0 = gather(0);
            let m1 = gather(1);
            (
                Some(g.input(Tensor::new(&[rows, h * w, cfg.categories], m0))),
                Some(g.input(Tensor::new(&[rows, h * w / 4, cfg.categories], m1))),
            )
        } else {
            (None, None)
        };
        let ctx0 = BlockContext { clips, temb, tokens, mask: mask0, mode: cfg.mask_mode, positions: pos0 };
        let ctx1 = BlockContext { mask: mask1, positions: pos1, ..ctx0 };

        let x = self.conv_in.forward(g, store, x);
        let skip = self.down_block.forward(g, store, x, &ctx0);
        let d = self.down.forward(g, store, skip);
        let m = self.mid_block.forward(g, store, d, &ctx1);
        let m = self.mid_res.forward(g, store, m, temb);
        let u = g.upsample2x(m);
        let u = self.up.forward(g, store, u);
        let u = g.concat_last(&[u, skip]);
        let u = self.up_block.forward(g, store, u, &ctx0);
        let u = self.norm_out.forward(g, store, u, rows);
        let u = g.silu(u);
        let out = self.conv_out.forward(g, store, u);
        match cfg.prediction {
            Prediction::Epsilon => Ok(out),
            Prediction::Velocity => {
                let alpha_bar = cfg.schedule()?.alpha_bar;
                let per = frames * h * w * cl;
                let coef = |f: fn(f64) -> f64| -> Tensor<T> {
                    let data = timesteps.iter().flat_map(|&t| std::iter::repeat(T::lit(f(alpha_bar[t]))).take(per)).collect();
                    Tensor::new(&[rows, h, w, cl], data)
                };
                let a = g.input(coef(f64::sqrt));
                let b = g.input(coef(|ab| (1.0 - ab).sqrt()));
                let av = g.mul(a, out);
                let bx = g.mul(b, x_t);
                Ok(g.add(av, bx))
            }
        }
    }
}

fn batch_frames(conds: &[ClipConditioning]) -> Result<usize> {
    let frames = conds.first().map(|c| c.curves.frames).ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if conds.iter().any(|c| c.curves.frames != frames) {
        return Err(Error::Shape("all clips in a batch must have the same frame count".into()));
    }
    Ok(frames)
}

/// A trained (or freshly initialized) denoiser with its `f32` parameters.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub net: Denoiser,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    /// Fingerprint of the codec whose latents the model was trained on.
    pub codec_fingerprint: String,
}

// Extra keys (such as a caller's config echo) are allowed and ignored.
#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    codec_fingerprint: String,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, seed: u64, codec_fingerprint: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Denoiser::new(&mut store, &mut Init::new(seed), config)?;
        let schedule = net.config.schedule()?;
        Ok(Self { net, store, schedule, codec_fingerprint: codec_fingerprint.to_string() })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.net.config
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        let meta = DenoiserMeta { codec_fingerprint: self.codec_fingerprint.clone() };
        Checkpoint {
            kind: DENOISER_KIND.into(),
            config: self.config().to_text(),
            step,
            seed,
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != DENOISER_KIND {
            return Err(Error::ConfigMismatch(format!("expected a denoiser checkpoint, found {}", ck.kind)));
        }
        let config: DiffusionConfig = serde_json::from_str(&ck.config)?;
        let meta: DenoiserMeta = serde_json::from_str(&ck.meta)?;
        let mut model = Self::new(config, 0, &meta.codec_fingerprint)?;
        model.store.load_values_from(&ck.params)?;
        Ok(model)
    }

    /// Loads and additionally requires the stored config to equal `expected`.
    pub fn from_checkpoint_checked(ck: &Checkpoint, expected: &DiffusionConfig) -> Result<Self> {
        if crate::checkpoint::config_hash(&expected.to_text()) != ck.config_hash() {
            return Err(Error::ConfigMismatch("denoiser checkpoint was trained with a different configuration".into()));
        }
        Self::from_checkpoint(ck)
    }

    pub fn check_codec(&self, fingerprint: &str) -> Result<()> {
        if fingerprint != self.codec_fingerprint {
            return Err(Error::ConfigMismatch("codec does not match the one the denoiser was trained with".into()));
        }
        Ok(())
    }
}
