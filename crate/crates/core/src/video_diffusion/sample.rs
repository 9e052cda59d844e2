use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::latent_codec::{LatentClip, LatentCodec};
use crate::motion_curves::MotionCurveSet;

use super::model::{ClipConditioning, DiffusionModel};
use super::schedule::{ddim_sample, NoisePredictor};

/// Trained denoiser bound to one clip's conditioning, with the tokens
/// computed once.
pub struct ConditionedDenoiser<'m, 'a> {
    model: &'m DiffusionModel,
    cond: ClipConditioning<'a>,
    tokens: Tensor<f32>,
}

impl<'m, 'a> ConditionedDenoiser<'m, 'a> {
    pub fn new(model: &'m DiffusionModel, cond: ClipConditioning<'a>) -> Result<Self> {
        let mut g = Graph::inference();
        let ctx = model.net.context(&mut g, &model.store, std::slice::from_ref(&cond))?;
        let tokens = g.value(ctx.tokens).clone();
        Ok(Self { model, cond, tokens })
    }

    pub fn latent_len(&self) -> usize {
        let (h, w) = self.model.config().latent_dims();
        self.cond.curves.frames * h * w * self.model.config().latent_channels
    }
}

impl NoisePredictor for ConditionedDenoiser<'_, '_> {
    fn predict(&mut self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let (h, w) = cfg.latent_dims();
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[self.cond.curves.frames, h, w, cfg.latent_channels], x_t.iter().map(|&v| v as f32).collect()));
        let tokens = g.input(self.tokens.clone());
        let eps = self.model.net.forward_with_tokens(&mut g, &self.model.store, x, &[t], tokens, std::slice::from_ref(&self.cond))?;
        Ok(g.value(eps).data.iter().map(|&v| v as f64).collect())
    }
}

/// A generated clip: latents and decoded frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub latents: LatentClip,
    /// `frames × height × width` pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
}

/// Standard-normal `x_T` for a seed.
pub fn initial_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A3D_1E00);
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates a clip following `curves` from a single initial frame.
pub fn generate(
    model: &DiffusionModel,
    codec: &LatentCodec,
    initial: &[f32],
    curves: &MotionCurveSet,
    steps: usize,
    seed: u64,
) -> Result<Generated> {
    model.check_codec(&codec.fingerprint())?;
    curves.validate()?;
    let cfg = model.config();
    if initial.len() != cfg.height * cfg.width {
        return Err(Error::Shape(format!("initial frame must be {}x{}", cfg.height, cfg.width)));
    }
    let first = codec.encode_frames(initial, 1, cfg.height, cfg.width)?;
    let cond = ClipConditioning::new(cfg, initial, curves.clone(), &first.data)?;
    let mut net = ConditionedDenoiser::new(model, cond)?;
    let x_t = initial_noise(net.latent_len(), seed);
    let x0 = ddim_sample(&model.schedule, steps, x_t, &mut net)?;
    let (h, w) = cfg.latent_dims();
    let latents = LatentClip { frames: curves.frames, h, w, channels: cfg.latent_channels, data: x0.iter().map(|&v| v as f32).collect() };
    let pixels = codec.decode(&latents)?;
    Ok(Generated { latents, pixels })
}
