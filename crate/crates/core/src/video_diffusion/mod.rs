//! Conditional latent video diffusion: the noise schedule, a spatio-temporal
//! UNet conditioned on aligned structure/motion tokens through Gaussian
//! masked cross-attention, training and deterministic DDIM sampling.

mod model;
mod sample;
mod schedule;
mod train;
pub mod unet;

pub use model::{frame_masks, ClipConditioning, Context, Denoiser, DiffusionConfig, DiffusionModel, Prediction, DENOISER_KIND};
pub use sample::{generate, initial_noise, ConditionedDenoiser, Generated};
pub use schedule::{ddim_sample, q_sample_alpha, NoisePredictor, NoiseSchedule};
pub use train::{prepare_clips, train_diffusion, DiffusionTrainConfig, DiffusionTrainReport, PreparedClip, Window};
