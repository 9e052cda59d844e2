pub mod autograd;
pub mod binio;
pub mod checkpoint;
pub mod conditioning;
pub mod error;
pub mod eval_metrics;
pub mod latent_codec;
pub mod masked_attention;
pub mod nn;
pub mod motion_curves;
pub mod phantom_data;
pub mod training;
pub mod video_diffusion;

pub use error::{Error, Result};
