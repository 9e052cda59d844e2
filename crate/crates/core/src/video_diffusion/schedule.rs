use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β forward process with its cumulative products `ᾱ_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 1 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("invalid schedule: T={timesteps}, β {beta_start}→{beta_end}")));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| if timesteps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64 })
            .collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {})", self.timesteps())));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        q_sample_alpha(x0, self.alpha_bar[t], eps)
    }

    /// DDIM timesteps, descending. Spacing is "trailing" so the first step
    /// always starts at `T − 1`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.timesteps();
        if steps == 0 || steps > t {
            return Err(Error::InvalidArgument(format!("sampling steps {steps} must be in 1..={t}")));
        }
        let mut ts: Vec<usize> = (0..steps).map(|i| ((i + 1) * t) / steps - 1).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// Forward-process sample for an explicit `ᾱ`.
pub fn q_sample_alpha(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} values, noise has {}", x0.len(), eps.len())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Anything that predicts the noise in `x_t` at timestep `t`.
pub trait NoisePredictor {
    fn predict(&mut self, x_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[f64], usize) -> Result<Vec<f64>>> NoisePredictor for F {
    fn predict(&mut self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self(x_t, t)
    }
}

/// Deterministic (η = 0) DDIM reverse process from `x_T`.
pub fn ddim_sample(schedule: &NoiseSchedule, steps: usize, x_t: Vec<f64>, model: &mut impl NoisePredictor) -> Result<Vec<f64>> {
    let ts = schedule.ddim_timesteps(steps)?;
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let eps = model.predict(&x, t)?;
        if eps.len() != x.len() {
            return Err(Error::Shape("noise prediction does not match the latent".into()));
        }
        let ab = schedule.alpha_bar[t];
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar[p]);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (xv, &e) in x.iter_mut().zip(&eps) {
            let x0 = (*xv - sb * e) / sa;
            *xv = pa * x0 + pb * e;
        }
    }
    Ok(x)
}
