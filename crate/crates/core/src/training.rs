//! Shared training-loop plumbing: the CSV loss log and divergence checks.

use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};

/// Append-only `step,loss,lr,wall_time` log.
pub struct LossLog<'a> {
    out: Option<&'a mut dyn Write>,
    every: usize,
    start: Instant,
    /// `(step, loss)` for every logged step.
    pub history: Vec<(usize, f64)>,
}

impl<'a> LossLog<'a> {
    pub fn new(out: Option<&'a mut dyn Write>, every: usize) -> Result<Self> {
        let mut log = Self { out, every: every.max(1), start: Instant::now(), history: Vec::new() };
        if let Some(w) = log.out.as_mut() {
            writeln!(w, "step,loss,lr,wall_time")?;
        }
        Ok(log)
    }

    /// Records a step; the last step of a run should pass `force`.
    pub fn record(&mut self, step: usize, loss: f64, lr: f64, force: bool) -> Result<()> {
        if step % self.every != 0 && !force {
            return Ok(());
        }
        self.history.push((step, loss));
        if let Some(w) = self.out.as_mut() {
            writeln!(w, "{step},{loss:.9e},{lr:e},{:.3}", self.start.elapsed().as_secs_f64())?;
        }
        Ok(())
    }
}

/// Fails with [`Error::Diverged`] on a non-finite loss.
pub fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}
