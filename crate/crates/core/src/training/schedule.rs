use crate::error::{Error, Result};

/// `init_lr · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, init_lr: f64, d: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::usage("learning-rate steps start at 1"));
    }
    if warmup == 0 || d == 0 {
        return Err(Error::config("warmup and model width must be positive"));
    }
    let s = step as f64;
    let rise = s * (warmup as f64).powf(-1.5);
    let decay = s.powf(-0.5);
    Ok(init_lr * (d as f64).powf(-0.5) * rise.min(decay))
}

/// Warm-up then inverse-square-root decay, peaking at `warmup`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub init_lr: f64,
    pub d: usize,
    pub warmup: u64,
}

impl NoamSchedule {
    pub fn new(init_lr: f64, d: usize, warmup: u64) -> Result<Self> {
        if !(init_lr > 0.0 && init_lr.is_finite()) {
            return Err(Error::config(format!("init_lr {init_lr} must be positive")));
        }
        noam_lr(1, init_lr, d, warmup)?;
        Ok(Self { init_lr, d, warmup })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        noam_lr(step, self.init_lr, self.d, self.warmup)
    }
}
