use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Loss-side regularization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub char_dropout: f64,
    pub pad: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            char_dropout: 0.1,
            pad: crate::data::PAD,
        }
    }
}

/// Label-smoothed cross-entropy of `logits: [n, V]` averaged over the
/// non-pad targets. The target class gets `1 - eps`, every other class
/// `eps / (V - 1)`.
pub fn label_smoothed_loss(g: &mut Graph, logits: Var, targets: &[usize], eps: f64, pad: usize) -> Result<Var> {
    let count = targets.iter().filter(|&&t| t != pad).count();
    if count == 0 {
        return Err(Error::usage("every target is padding"));
    }
    g.smoothed_cross_entropy(logits, targets, eps, pad, count as f64)
}
