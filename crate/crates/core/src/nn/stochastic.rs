//! Stochastic residual connections with depth-scaled drop probabilities.

use super::{LayerNormParams, ParamSet};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Var};

/// Drop probability of layer `l` (1-based) in a stack of `layers`:
/// `(l / layers) · (1 - p)`.
pub fn layer_drop_schedule(l: usize, layers: usize, p: f64) -> Result<f64> {
    if layers == 0 || l == 0 || l > layers {
        return Err(Error::config(format!("layer index {l} outside 1..={layers}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("stochastic p {p} outside [0, 1)")));
    }
    Ok(l as f64 / layers as f64 * (1.0 - p))
}

/// Per-stack layer-drop policy.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticPolicy {
    p: f64,
    layers: usize,
    drops: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(p: f64, layers: usize) -> Result<Self> {
        let drops = (1..=layers)
            .map(|l| layer_drop_schedule(l, layers, p))
            .collect::<Result<Vec<_>>>()?;
        if layers == 0 {
            return Err(Error::config("stochastic policy over zero layers"));
        }
        Ok(Self { p, layers, drops })
    }

    pub fn global_p(&self) -> f64 {
        self.p
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Drop probability of 1-based layer `l`.
    pub fn drop_prob(&self, l: usize) -> f64 {
        self.drops[l - 1]
    }

    /// Draws the shared mask of layer `l` for one training forward pass.
    pub fn draw(&self, l: usize, rng: &mut RngStream) -> Gate {
        let p_l = self.drop_prob(l);
        if rng.bernoulli(p_l) {
            Gate::Skip
        } else {
            Gate::Keep { drop_prob: p_l }
        }
    }
}

/// How a residual block runs in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    /// Inference: the full network, unscaled.
    Eval,
    /// Training with `M = 1`: the sub-layer output is scaled by `1/(1-p_l)`.
    Keep { drop_prob: f64 },
    /// Training with `M = 0`: the sub-layer is never evaluated.
    Skip,
}

impl Gate {
    pub fn is_skip(self) -> bool {
        matches!(self, Gate::Skip)
    }
}

/// The residual branch `M · F(x) / (1 - p_l)` before the shortcut is added:
/// `None` when the layer is skipped, `F(x)` unscaled at inference.
pub fn gated_branch(
    g: &mut Graph,
    x: Var,
    sublayer: impl FnOnce(&mut Graph, Var) -> Result<Var>,
    gate: Gate,
) -> Result<Option<Var>> {
    match gate {
        Gate::Skip => Ok(None),
        Gate::Eval => sublayer(g, x).map(Some),
        Gate::Keep { drop_prob } => {
            if !(0.0..1.0).contains(&drop_prob) {
                return Err(Error::config(format!("layer drop probability {drop_prob} outside [0, 1)")));
            }
            let fx = sublayer(g, x)?;
            Ok(Some(g.scale(fx, 1.0 / (1.0 - drop_prob))))
        }
    }
}

/// `LayerNorm(M · F(x) / (1 - p_l) + x)` in training, `LayerNorm(F(x) + x)`
/// at inference.
///
/// On a skipped layer the normalization is still applied to `x` unless
/// `norm_on_skip` is false, in which case `x` passes through untouched.
pub fn stochastic_residual(
    g: &mut Graph,
    params: &ParamSet,
    x: Var,
    sublayer: impl FnOnce(&mut Graph, Var) -> Result<Var>,
    norm: &LayerNormParams,
    gate: Gate,
    norm_on_skip: bool,
) -> Result<Var> {
    let Some(inner) = gated_branch(g, x, sublayer, gate)? else {
        return if norm_on_skip { norm.forward(g, params, x) } else { Ok(x) };
    };
    if g.shape(inner) != g.shape(x) {
        return Err(Error::Dimension {
            op: "stochastic_residual",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(inner).to_vec(),
        });
    }
    let sum = g.add(inner, x)?;
    norm.forward(g, params, sum)
}
