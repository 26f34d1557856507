//! Transformer building blocks: attention, positional encoding, stochastic
//! residual connections, and encoder/decoder layers.

mod attention;
mod layers;
mod param;
mod positional;
mod stochastic;

pub use attention::{multi_head_attention, scaled_dot_attention, AttentionMask, AttentionParams};
pub use layers::{DecoderLayer, EncoderLayer, FeedForward, SublayerConfig};
pub use param::{ParamId, ParamSet, Parameter};
pub use positional::positional_encoding;
pub use stochastic::{gated_branch, layer_drop_schedule, stochastic_residual, Gate, StochasticPolicy};

use crate::error::Result;
use crate::rng::{streams, RngStream};
use crate::tensor::{Graph, Tensor, Var};

/// Variance floor used by every layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Random streams consumed by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct TrainRng {
    pub dropout: RngStream,
    pub layers: RngStream,
    pub chars: RngStream,
}

impl TrainRng {
    pub fn new(seed: u64) -> Self {
        Self {
            dropout: RngStream::new(seed, streams::DROPOUT),
            layers: RngStream::new(seed, streams::LAYER_MASK),
            chars: RngStream::new(seed, streams::CHAR_DROPOUT),
        }
    }

    /// Combined draw position of all streams.
    pub fn counters(&self) -> [u128; 3] {
        [self.dropout.counter(), self.layers.counter(), self.chars.counter()]
    }
}

/// Forward-pass mode. Evaluation never touches randomness.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut TrainRng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout_rng(&mut self) -> Option<&mut RngStream> {
        match self {
            Mode::Train(r) => Some(&mut r.dropout),
            Mode::Eval => None,
        }
    }

    pub fn layer_rng(&mut self) -> Option<&mut RngStream> {
        match self {
            Mode::Train(r) => Some(&mut r.layers),
            Mode::Eval => None,
        }
    }

    pub fn char_rng(&mut self) -> Option<&mut RngStream> {
        match self {
            Mode::Train(r) => Some(&mut r.chars),
            Mode::Eval => None,
        }
    }
}

/// Uniform `±1/√fan_in` initialization for a weight matrix.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Affine map `x · W + b` with `W: [in, out]`; the bias is optional.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Result<Self> {
        let mut lin = Self::unbiased(params, name, fan_in, fan_out, rng)?;
        lin.bias = Some(params.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?);
        Ok(lin)
    }

    pub fn unbiased(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let weight = params.add(format!("{name}.weight"), uniform_init(&[fan_in, fan_out], fan_in, rng))?;
        Ok(Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        })
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = params.bind(g, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = params.bind(g, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gain and bias of one layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: params.add(format!("{name}.gain"), Tensor::ones(vec![width]))?,
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![width]))?,
        })
    }

    pub fn num_params(width: usize) -> usize {
        2 * width
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let gain = params.bind(g, self.gain);
        let bias = params.bind(g, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}
