use super::{
    multi_head_attention, stochastic_residual, AttentionMask, AttentionParams, Gate, LayerNormParams, Linear, Mode,
    ParamSet,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Var};

/// Regularization settings shared by every sub-layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SublayerConfig {
    /// Dropout on each sub-layer output, before the residual sum.
    pub residual_dropout: f64,
    /// Dropout on attention weights.
    pub attention_dropout: f64,
    /// Apply the layer normalization to the shortcut when a layer is skipped.
    pub norm_on_skip: bool,
}

impl Default for SublayerConfig {
    fn default() -> Self {
        Self {
            residual_dropout: 0.2,
            attention_dropout: 0.2,
            norm_on_skip: true,
        }
    }
}

/// Position-wise `width → hidden → width` network with a ReLU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(params: &mut ParamSet, name: &str, width: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(params, &format!("{name}.inner"), width, hidden, rng)?,
            outer: Linear::new(params, &format!("{name}.outer"), hidden, width, rng)?,
        })
    }

    pub fn num_params(width: usize, hidden: usize) -> usize {
        Linear::num_params(width, hidden) + Linear::num_params(hidden, width)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, params, x)?;
        let h = g.relu(h);
        self.outer.forward(g, params, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub self_attn: AttentionParams,
    pub feed_forward: FeedForward,
    pub norms: [LayerNormParams; 2],
}

impl EncoderLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        hidden: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::new(params, &format!("{name}.self_attn"), width, heads, rng)?,
            feed_forward: FeedForward::new(params, &format!("{name}.ff"), width, hidden, rng)?,
            norms: [
                LayerNormParams::new(params, &format!("{name}.norm1"), width)?,
                LayerNormParams::new(params, &format!("{name}.norm2"), width)?,
            ],
        })
    }

    pub fn num_params(width: usize, hidden: usize) -> usize {
        AttentionParams::num_params(width) + FeedForward::num_params(width, hidden) + 2 * LayerNormParams::num_params(width)
    }

    /// Self-attention then feed-forward, each wrapped in a stochastic
    /// residual. Both sub-layers share `gate`, the layer's single mask draw.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        pad_mask: Option<&AttentionMask>,
        gate: Gate,
        cfg: &SublayerConfig,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = stochastic_residual(
            g,
            params,
            x,
            |g, x| {
                let a = multi_head_attention(g, params, &self.self_attn, x, x, pad_mask, cfg.attention_dropout, mode)?;
                g.dropout(a, cfg.residual_dropout, mode.dropout_rng())
            },
            &self.norms[0],
            gate,
            cfg.norm_on_skip,
        )?;
        stochastic_residual(
            g,
            params,
            h,
            |g, h| {
                let f = self.feed_forward.forward(g, params, h)?;
                g.dropout(f, cfg.residual_dropout, mode.dropout_rng())
            },
            &self.norms[1],
            gate,
            cfg.norm_on_skip,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub feed_forward: FeedForward,
    pub norms: [LayerNormParams; 3],
}

impl DecoderLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        hidden: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::new(params, &format!("{name}.self_attn"), width, heads, rng)?,
            cross_attn: AttentionParams::new(params, &format!("{name}.cross_attn"), width, heads, rng)?,
            feed_forward: FeedForward::new(params, &format!("{name}.ff"), width, hidden, rng)?,
            norms: [
                LayerNormParams::new(params, &format!("{name}.norm1"), width)?,
                LayerNormParams::new(params, &format!("{name}.norm2"), width)?,
                LayerNormParams::new(params, &format!("{name}.norm3"), width)?,
            ],
        })
    }

    pub fn num_params(width: usize, hidden: usize) -> usize {
        2 * AttentionParams::num_params(width)
            + FeedForward::num_params(width, hidden)
            + 3 * LayerNormParams::num_params(width)
    }

    /// Masked self-attention, encoder-decoder attention, feed-forward; one
    /// shared `gate` for all three. `causal_mask` must hide future positions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        y: Var,
        memory: Var,
        causal_mask: &AttentionMask,
        memory_mask: Option<&AttentionMask>,
        gate: Gate,
        cfg: &SublayerConfig,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let mem_shape = g.shape(memory);
        if mem_shape.len() < 2 || mem_shape[mem_shape.len() - 2] == 0 {
            return Err(Error::usage("decoder memory has zero length"));
        }
        let h = stochastic_residual(
            g,
            params,
            y,
            |g, y| {
                let a = multi_head_attention(
                    g,
                    params,
                    &self.self_attn,
                    y,
                    y,
                    Some(causal_mask),
                    cfg.attention_dropout,
                    mode,
                )?;
                g.dropout(a, cfg.residual_dropout, mode.dropout_rng())
            },
            &self.norms[0],
            gate,
            cfg.norm_on_skip,
        )?;
        let h = stochastic_residual(
            g,
            params,
            h,
            |g, h| {
                let a = multi_head_attention(
                    g,
                    params,
                    &self.cross_attn,
                    h,
                    memory,
                    memory_mask,
                    cfg.attention_dropout,
                    mode,
                )?;
                g.dropout(a, cfg.residual_dropout, mode.dropout_rng())
            },
            &self.norms[1],
            gate,
            cfg.norm_on_skip,
        )?;
        stochastic_residual(
            g,
            params,
            h,
            |g, h| {
                let f = self.feed_forward.forward(g, params, h)?;
                g.dropout(f, cfg.residual_dropout, mode.dropout_rng())
            },
            &self.norms[2],
            gate,
            cfg.norm_on_skip,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn no_dropout() -> SublayerConfig {
        SublayerConfig {
            residual_dropout: 0.0,
            attention_dropout: 0.0,
            norm_on_skip: true,
        }
    }

    #[test]
    fn skipped_encoder_layer_is_double_norm() {
        let mut rng = RngStream::new(1, 1);
        let mut params = ParamSet::new();
        let layer = EncoderLayer::new(&mut params, "enc0", 8, 16, 2, &mut rng).unwrap();
        let mut g = Graph::no_grad();
        let x = g.constant(random(&[1, 5, 8], &mut rng));
        let y = layer
            .forward(&mut g, &params, x, None, Gate::Skip, &no_dropout(), &mut Mode::Eval)
            .unwrap();
        let n1 = layer.norms[0].forward(&mut g, &params, x).unwrap();
        let n2 = layer.norms[1].forward(&mut g, &params, n1).unwrap();
        assert_eq!(g.value(y), g.value(n2));
    }

    #[test]
    fn skipped_decoder_layer_is_triple_norm() {
        let mut rng = RngStream::new(2, 1);
        let mut params = ParamSet::new();
        let layer = DecoderLayer::new(&mut params, "dec0", 8, 16, 2, &mut rng).unwrap();
        let mut g = Graph::no_grad();
        let y = g.constant(random(&[1, 4, 8], &mut rng));
        let mem = g.constant(random(&[1, 6, 8], &mut rng));
        let causal = AttentionMask::causal(1, 4);
        let out = layer
            .forward(&mut g, &params, y, mem, &causal, None, Gate::Skip, &no_dropout(), &mut Mode::Eval)
            .unwrap();
        let mut want = y;
        for norm in &layer.norms {
            want = norm.forward(&mut g, &params, want).unwrap();
        }
        assert_eq!(g.value(out), g.value(want));
    }

    #[test]
    fn decoder_layer_is_causal() {
        let mut rng = RngStream::new(3, 1);
        let mut params = ParamSet::new();
        let layer = DecoderLayer::new(&mut params, "dec0", 8, 16, 2, &mut rng).unwrap();
        let y0 = random(&[1, 5, 8], &mut rng);
        let mem = random(&[1, 3, 8], &mut rng);
        let run = |y: Tensor| {
            let mut g = Graph::no_grad();
            let yv = g.constant(y);
            let mv = g.constant(mem.clone());
            let causal = AttentionMask::causal(1, 5);
            let out = layer
                .forward(&mut g, &params, yv, mv, &causal, None, Gate::Eval, &no_dropout(), &mut Mode::Eval)
                .unwrap();
            g.value(out).clone()
        };
        let base = run(y0.clone());
        let mut y1 = y0;
        for v in &mut y1.data_mut()[3 * 8..] {
            *v += 5.0;
        }
        let pert = run(y1);
        assert_eq!(&base.data()[..3 * 8], &pert.data()[..3 * 8]);
        assert_ne!(&base.data()[3 * 8..], &pert.data()[3 * 8..]);
    }

    #[test]
    fn parameter_counts_match_registration() {
        let mut rng = RngStream::new(4, 1);
        let mut params = ParamSet::new();
        EncoderLayer::new(&mut params, "e", 8, 12, 2, &mut rng).unwrap();
        assert_eq!(params.num_scalars(), EncoderLayer::num_params(8, 12));
        let mut params = ParamSet::new();
        DecoderLayer::new(&mut params, "d", 8, 12, 2, &mut rng).unwrap();
        assert_eq!(params.num_scalars(), DecoderLayer::num_params(8, 12));
    }
}
