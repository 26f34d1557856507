use std::sync::Arc;

use super::{Linear, Mode, ParamSet};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Var};

/// Boolean mask over attention scores `[batch, queries, keys]`; `true` hides
/// a key from a query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    queries: usize,
    keys: usize,
    hidden: Arc<[bool]>,
}

impl AttentionMask {
    pub fn from_fn(batch: usize, queries: usize, keys: usize, hide: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut hidden = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            for q in 0..queries {
                for k in 0..keys {
                    hidden.push(hide(b, q, k));
                }
            }
        }
        Self {
            batch,
            queries,
            keys,
            hidden: hidden.into(),
        }
    }

    /// Hides key positions at or beyond each sequence's length.
    pub fn key_padding(key_lens: &[usize], queries: usize, keys: usize) -> Self {
        Self::from_fn(key_lens.len(), queries, keys, |b, _, k| k >= key_lens[b])
    }

    /// Hides future positions (`key > query`).
    pub fn causal(batch: usize, len: usize) -> Self {
        Self::from_fn(batch, len, len, |_, q, k| k > q)
    }

    /// Causal mask that additionally hides padded keys.
    pub fn causal_padded(lens: &[usize], len: usize) -> Self {
        Self::from_fn(lens.len(), len, len, |b, q, k| k > q || k >= lens[b])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.queries, self.keys]
    }

    pub fn is_hidden(&self, b: usize, q: usize, k: usize) -> bool {
        self.hidden[(b * self.queries + q) * self.keys + k]
    }

    pub(crate) fn flags(&self) -> Arc<[bool]> {
        Arc::clone(&self.hidden)
    }

    fn check_attendable(&self) -> Result<()> {
        for (row, keys) in self.hidden.chunks_exact(self.keys).enumerate() {
            if keys.iter().all(|&h| h) {
                return Err(Error::usage(format!(
                    "attention row {} of batch item {} has no attendable position",
                    row % self.queries,
                    row / self.queries
                )));
            }
        }
        Ok(())
    }
}

/// `softmax(Q·Kᵀ/√width)·V` over the last two axes.
///
/// Queries are scaled before the product. Hidden positions are set to `-inf`
/// so they get exactly zero weight. With a dropout RNG the attention weights
/// are dropped with probability `dropout`.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
    dropout: f64,
    rng: Option<&mut RngStream>,
) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() < 2 || sk.len() != sq.len() || sv.len() != sq.len() {
        return Err(Error::Dimension {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let r = sq.len();
    if sq[r - 1] != sk[r - 1] {
        return Err(Error::Dimension {
            op: "attention (key width)",
            lhs: sq,
            rhs: sk,
        });
    }
    if sk[r - 2] != sv[r - 2] {
        return Err(Error::Dimension {
            op: "attention (key/value length)",
            lhs: sk,
            rhs: sv,
        });
    }
    let width = sq[r - 1];
    let qs = g.scale(q, 1.0 / (width as f64).sqrt());
    let kt = g.transpose_last2(k)?;
    let mut scores = g.matmul(qs, kt)?;
    if let Some(mask) = mask {
        let ss = g.shape(scores);
        let rows: usize = ss[..ss.len() - 1].iter().product();
        if mask.hidden.len() != g.value(scores).len() || mask.keys != ss[ss.len() - 1] {
            return Err(Error::Dimension {
                op: "attention mask",
                lhs: ss.to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        debug_assert_eq!(rows, mask.batch * mask.queries);
        mask.check_attendable()?;
        scores = g.masked_fill(scores, mask.flags(), f64::NEG_INFINITY)?;
    }
    let weights = g.softmax(scores);
    let weights = g.dropout(weights, dropout, rng)?;
    g.matmul(weights, v)
}

/// Projections of one multi-head attention block. Query, value and output
/// carry biases; the key does not.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn new(params: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!("model width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(params, &format!("{name}.query"), width, width, rng)?,
            key: Linear::unbiased(params, &format!("{name}.key"), width, width, rng)?,
            value: Linear::new(params, &format!("{name}.value"), width, width, rng)?,
            output: Linear::new(params, &format!("{name}.output"), width, width, rng)?,
            heads,
            width,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// The key projection has no bias: softmax over keys is invariant to it.
    pub fn num_params(width: usize) -> usize {
        4 * Linear::num_params(width, width) - width
    }
}

/// Projects queries, keys and values, attends independently in each head's
/// sub-space, concatenates the heads and applies the output projection.
/// Inputs are `[batch, time, width]`; the output matches `x_query`'s shape.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamSet,
    attn: &AttentionParams,
    x_query: Var,
    x_kv: Var,
    mask: Option<&AttentionMask>,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    for x in [x_query, x_kv] {
        if g.shape(x).last() != Some(&attn.width) {
            return Err(Error::Dimension {
                op: "multi_head_attention",
                lhs: g.shape(x).to_vec(),
                rhs: vec![attn.width],
            });
        }
    }
    let q = attn.query.forward(g, params, x_query)?;
    let k = attn.key.forward(g, params, x_kv)?;
    let v = attn.value.forward(g, params, x_kv)?;
    let hw = attn.head_width();
    let mut heads = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let (qh, kh, vh) = if attn.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_last(q, h * hw, hw)?,
                g.slice_last(k, h * hw, hw)?,
                g.slice_last(v, h * hw, hw)?,
            )
        };
        heads.push(scaled_dot_attention(g, qh, kh, vh, mask, dropout, mode.dropout_rng())?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_last(&heads)? };
    attn.output.forward(g, params, joined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 9);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::no_grad();
        let q = g.constant(random(&[1, 2, 4], 1));
        let k = g.constant(Tensor::new(vec![1, 3, 4], [0.3, -0.2, 0.5, 0.1].repeat(3)).unwrap());
        let vt = random(&[1, 3, 2], 2);
        let v = g.constant(vt.clone());
        let out = scaled_dot_attention(&mut g, q, k, v, None, 0.0, None).unwrap();
        for row in 0..2 {
            for c in 0..2 {
                let mean = (0..3).map(|j| vt.data()[j * 2 + c]).sum::<f64>() / 3.0;
                assert!((g.value(out).data()[row * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_logit_selects_value_row() {
        // Score gap of 50·√4/√4 per unit: softmax weight of the losers is ~e^-50.
        let mut g = Graph::no_grad();
        let q = g.constant(Tensor::new(vec![1, 4], vec![50.0, 0.0, 0.0, 0.0]).unwrap());
        let mut keys = vec![0.0; 12];
        keys[4] = 2.0;
        let k = g.constant(Tensor::new(vec![3, 4], keys).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let out = scaled_dot_attention(&mut g, q, k, v, None, 0.0, None).unwrap();
        let got = g.value(out).data();
        assert!((got[0] + 3.0).abs() < 1e-6 && (got[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn masked_value_has_no_influence() {
        let mask = AttentionMask::from_fn(1, 2, 3, |_, _, k| k == 1);
        let run = |vt: Tensor| {
            let mut g = Graph::no_grad();
            let q = g.constant(random(&[1, 2, 4], 3));
            let k = g.constant(random(&[1, 3, 4], 4));
            let v = g.constant(vt);
            let out = scaled_dot_attention(&mut g, q, k, v, Some(&mask), 0.0, None).unwrap();
            g.value(out).clone()
        };
        let base = random(&[1, 3, 2], 5);
        let mut perturbed = base.clone();
        perturbed.data_mut()[2] += 100.0;
        perturbed.data_mut()[3] -= 7.0;
        assert_eq!(run(base), run(perturbed));
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mask = AttentionMask::from_fn(1, 2, 2, |_, q, _| q == 1);
        let mut g = Graph::no_grad();
        let x = g.constant(random(&[1, 2, 4], 6));
        assert!(matches!(
            scaled_dot_attention(&mut g, x, x, x, Some(&mask), 0.0, None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn one_head_is_single_projected_attention() {
        let mut rng = RngStream::new(3, 1);
        let mut params = ParamSet::new();
        let attn = AttentionParams::new(&mut params, "a", 4, 1, &mut rng).unwrap();
        let mut g = Graph::no_grad();
        let xq = g.constant(random(&[2, 3, 4], 7));
        let xkv = g.constant(random(&[2, 5, 4], 8));
        let out = multi_head_attention(&mut g, &params, &attn, xq, xkv, None, 0.0, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 4]);

        let q = attn.query.forward(&mut g, &params, xq).unwrap();
        let k = attn.key.forward(&mut g, &params, xkv).unwrap();
        let v = attn.value.forward(&mut g, &params, xkv).unwrap();
        let a = scaled_dot_attention(&mut g, q, k, v, None, 0.0, None).unwrap();
        let want = attn.output.forward(&mut g, &params, a).unwrap();
        assert_eq!(g.value(out), g.value(want));
    }

    #[test]
    fn width_must_divide_heads() {
        let mut rng = RngStream::new(3, 1);
        let mut params = ParamSet::new();
        assert!(matches!(
            AttentionParams::new(&mut params, "a", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
