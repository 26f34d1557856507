use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Tensor>),
    MatMul(Var, Var),
    Reshape(Var),
    TransposeLast2(Var),
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedFill {
        x: Var,
        mask: Arc<[bool]>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    SmoothedXent {
        logits: Var,
        targets: Vec<usize>,
        eps: f64,
        pad: usize,
        divisor: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    tag: Option<usize>,
}

/// Execution record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order and `backward` walks it once in reverse. Leaf gradients
/// accumulate across `backward` calls until [`Graph::zero_grads`].
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Tensor>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(outer: &[usize], inner: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records adjoint information (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a leaf that shares storage with its owner; `tag` lets the owner
    /// find the leaf's gradient again after `backward`.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool, tag: Option<usize>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            tag,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of tagged leaves, as `(tag, grad)` pairs in recording order.
    pub fn tagged_grads(&self) -> Vec<(usize, &Tensor)> {
        let mut out: Vec<(usize, usize, &Tensor)> = self
            .leaf_grads
            .iter()
            .filter_map(|(&i, g)| self.nodes[i].tag.map(|t| (i, t, g)))
            .collect();
        out.sort_by_key(|(i, _, _)| *i);
        out.into_iter().map(|(_, t, g)| (t, g)).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            tag: None,
        });
        Var(id)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(Error::Dimension {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let nb = tb.len();
        let data = ta
            .data()
            .chunks_exact(nb)
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data,
        })
    }

    /// `a + b`; `b` may match a trailing suffix of `a`'s shape and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Elementwise product with a same-shaped constant (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: ta.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(out, Op::MulConst(a, c), &[a]))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatMulPlan::new(self.value(a).shape(), self.value(b).shape())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(ta.data(), tb.data(), &mut out);
        let out = Tensor {
            shape: plan.out_shape.clone(),
            data: out,
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() < 2 {
            return Err(Error::Dimension {
                op: "transpose_last2",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = transpose_last2(ta);
        Ok(self.push(out, Op::TransposeLast2(a), &[a]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let w = ta.last_dim();
        if len == 0 || start + len > w {
            return Err(Error::Dimension {
                op: "slice_last",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = ta
            .data()
            .chunks_exact(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor { shape, data }, Op::SliceLast { x: a, start }, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        self.push(out, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    /// Entries equal to `-inf` receive probability exactly zero.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let w = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Normalizes each position over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Replaces entries where `mask` is true by `value`; masked entries pass
    /// no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: Arc<[bool]>, value: f64) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(Error::Dimension {
                op: "masked_fill",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(out, Op::MaskedFill { x: a, mask }, &[a]))
    }

    /// Gathers rows of a `[vocab, d]` table: output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: tt.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::usage(format!("token id {bad} outside vocabulary of {v}")));
        }
        if ids.is_empty() {
            return Err(Error::usage("embedding lookup of zero ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Inverted dropout: in training (`rng` present) each element is zeroed
    /// with probability `p` and survivors are scaled by `1/(1-p)`; without an
    /// RNG the op is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut RngStream>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        self.mul_const(x, Arc::new(Tensor { shape, data }))
    }

    /// Label-smoothed cross entropy over rows of `logits: [n, V]`.
    ///
    /// Each row's target distribution puts `1 - eps` on its target and
    /// `eps / (V - 1)` on every other class. Rows whose target is `pad`
    /// contribute nothing. The summed loss is divided by `divisor`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad: usize,
        divisor: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Dimension {
                op: "smoothed_cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = tl.shape()[1];
        if v < 2 {
            return Err(Error::usage("cross entropy needs at least two classes"));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::config(format!("label smoothing {eps} outside [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::usage(format!("target id {bad} outside vocabulary of {v}")));
        }
        if !(divisor > 0.0) {
            return Err(Error::usage("loss divisor must be positive"));
        }
        let off = eps / (v - 1) as f64;
        let mut probs = vec![0.0; tl.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut loss = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let logp = x - lse;
                probs[r * v + c] = logp.exp();
                let q = if c == t { 1.0 - eps } else { off };
                loss -= q * logp;
            }
            total += loss;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(total / divisor),
            Op::SmoothedXent {
                logits,
                targets: targets.to_vec(),
                eps,
                pad,
                divisor,
                probs,
            },
            &[logits],
        ))
    }

    /// Accumulates `∂loss/∂leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::usage("loss does not depend on any tensor that requires grad"));
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        let needs = |v: Var| nodes[v.0].requires_grad;
        let acc = |adj: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| match &mut adj[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match self.leaf_grads.get_mut(&i) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                },
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(*b) {
                        let nb = nodes[b.0].value.len();
                        let mut gb = vec![0.0; nb];
                        for chunk in g.data().chunks_exact(nb) {
                            for (s, x) in gb.iter_mut().zip(chunk) {
                                *s += sign * x;
                            }
                        }
                        let shape = nodes[b.0].value.shape().to_vec();
                        acc(&mut adj, *b, Tensor { shape, data: gb });
                    }
                    if needs(*a) {
                        acc(&mut adj, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let nb = tb.len();
                    if needs(*b) {
                        let mut gb = vec![0.0; nb];
                        for (gc, ac) in g.data().chunks_exact(nb).zip(ta.data().chunks_exact(nb)) {
                            for ((s, x), y) in gb.iter_mut().zip(gc).zip(ac) {
                                *s += x * y;
                            }
                        }
                        acc(&mut adj, *b, Tensor { shape: tb.shape().to_vec(), data: gb });
                    }
                    if needs(*a) {
                        let data = g
                            .data()
                            .chunks_exact(nb)
                            .flat_map(|gc| gc.iter().zip(tb.data()).map(|(x, y)| x * y))
                            .collect();
                        acc(&mut adj, *a, Tensor { shape: ta.shape().to_vec(), data });
                    }
                }
                Op::Scale(a, c) => {
                    let mut g = g;
                    g.scale_in_place(*c);
                    acc(&mut adj, *a, g);
                }
                Op::MulConst(a, c) => {
                    let mut g = g;
                    for (x, m) in g.data_mut().iter_mut().zip(c.data()) {
                        *x *= m;
                    }
                    acc(&mut adj, *a, g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let plan = MatMulPlan::new(ta.shape(), tb.shape())?;
                    if needs(*a) {
                        let mut ga = vec![0.0; ta.len()];
                        plan.grad_a(g.data(), tb.data(), &mut ga);
                        acc(&mut adj, *a, Tensor { shape: ta.shape().to_vec(), data: ga });
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; tb.len()];
                        plan.grad_b(g.data(), ta.data(), &mut gb);
                        acc(&mut adj, *b, Tensor { shape: tb.shape().to_vec(), data: gb });
                    }
                }
                Op::Reshape(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    acc(&mut adj, *a, Tensor { shape, data: g.data });
                }
                Op::TransposeLast2(a) => acc(&mut adj, *a, transpose_last2(&g)),
                Op::ConcatLast(parts) => {
                    let total = g.last_dim();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for p in parts {
                        let tp = &nodes[p.0].value;
                        let w = tp.last_dim();
                        if needs(*p) {
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            acc(&mut adj, *p, Tensor { shape: tp.shape().to_vec(), data });
                        }
                        offset += w;
                    }
                }
                Op::SliceLast { x, start } => {
                    let tx = &nodes[x.0].value;
                    let (w, len) = (tx.last_dim(), g.last_dim());
                    let mut data = vec![0.0; tx.len()];
                    for (dst, src) in data.chunks_exact_mut(w).zip(g.data().chunks_exact(len)) {
                        dst[*start..start + len].copy_from_slice(src);
                    }
                    acc(&mut adj, *x, Tensor { shape: tx.shape().to_vec(), data });
                }
                Op::Relu(a) => {
                    let mut g = g;
                    for (x, &inp) in g.data_mut().iter_mut().zip(nodes[a.0].value.data()) {
                        if inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(&mut adj, *a, g);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let w = y.last_dim();
                    let mut g = g;
                    for (gr, yr) in g.data_mut().chunks_exact_mut(w).zip(y.data().chunks_exact(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(&mut adj, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = nodes[gain.0].value.data();
                    let d = gv.len();
                    if needs(*gain) || needs(*bias) {
                        let mut gg = vec![0.0; d];
                        let mut gb = vec![0.0; d];
                        for (gr, hr) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                                gb[j] += gr[j];
                            }
                        }
                        if needs(*gain) {
                            acc(&mut adj, *gain, Tensor { shape: vec![d], data: gg });
                        }
                        if needs(*bias) {
                            acc(&mut adj, *bias, Tensor { shape: vec![d], data: gb });
                        }
                    }
                    if needs(*x) {
                        let mut gx = vec![0.0; g.len()];
                        for (r, ((gr, hr), out)) in g
                            .data()
                            .chunks_exact(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .enumerate()
                        {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                out[j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                        acc(&mut adj, *x, Tensor { shape: g.shape().to_vec(), data: gx });
                    }
                }
                Op::MaskedFill { x, mask } => {
                    let mut g = g;
                    for (v, &m) in g.data_mut().iter_mut().zip(mask.iter()) {
                        if m {
                            *v = 0.0;
                        }
                    }
                    acc(&mut adj, *x, g);
                }
                Op::Embedding { table, ids } => {
                    let tt = &nodes[table.0].value;
                    let d = tt.shape()[1];
                    let mut data = vec![0.0; tt.len()];
                    for (&id, gr) in ids.iter().zip(g.data().chunks_exact(d)) {
                        for (dst, src) in data[id * d..(id + 1) * d].iter_mut().zip(gr) {
                            *dst += src;
                        }
                    }
                    acc(&mut adj, *table, Tensor { shape: tt.shape().to_vec(), data });
                }
                Op::Sum(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    acc(&mut adj, *a, Tensor::full(shape, g.item()));
                }
                Op::SmoothedXent {
                    logits,
                    targets,
                    eps,
                    pad,
                    divisor,
                    probs,
                } => {
                    let tl = &nodes[logits.0].value;
                    let v = tl.shape()[1];
                    let off = eps / (v - 1) as f64;
                    let scale = g.item() / divisor;
                    let mut data = vec![0.0; tl.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for c in 0..v {
                            let q = if c == t { 1.0 - eps } else { off };
                            data[r * v + c] = (probs[r * v + c] - q) * scale;
                        }
                    }
                    acc(&mut adj, *logits, Tensor { shape: tl.shape().to_vec(), data });
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut data = vec![0.0; t.len()];
    for (src, dst) in t.data().chunks_exact(r * c).zip(data.chunks_exact_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor { shape, data }
}

/// Index bookkeeping for a broadcast batched matrix product.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// Per output matrix, the index of the `a` and `b` matrices it reads.
    pairs: Vec<(usize, usize)>,
    /// `b` is a single matrix and `a` is not broadcast: fold into one GEMM.
    folded: bool,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |b: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - b.len()];
            v.extend_from_slice(b);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            batch.push(x.max(y));
        }
        let count: usize = batch.iter().product();
        let strides = |dims: &[usize]| -> Vec<usize> {
            let mut s = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                s[d] = if dims[d] == 1 { 0 } else { acc };
                acc *= dims[d];
            }
            s
        };
        let (sta, stb) = (strides(&pa), strides(&pb));
        let mut pairs = Vec::with_capacity(count);
        let mut idx = vec![0; rank];
        for _ in 0..count {
            let ia = idx.iter().zip(&sta).map(|(i, s)| i * s).sum();
            let ib = idx.iter().zip(&stb).map(|(i, s)| i * s).sum();
            pairs.push((ia, ib));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let a_count: usize = ba.iter().product();
        let folded = bb.iter().product::<usize>() == 1 && a_count == count;
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            pairs,
            folded,
        })
    }

    fn out_numel(&self) -> usize {
        self.pairs.len() * self.m * self.n
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.folded {
            gemm(self.pairs.len() * m, k, n, a, false, b, false, out, false);
            return;
        }
        for (i, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &a[ia * m * k..],
                false,
                &b[ib * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }

    fn grad_a(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.folded {
            gemm(self.pairs.len() * m, n, k, g, false, b, true, ga, true);
            return;
        }
        for (i, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                false,
                &b[ib * k * n..],
                true,
                &mut ga[ia * m * k..(ia + 1) * m * k],
                true,
            );
        }
    }

    fn grad_b(&self, g: &[f64], a: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.folded {
            gemm(k, self.pairs.len() * m, n, a, true, g, false, gb, true);
            return;
        }
        for (i, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                k,
                m,
                n,
                &a[ia * m * k..],
                true,
                &g[i * m * n..],
                false,
                &mut gb[ib * k * n..(ib + 1) * k * n],
                true,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn pseudo_random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 0);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>())
    }

    /// Central differences of `f` with respect to every entry of `inputs[which]`.
    fn numeric_grad(inputs: &[Tensor], which: usize, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> Vec<f64> {
        let h = 1e-6;
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = ins.iter().map(|x| g.constant(x.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        for (which, v) in vars.iter().enumerate() {
            let numeric = numeric_grad(inputs, which, f);
            let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; numeric.len()]);
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / n.abs().max(1.0);
                assert!(rel < 1e-4, "input {which}: autodiff {a} vs numeric {n}");
            }
        }
    }

    /// Weighted sum so every output entry gets a distinct adjoint.
    fn weighted_sum(g: &mut Graph, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let w = g.constant(t(&shape, &(0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect::<Vec<_>>()));
        let p = g.mul(x, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::no_grad();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[5., 6.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::no_grad();
        let x = pseudo_random(&[3, 4], 1);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let (i, xv) = (g.constant(eye), g.constant(x.clone()));
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn matmul_sum_grad_is_ones_times_b_transpose() {
        let a = pseudo_random(&[2, 3], 2);
        let b = pseudo_random(&[3, 4], 3);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a, true), g.leaf(b.clone(), true));
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let ga = g.grad(va).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| b.data()[p * 4 + j]).sum();
                assert!((ga.data()[i * 3 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_grads_batched_and_broadcast() {
        let f = |g: &mut Graph, v: &[Var]| {
            let c = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, c)
        };
        check_grads(&[pseudo_random(&[2, 3, 4], 4), pseudo_random(&[4, 2], 5)], &f);
        check_grads(&[pseudo_random(&[2, 3, 4], 6), pseudo_random(&[2, 4, 2], 7)], &f);
        check_grads(&[pseudo_random(&[1, 3, 4], 8), pseudo_random(&[2, 4, 2], 9)], &f);
        check_grads(&[pseudo_random(&[3, 4], 10), pseudo_random(&[2, 4, 2], 11)], &f);
    }

    #[test]
    fn elementwise_grads() {
        let a = pseudo_random(&[2, 3], 12);
        let b = pseudo_random(&[2, 3], 13);
        let bias = pseudo_random(&[3], 14);
        check_grads(&[a.clone(), b.clone()], &|g, v| {
            let x = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, x)
        });
        check_grads(&[a.clone(), bias.clone()], &|g, v| {
            let x = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, x)
        });
        check_grads(&[a.clone(), bias], &|g, v| {
            let x = g.sub(v[0], v[1]).unwrap();
            weighted_sum(g, x)
        });
        check_grads(&[a.clone(), b], &|g, v| {
            let x = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, x)
        });
        check_grads(std::slice::from_ref(&a), &|g, v| {
            let x = g.scale(v[0], -2.5);
            weighted_sum(g, x)
        });
        check_grads(&[a], &|g, v| {
            let x = g.relu(v[0]);
            weighted_sum(g, x)
        });
    }

    #[test]
    fn shape_op_grads() {
        let a = pseudo_random(&[2, 3, 4], 15);
        let b = pseudo_random(&[2, 3, 2], 16);
        check_grads(std::slice::from_ref(&a), &|g, v| {
            let x = g.reshape(v[0], &[6, 4]).unwrap();
            weighted_sum(g, x)
        });
        check_grads(std::slice::from_ref(&a), &|g, v| {
            let x = g.transpose_last2(v[0]).unwrap();
            weighted_sum(g, x)
        });
        check_grads(&[a.clone(), b], &|g, v| {
            let x = g.concat_last(&[v[0], v[1], v[0]]).unwrap();
            weighted_sum(g, x)
        });
        check_grads(&[a], &|g, v| {
            let x = g.slice_last(v[0], 1, 2).unwrap();
            weighted_sum(g, x)
        });
    }

    #[test]
    fn normalization_grads() {
        let x = pseudo_random(&[3, 5], 17);
        let gain = pseudo_random(&[5], 18);
        let bias = pseudo_random(&[5], 19);
        check_grads(std::slice::from_ref(&x), &|g, v| {
            let y = g.softmax(v[0]);
            weighted_sum(g, y)
        });
        check_grads(&[x, gain, bias], &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn masked_fill_and_embedding_grads() {
        let x = pseudo_random(&[2, 3], 20);
        let mask: Arc<[bool]> = vec![true, false, false, false, true, false].into();
        check_grads(&[x], &|g, v| {
            let y = g.masked_fill(v[0], Arc::clone(&mask), 0.5).unwrap();
            weighted_sum(g, y)
        });
        let table = pseudo_random(&[4, 3], 21);
        check_grads(&[table], &|g, v| {
            let y = g.embedding(v[0], &[3, 1, 3, 0]).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn cross_entropy_grads() {
        let logits = pseudo_random(&[4, 5], 22);
        check_grads(&[logits], &|g, v| g.smoothed_cross_entropy(v[0], &[1, 0, 4, 2], 0.1, 0, 3.0).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::no_grad();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let sa = g.softmax(a);
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let sb = g.softmax(b);
        for (x, want) in g.value(sb).data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((x - want).abs() < 1e-4);
        }
        let c = g.constant(t(&[3], &[1001.0, 1002.0, 1003.0]));
        let sc = g.softmax(c);
        assert!(g.value(sc).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::no_grad();
        let gain = g.constant(Tensor::ones(vec![4]));
        let bias = g.constant(Tensor::zeros(vec![4]));
        let x = g.constant(t(&[4], &[1., 2., 3., 4.]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for (v, want) in g.value(y).data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((v - want).abs() < 1e-3);
        }
        let c = g.constant(Tensor::full(vec![4], 3.0));
        let yc = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(yc).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_modes_and_errors() {
        let mut g = Graph::new();
        let x = g.leaf(pseudo_random(&[10], 23), true);
        let mut rng = RngStream::new(1, 2);
        assert_eq!(g.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, None).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, Some(&mut rng)), Err(Error::Config(_))));
    }

    #[test]
    fn backward_rules() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., -2., 3.]), true);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., -4., 6.]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4., -8., 12.]);
        g.zero_grads();
        assert!(g.grad(x).is_none());

        let c = g.constant(Tensor::ones(vec![1]));
        assert!(matches!(g.backward(c), Err(Error::Usage(_))));
    }

    #[test]
    fn no_grad_graph_records_no_adjoints() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor::ones(vec![2]), true);
        let s = g.sum(x);
        assert!(!g.requires_grad(s));
        assert!(g.backward(s).is_err());
    }
}
