//! Autoregressive decoding: greedy search and length-normalized beam search.

use std::sync::Arc;

use crate::data::{Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Encoded, TransformerModel};
use crate::nn::{Gate, Mode};
use crate::tensor::{Graph, Tensor};

/// Next-token log-probabilities for decoder prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// One row of log-probabilities per prefix. Prefixes start with `<s>`
    /// and all have the same length.
    fn score(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores prefixes with a model in evaluation mode against one utterance's
/// encoder output, computed once.
pub struct ModelScorer<'a> {
    model: &'a TransformerModel,
    memory: Arc<Tensor>,
    steps: usize,
}

impl<'a> ModelScorer<'a> {
    /// `features` is `[frames, mel_bins]`.
    pub fn new(model: &'a TransformerModel, features: &Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::usage(format!("features must be [frames, bins], got {:?}", features.shape())));
        }
        let (frames, bins) = (features.shape()[0], features.shape()[1]);
        let batched = features.clone().reshaped(vec![1, frames, bins])?;
        let mut g = Graph::no_grad();
        let gates = vec![Gate::Eval; model.encoder_layers().len()];
        let enc = model.encode_with_gates(&mut g, &batched, &[frames], &gates, &mut Mode::Eval)?;
        let steps = enc.steps(&g);
        Ok(Self {
            model,
            memory: g.shared_value(enc.memory),
            steps,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn score(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let u = prefixes.first().map_or(0, Vec::len);
        if u == 0 || prefixes.iter().any(|p| p.len() != u) {
            return Err(Error::usage("prefixes must be non-empty and of equal length"));
        }
        let k = prefixes.len();
        let mut g = Graph::no_grad();
        let memory = g.leaf_shared(Arc::clone(&self.memory), false, None);
        let enc = Encoded {
            memory,
            lens: vec![self.steps; k],
        };
        let flat: Vec<usize> = prefixes.concat();
        let gates = vec![Gate::Eval; self.model.decoder_layers().len()];
        let logits = self
            .model
            .decode_with_gates(&mut g, &enc, &flat, &vec![u; k], &gates, &mut Mode::Eval)?;
        let t = g.value(logits);
        Ok((0..k).map(|i| log_softmax(t.row(i * u + u - 1))).collect())
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// A partial or complete output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, without the leading `<s>`; ends in `</s>` once finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// `log_prob / len^alpha`, with `len` counting `</s>`.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }

    /// Emitted characters without `</s>`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    /// True if `max_len` was reached before `</s>`.
    pub fn truncated(&self) -> bool {
        !self.finished
    }

    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.decode(self.content())
    }
}

fn candidates(row: &[f64]) -> impl Iterator<Item = (usize, f64)> + '_ {
    row.iter()
        .copied()
        .enumerate()
        .filter(|&(id, _)| id != PAD && id != BOS)
}

fn check_args(max_len: usize, vocab: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::usage("max_len must be at least 1"));
    }
    if vocab <= EOS {
        return Err(Error::usage("vocabulary lacks the end-of-sentence symbol"));
    }
    Ok(())
}

/// Appends the most probable token until `</s>` or `max_len` tokens. Ties go
/// to the lowest id; `<pad>` and `<s>` are never emitted.
pub fn greedy_decode(scorer: &mut impl StepScorer, max_len: usize) -> Result<Hypothesis> {
    check_args(max_len, scorer.vocab_size())?;
    let mut prefix = vec![BOS];
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let row = scorer.score(std::slice::from_ref(&prefix))?.remove(0);
        let (best, lp) = candidates(&row)
            .fold(None, |acc: Option<(usize, f64)>, (id, lp)| match acc {
                Some((_, b)) if b >= lp => acc,
                _ => Some((id, lp)),
            })
            .expect("vocabulary has a candidate");
        hyp.tokens.push(best);
        hyp.log_prob += lp;
        if best == EOS {
            hyp.finished = true;
            break;
        }
        prefix.push(best);
    }
    Ok(hyp)
}

/// Keeps the `beam` most probable unfinished hypotheses per step. Finished
/// hypotheses compete on `log_prob / len^alpha`; without any, the best
/// unfinished one at `max_len` is returned under the same score.
///
/// Candidates are ranked by log-probability, ties broken by parent rank and
/// then token id, so `beam = 1` reproduces [`greedy_decode`]. For wider
/// beams the greedy hypothesis is also kept as a candidate, so the result
/// never scores below it even when pruning loses the greedy path.
pub fn beam_search(scorer: &mut impl StepScorer, beam: usize, alpha: f64, max_len: usize) -> Result<Hypothesis> {
    check_args(max_len, scorer.vocab_size())?;
    if beam == 0 {
        return Err(Error::usage("beam size must be at least 1"));
    }
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = active
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let rows = scorer.score(&prefixes)?;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (parent, row) in rows.iter().enumerate() {
            for (id, lp) in candidates(row) {
                cands.push((parent, id, active[parent].log_prob + lp));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (parent, id, lp) in cands {
            let mut tokens = active[parent].tokens.clone();
            tokens.push(id);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: id == EOS,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { active } else { finished };
    let best = pool
        .into_iter()
        .fold(None, |acc: Option<Hypothesis>, h| match acc {
            Some(b) if b.normalized_score(alpha) >= h.normalized_score(alpha) => Some(b),
            _ => Some(h),
        })
        .expect("search keeps at least one hypothesis");
    if beam == 1 {
        return Ok(best);
    }
    let greedy = greedy_decode(scorer, max_len)?;
    let rank = |h: &Hypothesis| (h.finished, h.normalized_score(alpha));
    let (b, g) = (rank(&best), rank(&greedy));
    Ok(if g.0 & !b.0 || (g.0 == b.0 && g.1 > b.1) { greedy } else { best })
}

/// Decoding settings shared by the CLI and the C interface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 1,
            alpha: 0.6,
            max_len: 200,
        }
    }
}

/// Decodes one `[frames, mel_bins]` utterance; `beam = 1` uses greedy search.
pub fn decode_features(model: &TransformerModel, features: &Tensor, opts: &DecodeOptions) -> Result<Hypothesis> {
    let mut scorer = ModelScorer::new(model, features)?;
    if opts.beam <= 1 {
        greedy_decode(&mut scorer, opts.max_len)
    } else {
        beam_search(&mut scorer, opts.beam, opts.alpha, opts.max_len)
    }
}

/// Decodes utterances on up to `threads` worker threads, keeping input order.
pub fn decode_all(
    model: &TransformerModel,
    features: &[&Tensor],
    opts: &DecodeOptions,
    threads: usize,
) -> Result<Vec<Hypothesis>> {
    let threads = threads.clamp(1, features.len().max(1));
    let chunk = features.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = features
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|f| decode_features(model, f, opts)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(features.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}
