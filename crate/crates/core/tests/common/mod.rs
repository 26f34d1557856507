#![allow(dead_code)]

use stasr::data::{Batch, Utterance, Vocab};
use stasr::model::{ModelConfig, TransformerModel};
use stasr::nn::ParamSet;
use stasr::rng::RngStream;
use stasr::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, 77);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, rel: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if rel > self.max_rel || rel.is_nan() {
            self.max_rel = rel;
            self.worst = what();
        }
    }
}

/// Central finite differences of the scalar `build(leaves)` against the
/// tape's gradients for every input element.
pub fn check_op(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> GradReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut report = GradReport::new();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            report.record(relative_error(a, numeric), || format!("input {i} element {j}: {a} vs {numeric}"));
        }
    }
    report
}

/// Same check over every scalar of a parameter set, with `loss` evaluated
/// on a fresh graph each time.
pub fn check_params(params: &mut ParamSet, loss: impl Fn(&mut Graph, &ParamSet) -> Var) -> GradReport {
    params.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, params);
    g.backward(out).unwrap();
    params.accumulate_grads(&g);
    drop(g);
    let analytic: Vec<Tensor> = params.iter().map(|p| p.grad().clone()).collect();

    let mut report = GradReport::new();
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for j in 0..params.value(id).len() {
            let x = params.value(id).data()[j];
            let mut eval = |v: f64| {
                params.value_mut(id).data_mut()[j] = v;
                let mut g = Graph::no_grad();
                let out = loss(&mut g, params);
                g.value(out).item()
            };
            let up = eval(x + FD_STEP);
            let down = eval(x - FD_STEP);
            params.value_mut(id).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k].data()[j];
            let name = params.get(id).name().to_string();
            report.record(relative_error(a, numeric), || format!("{name}[{j}]: {a} vs {numeric}"));
        }
    }
    report
}

pub const TINY_ALPHABET: &str = "abcdefgh";

/// d=16, 2 heads, 2+2 layers, vocabulary of 12.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        stack_factor: 2,
        mel_bins: 5,
        vocab_size: 12,
        ..ModelConfig::default()
    }
}

pub fn tiny_vocab() -> Vocab {
    Vocab::from_chars(TINY_ALPHABET.chars()).unwrap()
}

pub fn tiny_model(seed: u64) -> (TransformerModel, Vocab) {
    let vocab = tiny_vocab();
    let mut cfg = tiny_config();
    cfg.vocab_size = vocab.len();
    (TransformerModel::new(cfg, seed).unwrap(), vocab)
}

/// Random utterances with `frames[i]` frames and transcripts of `chars[i]`
/// letters drawn from `alphabet`.
pub fn random_utterances(frames: &[usize], chars: &[usize], bins: usize, alphabet: &str, seed: u64) -> Vec<Utterance> {
    let letters: Vec<char> = alphabet.chars().collect();
    let mut rng = RngStream::new(seed, 91);
    frames
        .iter()
        .zip(chars)
        .enumerate()
        .map(|(i, (&t, &n))| Utterance {
            id: format!("u{i:03}"),
            recording_id: format!("r{}", i / 2),
            features: Tensor::new(vec![t, bins], (0..t * bins).map(|_| rng.normal()).collect()).unwrap(),
            transcript: (0..n).map(|_| letters[rng.below(letters.len())]).collect(),
        })
        .collect()
}

pub fn collate(utts: &[Utterance], vocab: &Vocab) -> Batch {
    let refs: Vec<&Utterance> = utts.iter().collect();
    Batch::collate(&refs, vocab).unwrap()
}
