//! The speech recognizer: frame stacking and projection, encoder stack,
//! character decoder stack, and vocabulary projection.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::config::{format_optional, parse_bool, parse_optional, parse_value};
use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    positional_encoding, AttentionMask, DecoderLayer, EncoderLayer, Gate, Linear, Mode, ParamId,
    ParamSet, StochasticPolicy, SublayerConfig,
};
use crate::rng::{streams, RngStream};
use crate::tensor::{Graph, Tensor, Var};

/// Architecture and regularization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub stack_factor: usize,
    pub mel_bins: usize,
    pub vocab_size: usize,
    /// Dropout on sub-layer outputs before each residual sum.
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Dropout after adding positional encodings to the projected input.
    pub input_dropout: f64,
    /// Probability of zeroing a target character embedding in training.
    pub char_dropout: f64,
    /// Global layer-drop parameter; `None` disables stochastic layers.
    pub stochastic_p: Option<f64>,
    /// Normalize the shortcut of a skipped layer (`false` passes it through).
    pub norm_on_skip: bool,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_ff: 1024,
            heads: 8,
            enc_layers: 12,
            dec_layers: 12,
            stack_factor: 4,
            mel_bins: 40,
            vocab_size: 64,
            dropout: 0.2,
            attention_dropout: 0.2,
            input_dropout: 0.2,
            char_dropout: 0.1,
            stochastic_p: Some(0.5),
            norm_on_skip: true,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("stack_factor", self.stack_factor),
            ("mel_bins", self.mel_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config("d_model must be even for sinusoidal positions"));
        }
        if self.vocab_size <= crate::data::RESERVED {
            return Err(Error::config("vocab_size must exceed the reserved symbols"));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("input_dropout", self.input_dropout),
            ("char_dropout", self.char_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if let Some(p) = self.stochastic_p {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("stochastic_p {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "enc_layers" => self.enc_layers = parse_value(key, value)?,
            "dec_layers" => self.dec_layers = parse_value(key, value)?,
            "stack_factor" => self.stack_factor = parse_value(key, value)?,
            "mel_bins" => self.mel_bins = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "attention_dropout" => self.attention_dropout = parse_value(key, value)?,
            "input_dropout" => self.input_dropout = parse_value(key, value)?,
            "char_dropout" => self.char_dropout = parse_value(key, value)?,
            "stochastic_p" => self.stochastic_p = parse_optional(key, value)?,
            "norm_on_skip" => self.norm_on_skip = parse_bool(key, value)?,
            "tie_embeddings" => self.tie_embeddings = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("stack_factor", self.stack_factor.to_string()),
            ("mel_bins", self.mel_bins.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("attention_dropout", self.attention_dropout.to_string()),
            ("input_dropout", self.input_dropout.to_string()),
            ("char_dropout", self.char_dropout.to_string()),
            ("stochastic_p", format_optional(&self.stochastic_p)),
            ("norm_on_skip", self.norm_on_skip.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in crate::config::parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::config(format!("unknown model key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn sublayer(&self) -> SublayerConfig {
        SublayerConfig {
            residual_dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            norm_on_skip: self.norm_on_skip,
        }
    }
}

/// Exact number of scalar parameters in a model built from `config`.
/// Stochastic layers add none.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let (d, v) = (config.d_model, config.vocab_size);
    let input = Linear::num_params(config.stack_factor * config.mel_bins, d);
    let encoder = config.enc_layers * EncoderLayer::num_params(d, config.d_ff);
    let embedding = v * d;
    let decoder = config.dec_layers * DecoderLayer::num_params(d, config.d_ff);
    let output = if config.tie_embeddings { v } else { Linear::num_params(d, v) };
    input + encoder + embedding + decoder + output
}

/// Concatenates each run of `factor` consecutive frames of a `[frames, bins]`
/// matrix into one row of width `factor·bins`; the last group is zero-padded.
pub fn stack_frames(features: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::config("stack factor must be at least 1"));
    }
    if features.rank() != 2 {
        return Err(Error::usage(format!("features must be [frames, bins], got {:?}", features.shape())));
    }
    let (frames, bins) = (features.shape()[0], features.shape()[1]);
    let steps = frames.div_ceil(factor);
    let mut data = features.data().to_vec();
    data.resize(steps * factor * bins, 0.0);
    Tensor::new(vec![steps, factor * bins], data)
}

/// Batched frame stacking of zero-padded `[batch, frames, bins]` features.
fn stack_batch(features: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, frames, bins) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let steps = frames.div_ceil(factor);
    let mut data = vec![0.0; b * steps * factor * bins];
    for (src, dst) in features
        .data()
        .chunks_exact(frames * bins)
        .zip(data.chunks_exact_mut(steps * factor * bins))
    {
        dst[..frames * bins].copy_from_slice(src);
    }
    Tensor::new(vec![b, steps, factor * bins], data)
}

/// Selects target positions whose embeddings are zeroed. Each non-pad
/// position is chosen independently with probability `p`; without an RNG
/// (evaluation) nothing is selected.
pub fn char_dropout(target_ids: &[usize], p: f64, rng: Option<&mut RngStream>) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("character dropout {p} outside [0, 1)")));
    }
    let mut mask = vec![false; target_ids.len()];
    if let (Some(rng), true) = (rng, p > 0.0) {
        for (m, &id) in mask.iter_mut().zip(target_ids) {
            *m = id != PAD && rng.bernoulli(p);
        }
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug)]
enum OutputLayer {
    Untied(Linear),
    Tied { bias: ParamId },
}

/// Encoder output for a batch.
pub struct Encoded {
    /// `[batch, steps, d_model]`
    pub memory: Var,
    /// Real (unpadded) encoder steps per utterance.
    pub lens: Vec<usize>,
}

impl Encoded {
    pub fn steps(&self, g: &Graph) -> usize {
        g.shape(self.memory)[1]
    }
}

/// Full parameter set with its structure.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamSet,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    embedding: ParamId,
    decoder: Vec<DecoderLayer>,
    output: OutputLayer,
    enc_policy: Option<StochasticPolicy>,
    dec_policy: Option<StochasticPolicy>,
}

impl TransformerModel {
    /// Builds a freshly initialized model: weights uniform in `±1/√fan_in`,
    /// biases zero, norms `(1, 0)`, embeddings uniform in `±1` (a one-hot
    /// lookup has fan-in 1).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, streams::INIT);
        let mut params = ParamSet::new();
        let (d, ff, h) = (config.d_model, config.d_ff, config.heads);
        let input_proj = Linear::new(&mut params, "input_proj", config.stack_factor * config.mel_bins, d, &mut rng)?;
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("encoder.{i}"), d, ff, h, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let emb = crate::nn::uniform_init(&[config.vocab_size, d], 1, &mut rng);
        let embedding = params.add("embedding", emb)?;
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderLayer::new(&mut params, &format!("decoder.{i}"), d, ff, h, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let output = if config.tie_embeddings {
            OutputLayer::Tied {
                bias: params.add("output.bias", Tensor::zeros(vec![config.vocab_size]))?,
            }
        } else {
            OutputLayer::Untied(Linear::new(&mut params, "output", d, config.vocab_size, &mut rng)?)
        };
        let (enc_policy, dec_policy) = match config.stochastic_p {
            Some(p) => (
                Some(StochasticPolicy::new(p, config.enc_layers)?),
                Some(StochasticPolicy::new(p, config.dec_layers)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            config,
            params,
            input_proj,
            encoder,
            embedding,
            decoder,
            output,
            enc_policy,
            dec_policy,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encoder_policy(&self) -> Option<&StochasticPolicy> {
        self.enc_policy.as_ref()
    }

    pub fn decoder_policy(&self) -> Option<&StochasticPolicy> {
        self.dec_policy.as_ref()
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.decoder
    }

    /// Gates for every layer of a stack: one mask draw per layer in training.
    pub fn draw_gates(policy: Option<&StochasticPolicy>, layers: usize, mode: &mut Mode<'_>) -> Vec<Gate> {
        (1..=layers)
            .map(|l| match (policy, mode.layer_rng()) {
                (_, None) => Gate::Eval,
                (Some(p), Some(rng)) => p.draw(l, rng),
                (None, Some(_)) => Gate::Keep { drop_prob: 0.0 },
            })
            .collect()
    }

    /// Runs the encoder on zero-padded `[batch, frames, mel_bins]` features.
    pub fn encode(&self, g: &mut Graph, features: &Tensor, frame_lens: &[usize], mode: &mut Mode<'_>) -> Result<Encoded> {
        let gates = Self::draw_gates(self.enc_policy.as_ref(), self.encoder.len(), mode);
        self.encode_with_gates(g, features, frame_lens, &gates, mode)
    }

    pub fn encode_with_gates(
        &self,
        g: &mut Graph,
        features: &Tensor,
        frame_lens: &[usize],
        gates: &[Gate],
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        if features.rank() != 3 || features.shape()[2] != cfg.mel_bins || features.shape()[0] != frame_lens.len() {
            return Err(Error::Dimension {
                op: "encode",
                lhs: features.shape().to_vec(),
                rhs: vec![frame_lens.len(), cfg.mel_bins],
            });
        }
        if frame_lens.iter().any(|&n| n == 0 || n > features.shape()[1]) {
            return Err(Error::usage("every utterance needs between 1 and max_frames frames"));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("input features".into()));
        }
        if gates.len() != self.encoder.len() {
            return Err(Error::usage("one gate per encoder layer required"));
        }
        let stacked = stack_batch(features, cfg.stack_factor)?;
        let steps = stacked.shape()[1];
        let lens: Vec<usize> = frame_lens.iter().map(|n| n.div_ceil(cfg.stack_factor)).collect();
        let x = g.constant(stacked);
        let x = self.input_proj.forward(g, &self.params, x)?;
        let pe = g.constant(positional_encoding(steps, cfg.d_model)?);
        let x = g.add(x, pe)?;
        let mut x = g.dropout(x, cfg.input_dropout, mode.dropout_rng())?;
        let mask = lens
            .iter()
            .any(|&n| n < steps)
            .then(|| AttentionMask::key_padding(&lens, steps, steps));
        let sub = cfg.sublayer();
        for (layer, &gate) in self.encoder.iter().zip(gates) {
            x = layer.forward(g, &self.params, x, mask.as_ref(), gate, &sub, mode)?;
        }
        Ok(Encoded { memory: x, lens })
    }

    /// Decoder logits `[batch·max_target, vocab]` for row-major decoder
    /// inputs `target_in` (`[batch, max_target]`).
    pub fn decode(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        target_in: &[usize],
        target_lens: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let gates = Self::draw_gates(self.dec_policy.as_ref(), self.decoder.len(), mode);
        self.decode_with_gates(g, enc, target_in, target_lens, &gates, mode)
    }

    pub fn decode_with_gates(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        target_in: &[usize],
        target_lens: &[usize],
        gates: &[Gate],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let batch = enc.lens.len();
        if batch == 0 || target_lens.len() != batch || target_in.is_empty() || !target_in.len().is_multiple_of(batch) {
            return Err(Error::Dimension {
                op: "decode",
                lhs: vec![batch],
                rhs: vec![target_in.len(), target_lens.len()],
            });
        }
        if gates.len() != self.decoder.len() {
            return Err(Error::usage("one gate per decoder layer required"));
        }
        let u = target_in.len() / batch;
        if target_lens.iter().any(|&n| n == 0 || n > u) {
            return Err(Error::usage("target lengths must lie in 1..=max_target"));
        }
        if let Some(&bad) = target_in.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::data("<target>", format!("character id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let table = self.params.bind(g, self.embedding);
        let mut y = g.embedding(table, target_in)?;
        let dropped = char_dropout(target_in, cfg.char_dropout, mode.char_rng())?;
        if dropped.iter().any(|&d| d) {
            let hide: Vec<bool> = dropped
                .iter()
                .flat_map(|&d| std::iter::repeat_n(d, cfg.d_model))
                .collect();
            y = g.masked_fill(y, hide.into(), 0.0)?;
        }
        let y = g.reshape(y, &[batch, u, cfg.d_model])?;
        let pe = g.constant(positional_encoding(u, cfg.d_model)?);
        let y = g.add(y, pe)?;
        let mut y = g.dropout(y, cfg.dropout, mode.dropout_rng())?;

        let steps = enc.steps(g);
        let causal = AttentionMask::causal_padded(target_lens, u);
        let mem_mask = enc
            .lens
            .iter()
            .any(|&n| n < steps)
            .then(|| AttentionMask::key_padding(&enc.lens, u, steps));
        let sub = cfg.sublayer();
        for (layer, &gate) in self.decoder.iter().zip(gates) {
            y = layer.forward(g, &self.params, y, enc.memory, &causal, mem_mask.as_ref(), gate, &sub, mode)?;
        }
        let flat = g.reshape(y, &[batch * u, cfg.d_model])?;
        match self.output {
            OutputLayer::Untied(lin) => lin.forward(g, &self.params, flat),
            OutputLayer::Tied { bias } => {
                let table = self.params.bind(g, self.embedding);
                let wt = g.transpose_last2(table)?;
                let logits = g.matmul(flat, wt)?;
                let b = self.params.bind(g, bias);
                g.add(logits, b)
            }
        }
    }

    /// Teacher-forced logits for a padded batch.
    pub fn forward_batch(&self, g: &mut Graph, batch: &Batch, mode: &mut Mode<'_>) -> Result<Var> {
        let enc = self.encode(g, &batch.features, &batch.frame_lens, mode)?;
        self.decode(g, &enc, &batch.target_in, &batch.target_lens, mode)
    }

    /// Teacher-forced logits `[targets.len(), vocab]` for one utterance;
    /// `target_in` must start with `<s>`.
    pub fn forward_teacher_forcing(
        &self,
        g: &mut Graph,
        features: &Tensor,
        target_in: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if target_in.first() != Some(&crate::data::BOS) {
            return Err(Error::usage("decoder input must begin with <s>"));
        }
        if features.rank() != 2 {
            return Err(Error::usage(format!("features must be [frames, bins], got {:?}", features.shape())));
        }
        let frames = features.shape()[0];
        let batched = features.clone().reshaped(vec![1, frames, features.shape()[1]])?;
        let enc = self.encode(g, &batched, &[frames], mode)?;
        self.decode(g, &enc, target_in, &[target_in.len()], mode)
    }

    /// Summed label-smoothed loss of a batch divided by `divisor`, plus the
    /// number of non-pad targets it covers.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &Batch,
        label_smoothing: f64,
        divisor: Option<f64>,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, usize)> {
        let logits = self.forward_batch(g, batch, mode)?;
        let count = batch.target_count();
        let loss = g.smoothed_cross_entropy(
            logits,
            &batch.target_out,
            label_smoothing,
            PAD,
            divisor.unwrap_or(count as f64),
        )?;
        Ok((loss, count))
    }
}
