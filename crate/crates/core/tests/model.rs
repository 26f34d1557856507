mod common;

use common::*;
use stasr::model::{count_parameters, load_checkpoint, save_checkpoint, ModelConfig, TransformerModel};
use stasr::nn::{DecoderLayer, EncoderLayer, Mode};
use stasr::tensor::Graph;

#[test]
fn untrained_loss_is_near_log_vocab() {
    // Realistic character-set size; the tiny alphabet only uses the low ids.
    let cfg = ModelConfig {
        d_model: 64,
        d_ff: 128,
        vocab_size: 50,
        ..tiny_config()
    };
    let vocab = tiny_vocab();
    for seed in 0..5 {
        let model = TransformerModel::new(cfg.clone(), seed).unwrap();
        let utts = random_utterances(&[12, 9, 15], &[6, 4, 7], 5, TINY_ALPHABET, seed);
        let batch = collate(&utts, &vocab);
        let mut g = Graph::no_grad();
        let (loss, _) = model.batch_loss(&mut g, &batch, 0.0, None, &mut Mode::Eval).unwrap();
        let ln_v = 50f64.ln();
        let rel = (g.value(loss).item() / ln_v - 1.0).abs();
        assert!(rel <= 0.1, "seed {seed}: loss {} vs ln V {ln_v}", g.value(loss).item());
    }
}

#[test]
fn count_grows_by_one_layer_size_per_layer() {
    let base = ModelConfig {
        vocab_size: 40,
        ..ModelConfig::default()
    };
    for enc in 1..5 {
        let a = count_parameters(&ModelConfig { enc_layers: enc, ..base.clone() });
        let b = count_parameters(&ModelConfig { enc_layers: enc + 1, ..base.clone() });
        assert_eq!(b - a, EncoderLayer::num_params(base.d_model, base.d_ff));
    }
    for dec in 1..5 {
        let a = count_parameters(&ModelConfig { dec_layers: dec, ..base.clone() });
        let b = count_parameters(&ModelConfig { dec_layers: dec + 1, ..base.clone() });
        assert_eq!(b - a, DecoderLayer::num_params(base.d_model, base.d_ff));
    }
    // Independent tally for d=512, d_ff=1024: attention 4·d² + 3·d, feed-forward 2·d·d_ff + d_ff + d,
    // layer norms 2·d each.
    let (d, f) = (512, 1024);
    let attn = 4 * d * d + 3 * d;
    let ff = 2 * d * f + f + d;
    assert_eq!(EncoderLayer::num_params(d, f), attn + ff + 4 * d);
    assert_eq!(DecoderLayer::num_params(d, f), 2 * attn + ff + 6 * d);
}

#[test]
fn checkpoint_file_reproduces_outputs() {
    let (model, vocab) = tiny_model(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &vocab, 17).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.step, 17);
    let utts = random_utterances(&[10], &[5], 5, TINY_ALPHABET, 4);
    let batch = collate(&utts, &vocab);
    let logits = |m: &TransformerModel| {
        let mut g = Graph::no_grad();
        let out = m.forward_batch(&mut g, &batch, &mut Mode::Eval).unwrap();
        g.value(out).clone()
    };
    assert_eq!(logits(&model), logits(&ck.model));
    assert!(!dir.path().join("m.tmp").exists());
}

#[test]
fn stochastic_layers_leave_inference_unchanged() {
    let vocab = tiny_vocab();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..tiny_config()
    };
    let with = TransformerModel::new(ModelConfig { stochastic_p: Some(0.5), ..cfg.clone() }, 9).unwrap();
    let without = TransformerModel::new(ModelConfig { stochastic_p: None, ..cfg }, 9).unwrap();
    let batch = collate(&random_utterances(&[8, 11], &[3, 5], 5, TINY_ALPHABET, 2), &vocab);
    let run = |m: &TransformerModel| {
        let mut g = Graph::no_grad();
        let out = m.forward_batch(&mut g, &batch, &mut Mode::Eval).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run(&with), run(&without));
}

#[test]
fn padding_does_not_change_an_utterance() {
    let (model, vocab) = tiny_model(5);
    let utts = random_utterances(&[7, 16], &[3, 8], 5, TINY_ALPHABET, 6);
    let alone = collate(&utts[..1], &vocab);
    let padded = collate(&utts, &vocab);
    let v = vocab.len();
    let logits = |b| {
        let mut g = Graph::no_grad();
        let out = model.forward_batch(&mut g, b, &mut Mode::Eval).unwrap();
        g.value(out).clone()
    };
    let a = logits(&alone);
    let p = logits(&padded);
    let rows = alone.target_lens[0];
    for (x, y) in a.data()[..rows * v].iter().zip(&p.data()[..rows * v]) {
        assert!((x - y).abs() < 1e-12);
    }
}
