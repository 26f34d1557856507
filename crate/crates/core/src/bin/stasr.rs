use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stasr::config::parse_optional;
use stasr::data::{load_manifest, make_synthetic, normalize_per_recording, read_transcripts, SyntheticSpec, Vocab};
use stasr::decode::{decode_all, DecodeOptions};
use stasr::eval::{evaluate, read_hypotheses, write_hypotheses};
use stasr::model::{count_parameters, load_checkpoint, TransformerModel};
use stasr::training::{train_loop, Control, TrainConfig, Trainer};
use stasr::{Error, Result};

#[derive(Parser)]
#[command(name = "stasr", version, about = "Transformer speech recognizer with stochastic layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metric log to DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        enc_layers: Option<usize>,
        #[arg(long)]
        dec_layers: Option<usize>,
        /// Global stochastic-layer parameter, or `none` to disable.
        #[arg(long)]
        stochastic_p: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        char_budget: Option<usize>,
    },
    /// Transcribe every utterance of a manifest.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        #[arg(long, default_value_t = 200)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against manifest transcripts.
    Eval {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's configuration and exact parameter count.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a deterministic toy corpus (manifests plus FBANK1 features).
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        utts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            data,
            dev,
            out,
            enc_layers,
            dec_layers,
            stochastic_p,
            seed,
            char_budget,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::Io { path: config.clone(), source: e })?;
            let mut cfg = TrainConfig::from_text(&text)?;
            if let Some(n) = enc_layers {
                cfg.model.enc_layers = n;
            }
            if let Some(n) = dec_layers {
                cfg.model.dec_layers = n;
            }
            if let Some(p) = stochastic_p {
                cfg.model.stochastic_p = parse_optional("stochastic_p", &p)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = char_budget {
                cfg.char_budget = b;
            }
            train(cfg, &data, &dev, &out)
        }
        Command::Decode {
            checkpoint,
            data,
            beam,
            alpha,
            max_len,
            out,
        } => decode(&checkpoint, &data, DecodeOptions { beam, alpha, max_len }, &out),
        Command::Eval { refs, hyps, out } => {
            let report = evaluate(&read_transcripts(&refs)?, &read_hypotheses(&hyps)?)?;
            report.write(&out)?;
            println!("WER {:.4} ({} / {} words)", report.wer(), report.words.errors(), report.ref_words);
            println!("CER {:.4} ({} / {} chars)", report.cer(), report.chars.errors(), report.ref_chars);
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let ck = load_checkpoint(&checkpoint)?;
            print!("{}", ck.model.config().to_text());
            println!("updates = {}", ck.step);
            println!("vocabulary = {}", ck.vocab.len());
            println!("parameters = {}", ck.model.num_parameters());
            Ok(())
        }
        Command::MakeSynthetic { out, utts, seed } => {
            if utts == 0 {
                return Err(Error::Usage("--utts must be positive".into()));
            }
            let (train, dev) = make_synthetic(&out, &SyntheticSpec::new(utts, seed))?;
            println!("{}", train.display());
            println!("{}", dev.display());
            Ok(())
        }
    }
}

fn train(mut cfg: TrainConfig, data: &Path, dev: &Path, out: &Path) -> Result<()> {
    let train_set = normalize_per_recording(load_manifest(data)?);
    let dev_set = normalize_per_recording(load_manifest(dev)?);
    if train_set.is_empty() {
        return Err(Error::Usage(format!("{} holds no usable utterances", data.display())));
    }
    let vocab = Vocab::build(train_set.iter().map(|u| u.transcript.as_str()))?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.mel_bins = train_set[0].mel_bins();
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::Io { path: cfg_path, source: e })?;
    log::info!(
        "{} training and {} dev utterances, {} symbols, {} parameters",
        train_set.len(),
        dev_set.len(),
        vocab.len(),
        count_parameters(&cfg.model)
    );
    let model = TransformerModel::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, vocab, cfg)?;
    let summary = train_loop(&mut trainer, &train_set, &dev_set, Some(out), |_, _| Ok(Control::Continue))?;
    println!(
        "{} updates over {} epochs; last loss {}; best dev loss {}",
        summary.updates,
        summary.epochs,
        summary.last_loss.map_or("-".into(), |l| format!("{l:.4}")),
        summary.best_dev_loss.map_or("-".into(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn decode(checkpoint: &Path, data: &Path, opts: DecodeOptions, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let utts = normalize_per_recording(load_manifest(data)?);
    let feats: Vec<_> = utts.iter().map(|u| &u.features).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let hyps = decode_all(&ck.model, &feats, &opts, threads)?;
    let mut lines = Vec::with_capacity(utts.len());
    for (u, h) in utts.iter().zip(&hyps) {
        if h.truncated() {
            log::warn!("{}: reached max length {} without </s>", u.id, opts.max_len);
        }
        lines.push((u.id.clone(), h.text(&ck.vocab)));
    }
    write_hypotheses(out, &lines)?;
    log::info!("decoded {} utterances", lines.len());
    Ok(())
}
