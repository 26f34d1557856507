use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{adam_step, AdamState, NoamSchedule, TrainConfig};
use crate::data::{make_batches, Batch, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, TransformerModel};
use crate::nn::{Mode, TrainRng};
use crate::tensor::Graph;

/// Outcome of one optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub step: u64,
    pub lr: f64,
    /// Training loss per target character over the accumulated batches.
    pub loss: f64,
    pub chars: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub updates: u64,
    pub epochs: usize,
    pub last_loss: Option<f64>,
    pub best_dev_loss: Option<f64>,
}

/// Model plus optimizer state. Gradients accumulate across [`Trainer::accumulate`]
/// calls and are consumed by [`Trainer::apply_update`].
#[derive(Clone, Debug)]
pub struct Trainer {
    model: TransformerModel,
    vocab: Vocab,
    cfg: TrainConfig,
    schedule: NoamSchedule,
    adam: AdamState,
    rng: TrainRng,
    step: u64,
    pending_chars: usize,
    pending_loss: f64,
}

impl Trainer {
    pub fn new(model: TransformerModel, vocab: Vocab, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config() != &cfg.model {
            return Err(Error::config("model was built from a different configuration"));
        }
        if vocab.len() != cfg.model.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} symbols, model expects {}",
                vocab.len(),
                cfg.model.vocab_size
            )));
        }
        let schedule = NoamSchedule::new(cfg.init_lr, cfg.model.d_model, cfg.warmup)?;
        let adam = AdamState::new(model.params());
        let rng = TrainRng::new(cfg.seed);
        Ok(Self {
            model,
            vocab,
            cfg,
            schedule,
            adam,
            rng,
            step: 0,
            pending_chars: 0,
            pending_loss: 0.0,
        })
    }

    pub fn model(&self) -> &TransformerModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn pending_chars(&self) -> usize {
        self.pending_chars
    }

    pub fn rng(&self) -> &TrainRng {
        &self.rng
    }

    pub fn into_model(self) -> TransformerModel {
        self.model
    }

    /// Training-mode forward and backward of one mini-batch. Gradients of the
    /// summed (unnormalized) loss are added to the running totals. Returns
    /// that summed loss and the batch's non-pad target count.
    pub fn accumulate(&mut self, batch: &Batch) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let mut mode = Mode::Train(&mut self.rng);
        let (loss, count) = self
            .model
            .batch_loss(&mut g, batch, self.cfg.label_smoothing, Some(1.0), &mut mode)?;
        g.backward(loss)?;
        let value = g.value(loss).item();
        self.model.params_mut().accumulate_grads(&g);
        self.pending_chars += count;
        self.pending_loss += value;
        Ok((value, count))
    }

    /// Normalizes the accumulated gradients by the accumulated character
    /// count, takes one Adam step at the scheduled rate and clears gradients.
    pub fn apply_update(&mut self) -> Result<UpdateStats> {
        if self.pending_chars == 0 {
            return Err(Error::usage("no accumulated gradients to apply"));
        }
        let chars = self.pending_chars;
        let params = self.model.params_mut();
        params.scale_grads(1.0 / chars as f64);
        let grad_norm = params.grad_norm();
        if let Some(clip) = self.cfg.clip_norm {
            if grad_norm > clip {
                params.scale_grads(clip / grad_norm);
            }
        }
        let step = self.step + 1;
        let lr = self.schedule.lr(step)?;
        adam_step(params, &mut self.adam, lr)?;
        params.zero_grads();
        self.step = step;
        let loss = self.pending_loss / chars as f64;
        self.pending_chars = 0;
        self.pending_loss = 0.0;
        Ok(UpdateStats {
            step,
            lr,
            loss,
            chars,
            grad_norm,
            dev_loss: None,
        })
    }

    /// Evaluation-mode loss per target character.
    pub fn dev_loss(&self, batches: &[Batch]) -> Result<f64> {
        let (mut total, mut chars) = (0.0, 0);
        for batch in batches {
            let mut g = Graph::no_grad();
            let (loss, count) =
                self.model
                    .batch_loss(&mut g, batch, self.cfg.label_smoothing, Some(1.0), &mut Mode::Eval)?;
            total += g.value(loss).item();
            chars += count;
        }
        if chars == 0 {
            return Err(Error::usage("dev set is empty"));
        }
        Ok(total / chars as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.vocab, self.step)
    }
}

struct Outputs {
    dir: PathBuf,
    log: fs::File,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.tsv");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), log })
    }

    fn record(&mut self, s: &UpdateStats) -> Result<()> {
        let dev = s.dev_loss.map_or_else(|| "-".to_string(), |d| d.to_string());
        writeln!(self.log, "{}\t{}\t{}\t{}", s.step, s.lr, s.loss, dev)
            .map_err(|e| Error::io(self.dir.join("metrics.tsv"), e))
    }
}

/// Trains until `max_updates`, `max_epochs`, early stopping, or the observer
/// asks to stop.
///
/// Mini-batches are re-planned and reshuffled every epoch. An update is
/// applied whenever the accumulated character count reaches the budget;
/// leftovers carry into the next epoch. With `out_dir`, the metric log,
/// periodic `step-N.ckpt`, `best.ckpt` (lowest dev loss) and a final
/// `last.ckpt` are written there. A non-finite loss aborts the run and leaves
/// existing checkpoints untouched.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[Utterance],
    dev: &[Utterance],
    out_dir: Option<&Path>,
    mut observer: impl FnMut(&Trainer, &UpdateStats) -> Result<Control>,
) -> Result<TrainSummary> {
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let cfg = trainer.cfg.clone();
    let dev_batches = if dev.is_empty() {
        Vec::new()
    } else {
        make_batches(dev, &trainer.vocab, cfg.batch_frames, cfg.seed)?
    };
    let mut outputs = out_dir.map(Outputs::open).transpose()?;
    let mut summary = TrainSummary {
        updates: trainer.step,
        epochs: 0,
        last_loss: None,
        best_dev_loss: None,
    };
    let mut since_best = 0usize;
    let mut last_saved: Option<PathBuf> = None;

    'epochs: while cfg.max_epochs.is_none_or(|m| summary.epochs < m) && trainer.step < cfg.max_updates {
        let batches = make_batches(train, &trainer.vocab, cfg.batch_frames, cfg.seed.wrapping_add(summary.epochs as u64))?;
        summary.epochs += 1;
        for batch in &batches {
            if let Err(e) = trainer.accumulate(batch) {
                return Err(diverged(e, trainer.step, &last_saved));
            }
            if trainer.pending_chars < cfg.char_budget {
                continue;
            }
            let mut stats = trainer.apply_update().map_err(|e| diverged(e, trainer.step, &last_saved))?;
            summary.updates = stats.step;
            summary.last_loss = Some(stats.loss);
            let mut stop = false;
            if stats.step % cfg.checkpoint_every == 0 || stats.step == cfg.max_updates {
                if !dev_batches.is_empty() {
                    let d = trainer.dev_loss(&dev_batches)?;
                    stats.dev_loss = Some(d);
                    if summary.best_dev_loss.is_none_or(|b| d < b) {
                        summary.best_dev_loss = Some(d);
                        since_best = 0;
                        if let Some(o) = &outputs {
                            trainer.save(&o.dir.join("best.ckpt"))?;
                        }
                    } else {
                        since_best += 1;
                        stop = cfg.patience.is_some_and(|p| since_best >= p);
                    }
                }
                if let Some(o) = &outputs {
                    let path = o.dir.join(format!("step-{}.ckpt", stats.step));
                    trainer.save(&path)?;
                    last_saved = Some(path);
                }
                log::info!(
                    "update {} lr {:.3e} loss {:.4} dev {}",
                    stats.step,
                    stats.lr,
                    stats.loss,
                    stats.dev_loss.map_or("-".to_string(), |d| format!("{d:.4}"))
                );
            }
            if let Some(o) = &mut outputs {
                o.record(&stats)?;
            }
            if stop {
                log::info!("dev loss stalled; stopping at update {}", stats.step);
                break 'epochs;
            }
            if observer(trainer, &stats)? == Control::Stop || trainer.step >= cfg.max_updates {
                break 'epochs;
            }
        }
    }
    if let Some(o) = &outputs {
        trainer.save(&o.dir.join("last.ckpt"))?;
    }
    Ok(summary)
}

fn diverged(e: Error, step: u64, last: &Option<PathBuf>) -> Error {
    match e {
        Error::NonFinite(what) => {
            let kept = last
                .as_ref()
                .map_or_else(|| "no checkpoint written yet".to_string(), |p| format!("last good checkpoint {}", p.display()));
            Error::NonFinite(format!("{what}; training diverged after update {step}, {kept}"))
        }
        other => other,
    }
}
