//! Caption-loss training over the trainable partition (layer weights,
//! adapter, projection, LoRA) with Adam and a cosine schedule.

mod data;
mod example;
mod optim;
mod schedule;

pub use data::{caption_items, distinct_batch, instruction_items, FeatureSource, InstructionPair, TrainItem};
pub(crate) use data::EncoderCache;
pub use example::{assemble_input, conditioning_tokens, instruction_prompt, TrainingExample, SEGMENT_SEP};
pub use optim::{clip_grad_norm, grad_norm, Adam};
pub use schedule::cosine_lr;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DestaModel, ModelError};
use crate::rng::rng_for;
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("assembled sequence has {len} positions, max_seq_len is {max}")]
    TooLong { len: usize, max: usize },
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFinite { step: usize, batch: String },
    #[error("frozen parameters changed during epoch {epoch}")]
    FrozenChanged { epoch: usize },
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 0.0,
            epochs: 5,
            batch_size: 12,
            warmup_steps: 0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr_min <= self.lr_max) || self.lr_min < 0.0 {
            return Err(TrainError::Config(format!(
                "need 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for per-epoch checkpoints `epoch-NNN.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Append-only JSONL training log.
    pub log_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop as soon as a step's loss falls below this value.
    pub stop_below: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub log: Vec<LogRecord>,
    /// Global step count after the run, including resumed steps.
    pub steps: usize,
    pub epochs_completed: usize,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Checkpoint,
    /// Step at which `stop_below` was reached.
    pub stopped_at: Option<usize>,
}

impl FitReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

/// Token-weighted mean of the masked next-token loss over `items`, recorded
/// on `tape` against parameters in `store`. `None` if no item has a target.
pub fn batch_loss(model: &DestaModel, store: &ParamStore, tape: &mut Tape, items: &[&TrainItem]) -> Result<Option<Var>> {
    let total: usize = items.iter().map(|i| i.example.masked_count()).sum();
    if total == 0 {
        log::warn!("batch has no target tokens; loss is 0");
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for item in items {
        let ex = &item.example;
        let count = ex.masked_count();
        if count == 0 {
            continue;
        }
        let logits = model.logits_in(store, tape, Some(&item.enc), &ex.tokens)?;
        let out = tape.cross_entropy_masked(logits, &ex.targets, &ex.loss_mask)?;
        let weighted = tape.scalar_mul(out.loss, count as f64 / total as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc)
}

/// Plain loss value; used by finite-difference checks.
pub fn batch_loss_value(model: &DestaModel, store: &ParamStore, items: &[&TrainItem]) -> Result<f64> {
    let mut tape = Tape::new();
    Ok(match batch_loss(model, store, &mut tape, items)? {
        Some(v) => tape.value(v)?.item(),
        None => 0.0,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn meta_usize(ckpt: &Checkpoint, key: &str) -> Result<usize> {
    ckpt.meta
        .get(key)
        .ok_or_else(|| TrainError::Data(format!("checkpoint has no `{key}`")))?
        .parse()
        .map_err(|e| TrainError::Data(format!("checkpoint `{key}`: {e}")))
}

/// Trains the model's trainable partition on `items`.
///
/// Batches follow a seeded per-epoch shuffle, so two runs with the same
/// seed and data produce identical loss curves. A checkpoint (parameters,
/// optimizer state, counters) is written after every epoch when `out_dir`
/// is set. Frozen weights are audited at every epoch end.
pub fn fit(model: &mut DestaModel, items: &[TrainItem], cfg: &TrainerConfig, opts: FitOptions) -> Result<FitReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TrainError::Data("no training examples".into()));
    }
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let (mut step, mut start_epoch) = (0usize, 0usize);
    if let Some(mut ckpt) = opts.resume {
        step = meta_usize(&ckpt, "step")?;
        start_epoch = meta_usize(&ckpt, "epoch")?;
        adam.restore_from(&mut ckpt).map_err(TrainError::Data)?;
        model.load_checkpoint(&ckpt)?;
        log::info!("resuming at step {step}, epoch {start_epoch}");
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    if let Some(path) = &opts.log_path {
        if step == 0 && path.exists() {
            std::fs::remove_file(path).map_err(|e| io_err(path, e))?;
        }
    }
    let frozen_before = model.frozen_digest();
    let mut report = FitReport {
        log: Vec::new(),
        steps: step,
        epochs_completed: start_epoch,
        checkpoints: Vec::new(),
        final_checkpoint: Checkpoint::default(),
        stopped_at: None,
    };
    let mut tape = Tape::new();
    'epochs: for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/epoch{epoch}")));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_steps);
            tape.reset();
            model.store.zero_grad();
            let loss_var = batch_loss(model, &model.store, &mut tape, &batch)?;
            let (loss, norm) = match loss_var {
                Some(v) => {
                    let loss = tape.value(v)?.item();
                    let batch_id = || {
                        format!(
                            "epoch{epoch}/batch{b}: {}",
                            batch.iter().map(|i| i.id.as_str()).collect::<Vec<_>>().join(",")
                        )
                    };
                    if !loss.is_finite() {
                        return Err(TrainError::NonFinite {
                            step: step + 1,
                            batch: batch_id(),
                        });
                    }
                    tape.backward(v, &mut model.store)?;
                    let norm = match cfg.clip_norm {
                        Some(max) => clip_grad_norm(&mut model.store, max),
                        None => grad_norm(&model.store),
                    };
                    if !norm.is_finite() {
                        return Err(TrainError::NonFinite {
                            step: step + 1,
                            batch: batch_id(),
                        });
                    }
                    adam.step(&mut model.store, lr);
                    (loss, norm)
                }
                None => (0.0, 0.0),
            };
            step += 1;
            let rec = LogRecord {
                step,
                lr,
                loss,
                grad_norm: norm,
            };
            log::debug!("step {step} lr {lr:.3e} loss {loss:.5} grad_norm {norm:.4}");
            if let Some(path) = &opts.log_path {
                crate::jsonl::append(path, &rec).map_err(|e| io_err(path, e))?;
            }
            report.log.push(rec);
            report.steps = step;
            if opts.stop_below.is_some_and(|t| loss < t) {
                report.stopped_at = Some(step);
                log::info!("loss {loss:.5} below threshold at step {step}");
                break 'epochs;
            }
        }
        if model.frozen_digest() != frozen_before {
            return Err(TrainError::FrozenChanged { epoch });
        }
        report.epochs_completed = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            let ckpt = training_checkpoint(model, &adam, step, epoch + 1, cfg);
            let path = dir.join(format!("epoch-{:03}.ckpt", epoch + 1));
            ckpt.save(&path)?;
            report.checkpoints.push(path);
        }
        log::info!(
            "epoch {} done, step {step}, last loss {:.5}",
            epoch + 1,
            report.final_loss().unwrap_or(0.0)
        );
    }
    if model.frozen_digest() != frozen_before {
        return Err(TrainError::FrozenChanged {
            epoch: report.epochs_completed,
        });
    }
    report.final_checkpoint = training_checkpoint(model, &adam, step, report.epochs_completed, cfg);
    Ok(report)
}

fn training_checkpoint(model: &DestaModel, adam: &Adam, step: usize, epoch: usize, cfg: &TrainerConfig) -> Checkpoint {
    let mut ckpt = model.trainable_checkpoint();
    adam.save_into(&mut ckpt);
    ckpt.meta.insert("step".into(), step.to_string());
    ckpt.meta.insert("epoch".into(), epoch.to_string());
    ckpt.meta.insert("seed".into(), cfg.seed.to_string());
    ckpt.meta.insert("adapter".into(), model.adapter_kind_name().into());
    ckpt
}

/// Loads trainable weights from a training checkpoint, ignoring optimizer
/// state.
pub fn load_weights(model: &mut DestaModel, mut ckpt: Checkpoint) -> Result<()> {
    ckpt.entries.retain(|k, _| !k.starts_with("optim."));
    model.load_checkpoint(&ckpt)?;
    Ok(())
}

/// Greedy continuation for a training example's conditioning part.
pub fn regenerate(model: &DestaModel, item: &TrainItem, max_new: usize) -> Result<Vec<u32>> {
    Ok(model.generate(Some(&item.enc), item.example.conditioning(), max_new)?)
}

/// Per-parameter values; handy for before/after comparisons in tests.
pub fn snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter_sorted()
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect()
}
