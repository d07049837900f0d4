//! Optimization: the inverse square-root schedule, Adam, the update loop
//! with periodic validation and best-checkpoint selection, and weight
//! initialization from pretrained parts.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use thiserror::Error;

use crate::corpus::{collate, make_batches, CorpusError, ParallelExample};
use crate::model::{
    load_decoder_embeddings, read_checkpoint, write_checkpoint, Checkpoint, EmbeddingReport, Model, ModelConfig,
    ModelError, DECODER_FIELDS, ENCODER_FIELDS,
};
use crate::subword::{BpeModel, PAD};
use crate::tensor::{Graph, Tensor};

/// A training loss above `DIVERGENCE_FACTOR · ln(vocab)` counts as divergence;
/// a uniform predictor sits at `ln(vocab)`.
pub const DIVERGENCE_FACTOR: f64 = 20.0;

pub const LOG_FILE: &str = "train_log.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training loss diverged at step {step} (loss {loss}); the last good checkpoint is kept")]
    DivergedLoss { step: u64, loss: f64 },
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training examples")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_updates: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub layerdrop: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Token budget per batch (padded length times rows).
    pub max_tokens: usize,
}

impl TrainConfig {
    /// Recipe for randomly initialized models.
    pub fn fresh(seed: u64) -> Self {
        TrainConfig {
            base_lr: 0.001,
            warmup_steps: 4000,
            max_updates: 100_000,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-9,
            weight_decay: 0.0,
            label_smoothing: 0.1,
            dropout: 0.3,
            layerdrop: 0.1,
            seed,
            checkpoint_every: 1000,
            max_tokens: 3584,
        }
    }

    /// Recipe for models initialized from pretrained parts.
    pub fn pretrained_init(seed: u64) -> Self {
        TrainConfig {
            base_lr: 0.0001,
            warmup_steps: 8000,
            ..TrainConfig::fresh(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas ({b1}, {b2}) outside [0, 1)"));
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        for (name, v) in [
            ("label_smoothing", self.label_smoothing),
            ("dropout", self.dropout),
            ("layerdrop", self.layerdrop),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        if self.checkpoint_every < 1 || self.max_tokens < 1 {
            return bad("checkpoint_every and max_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn to_map(&self) -> IndexMap<&'static str, String> {
        let mut m = IndexMap::new();
        m.insert("base_lr", self.base_lr.to_string());
        m.insert("warmup_steps", self.warmup_steps.to_string());
        m.insert("max_updates", self.max_updates.to_string());
        m.insert("adam_beta1", self.adam_betas.0.to_string());
        m.insert("adam_beta2", self.adam_betas.1.to_string());
        m.insert("adam_eps", self.adam_eps.to_string());
        m.insert("weight_decay", self.weight_decay.to_string());
        m.insert("label_smoothing", self.label_smoothing.to_string());
        m.insert("dropout", self.dropout.to_string());
        m.insert("layerdrop", self.layerdrop.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("checkpoint_every", self.checkpoint_every.to_string());
        m.insert("max_tokens", self.max_tokens.to_string());
        m
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| TrainError::InvalidConfig(format!("`{v}` is not a valid value for {key}")))
        }
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "max_updates" => self.max_updates = num(key, value)?,
            "adam_beta1" => self.adam_betas.0 = num(key, value)?,
            "adam_beta2" => self.adam_betas.1 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "layerdrop" => self.layerdrop = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "max_tokens" => self.max_tokens = num(key, value)?,
            _ => return Err(TrainError::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

/// `base_lr · min(step^-½, step · warmup^-³⁄₂)`, peaking at `step = warmup`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.base_lr * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Adam moments, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl Adam {
    /// One bias-corrected update at 1-based `step`.  Parameters without a
    /// gradient entry are left alone; weight decay is added to the gradient.
    pub fn update(
        &mut self,
        model: &mut Model<f32>,
        grads: &IndexMap<String, Tensor<f32>>,
        lr: f64,
        step: u64,
        cfg: &TrainConfig,
    ) {
        let (b1, b2) = cfg.adam_betas;
        let t = step.max(1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1, b2, wd, eps) = (b1 as f32, b2 as f32, cfg.weight_decay as f32, cfg.adam_eps);
        for (name, g) in grads {
            let Some(p) = model.params.tensors.get_mut(name) else { continue };
            let p = Arc::make_mut(p).data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.data()[i] + wd * p[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] as f64 / c1;
                let vh = v[i] as f64 / c2;
                p[i] -= (lr * mh / (vh.sqrt() + eps)) as f32;
            }
        }
    }

    fn store(&self, ckpt: &mut Checkpoint) {
        for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
            for (name, data) in moments {
                let t = Tensor::new(vec![data.len()], data.clone()).expect("1-d");
                ckpt.tensors.insert(format!("adam.{kind}.{name}"), t);
            }
        }
    }

    fn restore(ckpt: &Checkpoint) -> Self {
        let mut adam = Adam::default();
        for (key, t) in &ckpt.tensors {
            if let Some(name) = key.strip_prefix("adam.m.") {
                adam.m.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                adam.v.insert(name.to_string(), t.data().to_vec());
            }
        }
        adam
    }
}

/// What the model is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Target given the encoded source.
    Seq2Seq,
    /// Target alone (decoder language modelling); the source is ignored.
    LanguageModel,
}

/// Training data: a fixed set, or a fresh set per epoch (for noised inputs).
pub enum TrainSet<'a> {
    Fixed(&'a [ParallelExample]),
    PerEpoch(&'a dyn Fn(u64) -> Vec<ParallelExample>),
}

impl TrainSet<'_> {
    fn epoch(&self, e: u64) -> Vec<ParallelExample> {
        match self {
            TrainSet::Fixed(d) => d.to_vec(),
            TrainSet::PerEpoch(f) => f(e),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where checkpoints and the log go; nothing is written without it.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt` when present.
    pub resume: bool,
    /// Stop after this step (simulates an interruption).
    pub stop_after: Option<u64>,
    /// Stop as soon as a validation loss at or below this is seen.
    pub stop_below: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

impl LogRecord {
    pub fn tsv(&self) -> String {
        let valid = self.valid_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
        format!("{}\t{:.6e}\t{:.6}\t{}", self.step, self.lr, self.train_loss, valid)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (earliest on ties).
    pub best: Model<f32>,
    pub best_step: u64,
    pub best_valid: f64,
    /// Parameters after the last update.
    pub last: Model<f32>,
    pub last_step: u64,
    /// Records of this invocation only.
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    /// First validated step whose loss is at or below `threshold`.
    pub fn first_step_below(&self, threshold: f64) -> Option<u64> {
        self.log
            .iter()
            .find(|r| r.valid_loss.is_some_and(|v| v <= threshold))
            .map(|r| r.step)
    }
}

fn batch_loss(
    model: &Model<f32>,
    g: &mut Graph<f32>,
    batch: &crate::corpus::PaddedBatch,
    objective: Objective,
    label_smoothing: f64,
) -> Result<crate::tensor::Var, ModelError> {
    match objective {
        Objective::Seq2Seq => model.loss(g, batch, label_smoothing),
        Objective::LanguageModel => model.lm_loss(g, batch, label_smoothing),
    }
}

/// Mean per-token negative log-likelihood (no smoothing, no dropout).
pub fn validation_loss(
    model: &Model<f32>,
    examples: &[ParallelExample],
    objective: Objective,
    max_tokens: usize,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in make_batches(examples, max_tokens, 0)? {
        let padded = collate(batch.indices.iter().map(|&i| &examples[i]));
        let n = padded.tgt_out.iter().filter(|&&y| y != PAD).count();
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let loss = batch_loss(model, &mut g, &padded, objective, 0.0)?;
        total += g.value(loss).data()[0] as f64 * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

fn io_error(path: &Path, e: ModelError) -> TrainError {
    match e {
        ModelError::Io(io) if io.kind() == ErrorKind::StorageFull => TrainError::DiskFull(path.to_path_buf()),
        other => TrainError::Model(other),
    }
}

struct Position {
    step: u64,
    epoch: u64,
    batch: usize,
}

fn snapshot(model: &Model<f32>, adam: Option<&Adam>, meta: &[(&str, String)]) -> Checkpoint {
    let mut ckpt = model.to_checkpoint();
    for (k, v) in meta {
        ckpt.meta.insert(k.to_string(), v.clone());
    }
    if let Some(adam) = adam {
        adam.store(&mut ckpt);
    }
    ckpt
}

fn meta_u64(ckpt: &Checkpoint, key: &str) -> Result<u64, TrainError> {
    ckpt.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TrainError::Model(ModelError::MalformedCheckpoint(format!("missing meta.{key}"))))
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Runs `cfg.max_updates` Adam updates, one per token-bounded batch.  Every
/// `checkpoint_every` updates (and after the last) the validation loss is
/// computed, the log and `last.ckpt` are written, and `best.ckpt` is
/// replaced when the loss improves strictly.
pub fn train(
    model: Model<f32>,
    data: TrainSet<'_>,
    valid: &[ParallelExample],
    objective: Objective,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut model = model;
    model.config.dropout = cfg.dropout;
    model.config.layerdrop = cfg.layerdrop;
    let divergence = DIVERGENCE_FACTOR * (model.config.dec_vocab.max(2) as f64).ln();

    let mut adam = Adam::default();
    let mut pos = Position { step: 0, epoch: 0, batch: 0 };
    let mut best = (model.clone(), 0u64, f64::INFINITY);
    let out_dir = opts.out_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let last_path = out_dir.map(|d| d.join(LAST_CHECKPOINT));
    let best_path = out_dir.map(|d| d.join(BEST_CHECKPOINT));

    let resumed = match (&last_path, opts.resume) {
        (Some(p), true) if p.exists() => {
            let ckpt = read_checkpoint(p)?;
            let mut restored = Model::from_checkpoint(&ckpt)?;
            restored.config.dropout = cfg.dropout;
            restored.config.layerdrop = cfg.layerdrop;
            model = restored;
            adam = Adam::restore(&ckpt);
            pos = Position {
                step: meta_u64(&ckpt, "step")?,
                epoch: meta_u64(&ckpt, "epoch")?,
                batch: meta_u64(&ckpt, "batch")? as usize,
            };
            let best_valid: f64 = ckpt.meta.get("best_valid").and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY);
            let best_step = meta_u64(&ckpt, "best_step").unwrap_or(0);
            let best_model = match &best_path {
                Some(bp) if bp.exists() => Model::from_checkpoint(&read_checkpoint(bp)?)?,
                _ => model.clone(),
            };
            best = (best_model, best_step, best_valid);
            log::info!("resuming at step {}", pos.step);
            true
        }
        _ => false,
    };

    let mut log_file = match out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let mut f = OpenOptions::new()
                .create(true)
                .append(resumed)
                .write(true)
                .truncate(!resumed)
                .open(&path)?;
            if !resumed {
                writeln!(f, "step\tlr\ttrain_loss\tvalid_loss")?;
            }
            Some(f)
        }
        None => None,
    };

    let save_last = |model: &Model<f32>, adam: &Adam, pos: &Position, best: &(Model<f32>, u64, f64)| {
        if let Some(p) = &last_path {
            let ckpt = snapshot(
                model,
                Some(adam),
                &[
                    ("step", pos.step.to_string()),
                    ("epoch", pos.epoch.to_string()),
                    ("batch", pos.batch.to_string()),
                    ("best_step", best.1.to_string()),
                    ("best_valid", best.2.to_string()),
                    ("seed", cfg.seed.to_string()),
                ],
            );
            write_checkpoint(p, &ckpt).map_err(|e| io_error(p, e))?;
        }
        Ok::<(), TrainError>(())
    };
    if !resumed {
        // Step 0 is the first "last good" state.
        save_last(&model, &adam, &pos, &best)?;
    }

    let mut records = Vec::new();
    let mut epoch_data = data.epoch(pos.epoch);
    if epoch_data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut batches = make_batches(&epoch_data, cfg.max_tokens, epoch_seed(cfg.seed, pos.epoch))?;
    let mut since_log = (0.0, 0usize);
    while pos.step < cfg.max_updates {
        if opts.stop_after.is_some_and(|s| pos.step >= s) {
            break;
        }
        if pos.batch >= batches.len() {
            pos.epoch += 1;
            pos.batch = 0;
            epoch_data = data.epoch(pos.epoch);
            batches = make_batches(&epoch_data, cfg.max_tokens, epoch_seed(cfg.seed, pos.epoch))?;
            if batches.is_empty() {
                return Err(TrainError::EmptyDataset);
            }
        }
        let padded = collate(batches[pos.batch].indices.iter().map(|&i| &epoch_data[i]));
        pos.batch += 1;
        pos.step += 1;
        let lr = lr_at(pos.step, cfg);
        let mut g = Graph::training(cfg.seed, pos.step);
        let loss = batch_loss(&model, &mut g, &padded, objective, cfg.label_smoothing)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() || value > divergence {
            return Err(TrainError::DivergedLoss { step: pos.step, loss: value });
        }
        let grads = g.backward(loss).map_err(ModelError::from)?;
        let grads = g.param_grads(&grads);
        drop(g);
        adam.update(&mut model, &grads, lr, pos.step, cfg);
        since_log.0 += value;
        since_log.1 += 1;

        let validate = pos.step % cfg.checkpoint_every == 0 || pos.step == cfg.max_updates;
        let mut valid_loss = None;
        if validate && !valid.is_empty() {
            let v = validation_loss(&model, valid, objective, cfg.max_tokens)?;
            if !v.is_finite() {
                return Err(TrainError::DivergedLoss { step: pos.step, loss: v });
            }
            if v < best.2 {
                best = (model.clone(), pos.step, v);
                if let Some(p) = &best_path {
                    let ckpt = snapshot(&model, None, &[("step", pos.step.to_string()), ("valid_loss", v.to_string())]);
                    write_checkpoint(p, &ckpt).map_err(|e| io_error(p, e))?;
                }
            }
            valid_loss = Some(v);
        }
        let record = LogRecord {
            step: pos.step,
            lr,
            train_loss: since_log.0 / since_log.1 as f64,
            valid_loss,
        };
        since_log = (0.0, 0);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", record.tsv())?;
        }
        records.push(record);
        if validate {
            save_last(&model, &adam, &pos, &best)?;
            if opts.stop_below.is_some_and(|t| valid_loss.is_some_and(|v| v <= t)) {
                break;
            }
        }
    }
    if valid.is_empty() {
        best = (model.clone(), pos.step, f64::NAN);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_step: best.1,
        best_valid: best.2,
        last: model,
        last_step: pos.step,
        log: records,
    })
}

/// Parses a training log written by [`train`].
pub fn read_log(text: &str) -> Vec<LogRecord> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            Some(LogRecord {
                step: f.first()?.parse().ok()?,
                lr: f.get(1)?.parse().ok()?,
                train_loss: f.get(2)?.parse().ok()?,
                valid_loss: f.get(3).and_then(|v| v.parse().ok()),
            })
        })
        .collect()
}

/// Which tensors came from where.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitReport {
    pub initialized: Vec<String>,
    pub embeddings: Option<EmbeddingReport>,
}

impl std::fmt::Display for InitReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = format!("{} tensors from checkpoints", self.initialized.len());
        if let Some(e) = &self.embeddings {
            let _ = write!(s, ", {e} decoder embedding rows from file");
        }
        f.write_str(&s)
    }
}

fn copy_prefix(
    model: &mut Model<f32>,
    ckpt: &Checkpoint,
    fields: &[&str],
    prefix: &str,
    report: &mut InitReport,
) -> Result<(), TrainError> {
    if let Some(field) = model.config.first_difference(&ckpt.config, fields) {
        return Err(ModelError::ConfigMismatch { field }.into());
    }
    for (name, slot) in model.params.tensors.iter_mut() {
        if !name.starts_with(prefix) {
            continue;
        }
        let t = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| ModelError::BadParameter(name.clone()))?;
        if t.shape() != slot.shape() {
            return Err(ModelError::BadParameter(name.clone()).into());
        }
        *slot = Arc::new(t.clone());
        report.initialized.push(name.clone());
    }
    Ok(())
}

/// Fresh model, then encoder weights, then decoder weights, then decoder
/// embedding rows from a text file; later sources win.
pub fn initialize_for_finetune(
    config: ModelConfig,
    seed: u64,
    encoder: Option<&Checkpoint>,
    decoder: Option<&Checkpoint>,
    embeddings: Option<(&Path, &BpeModel)>,
) -> Result<(Model<f32>, InitReport), TrainError> {
    let mut model = Model::build(config, seed)?;
    let mut report = InitReport::default();
    if let Some(ckpt) = encoder {
        copy_prefix(&mut model, ckpt, ENCODER_FIELDS, "enc.", &mut report)?;
    }
    if let Some(ckpt) = decoder {
        copy_prefix(&mut model, ckpt, DECODER_FIELDS, "dec.", &mut report)?;
    }
    if let Some((path, vocab)) = embeddings {
        report.embeddings = Some(load_decoder_embeddings(&mut model, path, vocab)?);
    }
    log::info!("initialization: {report}");
    Ok((model, report))
}

/// Keeps only the tensors under `prefix` (e.g. `enc.` for an exported
/// pretrained encoder).
pub fn export_part(model: &Model<f32>, prefix: &str) -> Checkpoint {
    let mut ckpt = model.to_checkpoint();
    ckpt.tensors.retain(|name, _| name.starts_with(prefix));
    ckpt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Language;
    use crate::model::Preset;
    use crate::subword::{BOS, EOS};

    #[test]
    fn schedule_closed_form() {
        let cfg = TrainConfig::fresh(0);
        let w = cfg.warmup_steps as f64;
        for step in [1, 2000, 4000, 40_000] {
            let s = step as f64;
            let expect = 0.001 * if s <= w { s * w.powf(-1.5) } else { s.powf(-0.5) };
            assert!((lr_at(step, &cfg) - expect).abs() < 1e-12);
        }
        assert!((lr_at(1, &cfg) - 0.001 * 4000f64.powf(-1.5)).abs() < 1e-15);
        assert!((lr_at(4000, &cfg) - 0.001 / 4000f64.sqrt()).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for step in 4000..6000 {
            let lr = lr_at(step, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_keys_round_trip() {
        let cfg = TrainConfig::pretrained_init(3);
        let mut other = TrainConfig::fresh(0);
        for (k, v) in cfg.to_map() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
        assert!(other.set("bogus", "1").is_err());
        assert!(TrainConfig { warmup_steps: 0, ..cfg }.validate().is_err());
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        Model::build(ModelConfig::preset(Preset::Toy, 12, 12), seed).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut model = tiny_model(1);
        let before = model.clone();
        let grads: IndexMap<String, Tensor<f32>> = model
            .params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        let mut adam = Adam::default();
        adam.update(&mut model, &grads, 0.1, 1, &TrainConfig::fresh(0));
        assert_eq!(model, before);
    }

    fn pairs() -> Vec<ParallelExample> {
        let de = Language::new("de").unwrap();
        (0..8u32)
            .map(|i| ParallelExample {
                src_ids: vec![5 + i % 4, 6, 7 + i % 3],
                src_depth_ids: vec![0, 1, 1],
                src_subgraph_ids: vec![0, 1, 2],
                tgt_ids: vec![BOS, 5 + i % 4, 7 + i % 3, EOS],
                language: de,
                line: i as usize + 1,
            })
            .collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            base_lr: 0.05,
            warmup_steps: 10,
            max_updates: 30,
            checkpoint_every: 5,
            dropout: 0.1,
            layerdrop: 0.0,
            max_tokens: 16,
            ..TrainConfig::fresh(7)
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = pairs();
        let cfg = quick_cfg();
        let full = train(tiny_model(2), TrainSet::Fixed(&data), &data, Objective::Seq2Seq, &cfg, &RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(15),
            ..Default::default()
        };
        let first = train(tiny_model(2), TrainSet::Fixed(&data), &data, Objective::Seq2Seq, &cfg, &opts).unwrap();
        assert_eq!(first.last_step, 15);
        opts.stop_after = None;
        opts.resume = true;
        let second = train(tiny_model(99), TrainSet::Fixed(&data), &data, Objective::Seq2Seq, &cfg, &opts).unwrap();
        assert_eq!(second.log.first().unwrap().step, 16);
        assert_eq!(&full.log[15..], &second.log[..]);
        assert_eq!(full.best_step, second.best_step);
        assert_eq!(full.last, second.last);
        let log = read_log(&fs::read_to_string(dir.path().join(LOG_FILE)).unwrap());
        assert_eq!(log.len(), 30);
        let best = Model::<f32>::from_checkpoint(&read_checkpoint(dir.path().join(BEST_CHECKPOINT)).unwrap()).unwrap();
        let v = validation_loss(&best, &data, Objective::Seq2Seq, 16).unwrap();
        assert!((v - full.best_valid).abs() < 1e-6);
    }

    #[test]
    fn best_is_minimum_validation_loss() {
        let data = pairs();
        let out = train(tiny_model(4), TrainSet::Fixed(&data), &data, Objective::Seq2Seq, &quick_cfg(), &RunOptions::default()).unwrap();
        let min = out.log.iter().filter_map(|r| r.valid_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_valid, min);
        let first_min = out.log.iter().find(|r| r.valid_loss == Some(min)).unwrap().step;
        assert_eq!(out.best_step, first_min);
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
    }

    #[test]
    fn huge_learning_rate_diverges_and_keeps_last_good() {
        let data = pairs();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            base_lr: 100.0 * 10f64.powf(0.5),
            ..quick_cfg()
        };
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = train(tiny_model(5), TrainSet::Fixed(&data), &data, Objective::Seq2Seq, &cfg, &opts).unwrap_err();
        assert!(matches!(err, TrainError::DivergedLoss { .. }), "{err}");
        let kept = read_checkpoint(dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert!(Model::<f32>::from_checkpoint(&kept).unwrap().params.tensors.values().all(|t| t.all_finite()));
    }

    #[test]
    fn finetune_initialization_order() {
        let cfg = ModelConfig::preset(Preset::Toy, 12, 12);
        let enc_src = Model::<f32>::build(cfg.clone(), 11).unwrap();
        let (fresh, report) = initialize_for_finetune(cfg.clone(), 1, None, None, None).unwrap();
        assert!(report.initialized.is_empty());
        assert_eq!(fresh, Model::build(cfg.clone(), 1).unwrap());

        let enc = export_part(&enc_src, "enc.");
        let (m, report) = initialize_for_finetune(cfg.clone(), 1, Some(&enc), None, None).unwrap();
        assert!(report.initialized.iter().all(|n| n.starts_with("enc.")));
        assert_eq!(m.params.get("enc.word"), enc_src.params.get("enc.word"));
        assert_eq!(m.params.get("dec.word"), fresh.params.get("dec.word"));

        let vocab = crate::subword::external_vocab_from_text("#vocab\n▁x\n").unwrap();
        let mut small = cfg.clone();
        small.dec_vocab = vocab.vocab_size();
        let dec_src = Model::<f32>::build(small.clone(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("emb.txt");
        let row = vec!["0.5"; small.d_word].join(" ");
        fs::write(&emb, format!("▁x {row}\n")).unwrap();
        let dec = export_part(&dec_src, "dec.");
        let (m, report) = initialize_for_finetune(small.clone(), 1, None, Some(&dec), Some((&emb, &vocab))).unwrap();
        assert_eq!(report.embeddings.unwrap().initialized, 1);
        let id = vocab.text_id("▁x").unwrap() as usize;
        assert!(m.params.get("dec.word").unwrap().row(id).iter().all(|&x| x == 0.5));
        assert_eq!(m.params.get("dec.word").unwrap().row(0), dec_src.params.get("dec.word").unwrap().row(0));

        let mut other = cfg.clone();
        other.enc_layers = 3;
        let bad = export_part(&Model::<f32>::build(other, 1).unwrap(), "enc.");
        match initialize_for_finetune(cfg, 1, Some(&bad), None, None) {
            Err(TrainError::Model(ModelError::ConfigMismatch { field })) => assert_eq!(field, "enc_layers"),
            other => panic!("{other:?}"),
        }
    }
}
