//! Training: in-batch sampled-softmax batches, AdamW updates, validation
//! and checkpoints.
//!
//! The aggregator and user encoder are trained jointly; cached frame
//! features are constants and never receive gradients.

mod batch;
mod model;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::aggregator::AggError;
use crate::config::ConfigError;
use crate::evalkit::{evaluate, EvalCase, EvalConfig, EvalError, EvalReport, Split, TableScorer};
use crate::featstore::FrameFeatureMatrix;
use crate::numkern::{AdamW, AdamWConfig, NumError, Prng, Real};
use crate::seqrec::SeqError;

pub use batch::{build_batch, candidate_set, loss_graph, loss_step, Batch, StepOutput};
pub use model::{Model, ModelConfig, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch has no usable negatives")]
    DegenerateBatch,
    #[error("no cached features for item {0}")]
    MissingFeatures(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Aggregator(#[from] AggError),
    #[error(transparent)]
    Sequence(#[from] SeqError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    ConfigText(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite(_)
                | Self::Num(NumError::NonFinite { .. })
                | Self::Aggregator(AggError::Num(NumError::NonFinite { .. }))
                | Self::Sequence(SeqError::Num(NumError::NonFinite { .. }))
                | Self::Eval(EvalError::NonFinite(_))
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            _ => Err(format!("precision must be f32 or f64, got {s:?}")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Score the validation targets after every epoch and keep the best model.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 60, epochs: 30, lr: 1e-3, weight_decay: 0.1, seed: 42, precision: Precision::F32, validate: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
    pub batches: usize,
    pub val_hr10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
    pub param_count: usize,
    pub aggregator_params: usize,
    /// 1-based epoch of the returned best model (0 = initial weights).
    pub best_epoch: usize,
    pub skipped_batches: usize,
    /// Peak resident set in KiB, when the platform reports it.
    pub peak_rss_kib: Option<u64>,
}

impl TrainStats {
    /// Per-epoch loss and validation hit rate. Deterministic for a fixed seed.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_hr10,batches\n");
        for e in &self.epochs {
            let hr = e.val_hr10.map_or_else(|| "null".to_string(), |h| format!("{h:.6}"));
            s.push_str(&format!("{},{:.8},{hr},{}\n", e.epoch, e.loss, e.batches));
        }
        s
    }

    /// Wall-clock figures, kept apart from the reproducible outputs.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.3}\n", e.epoch, e.seconds));
        }
        let total: f64 = self.epochs.iter().map(|e| e.seconds).sum();
        s.push_str(&format!("total,{total:.3}\n"));
        if let Some(kib) = self.peak_rss_kib {
            s.push_str(&format!("peak_rss_kib,{kib}\n"));
        }
        s
    }
}

pub struct TrainOutcome<T> {
    pub best: Model<T>,
    pub stats: TrainStats,
}

/// Inputs shared by training and evaluation; item ids index `features`.
pub struct TrainData<'a> {
    pub features: &'a [FrameFeatureMatrix],
    pub split: &'a Split,
    /// Per-item interaction counts for the negative sampler.
    pub counts: &'a [u64],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

/// Ranks the chosen held-out targets of every split user with the model.
pub fn evaluate_model<T: Real>(model: &Model<T>, data: &TrainData<'_>, target: Target, cfg: &EvalConfig) -> Result<EvalReport, TrainError> {
    let items: Vec<usize> = (0..data.features.len()).collect();
    let item_emb = model.embed_items(data.features, &items)?;
    let (inputs, cases): (Vec<Vec<usize>>, Vec<EvalCase>) = data
        .split
        .users
        .iter()
        .map(|u| match target {
            Target::Validation => (u.train.clone(), EvalCase { truth: u.val, history: u.train.clone() }),
            Target::Test => {
                let input = u.test_input();
                (input.clone(), EvalCase { truth: u.test, history: input })
            }
        })
        .unzip();
    let users = model.encode_last(&item_emb, &inputs)?;
    let scorer = TableScorer { cases: users.cast(), items: item_emb.cast() };
    Ok(evaluate(&scorer, &cases, data.counts, cfg)?)
}

fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Trains `model` in place. Users are shuffled every epoch with a stream
/// derived from `(seed, epoch)`; a trailing chunk of one user is merged into
/// the previous batch, and batches without negatives are skipped. Returns
/// the best model by validation HR@10 (or the final one when validation is
/// off). `on_epoch` sees each epoch's stats as they are produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    data: &TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let opt_cfg = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(opt_cfg, &model.store);
    let root = Prng::new(cfg.seed);
    let max_len = model.config.seq.max_seq_len;
    let n_items = data.features.len();
    let trainable: Vec<usize> = (0..data.split.users.len()).filter(|&u| data.split.users[u].train.len() >= 2).collect();

    let mut stats = TrainStats {
        epochs: Vec::new(),
        param_count: model.param_count(),
        aggregator_params: model.aggregator_param_count(),
        best_epoch: cfg.epochs,
        skipped_batches: 0,
        peak_rss_kib: None,
    };
    let mut best: Option<(f64, Model<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order = trainable.clone();
        root.fork(&format!("shuffle/{epoch}")).shuffle(&mut order);
        let mut chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
            let n = chunks.len();
            chunks[n - 1] = &order[(n - 1) * cfg.batch_size..];
        }
        let (mut total, mut batches) = (0.0, 0usize);
        for (step, chunk) in chunks.iter().enumerate() {
            // a batch depends only on which users it holds, not their order
            let mut members = chunk.to_vec();
            members.sort_unstable();
            let seqs: Vec<&[usize]> = members.iter().map(|&u| data.split.users[u].train.as_slice()).collect();
            let batch = match build_batch(&seqs, max_len, n_items) {
                Ok(b) => b,
                Err(TrainError::DegenerateBatch) => {
                    stats.skipped_batches += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let out = loss_step(model, &batch, data.features)
                .map_err(|e| if e.is_numeric() { TrainError::NonFinite(format!("epoch {epoch}, step {step}: {e}")) } else { e })?;
            model.store.zero_grads();
            model.store.accumulate(&out.grads);
            opt.step(&mut model.store);
            total += out.loss;
            batches += 1;
        }
        let loss = if batches > 0 { total / batches as f64 } else { 0.0 };
        let val_hr10 = if cfg.validate && !data.split.users.is_empty() {
            let r = evaluate_model(model, data, Target::Validation, eval_cfg)?;
            r.hr(10).or_else(|| r.hr(r.ks[0]))
        } else {
            None
        };
        let es = EpochStats { epoch, loss, seconds: start.elapsed().as_secs_f64(), batches, val_hr10 };
        on_epoch(&es);
        if let Some(hr) = val_hr10 {
            if best.as_ref().map_or(true, |(b, _)| hr > *b) {
                best = Some((hr, model.clone()));
                stats.best_epoch = epoch;
            }
        }
        stats.epochs.push(es);
    }
    stats.peak_rss_kib = peak_rss_kib();
    let best = match best {
        Some((_, m)) => m,
        None => model.clone(),
    };
    Ok(TrainOutcome { best, stats })
}
