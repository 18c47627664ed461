use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW, AdamWConfig, Scheduler, SchedulerKind};
use super::task::{stream, Example, Purpose};
use crate::autodiff::{Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::net::{Input, Mode, Model, NetworkConfig, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: SchedulerKind,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            epochs: 10,
            scheduler: SchedulerKind::None,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid(format!("clip_norm must be positive, got {c}")));
            }
        }
        if let SchedulerKind::Plateau { factor, .. } = self.scheduler {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(invalid(format!("plateau factor must lie in (0, 1], got {factor}")));
            }
        }
        Ok(())
    }
}

/// Model initialised from the run's init stream.
pub fn init_model(config: NetworkConfig, seed: u64) -> Result<Model> {
    Model::init(config, &mut stream(seed, Purpose::Init))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Epoch 0 is the untrained model; each epoch has a train and a val row.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: EvalMetrics,
    /// Weights at the epoch with the lowest validation loss.
    pub best_model: Model,
}

impl TrainOutcome {
    pub fn metric(&self, epoch: usize, split: Split) -> Option<EvalMetrics> {
        self.history
            .iter()
            .find(|r| r.epoch == epoch && r.split == split)
            .map(|r| r.metrics)
    }

    pub fn final_metric(&self, split: Split) -> Option<EvalMetrics> {
        self.history.iter().rev().find(|r| r.split == split).map(|r| r.metrics)
    }
}

/// Position of `label` when classes are ordered by descending logit, ties
/// to the lower class index.
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let v = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, &x)| x > v || (x == v && c < label))
        .count()
}

/// Cross-entropy of one row of logits.
fn row_ce(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

const EVAL_CHUNK: usize = 32;

/// Loss, top-1, top-5 and perplexity `exp(loss)`. Loss and accuracy are
/// averaged over every prediction: one per sequence for classification,
/// one per position for next-token heads.
pub fn evaluate(model: &Model, data: &[Example]) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(invalid("evaluate: empty dataset"));
    }
    let (mut loss, mut top1, mut top5, mut count) = (0.0, 0usize, 0usize, 0usize);
    for chunk in data.chunks(EVAL_CHUNK) {
        let inputs: Vec<Input> = chunk.iter().map(|e| e.input.clone()).collect();
        let outputs = model.predict(&inputs)?;
        for (out, ex) in outputs.iter().zip(chunk) {
            let rows: Vec<(&[f64], usize)> = match &ex.target {
                Target::Class(c) => vec![(out.data(), *c)],
                Target::Tokens(t) => {
                    if t.len() != out.shape()[0] {
                        return Err(invalid("evaluate: target length differs from sequence length"));
                    }
                    t.iter().enumerate().map(|(l, &c)| (out.row(l), c)).collect()
                }
            };
            for (logits, label) in rows {
                if label >= logits.len() {
                    return Err(Error::LabelOutOfRange { label, classes: logits.len() });
                }
                loss += row_ce(logits, label);
                let rank = label_rank(logits, label);
                top1 += usize::from(rank < 1);
                top5 += usize::from(rank < 5);
                count += 1;
            }
        }
    }
    let n = count as f64;
    let loss = loss / n;
    Ok(EvalMetrics {
        loss,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        ppl: loss.exp(),
    })
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Diverged { epoch, batch, loss }
}

/// One optimisation step on `batch`. Returns the batch loss.
fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&Example],
    cfg: &TrainConfig,
    lr: f64,
    at: (usize, usize),
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let inputs: Vec<Input> = batch.iter().map(|e| e.input.clone()).collect();
    let targets: Vec<Target> = batch.iter().map(|e| e.target.clone()).collect();
    let nonfinite = |e: Error| match e {
        Error::NonFinite { .. } => diverged(at.0, at.1, f64::NAN),
        other => other,
    };
    let fwd = model.forward(&mut tape, &bound, &inputs, Mode::Train).map_err(nonfinite)?;
    let loss_var = model.loss(&mut tape, &fwd.outputs, &targets).map_err(nonfinite)?;
    let loss = tape.value(loss_var).item()?;
    if !loss.is_finite() {
        return Err(diverged(at.0, at.1, loss));
    }
    let grads = tape.backward(loss_var).map_err(nonfinite)?;
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut g: Vec<Vec<f64>> = bound.vars().map(|(_, v)| grads.get(v).into_data()).collect();
    if g.iter().flatten().any(|x| !x.is_finite()) {
        return Err(diverged(at.0, at.1, loss));
    }
    if let Some(max) = cfg.clip_norm {
        clip_global_norm(&mut g, max);
    }
    let mut values: Vec<Vec<f64>> = model.params().values().map(|p| p.value.data().to_vec()).collect();
    let decay: Vec<bool> = model.params().values().map(|p| p.decay).collect();
    opt.step(&mut values, &g, &decay, lr)?;
    for (name, data) in names.iter().zip(values) {
        let shape = model.param(name)?.shape().to_vec();
        let t = Tensor::new(shape, data).map_err(|_| diverged(at.0, at.1, loss))?;
        model.set_param(name, t)?;
    }
    model.apply_moments(&fwd.moments)?;
    Ok(loss)
}

/// Trains `model` in place and returns the per-epoch history.
///
/// Epoch 0 evaluates the untrained model. After every epoch both splits
/// are evaluated in eval mode; the weights with the lowest validation loss
/// are kept. Shuffling uses the shuffle stream of `cfg.seed`.
pub fn train(model: &mut Model, train_set: &[Example], val_set: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("train: empty dataset"));
    }
    let mut history = Vec::with_capacity(2 * (cfg.epochs + 1));
    let record = |history: &mut Vec<EpochRecord>, epoch, model: &Model| -> Result<EvalMetrics> {
        let tr = evaluate(model, train_set)?;
        let va = evaluate(model, val_set)?;
        history.push(EpochRecord { epoch, split: Split::Train, metrics: tr });
        history.push(EpochRecord { epoch, split: Split::Val, metrics: va });
        Ok(va)
    };
    let initial = record(&mut history, 0, model)?;
    let (mut best_epoch, mut best_val, mut best_model) = (0, initial, model.clone());

    let mut opt = AdamW::new(cfg.optimizer);
    let mut sched = Scheduler::new(cfg.scheduler, cfg.optimizer.lr, cfg.epochs);
    let mut shuffle = stream(cfg.seed, Purpose::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = sched.lr(epoch);
        order.shuffle(&mut shuffle);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            train_step(model, &mut opt, &batch, cfg, lr, (epoch, b))?;
        }
        let val = record(&mut history, epoch, model)?;
        if !val.loss.is_finite() {
            return Err(diverged(epoch, 0, val.loss));
        }
        sched.observe(val.loss);
        if val.loss < best_val.loss {
            (best_epoch, best_val, best_model) = (epoch, val, model.clone());
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
        best_model,
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// `epoch,split,loss,top1,top5,ppl` with a header row.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,loss,top1,top5,ppl\n");
    for r in history {
        let m = r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.split.as_str(),
            fmt17(m.loss),
            fmt17(m.top1),
            fmt17(m.top5),
            fmt17(m.ppl)
        );
    }
    out
}

/// Summary of a run for machine consumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val: EvalMetrics,
    pub initial_val: EvalMetrics,
    pub final_train: EvalMetrics,
    pub final_val: EvalMetrics,
    pub n_parameters: usize,
}

impl RunSummary {
    pub fn new(outcome: &TrainOutcome, cfg: &TrainConfig) -> Result<Self> {
        let missing = || invalid("run summary: incomplete history");
        Ok(Self {
            seed: cfg.seed,
            epochs: cfg.epochs,
            best_epoch: outcome.best_epoch,
            best_val: outcome.best_val,
            initial_val: outcome.metric(0, Split::Val).ok_or_else(missing)?,
            final_train: outcome.final_metric(Split::Train).ok_or_else(missing)?,
            final_val: outcome.final_metric(Split::Val).ok_or_else(missing)?,
            n_parameters: outcome.best_model.n_parameters(),
        })
    }
}
