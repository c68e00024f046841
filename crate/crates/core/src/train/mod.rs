//! The two-stage Siamese training protocol, a single-branch reference loop,
//! checkpoints and the trade-off grid search.

mod adamw;
mod checkpoint;
mod grid;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamW};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use grid::{grid_search, GridCell, GridResult, LAMBDA1_GRID, LAMBDA2_GRID};

use crate::autodiff::Tape;
use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::losses::{self, Bandwidth, CenterBank, LossWeights};
use crate::metrics::{self, EvalReport};
use crate::models::{Arch, Mode, Model, ModelSpec};
use crate::rng::{Rng, SeedStream};

/// Every hyperparameter of a run. Together with the seed it determines the
/// run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `None` selects the backbone's default rate.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    /// Center update rate γ.
    pub center_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub max_epochs_stage1: usize,
    pub max_epochs_stage2: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub use_preproc_invariants: bool,
    pub use_center: bool,
    pub use_mmd: bool,
    pub repetitions: usize,
    pub bandwidth: Bandwidth,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            learning_rate: None,
            batch_size: 16,
            center_rate: 0.5,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            max_epochs_stage1: 500,
            max_epochs_stage2: 300,
            patience: 80,
            validation_fraction: 0.2,
            seed: 0,
            use_preproc_invariants: true,
            use_center: true,
            use_mmd: true,
            repetitions: 5,
            bandwidth: Bandwidth::MedianFamily,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("at least one repetition is required".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        LossWeights::new(self.lambda1, self.lambda2)?;
        Ok(())
    }

    /// Trade-off weights after the ablation switches are applied.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: if self.use_center { self.lambda1 } else { 0.0 },
            lambda2: if self.use_mmd { self.lambda2 } else { 0.0 },
        }
    }

    pub fn lr(&self, arch: Arch) -> f64 {
        self.learning_rate.unwrap_or_else(|| arch.default_learning_rate())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub train_loss: f64,
    pub train_softmax: f64,
    pub train_center: f64,
    pub train_mmd: f64,
    /// Train-mode accuracy over the epoch's batches.
    pub train_acc: f64,
    /// Stage 1: eval-mode softmax loss on the held-out split. Stage 2:
    /// eval-mode softmax loss on the full source set.
    pub monitor_loss: f64,
    pub monitor_acc: f64,
    /// Accuracy on a labeled target set, when one was supplied for tracing.
    pub target_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    Diverged { stage: Stage, epoch: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub arch: Arch,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    /// Stage 2 resumes from the stage-1 checkpoint taken at `best_epoch`.
    pub stage2_start: String,
    pub stage2_epochs: usize,
    pub stage2_reached_target: bool,
    pub status: RunStatus,
    pub log_clamps: usize,
    pub final_source: Option<EvalReport>,
    /// Excluded from equality of reproduced runs.
    pub wall_seconds: f64,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_run(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_seconds = other.wall_seconds;
        a == *other
    }

    /// Per-epoch trace as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "stage,epoch,train_loss,train_softmax,train_center,train_mmd,train_acc,monitor_loss,monitor_acc,target_acc\n",
        );
        for e in &self.epochs {
            let stage = match e.stage {
                Stage::One => 1,
                Stage::Two => 2,
            };
            s.push_str(&format!(
                "{stage},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.train_softmax,
                e.train_center,
                e.train_mmd,
                e.train_acc,
                e.monitor_loss,
                e.monitor_acc,
                e.target_acc.map_or(String::new(), |a| a.to_string())
            ));
        }
        s
    }

    /// The sequence of monitored losses, stage 1 then stage 2.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().flat_map(|e| [e.train_loss, e.monitor_loss]).collect()
    }
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub centers: Option<CenterBank>,
    pub record: RunRecord,
}

/// Random streams of one run, derived by label from the seed.
struct Streams {
    init: Rng,
    split: Rng,
    batches: Rng,
    dropout: Rng,
    target: Rng,
    centers: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = SeedStream::new(seed);
        Self {
            init: s.rng("init"),
            split: s.rng("split"),
            batches: s.rng("batches"),
            dropout: s.rng("dropout"),
            target: s.rng("target"),
            centers: s.rng("centers"),
        }
    }
}

/// Stratified train/validation split: `fraction` of each class (at least one
/// trial per class) goes to validation.
pub fn stratified_split(labels: &[usize], classes: usize, fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < 2 {
            return Err(Error::MissingClass(c));
        }
        idx.shuffle(rng);
        let k = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Shuffled mini-batches; a trailing batch of one trial is dropped because
/// batch norm needs two.
fn batches(indices: &[usize], size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn check_source(source: &TrialSet, spec: &ModelSpec) -> Result<Vec<usize>> {
    let labels = source
        .labels()
        .ok_or_else(|| Error::Config("source set must be labeled".into()))?
        .to_vec();
    if source.classes != spec.classes {
        return Err(Error::Config(format!(
            "source has {} classes, model expects {}",
            source.classes, spec.classes
        )));
    }
    let counts = source.class_counts().unwrap_or_default();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    Ok(labels)
}

#[derive(Default)]
struct EpochSums {
    total: f64,
    softmax: f64,
    center: f64,
    mmd: f64,
    correct: usize,
    seen: usize,
    steps: usize,
}

struct Trainer<'a> {
    source: &'a TrialSet,
    target: Option<&'a TrialSet>,
    labels: Vec<usize>,
    weights: LossWeights,
    cfg: &'a TrainConfig,
    model: Model,
    opt: AdamW,
    centers: Option<CenterBank>,
    streams: Streams,
    log_clamps: usize,
}

impl Trainer<'_> {
    /// One optimizer step on a source batch, paired with a target batch
    /// drawn uniformly with replacement when the MMD term is active.
    fn step(&mut self, batch: &[usize], sums: &mut EpochSums) -> Result<()> {
        let mut tape = Tape::new();
        let x = self.source.batch(batch);
        let y: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let fs = self.model.forward(&mut tape, &x, Mode::Train, &mut self.streams.dropout)?;
        let ls = losses::softmax_loss(&mut tape, fs.logits, &y)?;

        let lc = match &self.centers {
            Some(bank) if self.weights.lambda1 > 0.0 => Some(losses::cosine_center_loss(&mut tape, fs.embedding, &y, bank)?),
            _ => None,
        };
        let ld = match self.target {
            Some(target) if self.weights.lambda2 > 0.0 => {
                let tb: Vec<usize> = (0..batch.len())
                    .map(|_| self.streams.target.gen_range(0..target.len()))
                    .collect();
                // Target statistics never reach the running estimates.
                let ft = self.model.forward(&mut tape, &target.batch(&tb), Mode::Train, &mut self.streams.dropout)?;
                Some(losses::mmd_loss(&mut tape, fs.embedding, ft.embedding, self.cfg.bandwidth)?)
            }
            _ => None,
        };
        let total = losses::total_loss(&mut tape, ls, lc, ld, self.weights)?;
        let grads = tape.backward(total)?;
        self.model.params.zero_grad();
        grads.accumulate(&tape, &mut self.model.params);
        self.opt.step(&mut self.model.params);
        self.model.update_running(&fs.batch_stats);
        if let (Some(bank), Some(_)) = (self.centers.as_mut(), lc) {
            bank.update(tape.value(fs.embedding), &y, &mut self.streams.centers)?;
        }
        self.log_clamps += tape.log_clamps();

        let logits = tape.value(fs.logits);
        let c = logits.shape()[1];
        sums.correct += logits
            .data()
            .chunks(c)
            .zip(&y)
            .filter(|(row, &t)| metrics::argmax(row) == t)
            .count();
        sums.seen += batch.len();
        sums.steps += 1;
        sums.total += tape.value(total).item();
        sums.softmax += tape.value(ls).item();
        sums.center += lc.map_or(0.0, |v| tape.value(v).item());
        sums.mmd += ld.map_or(0.0, |v| tape.value(v).item());
        Ok(())
    }

    fn epoch(&mut self, indices: &[usize]) -> Result<EpochSums> {
        let mut sums = EpochSums::default();
        for batch in batches(indices, self.cfg.batch_size, &mut self.streams.batches) {
            self.step(&batch, &mut sums)?;
        }
        if !sums.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(sums)
    }
}

fn epoch_record(stage: Stage, epoch: usize, s: &EpochSums, monitor: &EvalReport, target_acc: Option<f64>) -> EpochRecord {
    let n = s.steps.max(1) as f64;
    EpochRecord {
        stage,
        epoch,
        train_loss: s.total / n,
        train_softmax: s.softmax / n,
        train_center: s.center / n,
        train_mmd: s.mmd / n,
        train_acc: s.correct as f64 / s.seen.max(1) as f64,
        monitor_loss: monitor.loss.unwrap_or(f64::NAN),
        monitor_acc: monitor.accuracy,
        target_acc,
    }
}

/// Trains `spec` on labeled `source` with unlabeled `target` through shared
/// parameters.
///
/// Stage 1 trains on a stratified 80% of the source and early-stops on the
/// eval-mode softmax loss of the remaining 20%. Stage 2 restarts from the
/// best stage-1 checkpoint and trains on all source trials until the
/// eval-mode softmax loss over the source falls to the best validation loss.
/// `trace_target`, when given, is evaluated after every epoch for the record
/// only; it never influences training.
pub fn train_siamese(
    source: &TrialSet,
    target: &TrialSet,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    trace_target: Option<&TrialSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Config("target set is empty".into()));
    }
    if target.channels() != source.channels() || target.samples() != source.samples() {
        return Err(Error::shape("train", "source and target trials differ in shape"));
    }
    run(source, Some(target), spec, cfg, trace_target)
}

/// Single-branch training with the softmax loss only. Draws from the same
/// labeled random streams as [`train_siamese`], so a Siamese run with both
/// trade-offs at zero follows the same trajectory.
pub fn train_vanilla(source: &TrialSet, spec: &ModelSpec, cfg: &TrainConfig, trace_target: Option<&TrialSet>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vanilla = TrainConfig {
        use_center: false,
        use_mmd: false,
        ..cfg.clone()
    };
    run(source, None, spec, &vanilla, trace_target)
}

fn run(
    source: &TrialSet,
    target: Option<&TrialSet>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    trace_target: Option<&TrialSet>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let labels = check_source(source, spec)?;
    let mut streams = Streams::new(cfg.seed);
    let model = Model::new(spec.clone(), &mut streams.init);
    let weights = cfg.effective_weights();
    let centers = (weights.lambda1 > 0.0).then(|| {
        CenterBank::new(spec.classes, spec.embedding_dim(), cfg.center_rate, &mut streams.centers)
    });
    let (train_idx, val_idx) = stratified_split(&labels, spec.classes, cfg.validation_fraction, &mut streams.split)?;
    let val_set = source.subset(&val_idx);
    let opt = AdamW::new(&model.params, cfg.lr(spec.arch), cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut tr = Trainer {
        source,
        target,
        labels,
        weights,
        cfg,
        model,
        opt,
        centers,
        streams,
        log_clamps: 0,
    };
    let mut record = RunRecord {
        config: cfg.clone(),
        arch: spec.arch,
        seed: cfg.seed,
        epochs: Vec::new(),
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        stage2_start: String::new(),
        stage2_epochs: 0,
        stage2_reached_target: false,
        status: RunStatus::Completed,
        log_clamps: 0,
        final_source: None,
        wall_seconds: 0.0,
    };
    let trace = |m: &Model| -> Result<Option<f64>> {
        trace_target.map(|t| metrics::evaluate(m, t).map(|r| r.accuracy)).transpose()
    };

    // Stage 1.
    let mut best: Option<(Model, AdamW, Option<CenterBank>)> = None;
    for epoch in 1..=cfg.max_epochs_stage1 {
        let sums = match tr.epoch(&train_idx) {
            Ok(s) => s,
            Err(e) => return Ok(diverged(tr, record, Stage::One, epoch, e, started)),
        };
        let val = metrics::evaluate(&tr.model, &val_set)?;
        let rec = epoch_record(Stage::One, epoch, &sums, &val, trace(&tr.model)?);
        let vloss = rec.monitor_loss;
        record.epochs.push(rec);
        if vloss < record.best_val_loss {
            record.best_val_loss = vloss;
            record.best_epoch = epoch;
            best = Some((tr.model.clone(), tr.opt.clone(), tr.centers.clone()));
        } else if epoch - record.best_epoch >= cfg.patience {
            break;
        }
    }

    // Stage 2 from the best stage-1 checkpoint.
    if let Some((m, o, c)) = best {
        tr.model = m;
        tr.opt = o;
        tr.centers = c;
    }
    record.stage2_start = format!("stage-1 best checkpoint (epoch {})", record.best_epoch);
    let all: Vec<usize> = (0..source.len()).collect();
    for epoch in 1..=cfg.max_epochs_stage2 {
        let sums = match tr.epoch(&all) {
            Ok(s) => s,
            Err(e) => return Ok(diverged(tr, record, Stage::Two, epoch, e, started)),
        };
        let full = metrics::evaluate(&tr.model, source)?;
        let rec = epoch_record(Stage::Two, epoch, &sums, &full, trace(&tr.model)?);
        let loss = rec.monitor_loss;
        record.epochs.push(rec);
        record.stage2_epochs = epoch;
        if loss <= record.best_val_loss {
            record.stage2_reached_target = true;
            break;
        }
    }
    record.final_source = Some(metrics::evaluate(&tr.model, source)?);
    record.log_clamps = tr.log_clamps;
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model: tr.model,
        centers: tr.centers,
        record,
    })
}

fn diverged(tr: Trainer<'_>, mut record: RunRecord, stage: Stage, epoch: usize, err: Error, started: Instant) -> TrainOutcome {
    record.status = RunStatus::Diverged {
        stage,
        epoch,
        reason: err.to_string(),
    };
    record.log_clamps = tr.log_clamps;
    record.wall_seconds = started.elapsed().as_secs_f64();
    TrainOutcome {
        model: tr.model,
        centers: tr.centers,
        record,
    }
}
