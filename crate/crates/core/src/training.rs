//! Two-stage training: joint `L_c + L_r` with early stopping on validation
//! `L_c`, then regression-head-only fine-tuning with early stopping on
//! validation `L_r`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::EncodedSet;
use crate::error::{Error, Result};
use crate::model::losses::{regression_loss, sigmoid_f1_loss};
use crate::model::{Batch, DelayModel, Losses, Mode};
use crate::numerics::{substream, LrSchedule, OptimizerState, Param, RngState};

/// Rows per forward pass when evaluating whole splits.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs_stage1: usize,
    pub max_epochs_stage2: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_epochs_stage1: 30,
            max_epochs_stage2: 15,
            patience: 5,
            min_delta: 1e-4,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            warmup_fraction: 0.05,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::config(format!("training.{f}"), m));
        if self.batch_size < 2 {
            return err("batch_size", "must be at least 2");
        }
        if self.patience < 1 {
            return err("patience", "must be at least 1");
        }
        if !(self.min_delta >= 0.0) {
            return err("min_delta", "must be non-negative");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("base_lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", "must be non-negative");
        }
        if !(self.clip_norm >= 0.0) {
            return err("clip_norm", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return err("warmup_fraction", "must be in [0, 1)");
        }
        Ok(())
    }

    fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Joint,
    HeadsOnly,
}

impl Stage {
    fn number(self) -> u64 {
        match self {
            Stage::Joint => 1,
            Stage::HeadsOnly => 2,
        }
    }
}

/// One row of the training history. Epoch 0 is the state before any update;
/// its train losses are full-split evaluations, later epochs report the mean
/// over that epoch's mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u64,
    pub epoch: usize,
    pub train_lc: f64,
    pub train_lr: f64,
    pub val_lc: f64,
    pub val_lr: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

/// Patience bookkeeping. The restored parameters are always the ones with the
/// lowest monitored value seen; `min_delta` only governs the patience counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    reference: f64,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

/// What [`EarlyStopping::observe`] concluded about an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            reference: f64::INFINITY,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        let new_best = value < self.best;
        if new_best {
            self.best = value;
            self.best_epoch = epoch;
        }
        if value < self.reference - self.min_delta {
            self.reference = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Verdict {
            new_best,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub optimizer: OptimizerState,
    /// Dropout stream position after the last epoch.
    pub rng: RngState,
}

/// Whole-split losses with ground-truth routing and no dropout. `L_c` is the
/// soft F1 over the entire split, `L_r` the mean pinball loss.
pub fn evaluate_losses(model: &DelayModel, set: &EncodedSet) -> Result<Losses> {
    if set.is_empty() {
        return Err(Error::Empty("cannot evaluate losses on an empty split".into()));
    }
    let mut probs = Vec::with_capacity(set.len());
    let mut reg_sum = 0.0;
    let mut start = 0;
    while start < set.len() {
        let end = (start + EVAL_CHUNK).min(set.len());
        let batch = Batch::range(set, start, end);
        let (out, _) = model.forward(&batch, Mode::Eval, None)?;
        probs.extend_from_slice(&out.delay_prob);
        let levels = model.arch.quantile_levels;
        reg_sum += regression_loss(
            &out.delayed_quantiles,
            &out.ontime_quantiles,
            &batch.y,
            &batch.delayed,
            &levels,
        ) * batch.size as f64;
        start = end;
    }
    Ok(Losses {
        classification: sigmoid_f1_loss(&probs, &set.delayed),
        regression: reg_sum / set.len() as f64,
    })
}

/// Mini-batch index lists for one epoch. A trailing batch of size 1 is
/// dropped because the batch-level soft F1 is degenerate on one row.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut crate::numerics::DetRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        log::debug!("dropping trailing batch of size 1");
    }
    batches
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size);
    if n % batch_size == 1 {
        full - 1
    } else {
        full
    }
}

/// Stage 1: joint training of every parameter on `L_c + L_r`, early-stopped on
/// validation `L_c`. Best parameters are restored before returning.
pub fn train_stage1(
    model: &mut DelayModel,
    train: &EncodedSet,
    val: &EncodedSet,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    model.set_trunk_trainable(true);
    run_stage(model, train, val, cfg, Stage::Joint)
}

/// Stage 2: embeddings, backbone and classifier frozen; only the regression
/// heads train on `L_r`, early-stopped on validation `L_r`.
pub fn train_stage2(
    model: &mut DelayModel,
    train: &EncodedSet,
    val: &EncodedSet,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    model.set_trunk_trainable(false);
    let out = run_stage(model, train, val, cfg, Stage::HeadsOnly);
    model.set_trunk_trainable(true);
    out
}

fn run_stage(
    model: &mut DelayModel,
    train: &EncodedSet,
    val: &EncodedSet,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Empty(format!(
            "training split has {} rows, need at least 2",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let max_epochs = match stage {
        Stage::Joint => cfg.max_epochs_stage1,
        Stage::HeadsOnly => cfg.max_epochs_stage2,
    };
    let joint = stage == Stage::Joint;
    let monitored = |l: &Losses| if joint { l.classification } else { l.regression };

    let steps = steps_per_epoch(train.len(), cfg.batch_size) as u64;
    let total = steps * max_epochs as u64;
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        warmup_steps: (cfg.warmup_fraction * total as f64).ceil() as u64,
        total_steps: total,
    };
    let mut opt = OptimizerState::new(
        model.params().into_iter().map(|(_, p)| p),
        schedule,
        cfg.weight_decay,
        cfg.clip(),
    );
    let mut shuffle_rng = substream(cfg.seed, 100 + stage.number());
    let mut dropout_rng = substream(cfg.seed, 200 + stage.number());

    let train0 = evaluate_losses(model, train)?;
    let val0 = evaluate_losses(model, val)?;
    let mut history = vec![EpochRecord {
        stage: stage.number(),
        epoch: 0,
        train_lc: train0.classification,
        train_lr: train0.regression,
        val_lc: val0.classification,
        val_lr: val0.regression,
        lr: 0.0,
    }];
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    stopper.observe(0, monitored(&val0));
    let mut best_model = model.clone();
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=max_epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut shuffle_rng);
        let (mut sum_lc, mut sum_lr, mut last_lr) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let batch = Batch::gather(train, idx);
            model.zero_grad();
            let (losses, out) = model.forward_backward(&batch, Mode::Train, Some(&mut dropout_rng), joint)?;
            assert_eq!(out.routed_head, batch.delayed, "training must route by ground truth");
            let mut params: Vec<&mut Param> = model.params_mut().into_iter().map(|(_, p)| p).collect();
            let info = opt.step(&mut params)?;
            sum_lc += losses.classification;
            sum_lr += losses.regression;
            last_lr = info.lr;
        }
        epochs_run = epoch;
        let nb = batches.len().max(1) as f64;
        let v = evaluate_losses(model, val)?;
        history.push(EpochRecord {
            stage: stage.number(),
            epoch,
            train_lc: sum_lc / nb,
            train_lr: sum_lr / nb,
            val_lc: v.classification,
            val_lr: v.regression,
            lr: last_lr,
        });
        log::info!(
            "stage {} epoch {epoch}: train L_c {:.5} L_r {:.5} | val L_c {:.5} L_r {:.5}",
            stage.number(),
            sum_lc / nb,
            sum_lr / nb,
            v.classification,
            v.regression
        );
        let verdict = stopper.observe(epoch, monitored(&v));
        if verdict.new_best {
            best_model.clone_from(model);
        }
        if verdict.stop {
            stopped_early = true;
            break;
        }
    }
    // The optimizer moments stay with the trained model; only parameter values
    // are rolled back to the best epoch.
    copy_values(&best_model, model);
    Ok(StageOutcome {
        history,
        best_epoch: stopper.best_epoch(),
        best_val: stopper.best(),
        epochs_run,
        stopped_early,
        optimizer: opt,
        rng: RngState::capture(&dropout_rng),
    })
}

fn copy_values(src: &DelayModel, dst: &mut DelayModel) {
    for ((_, s), (_, d)) in src.params().into_iter().zip(dst.params_mut()) {
        d.value.clone_from(&s.value);
    }
}

/// Result of the full two-stage protocol.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub stage1: StageOutcome,
    pub stage2: StageOutcome,
}

impl TrainingRun {
    pub fn history(&self) -> impl Iterator<Item = &EpochRecord> {
        self.stage1.history.iter().chain(&self.stage2.history)
    }
}

pub fn train_two_stage(
    model: &mut DelayModel,
    train: &EncodedSet,
    val: &EncodedSet,
    cfg: &TrainConfig,
) -> Result<TrainingRun> {
    let stage1 = train_stage1(model, train, val, cfg)?;
    let stage2 = train_stage2(model, train, val, cfg)?;
    Ok(TrainingRun { stage1, stage2 })
}

/// Writes the per-epoch history as CSV after `#` preamble lines.
pub fn write_history<'a>(
    records: impl IntoIterator<Item = &'a EpochRecord>,
    path: &Path,
    preamble: &[String],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    for line in preamble {
        writeln!(buf, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["stage", "epoch", "train_lc", "train_lr", "val_lc", "val_lr", "lr"])?;
        for r in records {
            w.write_record([
                r.stage.to_string(),
                r.epoch.to_string(),
                r.train_lc.to_string(),
                r.train_lr.to_string(),
                r.val_lc.to_string(),
                r.val_lr.to_string(),
                r.lr.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    crate::checkpoint::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureConfig, ParamGroup};
    use crate::numerics::seeded;
    use rand::Rng;

    fn tiny_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            n_blocks: 2,
            d_hidden: 16,
            dropout: 0.0,
            plr_frequencies: 4,
            d_num: 4,
            ..ArchitectureConfig::default()
        }
    }

    /// One numerical feature whose sign decides the label; delays grow with it.
    fn separable(n: usize, seed: u64) -> EncodedSet {
        let mut rng = seeded(seed);
        let mut set = EncodedSet {
            n,
            n_cat: 1,
            n_num: 1,
            cat: Vec::new(),
            num: Vec::new(),
            y: Vec::new(),
            delayed: Vec::new(),
        };
        for _ in 0..n {
            let x: f64 = rng.random_range(-1.0..1.0);
            let d = x > 0.3;
            set.cat.push(rng.random_range(0..3));
            set.num.push(x);
            set.delayed.push(d);
            set.y.push(if d { 1.0 + (10.0 * x).floor() } else { 0.0 });
        }
        set
    }

    #[test]
    fn early_stopping_rules() {
        let mut s = EarlyStopping::new(1, 1e-4);
        assert!(!s.observe(0, 1.0).stop);
        let v = s.observe(1, 0.5);
        assert!(v.new_best && !v.stop);
        let v = s.observe(2, 0.6);
        assert!(!v.new_best && v.stop);
        assert_eq!((s.best_epoch(), s.best()), (1, 0.5));

        // Sub-threshold improvements still become the restored best.
        let mut s = EarlyStopping::new(2, 0.1);
        s.observe(0, 1.0);
        assert!(s.observe(1, 0.95).new_best);
        assert!(s.observe(2, 0.94).stop);
        assert_eq!(s.best_epoch(), 2);
    }

    #[test]
    fn batches_cover_rows_and_drop_singletons() {
        let mut rng = seeded(0);
        let b = epoch_batches(11, 5, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [5, 5]);
        assert_eq!(steps_per_epoch(11, 5), 2);
        let b = epoch_batches(12, 5, &mut rng);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(steps_per_epoch(12, 5), 3);
    }

    #[test]
    fn separable_data_reaches_high_f1() {
        let train = separable(3000, 1);
        let val = separable(600, 2);
        let mut m = DelayModel::new(&tiny_arch(), &[3], 1, 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 128,
            max_epochs_stage1: 25,
            max_epochs_stage2: 2,
            base_lr: 3e-3,
            ..TrainConfig::default()
        };
        train_stage1(&mut m, &train, &val, &cfg).unwrap();
        let preds = m.predict(&val, 512).unwrap();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (p, &d) in preds.iter().zip(&val.delayed) {
            match (p.predicted_delayed, d) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
        assert!(f1 > 0.95, "f1 = {f1}");
    }

    #[test]
    fn stage_two_freezes_trunk_bitwise_and_restores_best() {
        let train = separable(400, 3);
        let val = separable(100, 4);
        let mut m = DelayModel::new(&tiny_arch(), &[3], 1, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            max_epochs_stage1: 3,
            max_epochs_stage2: 4,
            ..TrainConfig::default()
        };
        train_stage1(&mut m, &train, &val, &cfg).unwrap();
        let before = m.clone();
        let out = train_stage2(&mut m, &train, &val, &cfg).unwrap();
        for ((g, a), (_, b)) in before.params().into_iter().zip(m.params()) {
            if !g.is_regression_head() {
                let bits = |p: &Param| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b), "{}", a.name);
            }
        }
        assert!(m.params().iter().any(|(g, p)| *g == ParamGroup::DelayedHead
            && p.value != before.params().iter().find(|(_, q)| q.name == p.name).unwrap().1.value));
        let start = out.history[0].val_lr;
        let min = out.history.iter().map(|r| r.val_lr).fold(f64::INFINITY, f64::min);
        assert!(out.best_val <= start + cfg.min_delta);
        assert_eq!(out.best_val, min);
        assert_eq!(evaluate_losses(&m, &val).unwrap().regression, min);
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let train = separable(300, 5);
        let val = separable(80, 6);
        let cfg = TrainConfig {
            batch_size: 32,
            max_epochs_stage1: 3,
            max_epochs_stage2: 2,
            ..TrainConfig::default()
        };
        let arch = ArchitectureConfig {
            dropout: 0.2,
            ..tiny_arch()
        };
        let run = || {
            let mut m = DelayModel::new(&arch, &[3], 1, 7).unwrap();
            let r = train_two_stage(&mut m, &train, &val, &cfg).unwrap();
            (r.history().copied().collect::<Vec<_>>(), m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn config_and_data_errors() {
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        let mut m = DelayModel::new(&tiny_arch(), &[3], 1, 0).unwrap();
        let empty = separable(0, 0);
        let val = separable(10, 0);
        assert!(matches!(
            train_stage1(&mut m, &empty, &val, &TrainConfig::default()),
            Err(Error::Empty(_))
        ));
    }
}
