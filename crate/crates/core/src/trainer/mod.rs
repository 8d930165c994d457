//! Standard training, outlier fine-tuning, grid tuning and evaluation.

mod checkpoint;
mod evaluate;
mod tune;

use std::collections::HashSet;
use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{stack_inputs, ClassIndex, ExampleSet};
use crate::error::{Error, Result};
use crate::mixing::MixRecord;
use crate::model::{Classifier, InputShape};
use crate::objectives::{self, IdBatch, LossValue, ObjectiveConfig, ObjectiveKind, StepInputs};
use crate::splits::{DataPartition, OutlierPool};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use evaluate::{evaluate_environment, EvalData, Evaluation};
pub use tune::{select_config, tune_hyperparams, TuningCandidate, TuningOutcome, TuningPools};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Standard,
    Finetune,
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub schedule: Schedule,
    pub id_batch_size: usize,
    /// Outliers entering the regularizer per step. Hard mining draws
    /// `mining_pool_factor` times as many candidates.
    pub outlier_batch_size: usize,
    pub objective: ObjectiveConfig,
    pub seed: u64,
    #[serde(default)]
    pub pretrained_init: bool,
}

impl TrainConfig {
    pub const ID_BATCH_SIZE: usize = 32;

    pub fn standard(seed: u64) -> Self {
        Self {
            phase: Phase::Standard,
            epochs: 90,
            optimizer: SgdConfig::default(),
            schedule: Schedule::Cosine,
            id_batch_size: Self::ID_BATCH_SIZE,
            outlier_batch_size: 0,
            objective: ObjectiveConfig::Standard,
            seed,
            pretrained_init: false,
        }
    }

    pub fn finetune(objective: ObjectiveConfig, seed: u64) -> Self {
        let outlier_batch_size = Self::outlier_batch_size_for(&objective, Self::ID_BATCH_SIZE);
        Self {
            phase: Phase::Finetune,
            epochs: 10,
            outlier_batch_size,
            objective,
            ..Self::standard(seed)
        }
    }

    /// Twice the ID batch for the OE family, equal to it for the
    /// outlier-mixing kinds, zero when no outliers are used.
    pub fn outlier_batch_size_for(objective: &ObjectiveConfig, id_batch_size: usize) -> usize {
        match objective.kind() {
            ObjectiveKind::Oe | ObjectiveKind::OeHardMining | ObjectiveKind::EnergyOe => 2 * id_batch_size,
            ObjectiveKind::Mixoe | ObjectiveKind::MixPlusOe => id_batch_size,
            ObjectiveKind::Standard | ObjectiveKind::Mix => 0,
        }
    }

    /// Replaces the objective, keeping the batch-size convention intact.
    pub fn with_objective(&self, objective: ObjectiveConfig) -> Self {
        Self {
            outlier_batch_size: Self::outlier_batch_size_for(&objective, self.id_batch_size),
            objective,
            ..self.clone()
        }
    }

    /// Outlier rows drawn from the pool per step.
    pub fn outlier_draw_size(&self) -> usize {
        match self.objective {
            ObjectiveConfig::OeHardMining { mining_pool_factor, .. } => self.outlier_batch_size * mining_pool_factor,
            _ => self.outlier_batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid_arg("epochs must be positive"));
        }
        if self.id_batch_size == 0 {
            return Err(Error::invalid_arg("id_batch_size must be positive"));
        }
        let opt = &self.optimizer;
        if !(opt.lr > 0.0 && opt.lr.is_finite()) {
            return Err(Error::invalid_arg(format!(
                "learning rate must be positive, got {}",
                opt.lr
            )));
        }
        if !(0.0..1.0).contains(&opt.momentum) {
            return Err(Error::invalid_arg(format!(
                "momentum must lie in [0, 1), got {}",
                opt.momentum
            )));
        }
        if !(opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
            return Err(Error::invalid_arg("weight_decay must be non-negative"));
        }
        self.objective.validate()?;
        if self.phase == Phase::Standard && self.objective != ObjectiveConfig::Standard {
            return Err(Error::invalid_arg(format!(
                "the standard phase trains with cross-entropy only, not {}",
                self.objective.label()
            )));
        }
        let expected = Self::outlier_batch_size_for(&self.objective, self.id_batch_size);
        if self.outlier_batch_size != expected {
            return Err(Error::invalid_arg(format!(
                "{} needs an outlier batch of {expected} for an ID batch of {}, got {}",
                self.objective.label(),
                self.id_batch_size,
                self.outlier_batch_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// `0.5·lr0·(1 + cos(π·t/T))`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, num_params: usize) -> Self {
        Self {
            config,
            velocity: vec![0.0; num_params],
        }
    }

    /// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub loss: f64,
    pub id_term: f64,
    pub reg_term: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<LossValue>,
    pub steps_per_epoch: usize,
    /// Learning rate used by the last step.
    pub final_lr: f64,
    pub mix_log: Vec<MixRecord>,
    /// Outlier rows handed to the objective, counting repeats.
    pub outliers_drawn: usize,
    pub distinct_outliers: usize,
}

impl TrainHistory {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }
}

/// Inputs and label indices of one ID collection.
pub(crate) struct Prepared {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

pub(crate) fn prepare(set: &ExampleSet, index: &ClassIndex, dim: usize) -> Result<Prepared> {
    let examples = set.examples();
    let refs: Vec<_> = examples.iter().collect();
    Ok(Prepared {
        inputs: stack_inputs(examples, dim)?,
        labels: index.labels(&refs)?,
    })
}

pub fn predict<M: Classifier>(model: &M, inputs: &Array2<f64>) -> Vec<usize> {
    model
        .forward(inputs)
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

fn accuracy_on<M: Classifier>(model: &M, data: &Prepared) -> Option<f64> {
    if data.labels.is_empty() {
        return None;
    }
    let hits = predict(model, &data.inputs)
        .iter()
        .zip(&data.labels)
        .filter(|(p, t)| p == t)
        .count();
    Some(hits as f64 / data.labels.len() as f64)
}

/// Cycles through an outlier pool, reshuffling independently on every pass.
pub struct OutlierStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    seen: HashSet<usize>,
    drawn: usize,
}

impl OutlierStream {
    pub fn new(pool_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut order: Vec<usize> = (0..pool_len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
            seen: HashSet::new(),
            drawn: 0,
        }
    }

    /// Next `n` pool positions. `n` must not exceed the pool size.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        assert!(n <= self.order.len(), "outlier batch larger than pool");
        if self.cursor + n > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + n].to_vec();
        self.cursor += n;
        batch
    }

    /// Records which of the drawn rows the objective actually used.
    fn consume(&mut self, batch: &[usize], used: &[usize]) {
        self.drawn += used.len();
        self.seen.extend(used.iter().map(|&i| batch[i]));
    }

    pub fn distinct(&self) -> usize {
        self.seen.len()
    }

    pub fn drawn(&self) -> usize {
        self.drawn
    }
}

struct Outliers {
    inputs: Array2<f64>,
    stream: OutlierStream,
    draw: usize,
}

fn run_loop<M: Classifier>(
    model: &mut M,
    train: &Prepared,
    validation: &Prepared,
    shape: InputShape,
    mut outliers: Option<Outliers>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let n = train.labels.len();
    let batch = config.id_batch_size;
    if n < batch {
        return Err(Error::invalid_arg(format!(
            "{n} training examples cannot fill one batch of {batch}"
        )));
    }
    let steps_per_epoch = n / batch;
    let total_steps = steps_per_epoch * config.epochs;

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut mix_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mix_rng.set_stream(3);

    let mut sgd = Sgd::new(config.optimizer, model.num_params());
    let mut params = model.params();
    let mut history = TrainHistory {
        steps_per_epoch,
        ..TrainHistory::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut lr = config.optimizer.lr;

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 3];
        let epoch_lr = cosine_lr(config.optimizer.lr, epoch * steps_per_epoch, total_steps);
        for s in 0..steps_per_epoch {
            let t = epoch * steps_per_epoch + s;
            lr = cosine_lr(config.optimizer.lr, t, total_steps);
            let rows = &order[s * batch..(s + 1) * batch];
            let id = IdBatch::new(
                train.inputs.select(Axis(0), rows),
                rows.iter().map(|&r| train.labels[r]).collect(),
            )?;
            let drawn = outliers.as_mut().map(|o| {
                let positions = o.stream.next_batch(o.draw);
                let x = o.inputs.select(Axis(0), &positions);
                (positions, x)
            });
            let step_inputs = StepInputs {
                id: &id,
                outliers: drawn.as_ref().map(|(_, x)| x),
                shape,
                forced_lambda: None,
            };
            let out = objectives::compute(&config.objective, model, &step_inputs, &mut mix_rng, true)?;
            let grad = out.grad.expect("gradient requested");
            if !out.value.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step: s,
                    loss: out.value.total,
                });
            }
            if let (Some(o), Some((positions, _))) = (outliers.as_mut(), drawn.as_ref()) {
                o.stream.consume(positions, &out.used_outliers);
            }
            if let Some(record) = out.mix {
                history.mix_log.push(record);
            }
            sgd.step(&mut params, &grad, lr);
            model.set_params(&params)?;
            sums[0] += out.value.total;
            sums[1] += out.value.id_term;
            sums[2] += out.value.reg_term;
            history.steps.push(out.value);
        }
        let k = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            loss: sums[0] / k,
            id_term: sums[1] / k,
            reg_term: sums[2] / k,
            val_accuracy: accuracy_on(model, validation),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} (id {:.5}, reg {:.5}), val acc {:?}",
            config.objective.label(),
            record.loss,
            record.id_term,
            record.reg_term,
            record.val_accuracy
        );
        history.epochs.push(record);
    }
    history.final_lr = lr;
    if let Some(o) = &outliers {
        history.outliers_drawn = o.stream.drawn();
        history.distinct_outliers = o.stream.distinct();
    }
    Ok(history)
}

fn prepare_partition<M: Classifier>(model: &M, partition: &DataPartition) -> Result<(Prepared, Prepared)> {
    let index = ClassIndex::new(&partition.id_classes);
    if index.len() != model.num_classes() {
        return Err(Error::invalid_arg(format!(
            "model has {} outputs for {} ID classes",
            model.num_classes(),
            index.len()
        )));
    }
    if partition.shape.dim() != model.input_dim() {
        return Err(Error::invalid_arg(format!(
            "model expects {} input values, data has {}",
            model.input_dim(),
            partition.shape.dim()
        )));
    }
    let dim = model.input_dim();
    Ok((
        prepare(&partition.train, &index, dim)?,
        prepare(&partition.validation, &index, dim)?,
    ))
}

/// Cross-entropy training on the ID training split. The model's current
/// parameters are the initialization.
pub fn train_standard<M: Classifier>(
    model: &mut M,
    partition: &DataPartition,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    if config.phase != Phase::Standard {
        return Err(Error::invalid_arg("train_standard needs a standard-phase config"));
    }
    config.validate()?;
    let (train, validation) = prepare_partition(model, partition)?;
    let history = run_loop(model, &train, &validation, partition.shape, None, config)?;
    Ok((Checkpoint::capture(model, Phase::Standard, config), history))
}

/// Fine-tunes from a standard checkpoint with the configured objective.
pub fn finetune<M: Classifier>(
    model: &mut M,
    base: &Checkpoint,
    partition: &DataPartition,
    pool: &OutlierPool,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    if config.phase != Phase::Finetune {
        return Err(Error::invalid_arg("finetune needs a finetune-phase config"));
    }
    config.validate()?;
    if base.phase != Phase::Standard {
        return Err(Error::invalid_arg(
            "fine-tuning starts from a completed standard-phase checkpoint",
        ));
    }
    base.restore(model)?;
    let (train, validation) = prepare_partition(model, partition)?;

    let outliers = if config.objective.kind().uses_outliers() {
        let draw = config.outlier_draw_size();
        if pool.len() < draw {
            return Err(Error::invalid_arg(format!(
                "outlier pool of {} cannot fill one batch of {draw}",
                pool.len()
            )));
        }
        Some(Outliers {
            inputs: stack_inputs(&pool.examples, model.input_dim())?,
            stream: OutlierStream::new(pool.len(), config.seed),
            draw,
        })
    } else {
        None
    };
    let history = run_loop(model, &train, &validation, partition.shape, outliers, config)?;
    Ok((Checkpoint::capture(model, Phase::Finetune, config), history))
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::model::param_hash;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.001, 0, 100), 0.001);
        assert_eq!(cosine_lr(0.001, 50, 100), 0.0005);
        assert!(cosine_lr(0.001, 100, 100).abs() < 1e-5 * 0.001);
        assert!(cosine_lr(0.001, 99, 100) < 1e-5 * 0.001 * 100.0);
    }

    #[test]
    fn batch_size_conventions() {
        let oe = TrainConfig::finetune(ObjectiveConfig::Oe { beta: 1.0 }, 0);
        assert_eq!(oe.outlier_batch_size, 64);
        let mixoe = TrainConfig::finetune(
            ObjectiveConfig::Mixoe {
                alpha: 1.0,
                beta: 5.0,
                mode: crate::mixing::MixMode::Cut,
            },
            0,
        );
        assert_eq!(mixoe.outlier_batch_size, 32);
        assert_eq!(TrainConfig::standard(0).epochs, 90);
        assert_eq!(oe.epochs, 10);
        let mut bad = oe.clone();
        bad.outlier_batch_size = 32;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::standard(0);
        bad.objective = ObjectiveConfig::Oe { beta: 1.0 };
        assert!(bad.validate().is_err());
        let hm = TrainConfig::finetune(
            ObjectiveConfig::OeHardMining {
                beta: 1.0,
                mining_pool_factor: 4,
            },
            0,
        );
        assert_eq!((hm.outlier_batch_size, hm.outlier_draw_size()), (64, 256));
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut sgd = Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 0.5,
                weight_decay: 0.1,
            },
            1,
        );
        let mut p = [1.0];
        sgd.step(&mut p, &[2.0], 0.1);
        // v = 2 + 0.1 = 2.1, p = 1 - 0.21
        assert!((p[0] - 0.79).abs() < 1e-15);
        sgd.step(&mut p, &[0.0], 0.1);
        // v = 1.05 + 0.079, p = 0.79 - 0.1129
        assert!((p[0] - 0.6771).abs() < 1e-12);
    }

    #[test]
    fn standard_training_learns_separable_blobs() {
        let ds = blobs(4, 40, 1);
        let (_, part) = environment(&ds, 0);
        let mut model = mlp(4, 0);
        let cfg = quick(TrainConfig::standard(5), 30, 0.05);
        let (ckpt, hist) = train_standard(&mut model, &part, &cfg).unwrap();
        assert!(hist.final_val_accuracy().unwrap() >= 0.95);
        assert_eq!(hist.epochs[0].lr, 0.05);
        assert!(hist.final_lr < 1e-5 * 0.05 * 10.0);
        assert_eq!(ckpt.phase, Phase::Standard);
        assert_eq!(part.test.reads(), 0);

        let mut again = mlp(4, 0);
        let (_, hist2) = train_standard(&mut again, &part, &cfg).unwrap();
        assert_eq!(hist, hist2);
        assert_eq!(param_hash(&model), param_hash(&again));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = blobs(3, 20, 2);
        let (_, part) = environment(&ds, 0);
        let mut model = mlp(3, 0);
        let mut cfg = quick(TrainConfig::standard(0), 20, 1e200);
        cfg.optimizer.momentum = 0.0;
        assert!(matches!(
            train_standard(&mut model, &part, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn oe_with_zero_beta_continues_standard_training() {
        let ds = blobs(3, 30, 3);
        let (_, part) = environment(&ds, 0);
        let mut model = mlp(3, 1);
        let (base, _) = train_standard(&mut model, &part, &quick(TrainConfig::standard(0), 3, 0.05)).unwrap();
        let outliers = pool(100, 0);

        let plain = quick(TrainConfig::finetune(ObjectiveConfig::Standard, 9), 4, 0.01);
        let mut a = mlp(3, 7);
        let (_, ha) = finetune(&mut a, &base, &part, &outliers, &plain).unwrap();
        let oe0 = plain.with_objective(ObjectiveConfig::Oe { beta: 0.0 });
        let mut b = mlp(3, 8);
        let (_, hb) = finetune(&mut b, &base, &part, &outliers, &oe0).unwrap();
        assert_eq!(ha.steps.len(), hb.steps.len());
        for (x, y) in ha.steps.iter().zip(&hb.steps) {
            assert!((x.total - y.total).abs() <= 1e-6);
            assert!((x.id_term - y.id_term).abs() <= 1e-6);
        }
    }

    #[test]
    fn outlier_consumption_is_bounded() {
        let ds = blobs(3, 30, 4);
        let (_, part) = environment(&ds, 0);
        let mut model = mlp(3, 1);
        let (base, _) = train_standard(&mut model, &part, &quick(TrainConfig::standard(0), 1, 0.05)).unwrap();
        let outliers = pool(50, 1);
        let cfg = quick(TrainConfig::finetune(ObjectiveConfig::Oe { beta: 1.0 }, 2), 3, 0.01);
        let (_, h) = finetune(&mut model, &base, &part, &outliers, &cfg).unwrap();
        let bound = cfg.epochs * h.steps_per_epoch * cfg.outlier_batch_size;
        assert_eq!(h.outliers_drawn, bound);
        assert!(h.distinct_outliers <= bound.min(outliers.len()));
        assert_eq!(h.distinct_outliers, outliers.len());
        assert_eq!(part.test.reads(), 0);
    }

    #[test]
    fn finetune_rejects_small_pool_and_unfinished_base() {
        let ds = blobs(3, 30, 5);
        let (_, part) = environment(&ds, 0);
        let mut model = mlp(3, 1);
        let (base, _) = train_standard(&mut model, &part, &quick(TrainConfig::standard(0), 1, 0.05)).unwrap();
        let cfg = quick(TrainConfig::finetune(ObjectiveConfig::Oe { beta: 1.0 }, 2), 1, 0.01);
        assert!(matches!(
            finetune(&mut model, &base, &part, &pool(15, 0), &cfg),
            Err(Error::InvalidArgument(_))
        ));
        let (tuned, _) = finetune(&mut model, &base, &part, &pool(16, 0), &cfg).unwrap();
        assert!(finetune(&mut model, &tuned, &part, &pool(16, 0), &cfg).is_err());
    }

    #[test]
    fn outlier_stream_reshuffles_each_pass() {
        let mut s = OutlierStream::new(10, 0);
        let first: Vec<usize> = (0..2).flat_map(|_| s.next_batch(5)).collect();
        let second: Vec<usize> = (0..2).flat_map(|_| s.next_batch(5)).collect();
        let mut a = first.clone();
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        assert_ne!(first, second);
    }
}
