//! Optimization and the continual loop.
//!
//! Per task: train the adapter and head against cross-entropy plus the
//! strategy penalty, estimate the task Fisher at the trained point, fold it
//! into the accumulated Fisher, merge the adapter into the base and redraw it.
//! Between tasks the learner keeps exactly two things: the merged network and
//! the accumulated Fisher.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fisher::{self, EstimatorKind, FisherDiag};
use crate::metrics::AccuracyMatrix;
use crate::model::{Head, Network};
use crate::regularize::{network_penalty, Strategy};
use crate::tasks::{Dataset, Task, TaskStream};
use crate::tensor::{Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over each task's steps.
    Cosine,
}

/// Which head rows the training softmax ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossScope {
    /// Only the current task's classes.
    #[default]
    Task,
    /// Every class seen so far.
    Seen,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Parameter(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

named_enum!(LrSchedule, "lr schedule", LrSchedule::Constant => "constant", LrSchedule::Cosine => "cosine");
named_enum!(LossScope, "loss scope", LossScope::Task => "task", LossScope::Seen => "seen");

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Widths of the adapted layers after the input.
    pub hidden: Vec<usize>,
    pub rank: usize,
    /// `B` is drawn uniform on `±b_init_gain / sqrt(d_in)` at every reset.
    pub b_init_gain: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub head_lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub strategy: Strategy,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_schedule: LrSchedule,
    pub shuffle: bool,
    pub loss_scope: LossScope,
    /// Epochs of full-weight training on the stream's pretraining split; zero
    /// keeps the random base.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Keep a copy of the accumulated Fisher after every task in the record.
    pub keep_fisher_snapshots: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            rank: 4,
            b_init_gain: 1.0,
            epochs: 10,
            batch_size: 32,
            lr: 5e-3,
            head_lr: 5e-3,
            lambda: 1e7,
            gamma: 0.9,
            strategy: Strategy::DeltaW,
            estimator: EstimatorKind::Empirical,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_schedule: LrSchedule::Constant,
            shuffle: false,
            loss_scope: LossScope::Task,
            pretrain_epochs: 20,
            pretrain_lr: 5e-3,
            keep_fisher_snapshots: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parameter(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "hidden",
        "rank",
        "b_init_gain",
        "epochs",
        "batch_size",
        "lr",
        "head_lr",
        "lambda",
        "gamma",
        "strategy",
        "estimator",
        "seed",
        "beta1",
        "beta2",
        "epsilon",
        "lr_schedule",
        "shuffle",
        "loss_scope",
        "pretrain_epochs",
        "pretrain_lr",
        "keep_fisher_snapshots",
    ];

    /// Sets one knob from its text form. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "rank" => self.rank = parse_num(key, value)?,
            "b_init_gain" => self.b_init_gain = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "head_lr" => self.head_lr = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "estimator" => self.estimator = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "shuffle" => self.shuffle = parse_num(key, value)?,
            "loss_scope" => self.loss_scope = value.parse()?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, value)?,
            "keep_fisher_snapshots" => self.keep_fisher_snapshots = parse_num(key, value)?,
            other => return Err(Error::Parameter(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every knob in text form, in [`TrainConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let values = [
            hidden.join(","),
            self.rank.to_string(),
            format!("{:?}", self.b_init_gain),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            format!("{:?}", self.head_lr),
            format!("{:?}", self.lambda),
            format!("{:?}", self.gamma),
            self.strategy.to_string(),
            self.estimator.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.beta1),
            format!("{:?}", self.beta2),
            format!("{:?}", self.epsilon),
            self.lr_schedule.to_string(),
            self.shuffle.to_string(),
            self.loss_scope.to_string(),
            self.pretrain_epochs.to_string(),
            format!("{:?}", self.pretrain_lr),
            self.keep_fisher_snapshots.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be positive, got {:?}", self.hidden));
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        for (name, v) in [("lr", self.lr), ("head_lr", self.head_lr), ("epsilon", self.epsilon), ("b_init_gain", self.b_init_gain)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.pretrain_epochs > 0 && !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0) {
            return bad(format!("pretrain_lr must be positive, got {}", self.pretrain_lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }

    fn training_scope<'a>(&self, task: &'a Task) -> Option<&'a [usize]> {
        match self.loss_scope {
            LossScope::Task => Some(&task.class_ids),
            LossScope::Seen => None,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1, beta2, epsilon }
    }

    pub fn for_params(params: &[&mut Matrix], config: &TrainConfig) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes, config.beta1, config.beta2, config.epsilon)
    }
}

/// One Adam update. `lrs` holds one learning rate per tensor.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Matrix], grads: &[&Matrix], lrs: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
        return shape_err("adam tensors", (params.len(), grads.len()), (state.m.len(), lrs.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return shape_err("adam gradient", p.shape(), g.shape());
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].as_slice();
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lrs[k] * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn schedule_factor(schedule: LrSchedule, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
    }
}

fn batch_order(n: usize, shuffle: bool, rng: &mut RngState) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order
}

/// Trains adapters and head on `data` for `config.epochs`, with cross-entropy
/// over `classes` plus the `config.strategy` penalty against `fisher`.
/// Base weights are never written. Returns the mean total loss of each epoch.
pub fn train_task(
    net: &mut Network,
    data: &Dataset,
    fisher: Option<&FisherDiag>,
    classes: Option<&[usize]>,
    config: &TrainConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty task".into()));
    }
    let n_params = 2 * net.layers().len() + 2;
    let mut adam = AdamState::for_params(&net.adapter_params_mut(), config);
    let base_lrs: Vec<f64> =
        (0..n_params).map(|k| if k + 2 >= n_params { config.head_lr } else { config.lr }).collect();
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        let order = batch_order(data.len(), config.shuffle, rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk);
            let (_, cache) = net.forward(&batch.x)?;
            let (ce, grads) = net.backward(&cache, &batch.y, classes)?;
            let penalty = network_penalty(net, config.strategy, fisher, config.lambda)?;
            let mut flat = Vec::with_capacity(n_params);
            let mut pen_value = 0.0;
            for (g, p) in grads.layers.into_iter().zip(&penalty) {
                flat.push(g.d_a.add(&p.grad_a)?);
                flat.push(g.d_b.add(&p.grad_b)?);
                pen_value += p.value;
            }
            flat.push(grads.head.d_weight);
            flat.push(grads.head.d_bias);
            let loss = ce + pen_value;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            epoch_loss += loss * chunk.len() as f64;
            let factor = schedule_factor(config.lr_schedule, step, total);
            let lrs: Vec<f64> = base_lrs.iter().map(|lr| lr * factor).collect();
            let refs: Vec<&Matrix> = flat.iter().collect();
            adam_step(&mut adam, &mut net.adapter_params_mut(), &refs, &lrs)?;
            step += 1;
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    if !net.is_finite() {
        return Err(Error::NonFinite("network parameters".into()));
    }
    Ok(trace)
}

/// Fraction of `data` classified correctly with the softmax over `classes`.
pub fn accuracy(net: &Network, data: &Dataset, classes: Option<&[usize]>) -> Result<f64> {
    let pred = net.predict(&data.x, classes)?;
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Per-task training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub epoch_losses: Vec<f64>,
    /// Norm of the accumulated Fisher after this task (absent without one).
    pub fisher_norm: Option<f64>,
    pub seconds: f64,
}

/// What a learner holds between tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetainedState {
    pub networks: usize,
    pub fishers: usize,
    pub datasets: usize,
}

/// The continual learner. Task data is only borrowed for the duration of
/// [`ContinualLearner::learn_task`]; the struct has no place to keep it.
#[derive(Debug, Clone)]
pub struct ContinualLearner {
    config: TrainConfig,
    net: Network,
    fisher: Option<FisherDiag>,
    rng: RngState,
    tasks_learned: usize,
}

impl ContinualLearner {
    /// `fixed_fisher` is required by the precomputed strategies and ignored
    /// otherwise.
    pub fn new(config: &TrainConfig, base: Network, fixed_fisher: Option<FisherDiag>) -> Result<Self> {
        config.validate()?;
        let fisher = match config.strategy {
            Strategy::PrecomputedUniform | Strategy::PrecomputedDataset => Some(
                fixed_fisher.ok_or_else(|| Error::State(format!("{} needs a fixed Fisher", config.strategy)))?,
            ),
            _ => None,
        };
        Ok(Self { config: config.clone(), net: base, fisher, rng: RngState::new(config.seed).derive(12), tasks_learned: 0 })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn fisher(&self) -> Option<&FisherDiag> {
        self.fisher.as_ref()
    }

    pub fn tasks_learned(&self) -> usize {
        self.tasks_learned
    }

    pub fn retained_state(&self) -> RetainedState {
        RetainedState { networks: 1, fishers: usize::from(self.fisher.is_some()), datasets: 0 }
    }

    /// Expand head, train, estimate the task Fisher, accumulate, merge.
    pub fn learn_task(&mut self, task: &Task) -> Result<TaskLog> {
        let start = Instant::now();
        let config = &self.config;
        if self.net.layers().iter().any(|l| !l.a().is_all_zero()) {
            self.net.reset_adapters(&mut self.rng)?;
        }
        self.net.expand_head(&task.class_ids, &mut self.rng)?;
        let scope = config.training_scope(task);
        let trace = train_task(&mut self.net, &task.train, self.fisher.as_ref(), scope, config, &mut self.rng)?;
        if matches!(config.strategy, Strategy::DeltaW | Strategy::SeparateAB) {
            let f_t = if config.strategy == Strategy::SeparateAB {
                fisher::estimate_factor_space(&self.net, &task.train, config.estimator, scope, &mut self.rng)?
            } else {
                fisher::estimate(&self.net, &task.train, config.estimator, scope, &mut self.rng)?
            };
            self.fisher = Some(match self.fisher.take() {
                Some(cum) => cum.accumulate(&f_t, config.gamma)?,
                None => f_t,
            });
        }
        self.net.merge_and_reset(&mut self.rng)?;
        if !self.net.is_finite() {
            return Err(Error::NonFinite("merged weights".into()));
        }
        self.tasks_learned += 1;
        Ok(TaskLog {
            task: task.id,
            epoch_losses: trace,
            fisher_norm: self.fisher.as_ref().map(FisherDiag::norm),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Accuracy on each task's test split over every class seen so far.
    pub fn evaluate(&self, tasks: &[Task]) -> Result<Vec<f64>> {
        tasks.iter().map(|t| accuracy(&self.net, &t.test, None)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub accuracy: AccuracyMatrix,
    pub tasks: Vec<TaskLog>,
    /// Accumulated Fisher after each task, when requested.
    pub fisher_snapshots: Vec<FisherDiag>,
    /// The merged network after the last task.
    pub final_network: Network,
    pub wall_seconds: f64,
}

/// Result of [`pretrain`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    /// Base weights with fresh adapters and an empty head.
    pub network: Network,
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
}

/// Trains every base weight directly on a pretraining task, then drops its head.
pub fn pretrain(config: &TrainConfig, task: &Task, stream_classes: &[usize]) -> Result<Pretrained> {
    config.validate()?;
    if let Some(c) = task.class_ids.iter().find(|c| stream_classes.contains(c)) {
        return Err(Error::Protocol(format!("pretraining class {c} also appears in the stream")));
    }
    if task.train.is_empty() {
        return Err(Error::Data("empty pretraining set".into()));
    }
    let mut rng = RngState::new(config.seed).derive(11);
    let mut dims = vec![task.train.dim()];
    dims.extend(&config.hidden);
    let mut net = Network::new(&dims, config.rank, &mut rng, config.b_init_gain)?;
    net.expand_head(&task.class_ids, &mut rng)?;
    let n_params = net.layers().len() + 2;
    let mut adam = AdamState::for_params(&net.base_params_mut(), config);
    let lrs = vec![config.pretrain_lr; n_params];
    let mut trace = Vec::new();
    for _ in 0..config.pretrain_epochs {
        let order = batch_order(task.train.len(), config.shuffle, &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = task.train.subset(chunk);
            let (_, cache) = net.forward(&batch.x)?;
            let (loss, grads) = net.backward(&cache, &batch.y, None)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("pretraining loss".into()));
            }
            total += loss * chunk.len() as f64;
            // W enters every layer exactly like ΔW, so dW = dΔW
            let mut flat: Vec<Matrix> = grads.layers.into_iter().map(|g| g.d_delta_w).collect();
            flat.push(grads.head.d_weight);
            flat.push(grads.head.d_bias);
            let refs: Vec<&Matrix> = flat.iter().collect();
            adam_step(&mut adam, &mut net.base_params_mut(), &refs, &lrs)?;
        }
        trace.push(total / task.train.len() as f64);
    }
    let test_accuracy = accuracy(&net, &task.test, None)?;
    let mut network = net.with_head(Head::empty(net.feature_dim()))?;
    network.reset_adapters(&mut rng)?;
    if !network.is_finite() {
        return Err(Error::NonFinite("pretrained weights".into()));
    }
    Ok(Pretrained { network, epoch_losses: trace, test_accuracy })
}

/// The base network `W_0` for a stream: pretrained when the stream carries a
/// pretraining split and `pretrain_epochs > 0`, random otherwise.
pub fn base_network(config: &TrainConfig, stream: &TaskStream) -> Result<Network> {
    config.validate()?;
    match (&stream.pretrain, config.pretrain_epochs) {
        (Some(p), e) if e > 0 => Ok(pretrain(config, p, &stream.all_classes())?.network),
        _ => {
            let mut rng = RngState::new(config.seed).derive(10);
            let mut dims = vec![stream.dim()];
            dims.extend(&config.hidden);
            Network::new(&dims, config.rank, &mut rng, config.b_init_gain)
        }
    }
}

/// Fixed Fisher for the precomputed strategies; `None` for the others.
///
/// The dataset variant needs class probabilities at `W_0`, so it first fits a
/// probe head over every stream class on the union of the training splits
/// with the base frozen, then estimates once on that union.
pub fn fixed_fisher(config: &TrainConfig, stream: &TaskStream, base: &Network) -> Result<Option<FisherDiag>> {
    match config.strategy {
        Strategy::PrecomputedUniform => Ok(Some(FisherDiag::uniform(base))),
        Strategy::PrecomputedDataset => {
            let mut rng = RngState::new(config.seed).derive(14);
            let mut probe = base.clone();
            probe.expand_head(&stream.all_classes(), &mut rng)?;
            let parts: Vec<&Dataset> = stream.tasks.iter().map(|t| &t.train).collect();
            let all = Dataset::concat(&parts)?;
            let probe_config = TrainConfig { strategy: Strategy::None, ..config.clone() };
            train_task(&mut probe, &all, None, None, &probe_config, &mut rng)?;
            // drop the probe's adapter so the estimate is taken at W_0
            probe.reset_adapters(&mut rng)?;
            Ok(Some(fisher::precompute_dataset_fisher(&probe, &parts, config.estimator, &mut rng)?))
        }
        _ => Ok(None),
    }
}

/// Runs the whole stream from `base`.
pub fn run_continual_from(config: &TrainConfig, stream: &TaskStream, base: &Network) -> Result<RunRecord> {
    config.validate()?;
    if stream.tasks.is_empty() {
        return Err(Error::Data("stream has no tasks".into()));
    }
    stream.validate()?;
    let start = Instant::now();
    let fixed = fixed_fisher(config, stream, base)?;
    let mut learner = ContinualLearner::new(config, base.clone(), fixed)?;
    let mut matrix = AccuracyMatrix::new(stream.num_tasks());
    let mut logs = Vec::with_capacity(stream.num_tasks());
    let mut snapshots = Vec::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        logs.push(learner.learn_task(task)?);
        if config.keep_fisher_snapshots {
            if let Some(f) = learner.fisher() {
                snapshots.push(f.clone());
            }
        }
        for (i, acc) in learner.evaluate(&stream.tasks[..=t])?.into_iter().enumerate() {
            matrix.set(t, i, acc)?;
        }
    }
    Ok(RunRecord {
        config: config.clone(),
        accuracy: matrix,
        tasks: logs,
        fisher_snapshots: snapshots,
        final_network: learner.network().clone(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_continual(config: &TrainConfig, stream: &TaskStream) -> Result<RunRecord> {
    let base = base_network(config, stream)?;
    run_continual_from(config, stream, &base)
}

/// Single-task LoRA from `base` without any penalty; test accuracy over the
/// task's own classes.
pub fn run_reference(config: &TrainConfig, base: &Network, task: &Task) -> Result<f64> {
    config.validate()?;
    let mut rng = RngState::new(config.seed).derive(1000 + task.id as u64);
    let mut net = base.with_head(Head::empty(base.feature_dim()))?;
    net.reset_adapters(&mut rng)?;
    net.expand_head(&task.class_ids, &mut rng)?;
    let plain = TrainConfig { strategy: Strategy::None, ..config.clone() };
    train_task(&mut net, &task.train, None, Some(&task.class_ids), &plain, &mut rng)?;
    accuracy(&net, &task.test, Some(&task.class_ids))
}

/// Reference accuracies for every task of the stream.
pub fn run_references(config: &TrainConfig, stream: &TaskStream, base: &Network) -> Result<Vec<f64>> {
    stream.tasks.iter().map(|t| run_reference(config, base, t)).collect()
}
