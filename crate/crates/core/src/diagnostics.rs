//! How well an old task's Fisher survives later training.
//!
//! After each task `t` the Fisher of every tracked task `i <= t` is
//! re-estimated on task `i`'s retained training data at the current network,
//! giving `F_t^(i)`. Its norm relative to the original `F_i^(i)` shows
//! inflation (> 1) or degradation (< 1). Rank agreement and direction are
//! measured against what a learner would actually use: the accumulated Fisher
//! when no old data is kept, or a Fisher pooled over all data seen so far when
//! it is.
//!
//! Tracking keeps old task data around on purpose; it is an analysis tool and
//! not part of the training loop.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fisher::{self, FisherDiag};
use crate::model::Network;
use crate::tasks::TaskStream;
use crate::tensor::RngState;
use crate::trainer::{base_network, fixed_fisher, ContinualLearner, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    RehearsalFree,
    RehearsalBased,
}

impl Regime {
    pub const BOTH: [Regime; 2] = [Regime::RehearsalFree, Regime::RehearsalBased];

    pub fn name(self) -> &'static str {
        match self {
            Regime::RehearsalFree => "rehearsal_free",
            Regime::RehearsalBased => "rehearsal_based",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::BOTH
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| Error::Parameter(format!("unknown regime {s:?}")))
    }
}

/// `‖f_now‖ / ‖f_orig‖` over the concatenated ΔW-space entries.
pub fn norm_ratio(f_now: &FisherDiag, f_orig: &FisherDiag) -> Result<f64> {
    let (a, b) = (f_now.flatten(), f_orig.flatten());
    if a.len() != b.len() {
        return Err(Error::Shape { op: "norm ratio", left: (a.len(), 1), right: (b.len(), 1) });
    }
    let denom = f_orig.norm();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("reference Fisher has zero norm".into()));
    }
    Ok(f_now.norm() / denom)
}

/// Ranks starting at 1, ties sharing the mean of the positions they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("constant vector has no rank correlation".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of the average-rank vectors.
pub fn spearman(v1: &[f64], v2: &[f64]) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::Shape { op: "spearman", left: (v1.len(), 1), right: (v2.len(), 1) });
    }
    if v1.len() < 2 {
        return Err(Error::UndefinedMetric("spearman needs at least two entries".into()));
    }
    pearson(&average_ranks(v1), &average_ranks(v2))
}

pub fn cosine_sim(v1: &[f64], v2: &[f64]) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::Shape { op: "cosine", left: (v1.len(), 1), right: (v2.len(), 1) });
    }
    let dot: f64 = v1.iter().zip(v2).map(|(a, b)| a * b).sum();
    let n1: f64 = v1.iter().map(|a| a * a).sum();
    let n2: f64 = v2.iter().map(|b| b * b).sum();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::UndefinedMetric("cosine of a zero vector".into()));
    }
    Ok((dot / (n1 * n2).sqrt()).clamp(-1.0, 1.0))
}

/// One `(t, i)` comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftRow {
    pub task_trained: usize,
    pub task_data: usize,
    pub regime: Regime,
    pub norm_ratio: f64,
    pub spearman: f64,
    pub cosine: f64,
}

/// Re-estimated Fishers, ordered by the task trained last.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherSnapshotLog {
    pub regime: Regime,
    /// `(t, i, F_t^(i))`.
    pub entries: Vec<(usize, usize, FisherDiag)>,
    /// The Fisher each step's rows were compared against, indexed by `t`.
    pub targets: Vec<FisherDiag>,
}

pub const DRIFT_HEADER: &str = "task_trained,task_data,regime,norm_ratio,spearman,cosine";

pub fn drift_csv(rows: &[DriftRow]) -> String {
    let mut out = String::from(DRIFT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{:?}\n",
            r.task_trained, r.task_data, r.regime, r.norm_ratio, r.spearman, r.cosine
        ));
    }
    out
}

fn compare(t: usize, i: usize, regime: Regime, now: &FisherDiag, orig: &FisherDiag, target: &FisherDiag) -> Result<DriftRow> {
    let (tv, ov) = (target.flatten(), orig.flatten());
    Ok(DriftRow {
        task_trained: t,
        task_data: i,
        regime,
        norm_ratio: norm_ratio(now, orig)?,
        spearman: spearman(&tv, &ov)?,
        cosine: cosine_sim(&tv, &ov)?,
    })
}

/// Trains through `stream` once and tracks the tasks in `tracked` under every
/// regime in `regimes`. Rows with `t == i` compare `F_i^(i)` with itself.
///
/// The accumulated Fisher follows the same decay recursion as training, fed
/// with the post-merge estimate of each new task, so it is available whatever
/// the training strategy.
pub fn track_fisher_drift_regimes(
    config: &TrainConfig,
    stream: &TaskStream,
    tracked: &[usize],
    regimes: &[Regime],
) -> Result<(Vec<FisherSnapshotLog>, Vec<DriftRow>)> {
    if let Some(&bad) = tracked.iter().find(|&&i| i >= stream.num_tasks()) {
        return Err(Error::Parameter(format!("tracked task {bad} is not in the stream")));
    }
    let base = base_network(config, stream)?;
    let fixed = fixed_fisher(config, stream, &base)?;
    let mut learner = ContinualLearner::new(config, base, fixed)?;
    let mut rng = RngState::new(config.seed).derive(15);
    let estimate = |net: &Network, j: usize, rng: &mut RngState| {
        let task = &stream.tasks[j];
        fisher::estimate(net, &task.train, config.estimator, Some(&task.class_ids), rng)
    };

    let mut logs: Vec<FisherSnapshotLog> =
        regimes.iter().map(|&regime| FisherSnapshotLog { regime, entries: Vec::new(), targets: Vec::new() }).collect();
    let mut rows = Vec::new();
    let mut originals: Vec<Option<FisherDiag>> = vec![None; stream.num_tasks()];
    let mut cumulative: Option<FisherDiag> = None;

    for (t, task) in stream.tasks.iter().enumerate() {
        learner.learn_task(task)?;
        let net = learner.network();
        let mut current: Vec<(usize, FisherDiag)> = Vec::with_capacity(t + 1);
        for j in 0..=t {
            current.push((j, estimate(net, j, &mut rng)?));
        }
        let f_t = current[t].1.clone();
        cumulative = Some(match cumulative.take() {
            Some(c) => c.accumulate(&f_t, config.gamma)?,
            None => f_t,
        });
        if tracked.contains(&t) {
            originals[t] = Some(current[t].1.clone());
        }
        for log in &mut logs {
            let target = match log.regime {
                Regime::RehearsalFree => cumulative.clone().unwrap(),
                Regime::RehearsalBased => {
                    let parts: Vec<(FisherDiag, usize)> =
                        current.iter().map(|(j, f)| (f.clone(), stream.tasks[*j].train.len())).collect();
                    FisherDiag::pooled(&parts)?
                }
            };
            for &i in tracked.iter().filter(|&&i| i <= t) {
                let orig = originals[i].as_ref().expect("tracked task recorded when trained");
                let now = &current[i].1;
                let target_here = if t == i { orig } else { &target };
                rows.push(compare(t, i, log.regime, now, orig, target_here)?);
                log.entries.push((t, i, now.clone()));
            }
            log.targets.push(target);
        }
    }
    rows.sort_by_key(|r| (r.regime != Regime::RehearsalFree, r.task_data, r.task_trained));
    Ok((logs, rows))
}

/// Single-regime form of [`track_fisher_drift_regimes`].
pub fn track_fisher_drift(
    config: &TrainConfig,
    stream: &TaskStream,
    tracked: &[usize],
    regime: Regime,
) -> Result<(FisherSnapshotLog, Vec<DriftRow>)> {
    let (mut logs, rows) = track_fisher_drift_regimes(config, stream, tracked, &[regime])?;
    Ok((logs.remove(0), rows))
}
