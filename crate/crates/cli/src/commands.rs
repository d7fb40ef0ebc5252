//! One function per subcommand. Each validates its inputs before touching `out`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use ewc_lora::diagnostics::{drift_csv, track_fisher_drift_regimes, Regime};
use ewc_lora::fisher::SnapshotMeta;
use ewc_lora::io::write_atomic;
use ewc_lora::metrics::MetricsSummary;
use ewc_lora::trainer::{base_network, pretrain, run_continual_from, run_references, RunRecord, TrainConfig};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Parameters `sweep` can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    Lambda,
    Gamma,
    Estimator,
}

type Tweak = Box<dyn Fn(&TrainConfig) -> TrainConfig>;

pub const METRIC_COLUMNS: &str = "final_acc,avg,stability,plasticity,tradeoff";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn metric_cells(m: &MetricsSummary) -> String {
    [Some(m.final_acc), Some(m.avg), m.stability, m.plasticity, m.tradeoff].map(cell).join(",")
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// `out` itself for a single seed, `out/seed_N` otherwise.
fn seed_dir(out: &Path, seeds: &[u64], seed: u64) -> PathBuf {
    if seeds.len() == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed_{seed}"))
    }
}

fn summarize(rec: &RunRecord, refs: &[f64]) -> Result<MetricsSummary, CliError> {
    let m = MetricsSummary::compute(&rec.accuracy, Some(refs))?;
    if !m.avg.is_finite() {
        return Err(CliError::NonFinite("metrics".into()));
    }
    Ok(m)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    seed: u64,
    #[serde(flatten)]
    summary: &'a MetricsSummary,
    references: &'a [f64],
    wall_seconds: f64,
}

#[derive(Serialize)]
struct TaskLine<'a> {
    #[serde(flatten)]
    log: &'a ewc_lora::trainer::TaskLog,
    accuracy_row: Vec<f64>,
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let streams = cfg.seeds.iter().map(|&s| cfg.stream_for(s)).collect::<Result<Vec<_>, _>>()?;
    for (&seed, stream) in cfg.seeds.iter().zip(&streams) {
        let train = cfg.train_for(seed);
        let base = base_network(&train, stream)?;
        let refs = run_references(&train, stream, &base)?;
        let rec = run_continual_from(&train, stream, &base)?;
        let summary = summarize(&rec, &refs)?;

        let dir = seed_dir(out, &cfg.seeds, seed);
        write(&dir.join("accuracy_matrix.csv"), rec.accuracy.to_csv().as_bytes())?;
        let metrics = MetricsFile { seed, summary: &summary, references: &refs, wall_seconds: rec.wall_seconds };
        write(&dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
        let mut jsonl = String::new();
        for (t, log) in rec.tasks.iter().enumerate() {
            let row = (0..=t).map(|i| rec.accuracy.get(t, i).unwrap_or(f64::NAN)).collect();
            jsonl.push_str(&serde_json::to_string(&TaskLine { log, accuracy_row: row })?);
            jsonl.push('\n');
        }
        write(&dir.join("run.jsonl"), jsonl.as_bytes())?;
        let echo = ExperimentConfig { seeds: vec![seed], train: train.clone(), ..cfg.clone() };
        write(&dir.join("config.txt"), echo.to_text().as_bytes())?;
        rec.final_network.save_checkpoint(&dir.join("checkpoint"), seed)?;
        let mut gammas = Vec::new();
        for (t, f) in rec.fisher_snapshots.iter().enumerate() {
            gammas.push(train.gamma);
            let meta = SnapshotMeta { estimator: train.estimator, gamma_history: gammas.clone(), task_index: t };
            f.write_snapshot(&dir.join("fisher").join(format!("task_{t}")), &meta)?;
        }
    }
    Ok(())
}

pub fn cmd_compare_strategies(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    if cfg.strategies.is_empty() {
        return Err(CliError::Config("strategies is empty".into()));
    }
    let streams = cfg.seeds.iter().map(|&s| cfg.stream_for(s)).collect::<Result<Vec<_>, _>>()?;
    let mut csv = format!("strategy,seed,{METRIC_COLUMNS}\n");
    for (&seed, stream) in cfg.seeds.iter().zip(&streams) {
        let train = cfg.train_for(seed);
        let base = base_network(&train, stream)?;
        let refs = run_references(&train, stream, &base)?;
        for &strategy in &cfg.strategies {
            let rec = run_continual_from(&TrainConfig { strategy, ..train.clone() }, stream, &base)?;
            csv.push_str(&format!("{strategy},{seed},{}\n", metric_cells(&summarize(&rec, &refs)?)));
        }
    }
    write(&out.join("strategies.csv"), csv.as_bytes())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, out: &Path) -> Result<(), CliError> {
    let values: Vec<(String, Tweak)> = match param {
        SweepParam::Lambda => cfg
            .lambda_grid
            .iter()
            .map(|&v| (format!("{v:?}"), Box::new(move |c: &TrainConfig| TrainConfig { lambda: v, ..c.clone() }) as _))
            .collect(),
        SweepParam::Gamma => cfg
            .gamma_grid
            .iter()
            .map(|&v| (format!("{v:?}"), Box::new(move |c: &TrainConfig| TrainConfig { gamma: v, ..c.clone() }) as _))
            .collect(),
        SweepParam::Estimator => cfg
            .estimators
            .iter()
            .map(|&v| (v.to_string(), Box::new(move |c: &TrainConfig| TrainConfig { estimator: v, ..c.clone() }) as _))
            .collect(),
    };
    let name = match param {
        SweepParam::Lambda => "lambda",
        SweepParam::Gamma => "gamma",
        SweepParam::Estimator => "estimator",
    };
    if values.is_empty() {
        return Err(CliError::Config(format!("{name} grid is empty")));
    }
    let streams = cfg.seeds.iter().map(|&s| cfg.stream_for(s)).collect::<Result<Vec<_>, _>>()?;
    let mut csv = format!("param,value,seed,{METRIC_COLUMNS}\n");
    for (&seed, stream) in cfg.seeds.iter().zip(&streams) {
        let train = cfg.train_for(seed);
        let base = base_network(&train, stream)?;
        let refs = run_references(&train, stream, &base)?;
        for (label, apply) in &values {
            let rec = run_continual_from(&apply(&train), stream, &base)?;
            csv.push_str(&format!("{name},{label},{seed},{}\n", metric_cells(&summarize(&rec, &refs)?)));
        }
    }
    write(&out.join("sweep.csv"), csv.as_bytes())
}

pub fn cmd_diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let stream = cfg.stream_for(seed)?;
        let tracked = cfg.tracked_for(stream.num_tasks())?;
        jobs.push((seed, stream, tracked));
    }
    for (seed, stream, tracked) in jobs {
        let (_, rows) = track_fisher_drift_regimes(&cfg.train_for(seed), &stream, &tracked, &Regime::BOTH)?;
        if rows.iter().any(|r| !(r.norm_ratio.is_finite() && r.spearman.is_finite() && r.cosine.is_finite())) {
            return Err(CliError::NonFinite("drift metrics".into()));
        }
        write(&seed_dir(out, &cfg.seeds, seed).join("drift.csv"), drift_csv(&rows).as_bytes())?;
    }
    Ok(())
}

pub fn cmd_reference(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let streams = cfg.seeds.iter().map(|&s| cfg.stream_for(s)).collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("seed,task,reference_acc\n");
    for (&seed, stream) in cfg.seeds.iter().zip(&streams) {
        let train = cfg.train_for(seed);
        let base = base_network(&train, stream)?;
        for (t, r) in run_references(&train, stream, &base)?.into_iter().enumerate() {
            csv.push_str(&format!("{seed},{t},{r:?}\n"));
        }
    }
    write(&out.join("references.csv"), csv.as_bytes())
}

#[derive(Serialize)]
struct PretrainFile<'a> {
    seed: u64,
    epoch_losses: &'a [f64],
    test_accuracy: f64,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let stream = cfg.stream_for(seed)?;
        if stream.pretrain.is_none() {
            return Err(CliError::Config("the stream has no pretrain split (set pretrain_classes > 0)".into()));
        }
        jobs.push((seed, stream));
    }
    if cfg.train.pretrain_epochs == 0 {
        return Err(CliError::Config("pretrain_epochs is 0".into()));
    }
    for (seed, stream) in jobs {
        let task = stream.pretrain.as_ref().unwrap();
        let done = pretrain(&cfg.train_for(seed), task, &stream.all_classes())?;
        let dir = seed_dir(out, &cfg.seeds, seed);
        done.network.save_checkpoint(&dir.join("checkpoint"), seed)?;
        let file = PretrainFile { seed, epoch_losses: &done.epoch_losses, test_accuracy: done.test_accuracy };
        write(&dir.join("pretrain.json"), serde_json::to_string_pretty(&file)?.as_bytes())?;
    }
    Ok(())
}
