//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are the [`TrainConfig`] knobs plus the stream and grid keys listed in
//! [`STREAM_KEYS`] and [`HARNESS_KEYS`]. Unknown or repeated keys are rejected.

use std::path::{Path, PathBuf};

use ewc_lora::fisher::EstimatorKind;
use ewc_lora::regularize::Strategy;
use ewc_lora::tasks::{gen_gaussian_stream, load_csv_stream, GaussianStreamSpec, TaskStream};
use ewc_lora::trainer::TrainConfig;

use crate::CliError;

pub const STREAM_KEYS: [&str; 9] = [
    "num_tasks",
    "classes_per_task",
    "dim",
    "radius",
    "sigma",
    "n_train",
    "n_test",
    "pretrain_classes",
    "data_csv",
];

pub const HARNESS_KEYS: [&str; 6] = ["seeds", "lambda_grid", "gamma_grid", "strategies", "estimators", "tracked"];

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSource {
    Gaussian(GaussianStreamSpec),
    /// Labelled CSV split into `num_tasks` tasks.
    Csv { path: PathBuf, num_tasks: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub stream: StreamSource,
    pub seeds: Vec<u64>,
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub estimators: Vec<EstimatorKind>,
    /// Tasks followed by `diagnose`; `None` means the three oldest.
    pub tracked: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            stream: StreamSource::Gaussian(GaussianStreamSpec::default()),
            seeds: vec![0],
            lambda_grid: vec![0.0, 1e2, 1e4, 1e6, 1e8],
            gamma_grid: vec![0.0, 0.3, 0.5, 0.9, 1.0],
            strategies: vec![Strategy::None, Strategy::PrecomputedDataset, Strategy::SeparateAB, Strategy::DeltaW],
            estimators: vec![
                EstimatorKind::Empirical,
                EstimatorKind::Exact,
                EstimatorKind::ExactSubset(400),
                EstimatorKind::Sampled,
            ],
            tracked: None,
        }
    }
}

fn list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).ok_or_else(|| CliError::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    /// Parses config text. Relative `data_csv` paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut spec = GaussianStreamSpec::default();
        let mut csv: Option<PathBuf> = None;
        let mut seeds: Option<Vec<u64>> = None;
        let mut seen = std::collections::BTreeSet::new();

        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            let at = |e: CliError| CliError::Config(format!("line {}: {}", n + 1, e.message()));
            match key {
                "num_tasks" => spec.num_tasks = num(key, value).map_err(at)?,
                "classes_per_task" => spec.classes_per_task = num(key, value).map_err(at)?,
                "dim" => spec.dim = num(key, value).map_err(at)?,
                "radius" => spec.radius = num(key, value).map_err(at)?,
                "sigma" => spec.sigma = num(key, value).map_err(at)?,
                "n_train" => spec.n_train = num(key, value).map_err(at)?,
                "n_test" => spec.n_test = num(key, value).map_err(at)?,
                "pretrain_classes" => spec.pretrain_classes = num(key, value).map_err(at)?,
                "data_csv" => csv = Some(base_dir.join(value)),
                "seeds" => seeds = Some(list(key, value, |s| s.parse().ok()).map_err(at)?),
                "lambda_grid" => cfg.lambda_grid = list(key, value, |s| s.parse().ok()).map_err(at)?,
                "gamma_grid" => cfg.gamma_grid = list(key, value, |s| s.parse().ok()).map_err(at)?,
                "strategies" => cfg.strategies = list(key, value, |s| s.parse().ok()).map_err(at)?,
                "estimators" => cfg.estimators = list(key, value, |s| s.parse().ok()).map_err(at)?,
                "tracked" => cfg.tracked = Some(list(key, value, |s| s.parse().ok()).map_err(at)?),
                _ => cfg
                    .train
                    .set(key, value)
                    .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?,
            }
        }
        cfg.seeds = seeds.unwrap_or_else(|| vec![cfg.train.seed]);
        cfg.stream = match csv {
            Some(path) => StreamSource::Csv { path, num_tasks: spec.num_tasks },
            None => StreamSource::Gaussian(spec),
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("no seeds given".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for (name, grid) in [("lambda_grid", &self.lambda_grid), ("gamma_grid", &self.gamma_grid)] {
            for &v in grid.iter() {
                let probe = match name {
                    "lambda_grid" => TrainConfig { lambda: v, ..self.train.clone() },
                    _ => TrainConfig { gamma: v, ..self.train.clone() },
                };
                probe.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))?;
            }
        }
        if let StreamSource::Csv { path, .. } = &self.stream {
            if !path.is_file() {
                return Err(CliError::Config(format!("data_csv {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Training knobs for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// The stream for one seed; the Gaussian stream and the CSV split both follow the run seed.
    pub fn stream_for(&self, seed: u64) -> Result<TaskStream, CliError> {
        let stream = match &self.stream {
            StreamSource::Gaussian(spec) => gen_gaussian_stream(&GaussianStreamSpec { seed, ..spec.clone() }),
            StreamSource::Csv { path, num_tasks } => load_csv_stream(path, *num_tasks, seed),
        };
        stream.map_err(|e| CliError::Config(format!("stream: {e}")))
    }

    /// Tasks followed by `diagnose` for a stream of `num_tasks` tasks.
    pub fn tracked_for(&self, num_tasks: usize) -> Result<Vec<usize>, CliError> {
        match &self.tracked {
            Some(t) => {
                if let Some(bad) = t.iter().find(|&&i| i >= num_tasks) {
                    return Err(CliError::Config(format!("tracked task {bad} is not in the stream")));
                }
                Ok(t.clone())
            }
            None => Ok((0..num_tasks.min(3)).collect()),
        }
    }

    /// Every resolved key in config-file form; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        match &self.stream {
            StreamSource::Gaussian(s) => {
                push("num_tasks", s.num_tasks.to_string());
                push("classes_per_task", s.classes_per_task.to_string());
                push("dim", s.dim.to_string());
                push("radius", format!("{:?}", s.radius));
                push("sigma", format!("{:?}", s.sigma));
                push("n_train", s.n_train.to_string());
                push("n_test", s.n_test.to_string());
                push("pretrain_classes", s.pretrain_classes.to_string());
            }
            StreamSource::Csv { path, num_tasks } => {
                push("num_tasks", num_tasks.to_string());
                push("data_csv", path.display().to_string());
            }
        }
        for (k, v) in self.train.to_pairs() {
            push(k, v);
        }
        let join = |v: Vec<String>| v.join(",");
        push("seeds", join(self.seeds.iter().map(u64::to_string).collect()));
        push("lambda_grid", join(self.lambda_grid.iter().map(|v| format!("{v:?}")).collect()));
        push("gamma_grid", join(self.gamma_grid.iter().map(|v| format!("{v:?}")).collect()));
        push("strategies", join(self.strategies.iter().map(|s| s.to_string()).collect()));
        push("estimators", join(self.estimators.iter().map(|s| s.to_string()).collect()));
        if let Some(t) = &self.tracked {
            push("tracked", join(t.iter().map(usize::to_string).collect()));
        }
        out
    }
}
