//! Class-incremental task streams: the seeded Gaussian generator and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

/// Feature rows with one global class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Data(format!("{} rows but {} labels", x.rows(), y.len())));
        }
        if y.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Concatenation in argument order.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let xs: Vec<&Matrix> = parts.iter().map(|d| &d.x).collect();
        let x = Matrix::vstack(&xs)?;
        let y = parts.iter().flat_map(|d| d.y.iter().copied()).collect();
        Dataset::new(x, y)
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.y.iter().copied().collect()
    }

    /// Header `f0,...,f{d-1},label`, one sample per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.dim() {
            write!(s, "f{j},").unwrap();
        }
        s.push_str("label\n");
        for (i, &label) in self.y.iter().enumerate() {
            for v in self.x.row(i) {
                write!(s, "{v:?},").unwrap();
            }
            writeln!(s, "{label}").unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or(Error::Parse { line: 1, message: "missing header".into() })?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        if names.last() != Some(&"label") {
            return Err(Error::Parse { line: 1, message: "last column must be `label`".into() });
        }
        let dim = names.len() - 1;
        for (j, name) in names[..dim].iter().enumerate() {
            if *name != format!("f{j}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected column f{j}, found {name:?}"),
                });
            }
        }
        if dim == 0 {
            return Err(Error::Parse { line: 1, message: "no feature columns".into() });
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected {} fields, found {}", dim + 1, fields.len()),
                });
            }
            for f in &fields[..dim] {
                let v: f64 = f.parse().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("{f:?}: {e}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line: lineno, message: format!("non-finite {f}") });
                }
                data.push(v);
            }
            let label: usize = fields[dim].parse().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("label {:?}: {e}", fields[dim]),
            })?;
            labels.push(label);
        }
        let x = Matrix::from_vec(labels.len(), dim, data)?;
        Dataset::new(x, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub class_ids: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Disjoint-class data used to produce the pretrained base network.
    pub pretrain: Option<Task>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.tasks.iter().flat_map(|t| t.class_ids.iter().copied()).collect()
    }

    /// Checks pairwise class disjointness (pretrain included) and label hygiene.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Protocol("stream has no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for task in self.tasks.iter().chain(self.pretrain.iter()) {
            for &c in &task.class_ids {
                if !seen.insert(c) {
                    return Err(Error::Protocol(format!("class {c} appears in two tasks")));
                }
            }
            let own: BTreeSet<usize> = task.class_ids.iter().copied().collect();
            for split in [&task.train, &task.test] {
                if let Some(bad) = split.y.iter().find(|y| !own.contains(y)) {
                    return Err(Error::Protocol(format!(
                        "task {} holds label {bad} outside its classes",
                        task.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic Gaussian class-incremental stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub radius: f64,
    pub sigma: f64,
    /// Samples per class.
    pub n_train: usize,
    pub n_test: usize,
    /// Extra classes reserved for pretraining the base network (0 disables).
    pub pretrain_classes: usize,
    pub seed: u64,
}

impl Default for GaussianStreamSpec {
    /// The standard fixture: 5 tasks of 4 classes in 16 dimensions.
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 4,
            dim: 16,
            radius: 3.0,
            sigma: 1.0,
            n_train: 200,
            n_test: 100,
            pretrain_classes: 8,
            seed: 0,
        }
    }
}

/// Generates the stream. Class `c` has mean `radius * u_c` with `u_c` uniform
/// on the unit sphere; samples are `mean + sigma * N(0, I)`. Stream classes get
/// ids `0..num_tasks*classes_per_task` in task order and pretrain classes follow.
///
/// Within each split the samples are interleaved round-robin over the task's
/// classes, so sequential mini-batches see every class.
pub fn gen_gaussian_stream(spec: &GaussianStreamSpec) -> Result<TaskStream> {
    if spec.dim < 2 {
        return Err(Error::Parameter("dim must be at least 2".into()));
    }
    if spec.radius.is_nan() || spec.radius <= 0.0 || spec.sigma.is_nan() || spec.sigma <= 0.0 {
        return Err(Error::Parameter("radius and sigma must be positive".into()));
    }
    if spec.num_tasks == 0 || spec.classes_per_task == 0 || spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Parameter("task, class and sample counts must be positive".into()));
    }
    let root = RngState::new(spec.seed);
    let mut mean_rng = root.derive(1);
    let total = spec.num_tasks * spec.classes_per_task + spec.pretrain_classes;
    let means: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| mean_rng.normal()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| spec.radius * a / norm).collect()
        })
        .collect();

    let make_task = |id: usize, classes: Vec<usize>| -> Result<Task> {
        let mut rng = root.derive(100 + id as u64);
        let train = sample_split(&mut rng, &means, &classes, spec.n_train, spec.sigma)?;
        let test = sample_split(&mut rng, &means, &classes, spec.n_test, spec.sigma)?;
        Ok(Task { id, class_ids: classes, train, test })
    };

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let classes = (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        tasks.push(make_task(t, classes)?);
    }
    let pretrain = if spec.pretrain_classes > 0 {
        let first = spec.num_tasks * spec.classes_per_task;
        Some(make_task(spec.num_tasks, (first..total).collect())?)
    } else {
        None
    };
    let stream = TaskStream { tasks, pretrain };
    stream.validate()?;
    Ok(stream)
}

fn sample_split(
    rng: &mut RngState,
    means: &[Vec<f64>],
    classes: &[usize],
    per_class: usize,
    sigma: f64,
) -> Result<Dataset> {
    let dim = means[0].len();
    let mut data = Vec::with_capacity(per_class * classes.len() * dim);
    let mut labels = Vec::with_capacity(per_class * classes.len());
    for _ in 0..per_class {
        for &c in classes {
            data.extend(means[c].iter().map(|m| m + sigma * rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels)
}

/// Builds a stream from a labelled CSV file.
///
/// Distinct labels are sorted, shuffled with `seed`, and cut into `num_tasks`
/// contiguous groups (earlier groups take the remainder). Each class is split
/// 80/20 into train/test after a seeded shuffle of its rows; splits are then
/// interleaved round-robin over the task's classes.
pub fn load_csv_stream(path: &Path, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    let text = std::fs::read_to_string(path)?;
    let data = Dataset::from_csv(&text)?;
    stream_from_dataset(&data, num_tasks, seed)
}

pub fn stream_from_dataset(data: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::Parameter("num_tasks must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in data.y.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < num_tasks {
        return Err(Error::Protocol(format!(
            "{} distinct labels cannot fill {num_tasks} tasks",
            by_class.len()
        )));
    }
    let root = RngState::new(seed);
    let mut labels: Vec<usize> = by_class.keys().copied().collect();
    root.derive(1).shuffle(&mut labels);

    let base = labels.len() / num_tasks;
    let extra = labels.len() % num_tasks;
    let mut split_rng = root.derive(2);
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let size = base + usize::from(t < extra);
        let classes = labels[start..start + size].to_vec();
        start += size;
        let mut train_parts = Vec::new();
        let mut test_parts = Vec::new();
        for &c in &classes {
            let mut rows = by_class[&c].clone();
            split_rng.shuffle(&mut rows);
            let n_train = ((rows.len() as f64) * 0.8).floor().max(1.0) as usize;
            let test = rows.split_off(n_train.min(rows.len()));
            train_parts.push(rows);
            test_parts.push(test);
        }
        let train = interleave(&train_parts);
        let test = interleave(&test_parts);
        if test.is_empty() {
            return Err(Error::Data(format!("task {t} has no test samples")));
        }
        tasks.push(Task {
            id: t,
            class_ids: classes,
            train: data.subset(&train),
            test: data.subset(&test),
        });
    }
    let stream = TaskStream { tasks, pretrain: None };
    stream.validate()?;
    Ok(stream)
}

fn interleave(parts: &[Vec<usize>]) -> Vec<usize> {
    let longest = parts.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for k in 0..longest {
        for p in parts {
            if let Some(&i) = p.get(k) {
                out.push(i);
            }
        }
    }
    out
}
