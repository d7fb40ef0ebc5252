//! Accuracy-matrix aggregates: anytime average, stability, plasticity and
//! their harmonic-mean trade-off.
//!
//! `A[t][i]` is the accuracy on task `i` after training through task `t`,
//! defined for `i <= t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self { rows: (0..num_tasks).map(|t| vec![None; t + 1]).collect() }
    }

    /// Builds a full lower triangle; row `t` must hold `t + 1` entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Data(format!("row {t} has {} entries, expected {}", row.len(), t + 1)));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(t, i, v)?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, t: usize, i: usize, value: f64) -> Result<()> {
        if t >= self.rows.len() || i > t {
            return Err(Error::Parameter(format!("entry ({t}, {i}) outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Parameter(format!("accuracy {value} outside [0, 1]")));
        }
        self.rows[t][i] = Some(value);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied().flatten()
    }

    fn require(&self, t: usize, i: usize) -> Result<f64> {
        self.get(t, i).ok_or_else(|| Error::State(format!("accuracy ({t}, {i}) not populated")))
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    pub fn diagonal(&self) -> Result<Vec<f64>> {
        (0..self.num_tasks()).map(|i| self.require(i, i)).collect()
    }

    /// Square CSV, one line per `t`; cells above the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let n = self.num_tasks();
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = (0..n)
                .map(|i| row.get(i).copied().flatten().map(|v| format!("{v:?}")).unwrap_or_default())
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut m = Self::new(lines.len());
        for (t, line) in lines.iter().enumerate() {
            for (i, cell) in line.split(',').enumerate() {
                let cell = cell.trim();
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Parse { line: t + 1, message: format!("bad number {cell:?}") })?;
                m.set(t, i, v)?;
            }
        }
        Ok(m)
    }
}

/// Running averages `Ā_t` (mean of row `t`) and their mean.
pub fn avg_anytime(m: &AccuracyMatrix) -> Result<(Vec<f64>, f64)> {
    if m.num_tasks() == 0 {
        return Err(Error::UndefinedMetric("empty accuracy matrix".into()));
    }
    let abar = (0..m.num_tasks())
        .map(|t| {
            let sum = (0..=t).map(|i| m.require(t, i)).sum::<Result<f64>>()?;
            Ok(sum / (t + 1) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = abar.iter().sum::<f64>() / abar.len() as f64;
    Ok((abar, avg))
}

/// One minus the mean normalized forgetting of tasks `0..T-1`, where each
/// task's peak is its column maximum over rows `0..T-1`. A task whose peak is
/// zero contributes no forgetting.
pub fn stability(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.num_tasks();
    if n < 2 {
        return Err(Error::UndefinedMetric("stability needs at least two tasks".into()));
    }
    let last = n - 1;
    let mut forgetting = 0.0;
    for i in 0..last {
        let mut peak = f64::NEG_INFINITY;
        for t in i..last {
            peak = peak.max(m.require(t, i)?);
        }
        let end = m.require(last, i)?;
        if peak > 0.0 {
            forgetting += (peak - end) / peak;
        }
    }
    Ok(1.0 - forgetting / last as f64)
}

/// Mean of `A[i][i] / refs[i]`; may exceed one.
pub fn plasticity(m: &AccuracyMatrix, refs: &[f64]) -> Result<f64> {
    let n = m.num_tasks();
    if refs.len() != n {
        return Err(Error::Parameter(format!("{} references for {n} tasks", refs.len())));
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("empty accuracy matrix".into()));
    }
    let mut total = 0.0;
    for (i, &r) in refs.iter().enumerate() {
        if r.is_nan() || r <= 0.0 {
            return Err(Error::Reference { task: i, value: r });
        }
        total += m.require(i, i)? / r;
    }
    Ok(total / n as f64)
}

/// Harmonic mean `2SP / (S + P)`.
pub fn tradeoff(s: f64, p: f64) -> Result<f64> {
    if s < 0.0 || p < 0.0 {
        return Err(Error::Parameter(format!("negative stability or plasticity ({s}, {p})")));
    }
    if s + p == 0.0 {
        return Err(Error::UndefinedMetric("stability + plasticity is zero".into()));
    }
    Ok(2.0 * s * p / (s + p))
}

/// Metrics as written to `metrics.json`. Undefined quantities serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub final_acc: f64,
    pub avg: f64,
    pub stability: Option<f64>,
    pub plasticity: Option<f64>,
    pub tradeoff: Option<f64>,
    pub per_task_abar: Vec<f64>,
}

impl MetricsSummary {
    /// `refs` may be omitted, leaving plasticity and trade-off undefined.
    pub fn compute(m: &AccuracyMatrix, refs: Option<&[f64]>) -> Result<Self> {
        let (abar, avg) = avg_anytime(m)?;
        let stab = match stability(m) {
            Ok(s) => Some(s),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let plast = refs.map(|r| plasticity(m, r)).transpose()?;
        let trade = match (stab, plast) {
            (Some(s), Some(p)) if s + p > 0.0 => Some(tradeoff(s.max(0.0), p)?),
            _ => None,
        };
        Ok(Self {
            final_acc: *abar.last().unwrap(),
            avg,
            stability: stab,
            plasticity: plast,
            tradeoff: trade,
            per_task_abar: abar,
        })
    }
}
