//! Diagonal Fisher information in ΔW-space (and factor space), plus decayed
//! accumulation across tasks.
//!
//! For one sample with pre-activation signal `g` and layer input `x`, the
//! log-likelihood gradient with respect to a layer's ΔW is the outer product
//! `g xᵀ`, so its elementwise square is `(g ⊙ g)(x ⊙ x)ᵀ`. A weighted mean over
//! samples is therefore one matrix product:
//!
//! ```text
//! F_ΔW = (1/n) · (diag(w) G²)ᵀ X²
//! ```
//!
//! The same identity gives `F_A` from the projections `X Bᵀ` and `F_B` from
//! the back-projected signals `G A`. Head parameters never enter a Fisher.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{scoped_softmax, Network};
use crate::tasks::Dataset;
use crate::tensor::{Matrix, RngState};

/// How the inner expectation over labels is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorKind {
    /// Point mass at the true label.
    #[default]
    Empirical,
    /// Full sum over the scoped classes weighted by the model's predictive distribution.
    Exact,
    /// `Exact` on `n` training samples drawn uniformly without replacement.
    ExactSubset(usize),
    /// One label per sample drawn from the predictive distribution.
    Sampled,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Empirical => write!(f, "empirical"),
            EstimatorKind::Exact => write!(f, "exact"),
            EstimatorKind::ExactSubset(n) => write!(f, "exact_subset:{n}"),
            EstimatorKind::Sampled => write!(f, "sampled"),
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "empirical" => Ok(EstimatorKind::Empirical),
            "exact" => Ok(EstimatorKind::Exact),
            "sampled" => Ok(EstimatorKind::Sampled),
            other => {
                let n = other
                    .strip_prefix("exact_subset:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Parameter(format!("unknown estimator {other:?}")))?;
                if n == 0 {
                    return Err(Error::Parameter("exact_subset needs n >= 1".into()));
                }
                Ok(EstimatorKind::ExactSubset(n))
            }
        }
    }
}

/// Fisher diagonal of one adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFisher {
    /// Arranged in the shape of `W` (d_out x d_in).
    pub delta_w: Matrix,
    /// Factor-space diagonals, present only for the separate strategy.
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub layers: Vec<LayerFisher>,
}

impl FisherDiag {
    pub fn zeros(net: &Network) -> Self {
        Self::filled(net, 0.0, false)
    }

    /// Zeros with factor-space diagonals allocated.
    pub fn zeros_with_factors(net: &Network) -> Self {
        Self::filled(net, 0.0, true)
    }

    /// The uniform-importance prior: every ΔW entry equals one.
    pub fn uniform(net: &Network) -> Self {
        Self::filled(net, 1.0, false)
    }

    fn filled(net: &Network, v: f64, factors: bool) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerFisher {
                delta_w: Matrix::filled(l.d_out(), l.d_in(), v),
                a: factors.then(|| Matrix::filled(l.d_out(), l.rank(), v)),
                b: factors.then(|| Matrix::filled(l.rank(), l.d_in(), v)),
            })
            .collect();
        Self { layers }
    }

    pub fn has_factors(&self) -> bool {
        self.layers.iter().all(|l| l.a.is_some() && l.b.is_some())
    }

    /// `gamma * self + f_t`, elementwise, over every populated part.
    pub fn accumulate(&self, f_t: &FisherDiag, gamma: f64) -> Result<FisherDiag> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Parameter(format!("gamma {gamma} outside [0, 1]")));
        }
        if self.layers.len() != f_t.layers.len() {
            return Err(Error::Shape {
                op: "accumulate",
                left: (self.layers.len(), 0),
                right: (f_t.layers.len(), 0),
            });
        }
        let combine = |a: &Matrix, b: &Matrix| a.scaled_add(gamma, b, 1.0);
        let layers = self
            .layers
            .iter()
            .zip(&f_t.layers)
            .map(|(c, t)| {
                let part = |x: &Option<Matrix>, y: &Option<Matrix>| -> Result<Option<Matrix>> {
                    match (x, y) {
                        (Some(x), Some(y)) => Ok(Some(combine(x, y)?)),
                        (None, None) => Ok(None),
                        _ => Err(Error::Shape { op: "accumulate factors", left: (0, 0), right: (0, 0) }),
                    }
                };
                Ok(LayerFisher {
                    delta_w: combine(&c.delta_w, &t.delta_w)?,
                    a: part(&c.a, &t.a)?,
                    b: part(&c.b, &t.b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FisherDiag { layers })
    }

    pub fn scale(&self, c: f64) -> FisherDiag {
        FisherDiag {
            layers: self
                .layers
                .iter()
                .map(|l| LayerFisher {
                    delta_w: l.delta_w.scale(c),
                    a: l.a.as_ref().map(|m| m.scale(c)),
                    b: l.b.as_ref().map(|m| m.scale(c)),
                })
                .collect(),
        }
    }

    /// ΔW-space entries concatenated layer by layer, each layer row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.delta_w.as_slice().iter().copied()).collect()
    }

    /// Frobenius norm over the concatenated ΔW-space entries.
    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.layers.iter().all(|l| {
            [Some(&l.delta_w), l.a.as_ref(), l.b.as_ref()]
                .into_iter()
                .flatten()
                .all(|m| m.as_slice().iter().all(|&v| v >= 0.0))
        })
    }

    /// Sample-count-weighted mean of estimates made on disjoint data.
    pub fn pooled(parts: &[(FisherDiag, usize)]) -> Result<FisherDiag> {
        let total: usize = parts.iter().map(|(_, n)| n).sum();
        let (first, rest) = parts.split_first().ok_or(Error::Data("nothing to pool".into()))?;
        let mut acc = first.0.scale(first.1 as f64 / total as f64);
        for (f, n) in rest {
            acc = f.scale(*n as f64 / total as f64).accumulate(&acc, 1.0)?;
        }
        Ok(acc)
    }

    /// Writes `layer{k}_Fdw.csv` (plus `_FA`/`_FB` when present) and `manifest.json`.
    pub fn write_snapshot(&self, dir: &Path, meta: &SnapshotMeta) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut shapes = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            crate::io::write_atomic(&dir.join(format!("layer{k}_Fdw.csv")), l.delta_w.to_csv().as_bytes())?;
            if let (Some(a), Some(b)) = (&l.a, &l.b) {
                crate::io::write_atomic(&dir.join(format!("layer{k}_FA.csv")), a.to_csv().as_bytes())?;
                crate::io::write_atomic(&dir.join(format!("layer{k}_FB.csv")), b.to_csv().as_bytes())?;
            }
            shapes.push(SnapshotLayer {
                d_out: l.delta_w.rows(),
                d_in: l.delta_w.cols(),
                rank: l.a.as_ref().map(Matrix::cols),
            });
        }
        let manifest = SnapshotManifest {
            format: "ewc-lora-fisher/1".into(),
            estimator: meta.estimator.to_string(),
            gamma_history: meta.gamma_history.clone(),
            task_index: meta.task_index,
            layers: shapes,
        };
        crate::io::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn read_snapshot(dir: &Path) -> Result<(FisherDiag, SnapshotMeta)> {
        let manifest: SnapshotManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let read = |name: String| -> Result<Matrix> { Matrix::from_csv(&std::fs::read_to_string(dir.join(name))?) };
        let mut layers = Vec::new();
        for (k, s) in manifest.layers.iter().enumerate() {
            let delta_w = read(format!("layer{k}_Fdw.csv"))?;
            if delta_w.shape() != (s.d_out, s.d_in) {
                return Err(Error::Data(format!("layer {k} disagrees with the manifest")));
            }
            let (a, b) = match s.rank {
                Some(_) => (Some(read(format!("layer{k}_FA.csv"))?), Some(read(format!("layer{k}_FB.csv"))?)),
                None => (None, None),
            };
            layers.push(LayerFisher { delta_w, a, b });
        }
        let meta = SnapshotMeta {
            estimator: manifest.estimator.parse()?,
            gamma_history: manifest.gamma_history,
            task_index: manifest.task_index,
        };
        Ok((FisherDiag { layers }, meta))
    }
}

/// Provenance recorded alongside a Fisher snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMeta {
    pub estimator: EstimatorKind,
    /// Decay factor applied at each accumulation so far.
    pub gamma_history: Vec<f64>,
    pub task_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotLayer {
    d_out: usize,
    d_in: usize,
    #[serde(default)]
    rank: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotManifest {
    format: String,
    estimator: String,
    gamma_history: Vec<f64>,
    task_index: usize,
    layers: Vec<SnapshotLayer>,
}

/// ΔW-space diagonal Fisher of `net` on `data`.
///
/// `classes` restricts the predictive distribution to those head rows (all
/// rows when `None`); it must match the likelihood the network was trained on.
pub fn estimate(
    net: &Network,
    data: &Dataset,
    kind: EstimatorKind,
    classes: Option<&[usize]>,
    rng: &mut RngState,
) -> Result<FisherDiag> {
    estimate_inner(net, data, kind, classes, rng, false)
}

/// Like [`estimate`], additionally filling the factor-space diagonals `F_A`
/// (d_out x r) and `F_B` (r x d_in) from squared gradients with respect to `A`
/// and `B`.
pub fn estimate_factor_space(
    net: &Network,
    data: &Dataset,
    kind: EstimatorKind,
    classes: Option<&[usize]>,
    rng: &mut RngState,
) -> Result<FisherDiag> {
    estimate_inner(net, data, kind, classes, rng, true)
}

/// A fixed Fisher estimated once at the base network on the union of all task
/// data; the network's head must cover every class in `parts`.
pub fn precompute_dataset_fisher(
    net_at_base: &Network,
    parts: &[&Dataset],
    kind: EstimatorKind,
    rng: &mut RngState,
) -> Result<FisherDiag> {
    let all = Dataset::concat(parts)?;
    estimate(net_at_base, &all, kind, None, rng)
}

fn estimate_inner(
    net: &Network,
    data: &Dataset,
    kind: EstimatorKind,
    classes: Option<&[usize]>,
    rng: &mut RngState,
    factors: bool,
) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(Error::Data("cannot estimate a Fisher on an empty dataset".into()));
    }
    let data = match kind {
        EstimatorKind::ExactSubset(n) => {
            let mut idx = rng.sample_indices(data.len(), n);
            idx.sort_unstable();
            std::borrow::Cow::Owned(data.subset(&idx))
        }
        _ => std::borrow::Cow::Borrowed(data),
    };
    let rows = net.head().rows_for(classes)?;
    if rows.is_empty() {
        return Err(Error::State("head has no classes".into()));
    }
    let n = data.len();
    let (logits, cache) = net.forward(&data.x)?;
    let probs = scoped_softmax(&logits, &rows);
    let truth = net.target_positions(&data.y, &rows)?;

    // Each term assigns one target per sample together with a sample weight.
    let terms: Vec<(Vec<usize>, Vec<f64>)> = match kind {
        EstimatorKind::Empirical => vec![(truth, vec![1.0; n])],
        EstimatorKind::Sampled => {
            let drawn = probs.iter().map(|p| rng.categorical(p)).collect();
            vec![(drawn, vec![1.0; n])]
        }
        EstimatorKind::Exact | EstimatorKind::ExactSubset(_) => (0..rows.len())
            .map(|pos| (vec![pos; n], probs.iter().map(|p| p[pos]).collect()))
            .collect(),
    };

    let squared: Vec<Matrix> = cache.inputs.iter().map(|x| x.map(|v| v * v)).collect();
    let squared_proj: Vec<Matrix> = cache.projections.iter().map(|u| u.map(|v| v * v)).collect();
    let mut out = if factors { FisherDiag::zeros_with_factors(net) } else { FisherDiag::zeros(net) };

    for (targets, weights) in &terms {
        let mut dlogits = Matrix::zeros(n, net.head().num_classes());
        for i in 0..n {
            for (pos, &r) in rows.iter().enumerate() {
                let indicator = if pos == targets[i] { 1.0 } else { 0.0 };
                dlogits.set(i, r, probs[i][pos] - indicator);
            }
        }
        let signals = net.layer_signals(&cache, &dlogits)?;
        for (k, g) in signals.iter().enumerate() {
            let g2 = weighted_square(g, weights);
            let lf = &mut out.layers[k];
            lf.delta_w.add_assign(&g2.t_matmul(&squared[k])?)?;
            if factors {
                let ga = g.matmul(net.layers()[k].a())?;
                let ga2 = weighted_square(&ga, weights);
                lf.a.as_mut().unwrap().add_assign(&g2.t_matmul(&squared_proj[k])?)?;
                lf.b.as_mut().unwrap().add_assign(&ga2.t_matmul(&squared[k])?)?;
            }
        }
    }
    Ok(out.scale(1.0 / n as f64))
}

/// Rows of `g ⊙ g`, each scaled by its sample weight.
fn weighted_square(g: &Matrix, weights: &[f64]) -> Matrix {
    let mut out = g.map(|v| v * v);
    let cols = out.cols();
    for (i, chunk) in out.as_mut_slice().chunks_mut(cols).enumerate() {
        for v in chunk {
            *v *= weights[i];
        }
    }
    out
}
