//! Micro feed-forward classifier whose linear layers carry a shared low-rank
//! adapter.
//!
//! Each adapted layer computes `z = W x + A (B x)` with `W` frozen, followed by
//! `tanh`. The head is a plain affine map over the last activation with one
//! row per class seen so far. Samples are rows, so a batch `X` (n x d_in) maps
//! to `X Wᵀ + (X Bᵀ) Aᵀ`.
//!
//! Gradients are derived by hand. For the pre-activation signal `G = dL/dZ`
//! of a layer with input `X`:
//!
//! ```text
//! dΔW = Gᵀ X          (equal to dW: W enters Z exactly like ΔW does)
//! dA  = Gᵀ (X Bᵀ)     (= dΔW Bᵀ)
//! dB  = (G A)ᵀ X      (= Aᵀ dΔW)
//! dX  = G W + (G A) B
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_in_place, Matrix, RngState};

/// One adapted linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    weight: Matrix,
    a: Matrix,
    b: Matrix,
    /// Value of `B` at the last adapter reset; the anchor of the factor-space penalty.
    b_anchor: Matrix,
}

impl LoraLinear {
    /// Layer with base weights `weight`, `A = 0` and `B` drawn uniform on
    /// `±gain/sqrt(d_in)`.
    pub fn new(weight: Matrix, rank: usize, rng: &mut RngState, gain: f64) -> Result<Self> {
        let (d_out, d_in) = weight.shape();
        check_rank(rank, d_out, d_in)?;
        let b = init_b(rng, rank, d_in, gain)?;
        Ok(Self {
            weight,
            a: Matrix::zeros(d_out, rank),
            b_anchor: b.clone(),
            b,
        })
    }

    /// Layer from explicit parts; the anchor is set to `b`.
    pub fn from_parts(weight: Matrix, a: Matrix, b: Matrix) -> Result<Self> {
        let (d_out, d_in) = weight.shape();
        let rank = a.cols();
        check_rank(rank, d_out, d_in)?;
        if a.rows() != d_out {
            return Err(Error::Shape { op: "lora A", left: weight.shape(), right: a.shape() });
        }
        if b.shape() != (rank, d_in) {
            return Err(Error::Shape { op: "lora B", left: a.shape(), right: b.shape() });
        }
        Ok(Self { weight, a, b_anchor: b.clone(), b })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn b_anchor(&self) -> &Matrix {
        &self.b_anchor
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    /// The update `ΔW = A B`, formed on demand.
    pub fn delta_w(&self) -> Matrix {
        self.a.matmul(&self.b).expect("layer invariant: A and B chain")
    }

    #[cfg(test)]
    pub(crate) fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn set_adapter(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::Shape { op: "set_adapter", left: a.shape(), right: b.shape() });
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// Pre-activation `X Wᵀ + (X Bᵀ) Aᵀ` and the projection `X Bᵀ`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.d_in() {
            return Err(Error::Shape { op: "layer forward", left: x.shape(), right: self.weight.shape() });
        }
        let proj = x.matmul_t(&self.b)?;
        let mut z = x.matmul_t(&self.weight)?;
        z.add_assign(&proj.matmul_t(&self.a)?)?;
        Ok((z, proj))
    }

    /// `W ← W + A B`.
    pub fn merge(&mut self) {
        let delta = self.delta_w();
        self.weight.add_assign(&delta).expect("ΔW has the shape of W");
    }

    /// `A ← 0`, fresh uniform `B`, anchor reset to the new `B`.
    pub fn reset_adapter(&mut self, rng: &mut RngState, gain: f64) -> Result<()> {
        self.a = Matrix::zeros(self.d_out(), self.rank());
        self.b = init_b(rng, self.rank(), self.d_in(), gain)?;
        self.b_anchor = self.b.clone();
        Ok(())
    }
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<()> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::Parameter(format!(
            "rank {rank} must lie in 1..={} for a {d_out}x{d_in} layer",
            d_out.min(d_in)
        )));
    }
    Ok(())
}

fn init_b(rng: &mut RngState, rank: usize, d_in: usize, gain: f64) -> Result<Matrix> {
    let bound = gain / (d_in as f64).sqrt();
    Matrix::uniform(rng, rank, d_in, -bound, bound)
}

/// Classifier over every class seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    weight: Matrix,
    bias: Matrix,
    class_ids: Vec<usize>,
}

impl Head {
    pub fn empty(d_feat: usize) -> Self {
        Self {
            weight: Matrix::zeros(0, d_feat),
            bias: Matrix::zeros(0, 1),
            class_ids: Vec::new(),
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix, class_ids: Vec<usize>) -> Result<Self> {
        if weight.rows() != class_ids.len() || bias.shape() != (class_ids.len(), 1) {
            return Err(Error::Shape { op: "head", left: weight.shape(), right: bias.shape() });
        }
        let unique: BTreeSet<_> = class_ids.iter().collect();
        if unique.len() != class_ids.len() {
            return Err(Error::Protocol("duplicate class id in head".into()));
        }
        Ok(Self { weight, bias, class_ids })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Head rows for the given global class ids (all rows when `None`).
    pub fn rows_for(&self, classes: Option<&[usize]>) -> Result<Vec<usize>> {
        match classes {
            None => Ok((0..self.class_ids.len()).collect()),
            Some(ids) => ids
                .iter()
                .map(|c| self.class_ids.iter().position(|k| k == c).ok_or(Error::Label(*c)))
                .collect(),
        }
    }

    fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = features.matmul_t(&self.weight)?;
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                z.set(i, j, z.get(i, j) + self.bias.get(j, 0));
            }
        }
        Ok(z)
    }
}

/// Stack of adapted `tanh` layers followed by the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LoraLinear>,
    head: Head,
    b_init_gain: f64,
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[k]` feeds layer `k`; the last entry is the head's feature input.
    pub inputs: Vec<Matrix>,
    /// `X_k Bᵀ_k` per layer.
    pub projections: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        self.inputs.last().expect("cache holds the network input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_a: Matrix,
    pub d_b: Matrix,
    pub d_delta_w: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub d_weight: Matrix,
    pub d_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrads>,
    pub head: HeadGrads,
}

impl Network {
    /// Random base network with layer widths `dims = [d_in, h_1, ..., h_L]`.
    /// Base weights are uniform on `±sqrt(3/d_in)`; adapters start at `A = 0`.
    pub fn new(dims: &[usize], rank: usize, rng: &mut RngState, b_init_gain: f64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Parameter("need at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let bound = (3.0 / pair[0] as f64).sqrt();
            let w = Matrix::uniform(rng, pair[1], pair[0], -bound, bound)?;
            layers.push(LoraLinear::new(w, rank, rng, b_init_gain)?);
        }
        Ok(Self { layers, head: Head::empty(*dims.last().unwrap()), b_init_gain })
    }

    pub fn from_parts(layers: Vec<LoraLinear>, head: Head, b_init_gain: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("need at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape {
                    op: "layer chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        if head.weight.cols() != layers.last().unwrap().d_out() {
            return Err(Error::Shape {
                op: "head features",
                left: layers.last().unwrap().weight.shape(),
                right: head.weight.shape(),
            });
        }
        Ok(Self { layers, head, b_init_gain })
    }

    pub fn layers(&self) -> &[LoraLinear] {
        &self.layers
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [LoraLinear] {
        &mut self.layers
    }

    /// Adapter factors `A_k, B_k` layer by layer, then head weight and bias.
    pub(crate) fn adapter_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.a);
            out.push(&mut l.b);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Base weights `W_k` layer by layer, then head weight and bias.
    pub(crate) fn base_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn b_init_gain(&self) -> f64 {
        self.b_init_gain
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    /// Replaces the head, keeping the base and adapters.
    pub fn with_head(&self, head: Head) -> Result<Network> {
        Network::from_parts(self.layers.clone(), head, self.b_init_gain)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut projections = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (z, proj) = layer.forward(&h)?;
            inputs.push(h);
            projections.push(proj);
            h = z.map(f64::tanh);
        }
        let logits = self.head.logits(&h)?;
        inputs.push(h);
        Ok((logits.clone(), ForwardCache { inputs, projections, logits }))
    }

    /// Mean cross-entropy over the batch with the softmax restricted to the
    /// head rows of `classes` (all seen classes when `None`), and its gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        labels: &[usize],
        classes: Option<&[usize]>,
    ) -> Result<(f64, GradientBundle)> {
        let n = labels.len();
        if n != cache.logits.rows() {
            return Err(Error::Data(format!("{n} labels for {} cached rows", cache.logits.rows())));
        }
        let rows = self.head.rows_for(classes)?;
        let targets = self.target_positions(labels, &rows)?;
        let probs = scoped_softmax(&cache.logits, &rows);
        let mut loss = 0.0;
        let mut dlogits = Matrix::zeros(n, self.head.num_classes());
        for i in 0..n {
            loss -= probs[i][targets[i]].ln();
            for (pos, &r) in rows.iter().enumerate() {
                let indicator = if pos == targets[i] { 1.0 } else { 0.0 };
                dlogits.set(i, r, (probs[i][pos] - indicator) / n as f64);
            }
        }
        let grads = self.gradients_from_logit_grad(cache, &dlogits)?;
        Ok((loss / n as f64, grads))
    }

    /// Position of each label inside `rows`.
    pub(crate) fn target_positions(&self, labels: &[usize], rows: &[usize]) -> Result<Vec<usize>> {
        let index: BTreeMap<usize, usize> =
            rows.iter().enumerate().map(|(pos, &r)| (self.head.class_ids[r], pos)).collect();
        labels.iter().map(|y| index.get(y).copied().ok_or(Error::Label(*y))).collect()
    }

    /// Pre-activation signals `G_k = dL/dZ_k` for every layer, last layer
    /// last, given the gradient with respect to the logits.
    pub(crate) fn layer_signals(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Vec<Matrix>> {
        let mut signals = vec![Matrix::zeros(0, 0); self.layers.len()];
        let mut d_h = dlogits.matmul(&self.head.weight)?;
        for k in (0..self.layers.len()).rev() {
            let out = &cache.inputs[k + 1];
            let g = d_h.zip_with(out, "tanh backward", |d, h| d * (1.0 - h * h))?;
            if k > 0 {
                let layer = &self.layers[k];
                let ga = g.matmul(&layer.a)?;
                let mut dx = g.matmul(&layer.weight)?;
                dx.add_assign(&ga.matmul(&layer.b)?)?;
                d_h = dx;
            }
            signals[k] = g;
        }
        Ok(signals)
    }

    pub(crate) fn gradients_from_logit_grad(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
    ) -> Result<GradientBundle> {
        let signals = self.layer_signals(cache, dlogits)?;
        let layers = signals
            .iter()
            .zip(&self.layers)
            .enumerate()
            .map(|(k, (g, layer))| {
                let x = &cache.inputs[k];
                Ok(LayerGrads {
                    d_delta_w: g.t_matmul(x)?,
                    d_a: g.t_matmul(&cache.projections[k])?,
                    d_b: g.matmul(&layer.a)?.t_matmul(x)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = HeadGrads {
            d_weight: dlogits.t_matmul(cache.features())?,
            d_bias: dlogits.column_sums(),
        };
        Ok(GradientBundle { layers, head })
    }

    /// Predicted global class ids, arg-max over the scoped head rows.
    pub fn predict(&self, x: &Matrix, classes: Option<&[usize]>) -> Result<Vec<usize>> {
        let rows = self.head.rows_for(classes)?;
        if rows.is_empty() {
            return Err(Error::State("head has no classes to predict".into()));
        }
        let (logits, _) = self.forward(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let scoped: Vec<f64> = rows.iter().map(|&r| logits.get(i, r)).collect();
                self.head.class_ids[rows[argmax(&scoped)]]
            })
            .collect())
    }

    /// Folds every adapter into its base weights and re-draws the adapters.
    pub fn merge_and_reset(&mut self, rng: &mut RngState) -> Result<()> {
        let gain = self.b_init_gain;
        for layer in &mut self.layers {
            layer.merge();
            layer.reset_adapter(rng, gain)?;
        }
        Ok(())
    }

    /// Re-draws adapters without merging.
    pub fn reset_adapters(&mut self, rng: &mut RngState) -> Result<()> {
        let gain = self.b_init_gain;
        for layer in &mut self.layers {
            layer.reset_adapter(rng, gain)?;
        }
        Ok(())
    }

    /// Appends one zero head row per new class. Old logits are untouched.
    pub fn expand_head(&mut self, new_class_ids: &[usize], _rng: &mut RngState) -> Result<()> {
        let mut seen: BTreeSet<usize> = self.head.class_ids.iter().copied().collect();
        for &c in new_class_ids {
            if !seen.insert(c) {
                return Err(Error::Protocol(format!("class {c} is already in the head")));
            }
        }
        if new_class_ids.is_empty() {
            return Ok(());
        }
        let d = self.feature_dim();
        let new_w = Matrix::zeros(new_class_ids.len(), d);
        let new_b = Matrix::zeros(new_class_ids.len(), 1);
        self.head.weight = Matrix::vstack(&[&self.head.weight, &new_w])?;
        self.head.bias = Matrix::vstack(&[&self.head.bias, &new_b])?;
        self.head.class_ids.extend_from_slice(new_class_ids);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.a.is_finite() && l.b.is_finite())
            && self.head.weight.is_finite()
            && self.head.bias.is_finite()
    }

    /// Writes a checkpoint directory: one CSV per matrix and `manifest.json`.
    pub fn save_checkpoint(&self, dir: &Path, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut layers = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            for (name, m) in [("W", &layer.weight), ("A", &layer.a), ("B", &layer.b), ("B_anchor", &layer.b_anchor)] {
                crate::io::write_atomic(&dir.join(format!("layer{k}_{name}.csv")), m.to_csv().as_bytes())?;
            }
            layers.push(LayerManifest { d_in: layer.d_in(), d_out: layer.d_out(), rank: layer.rank() });
        }
        if self.head.num_classes() > 0 {
            crate::io::write_atomic(&dir.join("head_V.csv"), self.head.weight.to_csv().as_bytes())?;
            crate::io::write_atomic(&dir.join("head_b.csv"), self.head.bias.to_csv().as_bytes())?;
        }
        let manifest = CheckpointManifest {
            format: "ewc-lora-checkpoint/1".into(),
            layers,
            feature_dim: self.feature_dim(),
            class_ids: self.head.class_ids.clone(),
            b_init_gain: self.b_init_gain,
            seed,
        };
        crate::io::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Network, CheckpointManifest)> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let read = |name: String| -> Result<Matrix> { Matrix::from_csv(&std::fs::read_to_string(dir.join(name))?) };
        let mut layers = Vec::new();
        for (k, spec) in manifest.layers.iter().enumerate() {
            let mut layer = LoraLinear::from_parts(
                read(format!("layer{k}_W.csv"))?,
                read(format!("layer{k}_A.csv"))?,
                read(format!("layer{k}_B.csv"))?,
            )?;
            layer.b_anchor = read(format!("layer{k}_B_anchor.csv"))?;
            if (layer.d_in(), layer.d_out(), layer.rank()) != (spec.d_in, spec.d_out, spec.rank) {
                return Err(Error::Data(format!("layer {k} disagrees with the manifest")));
            }
            layers.push(layer);
        }
        let head = if manifest.class_ids.is_empty() {
            Head::empty(manifest.feature_dim)
        } else {
            Head::from_parts(read("head_V.csv".into())?, read("head_b.csv".into())?, manifest.class_ids.clone())?
        };
        let net = Network::from_parts(layers, head, manifest.b_init_gain)?;
        Ok((net, manifest))
    }
}

/// Softmax over the selected logit columns, one vector per row.
pub(crate) fn scoped_softmax(logits: &Matrix, rows: &[usize]) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let mut p: Vec<f64> = rows.iter().map(|&r| logits.get(i, r)).collect();
            softmax_in_place(&mut p);
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub layers: Vec<LayerManifest>,
    pub feature_dim: usize,
    pub class_ids: Vec<usize>,
    pub b_init_gain: f64,
    pub seed: u64,
}

#[cfg(test)]
pub(crate) fn random_head(net: &Network, classes: &[usize], rng: &mut RngState) -> Network {
    let d = net.feature_dim();
    let w = Matrix::uniform(rng, classes.len(), d, -1.0, 1.0).unwrap();
    let b = Matrix::uniform(rng, classes.len(), 1, -0.5, 0.5).unwrap();
    net.with_head(Head::from_parts(w, b, classes.to_vec()).unwrap()).unwrap()
}
