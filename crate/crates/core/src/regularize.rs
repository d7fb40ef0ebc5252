//! Quadratic importance penalties on the adapter and their gradients.
//!
//! The ΔW strategy penalizes the product `AB` itself:
//!
//! ```text
//! R = (λ/2) Σ F ⊙ (AB)²
//! dR/dA = λ (F ⊙ AB) Bᵀ        dR/dB = λ Aᵀ (F ⊙ AB)
//! ```
//!
//! so its value depends only on the product, never on the factorization.
//! The separate strategy instead penalizes each factor against its own anchor
//! with its own diagonal, which drops every cross term between factors.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::fisher::FisherDiag;
use crate::model::Network;
use crate::tensor::{Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Plain LoRA, no penalty.
    None,
    /// Penalty on `AB` with the accumulated ΔW-space Fisher.
    #[default]
    DeltaW,
    /// Independent penalties on `A` and `B` with factor-space Fishers.
    SeparateAB,
    /// ΔW-form penalty with all-ones importance.
    PrecomputedUniform,
    /// ΔW-form penalty with one Fisher estimated up front at the base network.
    PrecomputedDataset,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::DeltaW,
        Strategy::SeparateAB,
        Strategy::PrecomputedUniform,
        Strategy::PrecomputedDataset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::DeltaW => "deltaw",
            Strategy::SeparateAB => "separate",
            Strategy::PrecomputedUniform => "precomputed_uniform",
            Strategy::PrecomputedDataset => "precomputed_dataset",
        }
    }

    pub fn is_precomputed(self) -> bool {
        matches!(self, Strategy::PrecomputedUniform | Strategy::PrecomputedDataset)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Parameter(format!("unknown strategy {s:?}")))
    }
}

/// Penalty value of one layer with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTerm {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

impl PenaltyTerm {
    fn zero(a: &Matrix, b: &Matrix) -> Self {
        Self { value: 0.0, grad_a: Matrix::zeros(a.rows(), a.cols()), grad_b: Matrix::zeros(b.rows(), b.cols()) }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("lambda must be finite and >= 0, got {lambda}")))
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

pub fn penalty_deltaw(a: &Matrix, b: &Matrix, fdw: &Matrix, lambda: f64) -> Result<PenaltyTerm> {
    check_lambda(lambda)?;
    let ab = a.matmul(b)?;
    check_same("penalty fisher", &ab, fdw)?;
    let weighted = fdw.hadamard(&ab)?;
    let value = 0.5 * lambda * weighted.hadamard(&ab)?.sum();
    Ok(PenaltyTerm {
        value,
        grad_a: weighted.matmul_t(b)?.scale(lambda),
        grad_b: a.t_matmul(&weighted)?.scale(lambda),
    })
}

/// Same form as [`penalty_deltaw`]; the Fisher is fixed for the whole run.
pub fn penalty_precomputed(a: &Matrix, b: &Matrix, f_fixed: &Matrix, lambda: f64) -> Result<PenaltyTerm> {
    penalty_deltaw(a, b, f_fixed, lambda)
}

pub fn penalty_separate(
    a: &Matrix,
    b: &Matrix,
    b_anchor: &Matrix,
    fa: &Matrix,
    fb: &Matrix,
    lambda: f64,
) -> Result<PenaltyTerm> {
    check_lambda(lambda)?;
    check_same("penalty A fisher", a, fa)?;
    check_same("penalty B fisher", b, fb)?;
    let db = b.sub(b_anchor)?;
    let wa = fa.hadamard(a)?;
    let wb = fb.hadamard(&db)?;
    let value = 0.5 * lambda * (wa.hadamard(a)?.sum() + wb.hadamard(&db)?.sum());
    Ok(PenaltyTerm { value, grad_a: wa.scale(lambda), grad_b: wb.scale(lambda) })
}

/// Per-layer penalties of `net` under `strategy`. `fisher` is the accumulated
/// (or fixed) importance; `None` means nothing has been accumulated yet.
pub fn network_penalty(
    net: &Network,
    strategy: Strategy,
    fisher: Option<&FisherDiag>,
    lambda: f64,
) -> Result<Vec<PenaltyTerm>> {
    check_lambda(lambda)?;
    let fisher = match (strategy, fisher) {
        (Strategy::None, _) | (_, None) => {
            return Ok(net.layers().iter().map(|l| PenaltyTerm::zero(l.a(), l.b())).collect());
        }
        (_, Some(f)) => f,
    };
    if fisher.layers.len() != net.layers().len() {
        return shape_err("penalty layers", (fisher.layers.len(), 0), (net.layers().len(), 0));
    }
    net.layers()
        .iter()
        .zip(&fisher.layers)
        .map(|(l, f)| match strategy {
            Strategy::SeparateAB => {
                let (fa, fb) = f
                    .a
                    .as_ref()
                    .zip(f.b.as_ref())
                    .ok_or_else(|| Error::State("separate strategy needs factor-space Fishers".into()))?;
                penalty_separate(l.a(), l.b(), l.b_anchor(), fa, fb, lambda)
            }
            Strategy::DeltaW => penalty_deltaw(l.a(), l.b(), &f.delta_w, lambda),
            _ => penalty_precomputed(l.a(), l.b(), &f.delta_w, lambda),
        })
        .collect()
}

/// Factor-space diagonals implied by a ΔW-space diagonal at the point
/// `(A, B)`: `F_A = F (B ⊙ B)ᵀ` and `F_B = (A ⊙ A)ᵀ F`.
pub fn project_to_factors(fdw: &Matrix, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    let b2 = b.map(|v| v * v);
    let a2 = a.map(|v| v * v);
    Ok((fdw.matmul_t(&b2)?, a2.t_matmul(fdw)?))
}

/// Fraction of random trials on which the ΔW-space penalty and the separate
/// penalty (with consistently projected Fishers) disagree by more than
/// `1e-9 · max(1, R_ΔW)`. Every fifth trial keeps `B` at its anchor and moves
/// only `A`. Shapes are `(d_out, d_in, r)`.
pub fn divergence_witness(rng: &mut RngState, dims: (usize, usize, usize), trials: usize) -> Result<f64> {
    let (d_out, d_in, r) = dims;
    if r == 0 || r >= d_out.min(d_in) {
        return Err(Error::Parameter(format!("rank {r} must lie in 1..{}", d_out.min(d_in))));
    }
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    let mut diverged = 0usize;
    for trial in 0..trials {
        let fdw = Matrix::uniform(rng, d_out, d_in, 0.0, 1.0)?;
        let a = Matrix::uniform(rng, d_out, r, -1.0, 1.0)?;
        let b_anchor = Matrix::uniform(rng, r, d_in, -1.0, 1.0)?;
        let b = if trial % 5 == 4 {
            b_anchor.clone()
        } else {
            b_anchor.add(&Matrix::uniform(rng, r, d_in, -1.0, 1.0)?)?
        };
        let (fa, fb) = project_to_factors(&fdw, &a, &b)?;
        let full = penalty_deltaw(&a, &b, &fdw, 1.0)?.value;
        let split = penalty_separate(&a, &b, &b_anchor, &fa, &fb, 1.0)?.value;
        if (full - split).abs() > 1e-9 * full.max(1.0) {
            diverged += 1;
        }
    }
    Ok(diverged as f64 / trials as f64)
}
