use proptest::prelude::*;

use ewc_lora::diagnostics::{cosine_sim, norm_ratio, spearman};
use ewc_lora::fisher::{estimate, EstimatorKind, FisherDiag, LayerFisher};
use ewc_lora::metrics::{avg_anytime, stability, tradeoff, AccuracyMatrix};
use ewc_lora::model::{Head, LoraLinear, Network};
use ewc_lora::regularize::{penalty_deltaw, penalty_separate};
use ewc_lora::tasks::Dataset;
use ewc_lora::tensor::{Matrix, RngState};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// `(A, B, F)` with `A: o×r`, `B: r×i`, `F ≥ 0: o×i`.
fn factors() -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
    (2usize..7, 2usize..7, 1usize..3).prop_flat_map(|(o, i, r)| {
        (matrix(o, r, -2.0, 2.0), matrix(r, i, -2.0, 2.0), matrix(o, i, 0.0, 3.0))
    })
}

fn fisher_pair() -> impl Strategy<Value = (FisherDiag, FisherDiag)> {
    (1usize..5, 1usize..5).prop_flat_map(|(o, i)| {
        let layer = move || matrix(o, i, 0.0, 5.0).prop_map(|m| LayerFisher { delta_w: m, a: None, b: None });
        (layer(), layer()).prop_map(|(a, b)| (FisherDiag { layers: vec![a] }, FisherDiag { layers: vec![b] }))
    })
}

fn small_net(seed: u64) -> (Network, Dataset) {
    let mut rng = RngState::new(seed);
    let mut layers = Vec::new();
    for (o, i) in [(5, 4), (3, 5)] {
        let w = Matrix::uniform(&mut rng, o, i, -1.0, 1.0).unwrap();
        let a = Matrix::uniform(&mut rng, o, 2, -0.5, 0.5).unwrap();
        let b = Matrix::uniform(&mut rng, 2, i, -0.5, 0.5).unwrap();
        layers.push(LoraLinear::from_parts(w, a, b).unwrap());
    }
    let head = Head::from_parts(
        Matrix::uniform(&mut rng, 3, 3, -1.0, 1.0).unwrap(),
        Matrix::zeros(3, 1),
        vec![0, 1, 2],
    )
    .unwrap();
    let x = Matrix::uniform(&mut rng, 9, 4, -1.0, 1.0).unwrap();
    let y = (0..9).map(|i| i % 3).collect();
    (Network::from_parts(layers, head, 1.0).unwrap(), Dataset::new(x, y).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deltaw_penalty_is_nonnegative_and_factorization_invariant((a, b, f) in factors(), c in 0.25f64..4.0, lambda in 0.0f64..10.0) {
        let p = penalty_deltaw(&a, &b, &f, lambda).unwrap();
        prop_assert!(p.value >= 0.0);
        let q = penalty_deltaw(&a.scale(c), &b.scale(1.0 / c), &f, lambda).unwrap();
        prop_assert!((p.value - q.value).abs() <= 1e-10 * p.value.max(1.0));
    }

    #[test]
    fn penalty_is_linear_in_lambda((a, b, f) in factors(), lambda in 0.0f64..100.0) {
        let one = penalty_deltaw(&a, &b, &f, 1.0).unwrap();
        let many = penalty_deltaw(&a, &b, &f, lambda).unwrap();
        prop_assert!((many.value - lambda * one.value).abs() <= 1e-12 * many.value.max(1.0));
    }

    #[test]
    fn penalties_vanish_at_their_anchors((a, b, f) in factors()) {
        let zero_a = a.scale(0.0);
        let p = penalty_deltaw(&zero_a, &b, &f, 5.0).unwrap();
        prop_assert_eq!(p.value, 0.0);
        prop_assert!(p.grad_a.is_all_zero() && p.grad_b.is_all_zero());
        let fa = Matrix::filled(a.rows(), a.cols(), 1.0);
        let fb = Matrix::filled(b.rows(), b.cols(), 1.0);
        let s = penalty_separate(&zero_a, &b, &b, &fa, &fb, 5.0).unwrap();
        prop_assert_eq!(s.value, 0.0);
    }

    #[test]
    fn accumulation_stays_nonnegative((cum, f) in fisher_pair(), gamma in 0.0f64..=1.0) {
        let next = cum.accumulate(&f, gamma).unwrap();
        prop_assert!(next.is_nonnegative());
        let expect: Vec<f64> = cum.flatten().iter().zip(f.flatten()).map(|(c, f)| gamma * c + f).collect();
        prop_assert_eq!(next.flatten(), expect);
    }

    #[test]
    fn norm_ratio_is_homogeneous((f, _) in fisher_pair(), c in 0.1f64..10.0) {
        prop_assume!(f.norm() > 0.0);
        prop_assert_eq!(norm_ratio(&f, &f).unwrap(), 1.0);
        prop_assert!((norm_ratio(&f.scale(c), &f).unwrap() - c).abs() <= 1e-12 * c);
    }

    #[test]
    fn spearman_and_cosine_are_bounded(v in prop::collection::vec(-5.0f64..5.0, 3..30), seed in any::<u64>()) {
        let mut w = v.clone();
        RngState::new(seed).shuffle(&mut w);
        if let Ok(rho) = spearman(&v, &w) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            let cubed: Vec<f64> = v.iter().map(|x| x * x * x).collect();
            prop_assert!((spearman(&cubed, &w).unwrap() - rho).abs() <= 1e-12);
        }
        if let Ok(c) = cosine_sim(&v, &w) {
            prop_assert!(c.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_range(cells in prop::collection::vec(0.0f64..=1.0, 10)) {
        let rows: Vec<Vec<f64>> = (0..4).map(|t| cells[t * (t + 1) / 2..(t + 1) * (t + 2) / 2].to_vec()).collect();
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        let (abar, avg) = avg_anytime(&m).unwrap();
        prop_assert!(abar.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!((0.0..=1.0).contains(&avg));
        let s = stability(&m).unwrap();
        prop_assert!(s >= 0.0);
        // the peak excludes the last row, so only late gains push S above one
        let gains = (0..3).any(|i| rows[3][i] > (i..3).map(|t| rows[t][i]).fold(0.0, f64::max));
        prop_assert!(gains || s <= 1.0 + 1e-15);
        let t = tradeoff(s, 0.7).unwrap();
        prop_assert!(t <= s.max(0.7) + 1e-15 && t >= s.min(0.7) - 1e-15);
    }
}

#[test]
fn every_estimator_is_nonnegative_with_layer_shapes() {
    let (net, data) = small_net(3);
    for kind in [EstimatorKind::Empirical, EstimatorKind::Exact, EstimatorKind::Sampled, EstimatorKind::ExactSubset(4)] {
        let f = estimate(&net, &data, kind, None, &mut RngState::new(1)).unwrap();
        assert!(f.is_nonnegative(), "{kind}");
        let shapes: Vec<(usize, usize)> = f.layers.iter().map(|l| l.delta_w.shape()).collect();
        assert_eq!(shapes, vec![(5, 4), (3, 5)]);
    }
}
