//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::time::{Duration, Instant};

use ewc_lora::diagnostics::{cosine_sim, spearman, track_fisher_drift_regimes, DriftRow, Regime};
use ewc_lora::fisher::{estimate, EstimatorKind, FisherDiag, LayerFisher};
use ewc_lora::metrics::{plasticity, stability, tradeoff, AccuracyMatrix, MetricsSummary};
use ewc_lora::model::{Head, LoraLinear, Network};
use ewc_lora::regularize::{divergence_witness, penalty_deltaw, penalty_precomputed, penalty_separate, Strategy};
use ewc_lora::tasks::{gen_gaussian_stream, Dataset, GaussianStreamSpec, TaskStream};
use ewc_lora::tensor::{Matrix, RngState};
use ewc_lora::trainer::{
    base_network, run_continual_from, run_references, train_task, ContinualLearner, RetainedState, TrainConfig,
};
use ewc_lora_cli::commands::cmd_run;
use ewc_lora_cli::ExperimentConfig;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-5;
const FD_INSTANCES: usize = 24;
const IDENTITY_TOL: f64 = 1e-12;
const PENALTY_LOOP_TOL: f64 = 1e-12;
const FISHER_LOOP_TOL: f64 = 1e-10;
const FACTORIZATION_TOL: f64 = 1e-10;
const WITNESS_MIN: f64 = 0.99;
const MERGE_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Penalty strength for the end-to-end orderings. Desk-scale Fisher entries
/// sit near 1e-3, so the default 1e7 pins the adapter completely.
const DESK_LAMBDA: f64 = 10.0;
const LAMBDA_GRID: [f64; 5] = [0.0, 1e2, 1e4, 1e6, 1e8];
const TREND_MIN: f64 = 0.8;
const DRIFT_TRACKED: [usize; 3] = [0, 1, 2];

const BUDGET_GRADIENTS: Duration = Duration::from_secs(30);
const BUDGET_STRATEGIES: Duration = Duration::from_secs(600);
const BUDGET_LAMBDA: Duration = Duration::from_secs(900);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn max_abs(m: &Matrix) -> f64 {
    m.as_slice().iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    max_abs(&a.sub(b).unwrap())
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        a.sub(b).unwrap().frobenius_norm() / scale
    }
}

fn central_diff(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut up = x.clone();
            up.set(i, j, x.get(i, j) + FD_STEP);
            let mut down = x.clone();
            down.set(i, j, x.get(i, j) - FD_STEP);
            g.set(i, j, (f(&up) - f(&down)) / (2.0 * FD_STEP));
        }
    }
    g
}

struct Instance {
    net: Network,
    data: Dataset,
    scope: Option<Vec<usize>>,
}

/// Small random network with non-zero adapters and head, widths ≤ 8, rank ≤ 2.
fn instance(seed: u64) -> Instance {
    let mut rng = RngState::new(seed);
    let depth = 1 + rng.below(2);
    let mut dims = vec![3 + rng.below(6)];
    for _ in 0..depth {
        dims.push(3 + rng.below(6));
    }
    let rank = 1 + rng.below(2);
    let mut layers = Vec::new();
    for pair in dims.windows(2) {
        let w = Matrix::uniform(&mut rng, pair[1], pair[0], -0.8, 0.8).unwrap();
        let a = Matrix::uniform(&mut rng, pair[1], rank, -0.5, 0.5).unwrap();
        let b = Matrix::uniform(&mut rng, rank, pair[0], -0.5, 0.5).unwrap();
        layers.push(LoraLinear::from_parts(w, a, b).unwrap());
    }
    let classes = 2 + rng.below(3);
    let ids: Vec<usize> = (0..classes).map(|c| 10 + c).collect();
    let d = *dims.last().unwrap();
    let head = Head::from_parts(
        Matrix::uniform(&mut rng, classes, d, -1.0, 1.0).unwrap(),
        Matrix::uniform(&mut rng, classes, 1, -0.5, 0.5).unwrap(),
        ids.clone(),
    )
    .unwrap();
    let net = Network::from_parts(layers, head, 1.0).unwrap();
    let scope = if seed.is_multiple_of(2) { None } else { Some(ids[..2].to_vec()) };
    let allowed = scope.clone().unwrap_or(ids);
    let n = 6;
    let x = Matrix::uniform(&mut rng, n, dims[0], -1.5, 1.5).unwrap();
    let y = (0..n).map(|_| allowed[rng.below(allowed.len())]).collect();
    Instance { net, data: Dataset::new(x, y).unwrap(), scope }
}

fn loss(net: &Network, data: &Dataset, scope: Option<&[usize]>) -> f64 {
    let (_, cache) = net.forward(&data.x).unwrap();
    net.backward(&cache, &data.y, scope).unwrap().0
}

fn with_adapter(net: &Network, k: usize, a: &Matrix, b: &Matrix) -> Network {
    let mut layers = net.layers().to_vec();
    layers[k] = LoraLinear::from_parts(layers[k].weight().clone(), a.clone(), b.clone()).unwrap();
    Network::from_parts(layers, net.head().clone(), net.b_init_gain()).unwrap()
}

fn with_head_params(net: &Network, w: &Matrix, b: &Matrix) -> Network {
    net.with_head(Head::from_parts(w.clone(), b.clone(), net.head().class_ids().to_vec()).unwrap()).unwrap()
}

/// The same function with every adapter folded into its base weight.
fn merged(net: &Network) -> Network {
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            let w = l.weight().add(&l.delta_w()).unwrap();
            LoraLinear::from_parts(w, Matrix::zeros(l.d_out(), l.rank()), l.b().clone()).unwrap()
        })
        .collect();
    Network::from_parts(layers, net.head().clone(), net.b_init_gain()).unwrap()
}

fn positive(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    Matrix::uniform(rng, rows, cols, 0.05, 1.0).unwrap()
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for s in 0..FD_INSTANCES as u64 {
        let Instance { net, data, scope } = instance(100 + s);
        let scope = scope.as_deref();
        let (_, cache) = net.forward(&data.x).unwrap();
        let (_, grads) = net.backward(&cache, &data.y, scope).unwrap();
        for (k, layer) in net.layers().iter().enumerate() {
            let (a, b) = (layer.a(), layer.b());
            let fd_a = central_diff(a, |m| loss(&with_adapter(&net, k, m, b), &data, scope));
            let fd_b = central_diff(b, |m| loss(&with_adapter(&net, k, a, m), &data, scope));
            worst = worst.max(rel_err(&grads.layers[k].d_a, &fd_a)).max(rel_err(&grads.layers[k].d_b, &fd_b));
        }
        let (hw, hb) = (net.head().weight(), net.head().bias());
        let fd_w = central_diff(hw, |m| loss(&with_head_params(&net, m, hb), &data, scope));
        let fd_hb = central_diff(hb, |m| loss(&with_head_params(&net, hw, m), &data, scope));
        worst = worst.max(rel_err(&grads.head.d_weight, &fd_w)).max(rel_err(&grads.head.d_bias, &fd_hb));

        let mut rng = RngState::new(500 + s);
        let d_out = 2 + rng.below(7);
        let d_in = 2 + rng.below(7);
        let r = 1 + rng.below(2);
        let a = Matrix::uniform(&mut rng, d_out, r, -1.0, 1.0).unwrap();
        let b = Matrix::uniform(&mut rng, r, d_in, -1.0, 1.0).unwrap();
        let anchor = Matrix::uniform(&mut rng, r, d_in, -1.0, 1.0).unwrap();
        let (fdw, fa, fb) = (positive(&mut rng, d_out, d_in), positive(&mut rng, d_out, r), positive(&mut rng, r, d_in));
        let lambda = 0.5 + rng.next_f64() * 2.0;

        let p = penalty_deltaw(&a, &b, &fdw, lambda).unwrap();
        let fd_a = central_diff(&a, |m| penalty_deltaw(m, &b, &fdw, lambda).unwrap().value);
        let fd_b = central_diff(&b, |m| penalty_deltaw(&a, m, &fdw, lambda).unwrap().value);
        worst = worst.max(rel_err(&p.grad_a, &fd_a)).max(rel_err(&p.grad_b, &fd_b));

        let p = penalty_precomputed(&a, &b, &fdw, lambda).unwrap();
        let fd_a = central_diff(&a, |m| penalty_precomputed(m, &b, &fdw, lambda).unwrap().value);
        let fd_b = central_diff(&b, |m| penalty_precomputed(&a, m, &fdw, lambda).unwrap().value);
        worst = worst.max(rel_err(&p.grad_a, &fd_a)).max(rel_err(&p.grad_b, &fd_b));

        let p = penalty_separate(&a, &b, &anchor, &fa, &fb, lambda).unwrap();
        let fd_a = central_diff(&a, |m| penalty_separate(m, &b, &anchor, &fa, &fb, lambda).unwrap().value);
        let fd_b = central_diff(&b, |m| penalty_separate(&a, m, &anchor, &fa, &fb, lambda).unwrap().value);
        worst = worst.max(rel_err(&p.grad_a, &fd_a)).max(rel_err(&p.grad_b, &fd_b));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= FD_REL_TOL && elapsed < BUDGET_GRADIENTS,
        format!("{FD_INSTANCES} instances, worst relative error {worst:.2e} (tol {FD_REL_TOL:e}), {elapsed:.1?}"),
    )
}

fn c2_identity() -> Outcome {
    let (mut worst_grad, mut worst_chain, mut worst_fisher) = (0.0f64, 0.0f64, 0.0f64);
    for s in 0..FD_INSTANCES as u64 {
        let Instance { net, data, scope } = instance(200 + s);
        let scope = scope.as_deref();
        let flat = merged(&net);
        let (_, c1) = net.forward(&data.x).unwrap();
        let (_, g1) = net.backward(&c1, &data.y, scope).unwrap();
        let (_, c2) = flat.forward(&data.x).unwrap();
        let (_, g2) = flat.backward(&c2, &data.y, scope).unwrap();
        for ((l1, l2), layer) in g1.layers.iter().zip(&g2.layers).zip(net.layers()) {
            let scale = max_abs(&l1.d_delta_w).max(1.0);
            worst_grad = worst_grad.max(max_diff(&l1.d_delta_w, &l2.d_delta_w) / scale);
            // dA = dΔW Bᵀ and dB = Aᵀ dΔW
            let via_a = l1.d_delta_w.matmul_t(layer.b()).unwrap();
            let via_b = layer.a().t_matmul(&l1.d_delta_w).unwrap();
            worst_chain = worst_chain.max(max_diff(&via_a, &l1.d_a) / scale).max(max_diff(&via_b, &l1.d_b) / scale);
        }
        let f1 = estimate(&net, &data, EstimatorKind::Empirical, scope, &mut RngState::new(0)).unwrap();
        let f2 = estimate(&flat, &data, EstimatorKind::Empirical, scope, &mut RngState::new(0)).unwrap();
        for (a, b) in f1.layers.iter().zip(&f2.layers) {
            worst_fisher = worst_fisher.max(max_diff(&a.delta_w, &b.delta_w) / max_abs(&a.delta_w).max(1e-300));
        }
    }
    let pass = worst_grad <= IDENTITY_TOL && worst_chain <= IDENTITY_TOL && worst_fisher <= IDENTITY_TOL;
    outcome(
        pass,
        format!("dΔW vs dW(merged) {worst_grad:.1e}, chain rule {worst_chain:.1e}, Fisher {worst_fisher:.1e} (tol {IDENTITY_TOL:e})"),
    )
}

fn c3_divergence() -> Outcome {
    let fraction = divergence_witness(&mut RngState::new(3), (8, 8, 2), 1000).unwrap();
    let mut rng = RngState::new(33);
    let a = Matrix::uniform(&mut rng, 8, 2, -1.0, 1.0).unwrap();
    let b = Matrix::uniform(&mut rng, 2, 8, -1.0, 1.0).unwrap();
    let anchor = Matrix::zeros(2, 8);
    let (fdw, fa, fb) = (positive(&mut rng, 8, 8), positive(&mut rng, 8, 2), positive(&mut rng, 2, 8));
    let (a2, b2) = (a.scale(2.0), b.scale(0.5));
    let dw = (penalty_deltaw(&a, &b, &fdw, 1.0).unwrap().value, penalty_deltaw(&a2, &b2, &fdw, 1.0).unwrap().value);
    let sep = (
        penalty_separate(&a, &b, &anchor, &fa, &fb, 1.0).unwrap().value,
        penalty_separate(&a2, &b2, &anchor, &fa, &fb, 1.0).unwrap().value,
    );
    let invariant = (dw.0 - dw.1).abs() <= FACTORIZATION_TOL * dw.0.max(1.0);
    let changed = (sep.0 - sep.1).abs() > FACTORIZATION_TOL * sep.0.max(1.0);
    outcome(
        fraction >= WITNESS_MIN && invariant && changed,
        format!(
            "witness {fraction:.3} (min {WITNESS_MIN}); c=2 rescale: ΔW penalty Δ={:.1e}, separate {:.4} -> {:.4}",
            (dw.0 - dw.1).abs(),
            sep.0,
            sep.1
        ),
    )
}

/// Per-sample gradient of `-log p(target)` for every layer's ΔW.
fn sample_grad(net: &Network, data: &Dataset, i: usize, target: usize) -> Vec<Matrix> {
    let one = Dataset::new(
        Matrix::from_vec(1, data.dim(), data.x.row(i).to_vec()).unwrap(),
        vec![target],
    )
    .unwrap();
    let (_, cache) = net.forward(&one.x).unwrap();
    let (_, g) = net.backward(&cache, &one.y, None).unwrap();
    g.layers.into_iter().map(|l| l.d_delta_w).collect()
}

fn c4_oracles() -> Outcome {
    let (mut worst_pen, mut worst_emp, mut worst_exact) = (0.0f64, 0.0f64, 0.0f64);
    for s in 0..FD_INSTANCES as u64 {
        let mut rng = RngState::new(400 + s);
        let (d_out, d_in, r) = (2 + rng.below(7), 2 + rng.below(7), 1 + rng.below(2));
        let a = Matrix::uniform(&mut rng, d_out, r, -1.0, 1.0).unwrap();
        let b = Matrix::uniform(&mut rng, r, d_in, -1.0, 1.0).unwrap();
        let f = positive(&mut rng, d_out, d_in);
        let lambda = 3.0;
        let mut looped = 0.0;
        for i in 0..d_out {
            for j in 0..d_in {
                let dw: f64 = (0..r).map(|k| a.get(i, k) * b.get(k, j)).sum();
                looped += f.get(i, j) * dw * dw;
            }
        }
        looped *= lambda / 2.0;
        let value = penalty_deltaw(&a, &b, &f, lambda).unwrap().value;
        worst_pen = worst_pen.max((value - looped).abs() / looped.max(1.0));

        let Instance { net, data, .. } = instance(400 + s);
        let n = data.len();
        let emp = estimate(&net, &data, EstimatorKind::Empirical, None, &mut RngState::new(0)).unwrap();
        let exact = estimate(&net, &data, EstimatorKind::Exact, None, &mut RngState::new(0)).unwrap();
        let classes = net.head().class_ids().to_vec();
        let (logits, _) = net.forward(&data.x).unwrap();
        let shapes: Vec<(usize, usize)> = net.layers().iter().map(|l| (l.d_out(), l.d_in())).collect();
        let mut emp_loop: Vec<Matrix> = shapes.iter().map(|&(o, i)| Matrix::zeros(o, i)).collect();
        let mut exact_loop = emp_loop.clone();
        for i in 0..n {
            for (acc, g) in emp_loop.iter_mut().zip(sample_grad(&net, &data, i, data.y[i])) {
                acc.add_assign(&g.hadamard(&g).unwrap()).unwrap();
            }
            let row: Vec<f64> = (0..classes.len()).map(|c| logits.get(i, c)).collect();
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
            for (c, &class) in classes.iter().enumerate() {
                let p = (row[c] - top).exp() / z;
                for (acc, g) in exact_loop.iter_mut().zip(sample_grad(&net, &data, i, class)) {
                    acc.add_assign(&g.hadamard(&g).unwrap().scale(p)).unwrap();
                }
            }
        }
        for k in 0..shapes.len() {
            worst_emp = worst_emp.max(max_diff(&emp.layers[k].delta_w, &emp_loop[k].scale(1.0 / n as f64)));
            worst_exact = worst_exact.max(max_diff(&exact.layers[k].delta_w, &exact_loop[k].scale(1.0 / n as f64)));
        }
    }
    outcome(
        worst_pen <= PENALTY_LOOP_TOL && worst_emp <= FISHER_LOOP_TOL && worst_exact <= FISHER_LOOP_TOL,
        format!("penalty loop {worst_pen:.1e} (tol {PENALTY_LOOP_TOL:e}), empirical {worst_emp:.1e}, exact {worst_exact:.1e} (tol {FISHER_LOOP_TOL:e})"),
    )
}

fn small_stream(seed: u64) -> TaskStream {
    gen_gaussian_stream(&GaussianStreamSpec {
        num_tasks: 3,
        classes_per_task: 2,
        dim: 6,
        n_train: 30,
        n_test: 20,
        pretrain_classes: 4,
        seed,
        ..GaussianStreamSpec::default()
    })
    .unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig { hidden: vec![8], rank: 2, epochs: 3, batch_size: 16, pretrain_epochs: 3, lambda: 50.0, seed, ..TrainConfig::default() }
}

fn random_fisher(rng: &mut RngState, shapes: &[(usize, usize)]) -> FisherDiag {
    FisherDiag {
        layers: shapes
            .iter()
            .map(|&(o, i)| LayerFisher { delta_w: positive(rng, o, i), a: None, b: None })
            .collect(),
    }
}

fn c5_algorithm() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let stream = small_stream(1);
    let config = small_config(1);
    let mut net = base_network(&config, &stream).unwrap();
    let before: Vec<Matrix> = net.layers().iter().map(|l| l.weight().clone()).collect();
    let mut rng = RngState::new(2);
    net.expand_head(&stream.tasks[0].class_ids, &mut rng).unwrap();
    let fisher = random_fisher(&mut rng, &net.layers().iter().map(|l| (l.d_out(), l.d_in())).collect::<Vec<_>>());
    train_task(&mut net, &stream.tasks[0].train, Some(&fisher), None, &config, &mut rng).unwrap();
    let frozen = net.layers().iter().zip(&before).all(|(l, w)| l.weight() == w);
    pass &= frozen;
    notes.push(format!("frozen base {frozen}"));

    let mut worst_merge = 0.0f64;
    for s in 0..FD_INSTANCES as u64 {
        let Instance { mut net, data, .. } = instance(600 + s);
        let (pre, _) = net.forward(&data.x).unwrap();
        net.merge_and_reset(&mut RngState::new(s)).unwrap();
        let (post, _) = net.forward(&data.x).unwrap();
        worst_merge = worst_merge.max(max_diff(&pre, &post));
    }
    pass &= worst_merge <= MERGE_TOL;
    notes.push(format!("merge {worst_merge:.1e}"));

    let mut rng = RngState::new(7);
    let shapes = [(5, 4), (3, 5)];
    let (cum, f_t) = (random_fisher(&mut rng, &shapes), random_fisher(&mut rng, &shapes));
    let zero = cum.accumulate(&f_t, 0.0).unwrap() == f_t;
    let summed = cum.accumulate(&f_t, 1.0).unwrap();
    let sum_exact = summed.layers.iter().zip(cum.layers.iter().zip(&f_t.layers)).all(|(s, (c, f))| {
        s.delta_w.as_slice().iter().zip(c.delta_w.as_slice().iter().zip(f.delta_w.as_slice())).all(|(s, (c, f))| *s == c + f)
    });
    pass &= zero && sum_exact;
    notes.push(format!("γ=0 identity {zero}, γ=1 sum {sum_exact}"));

    let base = base_network(&config, &stream).unwrap();
    let mut learner = ContinualLearner::new(&config, base, None).unwrap();
    let mut two_state = true;
    for task in &stream.tasks {
        let owned = task.clone();
        learner.learn_task(&owned).unwrap();
        drop(owned);
        two_state &= learner.retained_state() == RetainedState { networks: 1, fishers: 1, datasets: 0 };
        two_state &= learner.network().layers().iter().all(|l| l.a().is_all_zero());
    }
    pass &= two_state;
    notes.push(format!("two-state retention {two_state}"));
    outcome(pass, notes.join(", "))
}

fn mat(rows: &[&[f64]]) -> AccuracyMatrix {
    AccuracyMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn c6_metrics() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= METRIC_TOL;
    let two = mat(&[&[0.8], &[0.4, 0.9]]);
    let three = mat(&[&[0.9], &[0.6, 0.8], &[0.45, 0.6, 0.7]]);
    let refs3 = [1.0, 0.8, 0.7];
    // peaks 0.9 and 0.8; forgetting 0.45/0.9 and 0.2/0.8
    let s3 = 1.0 - (0.5 + 0.25) / 2.0;
    // diagonal over references: 0.9, 1, 1
    let p3 = (0.9 + 1.0 + 1.0) / 3.0;
    let t3 = 2.0 * s3 * p3 / (s3 + p3);
    let metric_ok = close(stability(&two).unwrap(), 0.5)
        && close(plasticity(&two, &[0.8, 0.9]).unwrap(), 1.0)
        && close(tradeoff(0.5, 1.0).unwrap(), 2.0 / 3.0)
        && close(stability(&three).unwrap(), s3)
        && close(plasticity(&three, &refs3).unwrap(), p3)
        && close(MetricsSummary::compute(&three, Some(&refs3)).unwrap().tradeoff.unwrap(), t3);

    let v = [0.3, -1.0, 2.5, 0.7];
    let w: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
    let rank_ok = spearman(&v, &v).unwrap() == 1.0
        && spearman(&[-1.0, 0.3, 0.7, 2.5], &[2.5, 0.7, 0.3, -1.0]).unwrap() == -1.0
        && spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() == 0.8;
    let cos_ok = cosine_sim(&v, &w).unwrap() == 1.0 && cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap() == 0.0;
    outcome(
        metric_ok && rank_ok && cos_ok,
        format!("S/P/T oracles {metric_ok} (tol {METRIC_TOL:e}), Spearman fixtures {rank_ok}, cosine fixtures {cos_ok}"),
    )
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, lambda: DESK_LAMBDA, ..TrainConfig::default() }
}

fn standard_stream(seed: u64) -> TaskStream {
    gen_gaussian_stream(&GaussianStreamSpec { seed, ..GaussianStreamSpec::default() }).unwrap()
}

/// Per-seed metrics for criteria 7 and 9.
struct StrategyRun {
    none: MetricsSummary,
    others: Vec<MetricsSummary>,
    deltaw: MetricsSummary,
    separate: MetricsSummary,
    deltaw_gamma0: MetricsSummary,
}

fn strategy_runs() -> (Vec<StrategyRun>, Duration) {
    let start = Instant::now();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let stream = standard_stream(seed);
            let cfg = desk_config(seed);
            let base = base_network(&cfg, &stream).unwrap();
            let refs = run_references(&cfg, &stream, &base).unwrap();
            let run = |c: TrainConfig| {
                MetricsSummary::compute(&run_continual_from(&c, &stream, &base).unwrap().accuracy, Some(&refs)).unwrap()
            };
            let with = |s: Strategy| run(TrainConfig { strategy: s, ..cfg.clone() });
            let deltaw = with(Strategy::DeltaW);
            let separate = with(Strategy::SeparateAB);
            let precomputed = with(Strategy::PrecomputedDataset);
            StrategyRun {
                none: with(Strategy::None),
                others: vec![deltaw.clone(), separate.clone(), precomputed],
                deltaw,
                separate,
                deltaw_gamma0: run(TrainConfig { gamma: 0.0, ..cfg.clone() }),
            }
        })
        .collect();
    (runs, start.elapsed())
}

fn c7_strategies(runs: &[StrategyRun], elapsed: Duration) -> Outcome {
    let count = |f: &dyn Fn(&StrategyRun) -> bool| runs.iter().filter(|r| f(r)).count();
    let stab = count(&|r| r.deltaw.stability > r.none.stability);
    let gain = count(&|r| r.deltaw.final_acc >= r.none.final_acc + 0.05);
    let plast = count(&|r| r.others.iter().all(|o| o.plasticity < r.none.plasticity));
    let vs_sep = count(&|r| r.deltaw.final_acc >= r.separate.final_acc);
    outcome(
        stab == 5 && gain >= 4 && plast == 5 && vs_sep >= 3 && elapsed < BUDGET_STRATEGIES,
        format!(
            "λ={DESK_LAMBDA}: S(ΔW)>S(none) {stab}/5, final +5pt {gain}/5, P(none) max {plast}/5, ΔW>=separate {vs_sep}/5, {elapsed:.1?}"
        ),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn c8_lambda() -> Outcome {
    let start = Instant::now();
    let mut stab = vec![Vec::new(); LAMBDA_GRID.len()];
    let mut plast = vec![Vec::new(); LAMBDA_GRID.len()];
    for &seed in &SEEDS {
        let stream = standard_stream(seed);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let base = base_network(&cfg, &stream).unwrap();
        let refs = run_references(&cfg, &stream, &base).unwrap();
        for (k, &lambda) in LAMBDA_GRID.iter().enumerate() {
            let rec = run_continual_from(&TrainConfig { lambda, ..cfg.clone() }, &stream, &base).unwrap();
            let m = MetricsSummary::compute(&rec.accuracy, Some(&refs)).unwrap();
            stab[k].push(m.stability.unwrap());
            plast[k].push(m.plasticity.unwrap());
        }
    }
    let med_s: Vec<f64> = stab.iter_mut().map(|v| median(v)).collect();
    let med_p: Vec<f64> = plast.iter_mut().map(|v| median(v)).collect();
    let index: Vec<f64> = (0..LAMBDA_GRID.len()).map(|k| k as f64).collect();
    let rho_s = spearman(&index, &med_s).unwrap_or(f64::NAN);
    let rho_p = spearman(&index, &med_p).unwrap_or(f64::NAN);
    let elapsed = start.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        rho_s >= TREND_MIN && rho_p <= -TREND_MIN && elapsed < BUDGET_LAMBDA,
        format!(
            "median S [{}] ρ={rho_s:.3}, median P [{}] ρ={rho_p:.3} (need ±{TREND_MIN}), {elapsed:.1?}",
            fmt(&med_s),
            fmt(&med_p)
        ),
    )
}

fn c9_gamma(runs: &[StrategyRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.deltaw_gamma0.stability < r.deltaw.stability).count();
    outcome(wins >= 4, format!("λ={DESK_LAMBDA}: S(γ=0) < S(γ=0.9) in {wins}/5 seeds"))
}

fn rows_for(rows: &[DriftRow], regime: Regime, task: usize) -> Vec<&DriftRow> {
    rows.iter().filter(|r| r.regime == regime && r.task_data == task).collect()
}

fn c10_drift() -> Outcome {
    let (mut self_exact, mut monotone, mut rehearsal) = (true, 0, 0);
    for &seed in &SEEDS {
        let stream = standard_stream(seed);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let (_, rows) = track_fisher_drift_regimes(&cfg, &stream, &DRIFT_TRACKED, &Regime::BOTH).unwrap();
        self_exact &= rows
            .iter()
            .filter(|r| r.task_trained == r.task_data)
            .all(|r| r.norm_ratio == 1.0 && r.spearman == 1.0 && r.cosine == 1.0);
        let oldest = rows_for(&rows, Regime::RehearsalFree, DRIFT_TRACKED[0]);
        if oldest.windows(2).all(|w| w[1].cosine <= w[0].cosine) {
            monotone += 1;
        }
        let last = stream.num_tasks() - 1;
        let at_end = |regime: Regime, i: usize| {
            rows_for(&rows, regime, i).into_iter().find(|r| r.task_trained == last).unwrap().cosine
        };
        if DRIFT_TRACKED.iter().all(|&i| at_end(Regime::RehearsalBased, i) >= at_end(Regime::RehearsalFree, i)) {
            rehearsal += 1;
        }
    }
    outcome(
        self_exact && monotone >= 4 && rehearsal >= 4,
        format!(
            "self rows exact {self_exact}, rehearsal-free cosine non-increasing (task 0) {monotone}/5, rehearsal-based >= rehearsal-free at final step {rehearsal}/5"
        ),
    )
}

fn c11_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let cfg = ExperimentConfig::default();
    for d in &dirs {
        cmd_run(&cfg, d.path()).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("accuracy_matrix.csv")).unwrap();
    let (a, b) = (read(&dirs[0]), read(&dirs[1]));
    outcome(!a.is_empty() && a == b, format!("two cmd_run invocations, {} bytes, identical {}", a.len(), a == b))
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut record = |id: u8, name: &'static str, o: Outcome| {
        println!("{} [{id:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "gradient correctness", c1_gradients());
    record(2, "ΔW gradient identity", c2_identity());
    record(3, "factor-space divergence", c3_divergence());
    record(4, "penalty and Fisher oracles", c4_oracles());
    record(5, "continual loop semantics", c5_algorithm());
    record(6, "metric oracles", c6_metrics());
    let (runs, elapsed) = strategy_runs();
    record(7, "strategy ordering", c7_strategies(&runs, elapsed));
    record(8, "λ trade-off trend", c8_lambda());
    record(9, "γ effect", c9_gamma(&runs));
    record(10, "Fisher drift trends", c10_drift());
    record(11, "determinism", c11_determinism());

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
