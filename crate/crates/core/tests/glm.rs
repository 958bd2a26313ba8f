use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use screening_core::applicant::{Provenance, TrainingRow, TrainingSet};
use screening_core::glm::{
    balanced_subsample, build_precision_state, confusion_at_k, exploration_bonus, fit_fixed_penalty, log_loss_gradient,
    logistic, logit, mean_log_loss, penalized_objective, roc_auc, ucb_score, BonusParams, Confusion, Design,
    FitOptions, FittedGLM, PrecisionState, Ridge,
};

fn training_set(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> TrainingSet {
    TrainingSet::from_rows(
        rows.into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (features, label))| TrainingRow {
                applicant_id: i as u64,
                features,
                label,
                provenance: Provenance::Initial,
            })
            .collect(),
    )
}

fn planted(n: usize, theta: &[f64], seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = theta.len() - 1;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let labels = rows
        .iter()
        .map(|x| {
            let eta = theta[0] + x.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>();
            rng.random_bool(logistic(eta))
        })
        .collect();
    (rows, labels)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Unpenalized maximum likelihood by Newton-Raphson on the full log-likelihood.
fn newton_oracle(rows: &[Vec<f64>], labels: &[bool]) -> Vec<f64> {
    let n = rows.len();
    let p = rows[0].len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let y = DVector::from_iterator(n, labels.iter().map(|&l| f64::from(u8::from(l))));
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let eta = &x * &beta;
        let mu = eta.map(logistic);
        let w = mu.map(|m| m * (1.0 - m));
        let grad = x.transpose() * (&y - &mu);
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]);
        let hess = x.transpose() * xw;
        let step = hess.cholesky().expect("Hessian is positive definite").solve(&grad);
        beta += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    beta.iter().copied().collect()
}

#[test]
fn gradient_matches_central_differences() {
    let (rows, labels) = planted(300, &[-0.3, 0.8, -0.5, 0.2, 0.0], 11);
    let design = Design::new(&rows, &labels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-5;
    for _ in 0..100 {
        let theta: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = log_loss_gradient(&design, &theta);
        let fd: Vec<f64> = (0..theta.len())
            .map(|j| {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[j] += h;
                down[j] -= h;
                (mean_log_loss(&design, &up) - mean_log_loss(&design, &down)) / (2.0 * h)
            })
            .collect();
        let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(err / scale < 1e-6, "relative error {} at {theta:?}", err / scale);
    }
}

#[test]
fn infinite_penalty_limit_is_the_null_model() {
    let (rows, labels) = planted(2000, &[-1.0, 0.9, -0.4, 0.3], 13);
    let data = training_set(rows, labels);
    let m = fit_fixed_penalty(&data, 1e8, &FitOptions::default()).unwrap();
    assert!(m.theta[1..].iter().all(|&v| v == 0.0), "{:?}", m.theta);
    let mean = data.positives() as f64 / data.len() as f64;
    assert!((m.theta[0] - logit(mean)).abs() < 1e-4);
}

#[test]
fn planted_coefficients_are_recovered_and_agree_with_newton() {
    let theta_star = [-0.4, 1.0, -0.7, 0.5, 0.25, 0.0];
    let (rows, labels) = planted(5000, &theta_star, 14);
    let oracle = newton_oracle(&rows, &labels);
    let data = training_set(rows, labels);
    let m = fit_fixed_penalty(&data, 1e-4, &FitOptions::default()).unwrap();
    assert!(m.diagnostics.converged);
    assert!(max_abs_diff(&m.theta, &theta_star) < 0.15, "{:?}", m.theta);
    assert!(max_abs_diff(&m.theta, &oracle) < 0.05, "fit {:?} oracle {oracle:?}", m.theta);
}

#[test]
fn returned_point_beats_single_coordinate_perturbations() {
    let (rows, labels) = planted(800, &[0.3, 1.2, -0.9, 0.0, 0.4], 15);
    let design = Design::new(&rows, &labels).unwrap();
    let data = training_set(rows, labels);
    for lambda in [1e-4, 1e-2, 0.1] {
        let m = fit_fixed_penalty(&data, lambda, &FitOptions::default()).unwrap();
        let f0 = penalized_objective(&design, &m.theta, lambda);
        for j in 0..m.theta.len() {
            for delta in [-0.01, 0.01] {
                let mut t = m.theta.clone();
                t[j] += delta;
                assert!(penalized_objective(&design, &t, lambda) >= f0, "lambda {lambda} coordinate {j}");
            }
        }
    }
}

#[test]
fn balanced_subsample_counts() {
    let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
    let b = balanced_subsample(&training_set(rows, (0..100).map(|i| i % 10 == 3).collect()), 5).unwrap();
    assert_eq!((b.len(), b.positives()), (20, 10));

    let rows: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64]).collect();
    let b = balanced_subsample(&training_set(rows, (0..1000).map(|i| i < 90).collect()), 6).unwrap();
    assert_eq!((b.len(), b.positives()), (180, 90));
}

#[test]
fn prediction_examples() {
    let m = FittedGLM::from_theta(vec![0.5, 1.0, -1.0]);
    let p = m.predict_probability(&[2.0, 1.0]).unwrap();
    assert!((p - 0.8176).abs() < 5e-5);
    assert_eq!(p, 1.0 / (1.0 + (-1.5f64).exp()));
    assert_eq!(m.predict_probability(&[0.0, 0.0]).unwrap(), logistic(0.5));
    assert!(m.predict_probability(&[1.0]).is_err());
    assert_eq!(FittedGLM::from_theta(vec![0.0; 4]).predict_probability(&[3.0, -1.0, 7.0]).unwrap(), 0.5);
}

fn precision(rows: &[Vec<f64>], ridge: f64) -> PrecisionState {
    build_precision_state(rows.iter().map(Vec::as_slice), Ridge::Fixed(ridge)).unwrap()
}

#[test]
fn precision_examples() {
    let ridge = 1e-3;
    let x1 = [1.0, -2.0, 0.5];
    let x2 = [3.0, 1.0, -0.5];
    let s = precision(&[x1.to_vec(), x2.to_vec()], ridge);
    for a in 0..3 {
        for b in 0..3 {
            let expected = 0.5 * (x1[a] - x2[a]) * (x1[b] - x2[b]) + if a == b { ridge } else { 0.0 };
            assert!((s.v_matrix()[(a, b)] - expected).abs() < 1e-12);
        }
    }

    let s = precision(&vec![vec![0.3, -1.0]; 5], ridge);
    assert_eq!(s.v_matrix(), &(DMatrix::identity(2, 2) * ridge));

    let s = precision(&[vec![-1.0], vec![0.0], vec![1.0]], ridge);
    assert_eq!(s.x_bar(), &[0.0]);
    assert_eq!(s.v_matrix()[(0, 0)], 2.0 + ridge);

    assert!(build_precision_state([[1.0].as_slice()], Ridge::Fixed(ridge)).is_err());
}

#[test]
fn bonus_examples() {
    let s = PrecisionState::from_parts(DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])), vec![1.0, -1.0], 0.0, 10)
        .unwrap();
    let b = exploration_bonus(&s, &[3.0, 2.0]).unwrap();
    assert!((b - 10f64.sqrt()).abs() < 1e-12);
    assert!((b - 3.1623).abs() < 5e-5);
    assert_eq!(exploration_bonus(&s, &[1.0, -1.0]).unwrap(), 0.0);

    let null = FittedGLM::from_theta(vec![0.0; 3]);
    let u = ucb_score(&null, &s, &BonusParams { alpha: 1.96 }, &[3.0, 2.0]).unwrap();
    assert!((u - (0.5 + 1.96 * 10f64.sqrt())).abs() < 1e-12);
    assert!((u - 6.698).abs() < 5e-4);
    assert_eq!(ucb_score(&null, &s, &BonusParams { alpha: 0.0 }, &[3.0, 2.0]).unwrap(), 0.5);
    assert_eq!(ucb_score(&null, &s, &BonusParams { alpha: 5.0 }, &[1.0, -1.0]).unwrap(), 0.5);
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (twice as f64 / 2.0) / pairs as f64
}

#[test]
fn auc_matches_pairwise_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for case in 0..500 {
        let n = rng.random_range(2..=1000);
        // Coarse scores on half the instances so ties are common.
        let levels = if case % 2 == 0 { 20.0 } else { 1e9 };
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels), "case {case}");
    }
}

#[test]
fn auc_and_confusion_examples() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.75);
    assert_eq!(roc_auc(&[0.3; 4], &labels).unwrap(), 0.5);
    assert!(roc_auc(&scores, &[true; 4]).is_err());

    assert_eq!(confusion_at_k(&scores, &labels, 2).unwrap(), Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
    assert_eq!(confusion_at_k(&scores, &labels, 1).unwrap(), Confusion { tp: 1, fp: 0, fn_: 1, tn: 2 });
    assert_eq!(confusion_at_k(&scores, &labels, 4).unwrap(), Confusion { tp: 2, fp: 2, fn_: 0, tn: 0 });
    assert!(confusion_at_k(&scores, &labels, 0).is_err());
}

#[test]
fn confusion_matches_enumeration_of_top_k() {
    let scores = [0.5, 0.9, 0.5, 0.1, 0.7, 0.5];
    let labels = [true, false, false, true, true, false];
    // Descending score, ties by ascending index: 1, 4, 0, 2, 5, 3.
    let order = [1usize, 4, 0, 2, 5, 3];
    for k in 1..=scores.len() {
        let mut expected = Confusion::default();
        for (rank, &i) in order.iter().enumerate() {
            match (rank < k, labels[i]) {
                (true, true) => expected.tp += 1,
                (true, false) => expected.fp += 1,
                (false, true) => expected.fn_ += 1,
                (false, false) => expected.tn += 1,
            }
        }
        assert_eq!(confusion_at_k(&scores, &labels, k).unwrap(), expected, "k = {k}");
    }
}

fn small_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..5).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 3..30))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bonus_is_nonnegative_homogeneous_and_zero_at_mean(rows in small_rows(), u in prop::collection::vec(-2.0f64..2.0, 4)) {
        let s = build_precision_state(rows.iter().map(Vec::as_slice), Ridge::TraceScaled(1e-6)).unwrap();
        let d = s.dim();
        let dir = &u[..d];
        let at = |t: f64| -> Vec<f64> { s.x_bar().iter().zip(dir).map(|(m, v)| m + t * v).collect() };
        let b1 = exploration_bonus(&s, &at(1.0)).unwrap();
        let b2 = exploration_bonus(&s, &at(2.0)).unwrap();
        prop_assert!(b1 >= 0.0);
        prop_assert!((b2 - 2.0 * b1).abs() <= 1e-9 * b1.max(1.0));
        prop_assert!(exploration_bonus(&s, &at(0.0)).unwrap() <= 1e-9);
        for r in &rows {
            prop_assert!(exploration_bonus(&s, r).unwrap() >= 0.0);
        }
    }

    #[test]
    fn ucb_never_falls_below_the_belief(rows in small_rows(), alpha in 0.0f64..5.0, seed in 0u64..1000) {
        let s = build_precision_state(rows.iter().map(Vec::as_slice), Ridge::TraceScaled(1e-6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..=s.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = FittedGLM::from_theta(theta);
        let params = BonusParams { alpha };
        for r in &rows {
            prop_assert!(ucb_score(&m, &s, &params, r).unwrap() >= m.predict_probability(r).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shrinkage_is_monotone_in_the_penalty(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (rows, labels) = planted(600, &theta, seed);
        let data = training_set(rows, labels);
        let Ok(balanced) = balanced_subsample(&data, seed) else { return Ok(()) };
        let mut prev: Option<Vec<f64>> = None;
        for lambda in [1e-4, 1e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0] {
            let m = fit_fixed_penalty(&balanced, lambda, &FitOptions::default()).unwrap();
            if let Some(p) = &prev {
                for j in 1..m.theta.len() {
                    prop_assert!(m.theta[j].abs() <= p[j].abs() + 1e-7, "lambda {} coefficient {}", lambda, j);
                }
            }
            prev = Some(m.theta);
        }
    }
}
