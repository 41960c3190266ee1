mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use specmoment_core::hmm::{exact_stats, sample_triplets, true_joint_prob};
use specmoment_core::inference::joint_prob;
use specmoment_core::mest::{
    alt_min, fit, fit_from_stats, grad, init_from_spectral, init_random, loss, penalty_scale, smooth_loss,
    solve_r_given_s, solve_s_given_r, Which,
};
use specmoment_core::moments::estimate_stats;
use specmoment_core::spectral::{fit_frobenius, fit_hsu};
use specmoment_core::{FactorPair, FitConfig, ObservableStats, TripletMode, WeightMatrix};

fn row_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])))
}

/// Design of `vec(R_x S_x^T P21)` in `vec(R_x)`, both row-major, built entry by entry.
fn r_design(s: &DMatrix<f64>, p21: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = s.shape();
    DMatrix::from_fn(n * n, n * k, |row, col| {
        let (i, j) = (row / n, row % n);
        let (a, w) = (col / k, col % k);
        if a != i {
            return 0.0;
        }
        (0..n).map(|v| s[(v, w)] * p21[(v, j)]).sum()
    })
}

/// Cyclic coordinate descent for `||y - A z||^2 + tau ||z||_1`.
fn lasso_cd(a: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> DVector<f64> {
    let p = a.ncols();
    let mut z = DVector::zeros(p);
    let col_sq: Vec<f64> = (0..p).map(|c| a.column(c).norm_squared()).collect();
    for _ in 0..200_000 {
        let mut delta: f64 = 0.0;
        for c in 0..p {
            if col_sq[c] == 0.0 {
                continue;
            }
            let r = y - a * &z + a.column(c) * z[c];
            let rho = a.column(c).dot(&r);
            let new = if rho > tau / 2.0 {
                (rho - tau / 2.0) / col_sq[c]
            } else if rho < -tau / 2.0 {
                (rho + tau / 2.0) / col_sq[c]
            } else {
                0.0
            };
            delta = delta.max((new - z[c]).abs());
            z[c] = new;
        }
        if delta < 1e-15 {
            break;
        }
    }
    z
}

fn stats_and_factors(n: usize, k: usize, seed: u64) -> (ObservableStats, FactorPair) {
    let model = random_model(n, 3.min(n), seed);
    (sampled_stats(&model, 500, seed + 1), FactorPair::random(n, k, 0.6, seed + 2).unwrap())
}

#[test]
fn penalized_r_step_matches_coordinate_descent() {
    let cfg = FitConfig { inner_tol: 1e-15, inner_max_iters: 20_000, ..Default::default() };
    for seed in 0..3u64 {
        let (stats, f) = stats_and_factors(3, 2, 50 + seed);
        let (lambda, n_samples) = (0.01, 100);
        let tau = penalty_scale(lambda, n_samples);
        let w = WeightMatrix::identity(3);
        let step = solve_r_given_s(&f, &w, &stats, lambda, n_samples, &cfg).unwrap();
        for x in 0..3 {
            let a = r_design(&f.s[x], &stats.p21);
            let y = row_major(&stats.p3[x]);
            let z = lasso_cd(&a, &y, tau);
            let objective = |z: &DVector<f64>| (&y - &a * z).norm_squared() + tau * z.abs().sum();
            let ours = row_major(&step.mats[x]);
            assert!((objective(&ours) - objective(&z)).abs() < 1e-6 * objective(&z).max(1e-12));
            assert!((ours - z).amax() < 1e-6);
        }
    }
}

#[test]
fn unpenalized_r_step_is_ordinary_least_squares() {
    let (stats, _) = stats_and_factors(3, 3, 60);
    let eye = DMatrix::identity(3, 3);
    let f = FactorPair::new(vec![DMatrix::zeros(3, 3); 3], vec![eye; 3]).unwrap();
    let step = solve_r_given_s(&f, &WeightMatrix::identity(3), &stats, 0.0, 500, &FitConfig::default()).unwrap();
    let inv = stats.p21.clone().try_inverse().unwrap();
    for x in 0..3 {
        assert!((&step.mats[x] - &stats.p3[x] * &inv).amax() < 1e-9);
    }
    assert!(step.ridged_blocks.is_empty());
}

#[test]
fn huge_penalty_zeroes_r() {
    let (stats, f) = stats_and_factors(3, 2, 70);
    let w = random_weight(3, 70);
    let n_samples = 100;
    let g0 = grad(&FactorPair { r: vec![DMatrix::zeros(3, 2); 3], s: f.s.clone() }, &w, &stats, 0.0, n_samples, Which::R, false)
        .unwrap();
    let gmax = g0.iter().map(|m| m.amax()).fold(0.0, f64::max);
    let lambda = 1e3 * gmax * (n_samples as f64).sqrt();
    let step = solve_r_given_s(&f, &w, &stats, lambda, n_samples, &FitConfig::default()).unwrap();
    assert!(step.mats.iter().all(|m| m.iter().all(|&v| v == 0.0)));
}

#[test]
fn s_step_reaches_stationarity() {
    for seed in 0..4u64 {
        let (stats, f) = stats_and_factors(3, 2, 80 + seed);
        let w = random_weight(3, 80 + seed);
        let before = grad(&f, &w, &stats, 0.0, 1, Which::S, false).unwrap();
        let step = solve_s_given_r(&f, &w, &stats).unwrap();
        let g = FactorPair { r: f.r.clone(), s: step.mats };
        let after = grad(&g, &w, &stats, 0.0, 1, Which::S, false).unwrap();
        let norm = |v: &[DMatrix<f64>]| v.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
        assert!(norm(&after) < 1e-8 * (1.0 + norm(&before)));
        assert!(smooth_loss(&g, &w, &stats).unwrap() <= smooth_loss(&f, &w, &stats).unwrap() + 1e-12);
    }
}

#[test]
fn s_step_keeps_an_optimal_s() {
    let (_, stats) = population(3, 3, 90);
    let f = init_from_spectral(&fit_frobenius(&stats, 3).unwrap(), 3).unwrap();
    let step = solve_s_given_r(&f, &WeightMatrix::identity(3), &stats).unwrap();
    for x in 0..3 {
        assert!((&step.mats[x] - &f.s[x]).amax() < 1e-9);
    }
}

/// Weighted least squares over every symbol at once with the dense
/// block-diagonal weight.
#[test]
fn block_solves_equal_the_joint_solve() {
    let n = 3;
    let k = 2;
    let (stats, f) = stats_and_factors(n, k, 100);
    let w = random_weight(n, 100);
    let step = solve_r_given_s(&f, &w, &stats, 0.0, 100, &FitConfig::default()).unwrap();
    let rows = n * n * n;
    let cols = n * n * k;
    let mut a = DMatrix::zeros(rows, cols);
    let mut y = DVector::zeros(rows);
    for x in 0..n {
        a.view_mut((x * n * n, x * n * k), (n * n, n * k)).copy_from(&r_design(&f.s[x], &stats.p21));
        y.rows_mut(x * n * n, n * n).copy_from(&row_major(&stats.p3[x]));
    }
    let dense = w.to_dense();
    let normal = a.transpose() * &dense * &a;
    let rhs = a.transpose() * &dense * &y;
    let z = normal.lu().solve(&rhs).unwrap();
    let joint = DVector::from_iterator(cols, step.mats.iter().flat_map(|m| row_major(m).data.as_vec().clone()));
    assert!((z - joint).amax() < 1e-7);
}

#[test]
fn alternating_losses_never_increase() {
    for seed in 0..6u64 {
        let (stats, f) = stats_and_factors(3, 2, 110 + seed);
        let w = if seed % 2 == 0 { WeightMatrix::identity(3) } else { random_weight(3, seed) };
        let lambda = if seed < 3 { 0.0 } else { 0.05 };
        let cfg = FitConfig { alt_max_iters: 30, ..Default::default() };
        let res = alt_min(&f, &w, &stats, lambda, 200, &cfg).unwrap();
        for pair in res.losses.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-15, "{} -> {}", pair[0], pair[1]);
        }
        assert_eq!(res.losses[0], loss(&f, &w, &stats, lambda, 200).unwrap());
    }
}

#[test]
fn alternating_from_a_root_stops_at_once() {
    let (_, stats) = population(4, 3, 120);
    let f = init_from_spectral(&fit_frobenius(&stats, 3).unwrap(), 3).unwrap();
    let res = alt_min(&f, &WeightMatrix::identity(4), &stats, 0.0, 1, &FitConfig::default()).unwrap();
    assert_eq!(res.iterations(), 1);
    assert!(res.converged);
    assert!(res.final_loss() < 1e-12);
}

#[test]
fn alternating_reaches_the_population_root() {
    let (_, stats) = population(4, 3, 130);
    let init = init_random(4, 3, 0.3, 5).unwrap();
    let cfg = FitConfig { alt_max_iters: 2000, alt_tol: 1e-12, ..Default::default() };
    let res = alt_min(&init, &WeightMatrix::identity(4), &stats, 0.0, 1, &cfg).unwrap();
    assert!(res.final_loss() < 1e-12, "final loss {}", res.final_loss());
}

#[test]
fn soft_threshold_zeros_are_stable() {
    let (stats, f) = stats_and_factors(4, 2, 140);
    let w = WeightMatrix::identity(4);
    let (lambda, n_samples) = (0.2, 50);
    let tau = penalty_scale(lambda, n_samples);
    let cfg = FitConfig { inner_tol: 1e-14, inner_max_iters: 20_000, ..Default::default() };
    let first = solve_r_given_s(&f, &w, &stats, lambda, n_samples, &cfg).unwrap();
    let mid = FactorPair { r: first.mats, s: f.s.clone() };
    let zeros: usize = mid.r.iter().map(|m| m.iter().filter(|&&v| v == 0.0).count()).sum();
    assert!(zeros > 0, "instance should produce exact zeros");
    let g = grad(&mid, &w, &stats, 0.0, n_samples, Which::R, false).unwrap();
    let again = solve_r_given_s(&mid, &w, &stats, lambda, n_samples, &cfg).unwrap();
    for x in 0..4 {
        for (idx, &v) in mid.r[x].iter().enumerate() {
            if v == 0.0 && g[x].as_slice()[idx].abs() <= tau {
                assert_eq!(again.mats[x].as_slice()[idx], 0.0);
            }
        }
    }
}

#[test]
fn one_identity_pass_matches_spectral_probabilities() {
    for seed in 0..4u64 {
        let model = random_model(5, 3, 200 + seed);
        let data = sample_triplets(&model, 2000, TripletMode::Independent, 300 + seed).unwrap();
        let stats = estimate_stats(&data).unwrap();
        let cfg = FitConfig { outer_max_iters: 1, ..Default::default() };
        let (m, _) = fit(&data, &cfg).unwrap();
        let spec = fit_hsu(&stats, 5).unwrap();
        let frob = fit_frobenius(&stats, 5).unwrap();
        for seq in all_sequences(5, 3) {
            let pm = joint_prob(&m, &seq).unwrap();
            assert!((pm - joint_prob(&spec, &seq).unwrap()).abs() < 1e-6);
            assert!((pm - joint_prob(&frob, &seq).unwrap()).abs() < 1e-6);
        }
    }
}

#[test]
fn population_fit_recovers_the_model() {
    let model = random_model(4, 3, 400);
    let stats = exact_stats(&model);
    let cfg = FitConfig { rank: Some(3), ..Default::default() };
    let (params, trace) = fit_from_stats(&stats, None, &cfg).unwrap();
    for seq in all_sequences(4, 3) {
        let p = joint_prob(&params, &seq).unwrap();
        assert!((p - true_joint_prob(&model, &seq).unwrap()).abs() < 1e-6);
    }
    assert!(trace.final_loss() < 1e-10);
    assert_eq!(trace.chosen_records().count(), 1);
}

#[test]
fn refits_never_lose_to_the_first_pass() {
    let model = random_model(4, 2, 500);
    let data = sample_triplets(&model, 400, TripletMode::Independent, 501).unwrap();
    for lambda in [0.0, 0.01] {
        let cfg = FitConfig { rank: Some(2), lambda, n_random_restarts: 2, ..Default::default() };
        let (_, trace) = fit(&data, &cfg).unwrap();
        for r in &trace.restarts {
            let (Some(fin), Some(first)) = (r.final_loss, r.first_pass_loss_under_final_weight) else {
                panic!("restart {} failed: {:?}", r.index, r.error);
            };
            assert!(fin <= first + 1e-9, "restart {}: {fin} > {first}", r.index);
        }
        let chosen = &trace.restarts[trace.chosen_restart];
        assert!(trace.restarts.iter().all(|r| chosen.final_loss.unwrap() <= r.final_loss.unwrap()));
    }
}

#[test]
fn fits_are_deterministic() {
    let model = random_model(3, 2, 600);
    let data = sample_triplets(&model, 300, TripletMode::Independent, 601).unwrap();
    let cfg = FitConfig { rank: Some(2), lambda: 0.01, seed: 9, ..Default::default() };
    let (p1, t1) = fit(&data, &cfg).unwrap();
    let (p2, t2) = fit(&data, &cfg).unwrap();
    assert_eq!(p1, p2);
    let losses = |t: &specmoment_core::FitTrace| -> Vec<u64> {
        t.records.iter().flat_map(|r| r.alt_losses.iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(losses(&t1), losses(&t2));
}

#[test]
fn random_init_norm_matches_scale() {
    let (n, k, scale) = (4, 2, 0.7);
    let draws = 1000;
    let mean_sq: f64 = (0..draws)
        .map(|s| init_random(n, k, scale, s).unwrap().frobenius_r().powi(2))
        .sum::<f64>()
        / draws as f64;
    let expected = (scale * n as f64).powi(2);
    assert!((mean_sq / expected - 1.0).abs() < 0.03, "{mean_sq} vs {expected}");
    let f = init_random(n, k, scale, 1).unwrap();
    assert_ne!(f.r[0], f.r[1]);
    assert_ne!(f.r[0], f.s[0]);
    assert_eq!(f, init_random(n, k, scale, 1).unwrap());
}

#[test]
fn spectral_init_of_zero_operators_is_zero() {
    let n = 3;
    let params = specmoment_core::ParamTriplet::new(
        DVector::from_element(n, 1.0 / 3.0),
        DVector::from_element(n, 1.0),
        vec![DMatrix::zeros(n, n); n],
        None,
    )
    .unwrap();
    let f = init_from_spectral(&params, 2).unwrap();
    assert!(f.r.iter().chain(&f.s).all(|m| m.iter().all(|&v| v == 0.0)));
}

#[test]
fn config_toml_round_trip() {
    let cfg = FitConfig { rank: Some(3), lambda: 0.01, seed: 42, init_scale: Some(0.5), ..Default::default() };
    let back = FitConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(cfg, back);
    let partial = FitConfig::from_toml("lambda = 0.5\n").unwrap();
    assert_eq!(partial.lambda, 0.5);
    assert_eq!(partial.alt_max_iters, FitConfig::default().alt_max_iters);
    assert!(FitConfig::from_toml("lamda = 0.5\n").is_err());
    assert!(FitConfig::from_toml("inner_tol = 0.0\n").is_err());
    assert!(FitConfig::from_toml("rank = 0\n").is_err());
    assert!(FitConfig::from_toml("lambda = -1.0\n").is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let (stats, f) = stats_and_factors(3, 2, 700);
    let w = WeightMatrix::identity(4);
    assert!(loss(&f, &w, &stats, 0.0, 10).is_err());
    assert!(loss(&f, &WeightMatrix::identity(3), &stats, 0.0, 0).is_err());
    assert!(fit_from_stats(&stats, None, &FitConfig { rank: Some(4), ..Default::default() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn penalty_bookkeeping_is_exact(seed in any::<u64>(), lambda in 0.0f64..10.0, n_samples in 1usize..100_000) {
        let (stats, f) = stats_and_factors(3, 2, seed % 1000);
        let w = WeightMatrix::identity(3);
        let with = loss(&f, &w, &stats, lambda, n_samples).unwrap();
        let without = loss(&f, &w, &stats, 0.0, n_samples).unwrap();
        let expected = lambda / (n_samples as f64).sqrt() * f.l1_norm_r();
        prop_assert!(((with - without) - expected).abs() <= 1e-12 * with.abs().max(1.0));
    }

    #[test]
    fn half_steps_never_increase_the_loss(seed in 0u64..10_000, lambda in prop::sample::select(vec![0.0, 0.001, 0.1])) {
        let (stats, f) = stats_and_factors(3, 2, seed);
        let w = random_weight(3, seed);
        let before = loss(&f, &w, &stats, lambda, 100).unwrap();
        let r = solve_r_given_s(&f, &w, &stats, lambda, 100, &FitConfig::default()).unwrap();
        let mid = FactorPair { r: r.mats, s: f.s.clone() };
        let after_r = loss(&mid, &w, &stats, lambda, 100).unwrap();
        let s = solve_s_given_r(&mid, &w, &stats).unwrap();
        let after_s = loss(&FactorPair { r: mid.r.clone(), s: s.mats }, &w, &stats, lambda, 100).unwrap();
        prop_assert!(after_r <= before + 1e-12 * before.max(1.0));
        prop_assert!(after_s <= after_r + 1e-12 * after_r.max(1.0));
    }
}
