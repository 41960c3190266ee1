mod common;

use common::*;
use nalgebra::DMatrix;
use specmoment_core::hmm::exact_stats;
use specmoment_core::mest::{grad, init_from_spectral, loss, smooth_loss, Which};
use specmoment_core::spectral::fit_frobenius;
use specmoment_core::{FactorPair, ObservableStats, WeightMatrix};

const STEP: f64 = 1e-6;

fn finite_difference(f: &FactorPair, w: &WeightMatrix, stats: &ObservableStats, which: Which) -> Vec<DMatrix<f64>> {
    let n = f.n_obs();
    let k = f.rank();
    let eval = |g: &FactorPair| smooth_loss(g, w, stats).unwrap();
    (0..n)
        .map(|x| {
            DMatrix::from_fn(n, k, |i, c| {
                let mut plus = f.clone();
                let mut minus = f.clone();
                let (p, m) = match which {
                    Which::R => (&mut plus.r[x], &mut minus.r[x]),
                    Which::S => (&mut plus.s[x], &mut minus.s[x]),
                };
                p[(i, c)] += STEP;
                m[(i, c)] -= STEP;
                (eval(&plus) - eval(&minus)) / (2.0 * STEP)
            })
        })
        .collect()
}

fn max_rel_error(analytic: &[DMatrix<f64>], numeric: &[DMatrix<f64>]) -> f64 {
    let scale = numeric.iter().map(|m| m.amax()).fold(0.0, f64::max).max(1e-12);
    analytic.iter().zip(numeric).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max) / scale
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let n = 2 + (inst % 2) as usize;
        let k = 1 + ((inst / 2) % 2) as usize;
        let model = random_model(n, 2, 1000 + inst);
        let stats = sampled_stats(&model, 400, 2000 + inst);
        let f = FactorPair::random(n, k, 1.0, 3000 + inst).unwrap();
        let w = random_weight(n, 4000 + inst);
        for which in [Which::R, Which::S] {
            let analytic = grad(&f, &w, &stats, 0.0, 400, which, false).unwrap();
            let numeric = finite_difference(&f, &w, &stats, which);
            let err = max_rel_error(&analytic, &numeric);
            worst = worst.max(err);
            assert!(err < 1e-5, "instance {inst} {which:?}: relative error {err:e}");
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn identity_weight_gradient_closed_form() {
    let model = random_model(3, 2, 5);
    let stats = sampled_stats(&model, 300, 6);
    let f = FactorPair::random(3, 2, 1.0, 7).unwrap();
    let w = WeightMatrix::identity(3);
    let gr = grad(&f, &w, &stats, 0.0, 300, Which::R, false).unwrap();
    let gs = grad(&f, &w, &stats, 0.0, 300, Which::S, false).unwrap();
    for x in 0..3 {
        let m = &stats.p3[x] - &f.r[x] * f.s[x].transpose() * &stats.p21;
        let expected_r = -2.0 * &m * stats.p21.transpose() * &f.s[x];
        let expected_s = -2.0 * &stats.p21 * m.transpose() * &f.r[x];
        assert!((&gr[x] - expected_r).amax() < 1e-14);
        assert!((&gs[x] - expected_s).amax() < 1e-14);
    }
}

#[test]
fn gradient_vanishes_at_a_root() {
    let (_, stats) = population(3, 3, 17);
    let f = init_from_spectral(&fit_frobenius(&stats, 3).unwrap(), 3).unwrap();
    let w = random_weight(3, 3);
    assert!(smooth_loss(&f, &w, &stats).unwrap() < 1e-24);
    for which in [Which::R, Which::S] {
        let g = grad(&f, &w, &stats, 0.0, 10, which, false).unwrap();
        assert!(g.iter().all(|m| m.amax() < 1e-12));
    }
}

#[test]
fn penalty_subgradient_added_on_request() {
    let model = random_model(3, 2, 21);
    let stats = sampled_stats(&model, 100, 22);
    let mut f = FactorPair::random(3, 2, 1.0, 23).unwrap();
    f.r[1][(0, 0)] = 0.0;
    let w = WeightMatrix::identity(3);
    let (lambda, n) = (0.5, 100);
    let tau = lambda / (n as f64).sqrt();
    let smooth = grad(&f, &w, &stats, lambda, n, Which::R, false).unwrap();
    let full = grad(&f, &w, &stats, lambda, n, Which::R, true).unwrap();
    for x in 0..3 {
        let expected = &smooth[x] + f.r[x].map(|v| if v == 0.0 { 0.0 } else { tau * v.signum() });
        assert!((&full[x] - expected).amax() < 1e-15);
    }
    assert_eq!(full[1][(0, 0)], smooth[1][(0, 0)]);
    // S never carries the penalty
    let s_plain = grad(&f, &w, &stats, lambda, n, Which::S, false).unwrap();
    let s_req = grad(&f, &w, &stats, lambda, n, Which::S, true).unwrap();
    assert_eq!(s_plain, s_req);
    // the L1 part of the loss has the matching one-sided slope
    let base = loss(&f, &w, &stats, lambda, n).unwrap();
    let mut g = f.clone();
    g.r[0][(1, 1)] += 1e-7 * f.r[0][(1, 1)].signum();
    let slope = (loss(&g, &w, &stats, lambda, n).unwrap() - base) / 1e-7;
    assert!((slope - full[0][(1, 1)] * f.r[0][(1, 1)].signum()).abs() < 1e-5);
}

#[test]
fn exact_population_fit_is_stationary_for_random_weights() {
    let model = random_model(4, 3, 44);
    let stats = exact_stats(&model);
    let f = init_from_spectral(&fit_frobenius(&stats, 3).unwrap(), 3).unwrap();
    let g = grad(&f, &random_weight(4, 1), &stats, 0.0, 1, Which::S, false).unwrap();
    assert!(g.iter().all(|m| m.amax() < 1e-12));
}
