#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use specmoment_core::hmm::{exact_stats, make_random, sample_triplets, seeded_rng};
use specmoment_core::moments::estimate_stats;
use specmoment_core::{HmmModel, ObservableStats, SymbolSequence, TripletMode, WeightMatrix};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random symmetric positive definite blocks, well away from singular.
pub fn random_weight(n: usize, seed: u64) -> WeightMatrix {
    let b = n * n;
    let blocks = (0..n)
        .map(|x| {
            let a = gaussian(b, b, seed.wrapping_mul(31).wrapping_add(x as u64));
            let mut w = a.transpose() * &a / b as f64 + DMatrix::identity(b, b) * 0.5;
            w = (&w + w.transpose()) * 0.5;
            w
        })
        .collect();
    WeightMatrix::from_blocks(blocks).unwrap()
}

pub fn random_model(n_obs: usize, n_hidden: usize, seed: u64) -> HmmModel {
    make_random(n_obs, n_hidden, 1.0, seed).unwrap()
}

pub fn sampled_stats(model: &HmmModel, n: usize, seed: u64) -> ObservableStats {
    estimate_stats(&sample_triplets(model, n, TripletMode::Independent, seed).unwrap()).unwrap()
}

pub fn population(n_obs: usize, n_hidden: usize, seed: u64) -> (HmmModel, ObservableStats) {
    let m = random_model(n_obs, n_hidden, seed);
    let s = exact_stats(&m);
    (m, s)
}

/// Every sequence of length `len` over `n` symbols.
pub fn all_sequences(n: usize, len: usize) -> Vec<SymbolSequence> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..n).map(move |x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(SymbolSequence::new).collect()
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}
