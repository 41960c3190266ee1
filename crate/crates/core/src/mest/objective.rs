use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::FactorPair;
use crate::linalg::{unvec_row_major, vec_row_major};
use crate::moments::{model_term, ObservableStats, WeightMatrix};
use crate::{Error, Result};

/// Which factor a gradient or solve refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    R,
    S,
}

/// Coefficient on `||R||_1`: `lambda * N^{-1/2}`.
pub fn penalty_scale(lambda: f64, n_samples: usize) -> f64 {
    lambda / (n_samples as f64).sqrt()
}

pub(crate) fn check_inputs(
    factors: &FactorPair,
    weight: &WeightMatrix,
    stats: &ObservableStats,
    lambda: f64,
    n_samples: usize,
) -> Result<()> {
    let n = stats.n_obs;
    if factors.n_obs() != n || weight.n_obs() != n {
        return Err(Error::DimensionMismatch(format!(
            "statistics over {n} symbols, factors over {}, weight over {}",
            factors.n_obs(),
            weight.n_obs()
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Weighted residual `vec(M_x)^T W_x vec(M_x)` of a single block, where
/// `M_x = P3[x] - B P21` for the given operator `B`.
pub(crate) fn block_quad(stats: &ObservableStats, weight: &WeightMatrix, x: usize, b: &DMatrix<f64>) -> f64 {
    let m = &stats.p3[x] - b * &stats.p21;
    weight.quad_form(x, vec_row_major(&m).as_slice())
}

pub(crate) fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Unpenalized weighted criterion `m^T W m`, block by block.
pub fn smooth_loss(factors: &FactorPair, weight: &WeightMatrix, stats: &ObservableStats) -> Result<f64> {
    check_inputs(factors, weight, stats, 0.0, 1)?;
    let parts: Vec<f64> = (0..stats.n_obs)
        .into_par_iter()
        .map(|x| block_quad(stats, weight, x, &factors.b_op(x)))
        .collect();
    Ok(parts.iter().sum())
}

/// `m^T W m + lambda N^{-1/2} ||R||_1`.
pub fn loss(
    factors: &FactorPair,
    weight: &WeightMatrix,
    stats: &ObservableStats,
    lambda: f64,
    n_samples: usize,
) -> Result<f64> {
    check_inputs(factors, weight, stats, lambda, n_samples)?;
    let smooth = smooth_loss(factors, weight, stats)?;
    Ok(smooth + penalty_scale(lambda, n_samples) * factors.l1_norm_r())
}

/// Gradient of the smooth part with respect to `R` or `S`, one `n x k`
/// matrix per symbol. With `include_penalty`, the L1 subgradient
/// `lambda N^{-1/2} sign(R)` (zero at exact zeros) is added to the `R` blocks.
pub fn grad(
    factors: &FactorPair,
    weight: &WeightMatrix,
    stats: &ObservableStats,
    lambda: f64,
    n_samples: usize,
    which: Which,
    include_penalty: bool,
) -> Result<Vec<DMatrix<f64>>> {
    check_inputs(factors, weight, stats, lambda, n_samples)?;
    let n = stats.n_obs;
    let tau = penalty_scale(lambda, n_samples);
    let out = (0..n)
        .into_par_iter()
        .map(|x| {
            let m = &stats.p3[x] - model_term(stats, factors, x);
            let wm = if weight.is_identity() {
                m
            } else {
                unvec_row_major((weight.block(x) * vec_row_major(&m)).as_slice(), n, n)
            };
            match which {
                Which::R => {
                    let mut g = -2.0 * &wm * stats.p21.transpose() * &factors.s[x];
                    if include_penalty && tau > 0.0 {
                        g.zip_apply(&factors.r[x], |gi, ri| {
                            if ri != 0.0 {
                                *gi += tau * ri.signum();
                            }
                        });
                    }
                    g
                }
                Which::S => -2.0 * &stats.p21 * wm.transpose() * &factors.r[x],
            }
        })
        .collect();
    Ok(out)
}

/// Design of the map `vec(R_x) -> vec(R_x C)` with `C = S_x^T P21`, both
/// vectorizations row-major: entry `((i,j),(v,w)) = [i == v] C[w,j]`.
pub(crate) fn design_r(s: &DMatrix<f64>, p21: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p21.nrows();
    let k = s.ncols();
    let c = s.transpose() * p21;
    let mut a = DMatrix::zeros(n * n, n * k);
    for i in 0..n {
        for j in 0..n {
            for w in 0..k {
                a[(i * n + j, i * k + w)] = c[(w, j)];
            }
        }
    }
    a
}

/// Design of the map `vec(S_x) -> vec(R_x S_x^T P21)`: entry
/// `((i,j),(v,w)) = R[i,w] P21[v,j]`.
pub(crate) fn design_s(r: &DMatrix<f64>, p21: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p21.nrows();
    let k = r.ncols();
    DMatrix::from_fn(n * n, n * k, |row, col| {
        let (i, j) = (row / n, row % n);
        let (v, w) = (col / k, col % k);
        r[(i, w)] * p21[(v, j)]
    })
}

/// Whitened least-squares data `(L A, L vec(P3[x]))` for one block.
pub(crate) fn whitened(
    weight: &WeightMatrix,
    x: usize,
    design: DMatrix<f64>,
    target: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let y = vec_row_major(target);
    if weight.is_identity() {
        (design, y)
    } else {
        let l = weight.whitener(x);
        (l * design, l * y)
    }
}
