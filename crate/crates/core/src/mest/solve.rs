use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::objective::{block_quad, check_inputs, design_r, design_s, l1, penalty_scale, whitened};
use super::{FactorPair, FitConfig};
use crate::linalg::{power_iteration, svd, unvec_row_major, vec_row_major};
use crate::moments::{ObservableStats, WeightMatrix};
use crate::{Error, Result};

/// Singular values below this fraction of the largest mark a block as
/// rank-deficient.
const RANK_TOL: f64 = 1e-10;
/// Tikhonov term added to the normal matrix of a rank-deficient block.
pub const DEFICIENT_RIDGE: f64 = 1e-10;
const POWER_ITERS: usize = 20;

/// Result of updating one factor for every symbol.
#[derive(Clone, Debug)]
pub struct HalfStep {
    pub mats: Vec<DMatrix<f64>>,
    /// Blocks solved with the ridge fallback.
    pub ridged_blocks: Vec<usize>,
    /// Blocks whose candidate did not improve the objective and were left as is.
    pub kept_blocks: Vec<usize>,
}

struct BlockOutcome {
    mat: DMatrix<f64>,
    ridged: bool,
    kept: bool,
}

fn collect(outcomes: Vec<BlockOutcome>) -> HalfStep {
    let mut step = HalfStep { mats: Vec::with_capacity(outcomes.len()), ridged_blocks: vec![], kept_blocks: vec![] };
    for (x, o) in outcomes.into_iter().enumerate() {
        if o.ridged {
            step.ridged_blocks.push(x);
        }
        if o.kept {
            step.kept_blocks.push(x);
        }
        step.mats.push(o.mat);
    }
    step
}

/// Minimizer of `||y - A z||^2`: exact through the SVD, or with a small
/// Tikhonov term when `A` is numerically rank-deficient.
fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, bool) {
    let dec = svd(a);
    let smax = dec.s.iter().cloned().fold(0.0, f64::max);
    let smin = dec.s.iter().cloned().fold(f64::INFINITY, f64::min);
    let deficient = dec.s.len() < a.ncols() || !(smin > RANK_TOL * smax);
    let uty = dec.u.transpose() * y;
    let mut z = DVector::zeros(a.ncols());
    for (i, &sv) in dec.s.iter().enumerate() {
        let coef = if deficient { sv / (sv * sv + DEFICIENT_RIDGE) } else { 1.0 / sv };
        if coef.is_finite() && coef != 0.0 {
            z += dec.v.column(i) * (coef * uty[i]);
        }
    }
    (z, deficient)
}

fn soft_threshold_into(out: &mut DVector<f64>, v: &DVector<f64>, t: f64) {
    for (o, &a) in out.iter_mut().zip(v.iter()) {
        *o = if a > t {
            a - t
        } else if a < -t {
            a + t
        } else {
            0.0
        };
    }
}

/// `||y - A z||^2`, leaving the residual in `resid`.
fn residual_into(resid: &mut DVector<f64>, a: &DMatrix<f64>, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
    resid.copy_from(y);
    resid.gemv(-1.0, a, z, 1.0);
    resid.norm_squared()
}

/// Monotone FISTA with backtracking for `||y - A z||^2 + tau ||z||_1`,
/// started at `z0`. Returns the best iterate seen.
pub(crate) fn lasso_fista(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    z0: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    let l1n = |z: &DVector<f64>| z.iter().map(|v| v.abs()).sum::<f64>();
    let lip = 2.0 * power_iteration(&a.tr_mul(a), POWER_ITERS);
    if !(lip > 0.0) {
        // no smooth coupling: the penalty alone is minimized at zero
        return Ok(DVector::zeros(z0.len()));
    }
    let p = z0.len();
    let mut resid = DVector::zeros(y.len());
    let mut g = DVector::zeros(p);
    let mut fwd = DVector::zeros(p);
    let mut z = DVector::zeros(p);
    let mut x_prev = DVector::zeros(p);
    let mut step = 1.0 / lip;
    let mut x = z0.clone();
    let mut fx = residual_into(&mut resid, a, y, &x) + tau * l1n(&x);
    let mut yk = x.clone();
    let mut theta = 1.0_f64;
    for _ in 0..max_iters {
        let fy = residual_into(&mut resid, a, y, &yk);
        // gradient of the smooth part is -2 A^T (y - A yk)
        g.gemv_tr(-2.0, a, &resid, 0.0);
        let mut fz_smooth;
        loop {
            fwd.copy_from(&yk);
            fwd.axpy(-step, &g, 1.0);
            soft_threshold_into(&mut z, &fwd, step * tau);
            fwd.copy_from(&z);
            fwd -= &yk;
            let bound = fy + g.dot(&fwd) + fwd.norm_squared() / (2.0 * step);
            fz_smooth = residual_into(&mut resid, a, y, &z);
            if fz_smooth <= bound + 1e-15 * fy.abs().max(1e-300) || step < 1e-300 {
                break;
            }
            step *= 0.5;
        }
        let fz = fz_smooth + tau * l1n(&z);
        if !fz.is_finite() {
            return Err(Error::NonFinite("proximal gradient objective".into()));
        }
        // momentum restart when the step opposes the last prox-gradient move
        fwd.copy_from(&yk);
        fwd -= &z;
        x_prev.copy_from(&z);
        x_prev -= &x;
        if !(fz <= fx) || fwd.dot(&x_prev) > 0.0 {
            theta = 1.0;
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let accepted = fz <= fx;
        x_prev.copy_from(&x);
        let decrease = if accepted { fx - fz } else { 0.0 };
        if accepted {
            x.copy_from(&z);
            fx = fz;
        }
        // yk = x + (theta / theta_next) (z - x) + ((theta - 1) / theta_next) (x - x_prev)
        let c1 = theta / theta_next;
        let c2 = (theta - 1.0) / theta_next;
        yk.copy_from(&x);
        yk.axpy(c1, &z, 1.0 - c1 + c2);
        yk.axpy(-c2, &x_prev, 1.0);
        theta = theta_next;
        if accepted && decrease <= tol * fx.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(x)
}

/// Per-block objective used by the non-increase guard.
fn block_objective(
    stats: &ObservableStats,
    weight: &WeightMatrix,
    x: usize,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
    tau: f64,
) -> f64 {
    let quad = block_quad(stats, weight, x, &(r * s.transpose()));
    if tau > 0.0 {
        quad + tau * l1(r)
    } else {
        quad
    }
}

/// Updates every `R_x` with `S` held fixed.
///
/// With `lambda == 0` each block is an exact weighted least-squares solve;
/// otherwise an accelerated proximal-gradient scheme runs to
/// `cfg.inner_tol`. A block whose candidate would raise its objective keeps
/// its input.
pub fn solve_r_given_s(
    factors: &FactorPair,
    weight: &WeightMatrix,
    stats: &ObservableStats,
    lambda: f64,
    n_samples: usize,
    cfg: &FitConfig,
) -> Result<HalfStep> {
    check_inputs(factors, weight, stats, lambda, n_samples)?;
    let n = stats.n_obs;
    let k = factors.rank();
    let tau = penalty_scale(lambda, n_samples);
    let outcomes = (0..n)
        .into_par_iter()
        .map(|x| {
            let (a, y) = whitened(weight, x, design_r(&factors.s[x], &stats.p21), &stats.p3[x]);
            let (z, ridged) = if tau > 0.0 {
                let z0 = vec_row_major(&factors.r[x]);
                (lasso_fista(&a, &y, tau, &z0, cfg.inner_tol, cfg.inner_max_iters)?, false)
            } else {
                least_squares(&a, &y)
            };
            let cand = unvec_row_major(z.as_slice(), n, k);
            if cand.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("R block {x}")));
            }
            let old = block_objective(stats, weight, x, &factors.r[x], &factors.s[x], tau);
            let new = block_objective(stats, weight, x, &cand, &factors.s[x], tau);
            Ok(if new <= old {
                BlockOutcome { mat: cand, ridged, kept: false }
            } else {
                BlockOutcome { mat: factors.r[x].clone(), ridged, kept: true }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(outcomes))
}

/// Updates every `S_x` with `R` held fixed; always an exact weighted
/// least-squares solve since `S` carries no penalty.
pub fn solve_s_given_r(
    factors: &FactorPair,
    weight: &WeightMatrix,
    stats: &ObservableStats,
) -> Result<HalfStep> {
    check_inputs(factors, weight, stats, 0.0, 1)?;
    let n = stats.n_obs;
    let k = factors.rank();
    let outcomes = (0..n)
        .into_par_iter()
        .map(|x| {
            let (a, y) = whitened(weight, x, design_s(&factors.r[x], &stats.p21), &stats.p3[x]);
            let (z, ridged) = least_squares(&a, &y);
            let cand = unvec_row_major(z.as_slice(), n, k);
            if cand.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("S block {x}")));
            }
            let old = block_objective(stats, weight, x, &factors.r[x], &factors.s[x], 0.0);
            let new = block_objective(stats, weight, x, &factors.r[x], &cand, 0.0);
            Ok(if new <= old {
                BlockOutcome { mat: cand, ridged, kept: false }
            } else {
                BlockOutcome { mat: factors.s[x].clone(), ridged, kept: true }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(outcomes))
}
