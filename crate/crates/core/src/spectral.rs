//! Classical spectral estimators: the projected truncated-SVD form and its
//! ambient (`d = n`) counterpart used to initialize the M-estimator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{from_rows, orient_columns, pinv, svd, to_rows, Svd};
use crate::moments::ObservableStats;
use crate::{Error, Result};

/// Observable-operator parameters `(b1, {B_x}, b_inf)`.
///
/// `dim == n_obs` with no projection is the ambient form produced by the
/// M-estimator; the projected form carries the `n x k` basis `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTriplet {
    pub n_obs: usize,
    pub dim: usize,
    pub b1: DVector<f64>,
    pub b_inf: DVector<f64>,
    pub b_ops: Vec<DMatrix<f64>>,
    pub projection: Option<DMatrix<f64>>,
}

impl ParamTriplet {
    pub fn new(
        b1: DVector<f64>,
        b_inf: DVector<f64>,
        b_ops: Vec<DMatrix<f64>>,
        projection: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let d = b1.len();
        if b_inf.len() != d || b_ops.iter().any(|b| b.shape() != (d, d)) || b_ops.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "operators must all be {d}x{d} with matching vectors"
            )));
        }
        let n_obs = b_ops.len();
        if let Some(u) = &projection {
            if u.shape() != (n_obs, d) {
                return Err(Error::DimensionMismatch(format!(
                    "projection is {}x{}, expected {n_obs}x{d}",
                    u.nrows(),
                    u.ncols()
                )));
            }
        }
        Ok(Self { n_obs, dim: d, b1, b_inf, b_ops, projection })
    }

    pub fn is_ambient(&self) -> bool {
        self.projection.is_none() && self.dim == self.n_obs
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ParamDoc {
            dim: self.dim,
            n_obs: self.n_obs,
            b1: self.b1.iter().cloned().collect(),
            b_inf: self.b_inf.iter().cloned().collect(),
            b_ops: self.b_ops.iter().map(to_rows).collect(),
            projection: self.projection.as_ref().map(to_rows),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamDoc = serde_json::from_str(text)?;
        let ops = doc
            .b_ops
            .iter()
            .map(|m| from_rows(m, "b_ops"))
            .collect::<Result<Vec<_>>>()?;
        let projection = doc.projection.as_deref().map(|p| from_rows(p, "projection")).transpose()?;
        let t = Self::new(DVector::from_vec(doc.b1), DVector::from_vec(doc.b_inf), ops, projection)?;
        if t.dim != doc.dim || t.n_obs != doc.n_obs {
            return Err(Error::DimensionMismatch(format!(
                "declared dim={} n_obs={} but found dim={} n_obs={}",
                doc.dim, doc.n_obs, t.dim, t.n_obs
            )));
        }
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDoc {
    dim: usize,
    n_obs: usize,
    b1: Vec<f64>,
    b_inf: Vec<f64>,
    b_ops: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projection: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug)]
pub struct SpectralOptions {
    /// `sigma_k` must exceed `degeneracy_tol * sigma_1`.
    pub degeneracy_tol: f64,
    /// Relative cutoff for pseudoinverses.
    pub pinv_tol: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self { degeneracy_tol: 1e-10, pinv_tol: 1e-12 }
    }
}

/// Top-`k` left singular vectors of `P21`, oriented, after the rank check.
pub fn top_left_singular(p21: &DMatrix<f64>, rank: usize, opts: &SpectralOptions) -> Result<DMatrix<f64>> {
    let n = p21.nrows();
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!("rank {rank} not in 1..={n}")));
    }
    let Svd { u, s, v } = svd(p21);
    let tol = opts.degeneracy_tol * s[0];
    if !(s[rank - 1] > tol) || s[0] <= 0.0 {
        return Err(Error::RankDeficient { index: rank, value: s[rank - 1], tol });
    }
    let mut u = u.columns(0, rank).into_owned();
    let mut v = v.columns(0, rank).into_owned();
    orient_columns(&mut u, &mut v);
    Ok(u)
}

pub fn fit_hsu(stats: &ObservableStats, rank: usize) -> Result<ParamTriplet> {
    fit_hsu_with(stats, rank, &SpectralOptions::default())
}

/// Projected spectral estimator: `b1 = U^T P1`, `b_inf = (P21^T U)^+ P1`,
/// `B_x = U^T P3[x] (U^T P21)^+`.
pub fn fit_hsu_with(stats: &ObservableStats, rank: usize, opts: &SpectralOptions) -> Result<ParamTriplet> {
    let u = top_left_singular(&stats.p21, rank, opts)?;
    let ut = u.transpose();
    let b1 = &ut * &stats.p1;
    let b_inf = pinv(&(stats.p21.transpose() * &u), opts.pinv_tol) * &stats.p1;
    let right = pinv(&(&ut * &stats.p21), opts.pinv_tol);
    let b_ops = stats.p3.par_iter().map(|p3x| &ut * p3x * &right).collect();
    ParamTriplet::new(b1, b_inf, b_ops, Some(u))
}

pub fn fit_frobenius(stats: &ObservableStats, rank: usize) -> Result<ParamTriplet> {
    fit_frobenius_with(stats, rank, &SpectralOptions::default())
}

/// Ambient-form spectral estimate: the projected operators mapped back as
/// `B_x = U B'_x U^T`, with `b1 = P1` and `b_inf = 1`. Joint probabilities
/// coincide with [`fit_hsu`] whenever `P1 = P21^T 1`, which holds for any
/// statistics built from triplets.
pub fn fit_frobenius_with(stats: &ObservableStats, rank: usize, opts: &SpectralOptions) -> Result<ParamTriplet> {
    let u = top_left_singular(&stats.p21, rank, opts)?;
    let ut = u.transpose();
    let right = pinv(&(&ut * &stats.p21), opts.pinv_tol);
    let b_ops = stats
        .p3
        .par_iter()
        .map(|p3x| &u * (&ut * p3x * &right) * &ut)
        .collect();
    let n = stats.n_obs;
    ParamTriplet::new(stats.p1.clone(), DVector::from_element(n, 1.0), b_ops, None)
}

/// Rank-`k` minimizer of `||P3[x] - B_x P21||_F` (Eckart-Young applied to the
/// fitted values), in ambient form. Its residual is never larger than that of
/// any other rank-`k` operator, but its probabilities generally differ from
/// the projected estimators when `k < rank(P21)`.
pub fn fit_min_residual(stats: &ObservableStats, rank: usize) -> Result<ParamTriplet> {
    let n = stats.n_obs;
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!("rank {rank} not in 1..={n}")));
    }
    let p21_pinv = pinv(&stats.p21, SpectralOptions::default().pinv_tol);
    let b_ops = stats
        .p3
        .par_iter()
        .map(|p3x| {
            let ols = p3x * &p21_pinv;
            let fitted = &ols * &stats.p21;
            let uf = svd(&fitted).u.columns(0, rank).into_owned();
            &uf * uf.transpose() * ols
        })
        .collect();
    ParamTriplet::new(stats.p1.clone(), DVector::from_element(n, 1.0), b_ops, None)
}

/// Residual `||P3[x] - B_x P21||_F` for every symbol of an ambient triplet.
pub fn operator_residuals(stats: &ObservableStats, params: &ParamTriplet) -> Vec<f64> {
    params
        .b_ops
        .iter()
        .zip(&stats.p3)
        .map(|(b, p3x)| (p3x - b * &stats.p21).norm())
        .collect()
}
