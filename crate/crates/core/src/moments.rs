//! Observable statistics, moment residuals and the block-diagonal GMM
//! weighting matrix.
//!
//! Moments are indexed by `(x, i, j)` in lexicographic order: block `x` holds
//! the row-major vectorization of the `n x n` residual
//! `P3[x] - R_x S_x^T P21`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hmm::{Triplet, TripletDataset};
use crate::linalg::{from_rows, spd_inverse, symmetrize, to_rows, vec_row_major};
use crate::mest::FactorPair;
use crate::{Error, Result};

/// Default diagonal stabilizer added to each Gram block before inversion.
pub const DEFAULT_RIDGE: f64 = 1e-8;

const NORMALIZATION_TOL: f64 = 1e-10;

/// The P-statistics: `p1[i] = Pr(x1=i)`, `p21[(i,j)] = Pr(x2=i, x1=j)` and
/// `p3[x][(i,j)] = Pr(x3=i, x2=x, x1=j)`. `sample_count == 0` marks
/// population statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableStats {
    pub n_obs: usize,
    pub sample_count: usize,
    pub p1: DVector<f64>,
    pub p21: DMatrix<f64>,
    pub p3: Vec<DMatrix<f64>>,
}

impl ObservableStats {
    pub fn from_parts(
        p1: DVector<f64>,
        p21: DMatrix<f64>,
        p3: Vec<DMatrix<f64>>,
        sample_count: usize,
    ) -> Result<Self> {
        let n = p1.len();
        if n == 0 {
            return Err(Error::DimensionMismatch("statistics over an empty alphabet".into()));
        }
        if p21.shape() != (n, n) || p3.len() != n || p3.iter().any(|m| m.shape() != (n, n)) {
            return Err(Error::DimensionMismatch(format!(
                "statistics shapes disagree with alphabet size {n}"
            )));
        }
        Ok(Self { n_obs: n, sample_count, p1, p21, p3 })
    }

    /// Checks the probability-table invariants.
    pub fn validate(&self) -> Result<()> {
        let entries = self
            .p1
            .iter()
            .chain(self.p21.iter())
            .chain(self.p3.iter().flat_map(|m| m.iter()));
        if let Some(v) = entries.clone().find(|v| !(-NORMALIZATION_TOL..=1.0 + NORMALIZATION_TOL).contains(*v)) {
            return Err(Error::InvalidArgument(format!("statistic entry {v} outside [0, 1]")));
        }
        let sums = [
            ("p1", self.p1.sum()),
            ("p21", self.p21.sum()),
            ("p3", self.p3.iter().map(|m| m.sum()).sum()),
        ];
        for (what, s) in sums {
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidArgument(format!("{what} sums to {s}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = StatsDoc {
            n_obs: self.n_obs,
            sample_count: self.sample_count,
            p1: self.p1.iter().cloned().collect(),
            p21: to_rows(&self.p21),
            p3: self.p3.iter().map(to_rows).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: StatsDoc = serde_json::from_str(text)?;
        let p3 = doc
            .p3
            .iter()
            .map(|m| from_rows(m, "p3"))
            .collect::<Result<Vec<_>>>()?;
        let stats = Self::from_parts(
            DVector::from_vec(doc.p1),
            from_rows(&doc.p21, "p21")?,
            p3,
            doc.sample_count,
        )?;
        if stats.n_obs != doc.n_obs {
            return Err(Error::DimensionMismatch(format!(
                "declared n_obs {} but tables have {}",
                doc.n_obs, stats.n_obs
            )));
        }
        stats.validate()?;
        Ok(stats)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsDoc {
    n_obs: usize,
    sample_count: usize,
    p1: Vec<f64>,
    p21: Vec<Vec<f64>>,
    p3: Vec<Vec<Vec<f64>>>,
}

/// Empirical frequencies of the triplets.
pub fn estimate_stats(data: &TripletDataset) -> Result<ObservableStats> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.n_obs();
    let mut p1 = DVector::zeros(n);
    let mut p21 = DMatrix::zeros(n, n);
    let mut p3 = vec![DMatrix::zeros(n, n); n];
    for &(x1, x2, x3) in data.triplets() {
        p1[x1] += 1.0;
        p21[(x2, x1)] += 1.0;
        p3[x2][(x3, x1)] += 1.0;
    }
    let total = data.len() as f64;
    p1 /= total;
    p21 /= total;
    for m in &mut p3 {
        *m /= total;
    }
    ObservableStats::from_parts(p1, p21, p3, data.len())
}

/// A length-`n^3` vector of moment conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentVector {
    n_obs: usize,
    values: DVector<f64>,
}

impl MomentVector {
    pub fn new(n_obs: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != n_obs.pow(3) {
            return Err(Error::DimensionMismatch(format!(
                "moment vector of length {} for alphabet {n_obs}",
                values.len()
            )));
        }
        Ok(Self { n_obs, values })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn index(&self, x: usize, i: usize, j: usize) -> usize {
        (x * self.n_obs + i) * self.n_obs + j
    }

    pub fn get(&self, x: usize, i: usize, j: usize) -> f64 {
        self.values[self.index(x, i, j)]
    }

    pub fn block(&self, x: usize) -> &[f64] {
        let b = self.n_obs * self.n_obs;
        &self.values.as_slice()[x * b..(x + 1) * b]
    }

    pub fn block_matrix(&self, x: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_obs, self.n_obs, self.block(x))
    }
}

fn check_dims(stats: &ObservableStats, factors: &FactorPair) -> Result<()> {
    if stats.n_obs != factors.n_obs() {
        return Err(Error::DimensionMismatch(format!(
            "statistics over {} symbols, factors over {}",
            stats.n_obs,
            factors.n_obs()
        )));
    }
    Ok(())
}

/// `R_x S_x^T P21`, the model side of block `x`.
pub fn model_term(stats: &ObservableStats, factors: &FactorPair, x: usize) -> DMatrix<f64> {
    &factors.r[x] * (factors.s[x].transpose() * &stats.p21)
}

pub fn moment_residual(stats: &ObservableStats, factors: &FactorPair) -> Result<MomentVector> {
    check_dims(stats, factors)?;
    let n = stats.n_obs;
    let mut values = Vec::with_capacity(n * n * n);
    for x in 0..n {
        let m = &stats.p3[x] - model_term(stats, factors, x);
        values.extend(vec_row_major(&m).iter());
    }
    MomentVector::new(n, DVector::from_vec(values))
}

/// Moment vector of a single triplet: the indicator of `(x3, x2, x1)` minus
/// the model term, so that the sample mean equals [`moment_residual`].
pub fn per_sample_moment(
    triplet: Triplet,
    factors: &FactorPair,
    stats: &ObservableStats,
) -> Result<MomentVector> {
    check_dims(stats, factors)?;
    let n = stats.n_obs;
    let (x1, x2, x3) = triplet;
    if x1.max(x2).max(x3) >= n {
        return Err(Error::SymbolOutOfRange { symbol: x1.max(x2).max(x3), n_obs: n });
    }
    let mut values = Vec::with_capacity(n * n * n);
    for x in 0..n {
        values.extend(vec_row_major(&model_term(stats, factors, x)).iter().map(|v| -v));
    }
    values[(x2 * n + x3) * n + x1] += 1.0;
    MomentVector::new(n, DVector::from_vec(values))
}

/// Block-diagonal weighting matrix: `n` blocks of size `n^2 x n^2`.
///
/// Each block keeps a whitening factor `L_x` with `W_x = L_x^T L_x`, so the
/// weighted residual norm can be formed without squaring condition numbers.
#[derive(Clone, Debug)]
pub struct WeightMatrix {
    n_obs: usize,
    ridge: f64,
    identity: bool,
    blocks: Vec<DMatrix<f64>>,
    whiteners: Vec<DMatrix<f64>>,
    condition: Vec<f64>,
}

impl WeightMatrix {
    pub fn identity(n_obs: usize) -> Self {
        let b = n_obs * n_obs;
        Self {
            n_obs,
            ridge: 0.0,
            identity: true,
            blocks: vec![DMatrix::identity(b, b); n_obs],
            whiteners: vec![DMatrix::identity(b, b); n_obs],
            condition: vec![1.0; n_obs],
        }
    }

    /// Wraps caller-supplied symmetric positive-definite blocks.
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = blocks.len();
        let b = n * n;
        let mut whiteners = Vec::with_capacity(n);
        let mut condition = Vec::with_capacity(n);
        for (x, w) in blocks.iter().enumerate() {
            if w.shape() != (b, b) {
                return Err(Error::DimensionMismatch(format!(
                    "weight block {x} is {}x{}, expected {b}x{b}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            if (w - w.transpose()).amax() > 1e-8 * w.amax().max(1.0) {
                return Err(Error::InvalidArgument(format!("weight block {x} is not symmetric")));
            }
            let l = w
                .clone()
                .cholesky()
                .ok_or(Error::SingularWeight { block: x, ridge: 0.0 })?
                .l();
            condition.push(diag_ratio_sq(&l));
            whiteners.push(l.transpose());
        }
        Ok(Self { n_obs: n, ridge: 0.0, identity: false, blocks, whiteners, condition })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, x: usize) -> &DMatrix<f64> {
        &self.blocks[x]
    }

    /// `L_x` such that `W_x = L_x^T L_x`.
    pub fn whitener(&self, x: usize) -> &DMatrix<f64> {
        &self.whiteners[x]
    }

    /// Per-block condition-number proxy: squared ratio of the extreme
    /// Cholesky diagonal entries.
    pub fn condition_proxy(&self) -> &[f64] {
        &self.condition
    }

    /// `v^T W_x v` for a block-`x` moment sub-vector.
    pub fn quad_form(&self, x: usize, v: &[f64]) -> f64 {
        if self.identity {
            return v.iter().map(|a| a * a).sum();
        }
        let w = &self.blocks[x];
        let mut total = 0.0;
        for (i, vi) in v.iter().enumerate() {
            let mut row = 0.0;
            for (j, vj) in v.iter().enumerate() {
                row += w[(i, j)] * vj;
            }
            total += vi * row;
        }
        total
    }

    /// Dense `n^3 x n^3` matrix with zero off-diagonal blocks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let b = self.n_obs * self.n_obs;
        let mut out = DMatrix::zeros(b * self.n_obs, b * self.n_obs);
        for (x, w) in self.blocks.iter().enumerate() {
            out.view_mut((x * b, x * b), (b, b)).copy_from(w);
        }
        out
    }
}

fn diag_ratio_sq(l: &DMatrix<f64>) -> f64 {
    let d = l.diagonal();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        (max / min).powi(2)
    } else {
        f64::INFINITY
    }
}

/// Gram matrix `sum_n m_x(X_n) m_x(X_n)^T` of block `x`, via the closed form
/// `D - s c^T - c s^T + N c c^T` (no per-sample vectors are materialized).
pub fn gram_block(
    data: &TripletDataset,
    factors: &FactorPair,
    stats: &ObservableStats,
    x: usize,
) -> DMatrix<f64> {
    let n = stats.n_obs;
    let b = n * n;
    let mut counts = DVector::zeros(b);
    for &(x1, x2, x3) in data.triplets() {
        if x2 == x {
            counts[x3 * n + x1] += 1.0;
        }
    }
    let c = vec_row_major(&model_term(stats, factors, x));
    let total = data.len() as f64;
    let mut g = &c * c.transpose() * total;
    g -= &counts * c.transpose();
    g -= &c * counts.transpose();
    for k in 0..b {
        g[(k, k)] += counts[k];
    }
    symmetrize(&mut g);
    g
}

/// Estimates `W_x = (sum_n m_x m_x^T + ridge I)^{-1}` for every block in
/// parallel.
pub fn estimate_weight(
    data: &TripletDataset,
    factors: &FactorPair,
    stats: &ObservableStats,
    ridge: f64,
) -> Result<WeightMatrix> {
    check_dims(stats, factors)?;
    if data.n_obs() != stats.n_obs {
        return Err(Error::DimensionMismatch("dataset and statistics alphabets differ".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(ridge > 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be positive, got {ridge}")));
    }
    let n = stats.n_obs;
    let b = n * n;
    let parts: Vec<(DMatrix<f64>, DMatrix<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|x| {
            let mut g = gram_block(data, factors, stats, x);
            for k in 0..b {
                g[(k, k)] += ridge;
            }
            let (w, c) = spd_inverse(&g).ok_or(Error::SingularWeight { block: x, ridge })?;
            let ident = DMatrix::identity(b, b);
            let whitener = c
                .solve_lower_triangular(&ident)
                .ok_or(Error::SingularWeight { block: x, ridge })?;
            Ok((w, whitener, diag_ratio_sq(&c)))
        })
        .collect::<Result<_>>()?;
    let mut blocks = Vec::with_capacity(n);
    let mut whiteners = Vec::with_capacity(n);
    let mut condition = Vec::with_capacity(n);
    for (w, l, c) in parts {
        blocks.push(w);
        whiteners.push(l);
        condition.push(c);
    }
    Ok(WeightMatrix { n_obs: n, ridge, identity: false, blocks, whiteners, condition })
}
