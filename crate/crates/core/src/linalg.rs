//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Thin SVD with singular values sorted in descending order.
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Svd {
    let dec = m.clone().svd(true, true);
    let u = dec.u.expect("u requested");
    let v_t = dec.v_t.expect("v_t requested");
    let s = dec.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let v = DMatrix::from_fn(v_t.ncols(), order.len(), |i, j| v_t[(order[j], i)]);
    let s = DVector::from_iterator(order.len(), order.iter().map(|&j| s[j]));
    Svd { u, s, v }
}

/// Flips singular-vector pairs so that the largest-magnitude entry of each
/// left singular vector is positive (first such entry on ties).
pub fn orient_columns(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for c in 0..u.ncols() {
        let mut best = 0;
        for r in 1..u.nrows() {
            if u[(r, c)].abs() > u[(best, c)].abs() {
                best = r;
            }
        }
        if u[(best, c)] < 0.0 {
            u.column_mut(c).neg_mut();
            if c < v.ncols() {
                v.column_mut(c).neg_mut();
            }
        }
    }
}

/// Moore-Penrose pseudoinverse; singular values at or below `rel_tol * s_max`
/// are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let Svd { u, s, v } = svd(m);
    let cutoff = s.iter().cloned().fold(0.0, f64::max) * rel_tol;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for k in 0..s.len() {
        if s[k] > cutoff && s[k] > 0.0 {
            out += (v.column(k) / s[k]) * u.column(k).transpose();
        }
    }
    out
}

/// Inverse of a symmetric positive-definite matrix via Cholesky, together with
/// the lower factor. `None` when the factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let chol = m.clone().cholesky()?;
    let l = chol.l();
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some((inv, l))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration from the all-ones start vector.
pub fn power_iteration(m: &DMatrix<f64>, iters: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            return lambda;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda.max((m * &v).norm())
}

/// Condition number from the singular values (infinite for singular input).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = svd(m).s;
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Row-major flattening of a matrix.
pub fn vec_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        m.nrows() * m.ncols(),
        (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])),
    )
}

pub fn unvec_row_major(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| v[i * cols + j])
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], what: &str) -> crate::Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(crate::Error::Parse(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}
