use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::FactorPair;
use crate::hmm::seeded_rng;
use crate::linalg::{orient_columns, svd};
use crate::spectral::ParamTriplet;
use crate::{Error, Result};

/// Balanced rank-`k` split of each ambient operator:
/// `R_x = U_k Sigma_k^{1/2}`, `S_x = V_k Sigma_k^{1/2}`.
pub fn init_from_spectral(triplet: &ParamTriplet, rank: usize) -> Result<FactorPair> {
    if !triplet.is_ambient() {
        return Err(Error::InvalidArgument("spectral initialization needs an ambient triplet".into()));
    }
    let n = triplet.n_obs;
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!("rank {rank} not in 1..={n}")));
    }
    let mut r = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for b in &triplet.b_ops {
        let dec = svd(b);
        let mut u = dec.u.columns(0, rank).into_owned();
        let mut v = dec.v.columns(0, rank).into_owned();
        orient_columns(&mut u, &mut v);
        for c in 0..rank {
            let root = dec.s[c].max(0.0).sqrt();
            u.column_mut(c).scale_mut(root);
            v.column_mut(c).scale_mut(root);
        }
        r.push(u);
        s.push(v);
    }
    FactorPair::new(r, s)
}

/// I.i.d. `N(0, scale^2 / k)` entries, so that `||R||_F` and `||S||_F` are
/// close to `scale * n`.
pub fn init_random(n: usize, k: usize, scale: f64, seed: u64) -> Result<FactorPair> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
    }
    if n == 0 || k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("rank {k} not in 1..={n}")));
    }
    let sd = scale / (k as f64).sqrt();
    let mut rng = seeded_rng(seed);
    let mut draw = || -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
    };
    let r = (0..n).map(|_| draw()).collect();
    let s = (0..n).map(|_| draw()).collect();
    FactorPair::new(r, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn ambient(ops: Vec<DMatrix<f64>>) -> ParamTriplet {
        let n = ops.len();
        ParamTriplet::new(DVector::from_element(n, 1.0 / n as f64), DVector::from_element(n, 1.0), ops, None)
            .unwrap()
    }

    #[test]
    fn exact_rank_operators_are_reproduced() {
        let a = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let b = DMatrix::from_row_slice(3, 1, &[0.3, 0.1, -0.7]);
        let op = &a * b.transpose();
        let t = ambient(vec![op.clone(), op.clone() * 2.0, DMatrix::zeros(3, 3)]);
        let f = init_from_spectral(&t, 1).unwrap();
        for x in 0..3 {
            assert!((f.b_op(x) - &t.b_ops[x]).amax() < 1e-10);
            assert!((f.r[x].norm() - f.s[x].norm()).abs() < 1e-12);
        }
        assert_eq!(f.r[2].amax(), 0.0);
    }

    #[test]
    fn random_init_is_deterministic() {
        let a = init_random(4, 2, 1.0, 9).unwrap();
        let b = init_random(4, 2, 1.0, 9).unwrap();
        let c = init_random(4, 2, 1.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.r[0], a.r[1]);
        assert!(init_random(4, 2, 0.0, 9).is_err());
    }
}
