//! Probability queries against fitted observable-operator parameters.

use nalgebra::{DMatrix, DVector};

use crate::hmm::SymbolSequence;
use crate::linalg::condition_number;
use crate::spectral::ParamTriplet;
use crate::{Error, Result};

/// Lower bound used by [`joint_prob_clamped`].
pub const PROB_FLOOR: f64 = 1e-300;

const MAX_TRANSFORM_CONDITION: f64 = 1e6;

/// `b_inf^T B_{x_t} ... B_{x_1} b1`, unclamped. Estimated parameters may yield
/// negative values or values above one.
pub fn joint_prob(params: &ParamTriplet, seq: &SymbolSequence) -> Result<f64> {
    seq.check_alphabet(params.n_obs)?;
    let mut b = params.b1.clone();
    let mut log_scale = 0.0;
    for &x in seq.symbols() {
        b = &params.b_ops[x] * b;
        let scale = b.amax();
        if scale == 0.0 {
            return Ok(0.0);
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("joint_prob".into()));
        }
        b /= scale;
        log_scale += scale.ln();
    }
    Ok(params.b_inf.dot(&b) * log_scale.exp())
}

pub fn joint_prob_clamped(params: &ParamTriplet, seq: &SymbolSequence) -> Result<f64> {
    Ok(joint_prob(params, seq)?.max(PROB_FLOOR))
}

/// Filtering state `b_t`, kept normalized so that `b_inf^T b_t = 1`.
#[derive(Clone, Debug)]
pub struct PredictState<'a> {
    params: &'a ParamTriplet,
    state: DVector<f64>,
    log_scale: f64,
    degenerate: bool,
}

impl<'a> PredictState<'a> {
    pub fn new(params: &'a ParamTriplet) -> Self {
        let mut s = Self {
            params,
            state: params.b1.clone(),
            log_scale: 0.0,
            degenerate: false,
        };
        s.normalize();
        s
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    /// Accumulated log-magnitude of the normalizers.
    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    /// Set once a normalizer was non-positive; the state was then rescaled by
    /// its max-abs entry instead.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn normalize(&mut self) {
        let z = self.params.b_inf.dot(&self.state);
        if z > f64::MIN_POSITIVE && z.is_finite() {
            self.state /= z;
            self.log_scale += z.ln();
        } else {
            self.degenerate = true;
            let a = self.state.amax();
            if a > 0.0 && a.is_finite() {
                self.state /= a;
                self.log_scale += a.ln();
            }
        }
    }

    pub fn observe(&mut self, symbol: usize) -> Result<()> {
        if symbol >= self.params.n_obs {
            return Err(Error::SymbolOutOfRange { symbol, n_obs: self.params.n_obs });
        }
        self.state = &self.params.b_ops[symbol] * &self.state;
        self.normalize();
        Ok(())
    }

    /// Raw scores `b_inf^T B_x b_t` for every symbol.
    pub fn scores(&self) -> Vec<f64> {
        self.params
            .b_ops
            .iter()
            .map(|b| self.params.b_inf.dot(&(b * &self.state)))
            .collect()
    }

    pub fn next_distribution(&self) -> NextSymbolDist {
        let scores = self.scores();
        let clipped: Vec<f64> = scores
            .iter()
            .map(|&s| if s.is_finite() { s.max(0.0) } else { 0.0 })
            .collect();
        let total: f64 = clipped.iter().sum();
        let n = clipped.len();
        if total > 0.0 {
            NextSymbolDist {
                probs: clipped.iter().map(|s| s / total).collect(),
                degenerate: false,
            }
        } else {
            NextSymbolDist { probs: vec![1.0 / n as f64; n], degenerate: true }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NextSymbolDist {
    pub probs: Vec<f64>,
    /// All raw scores were non-positive and the uniform law was returned.
    pub degenerate: bool,
}

impl NextSymbolDist {
    /// Most probable symbol, smallest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn next_symbol_dist(params: &ParamTriplet, history: &SymbolSequence) -> Result<NextSymbolDist> {
    history.check_alphabet(params.n_obs)?;
    let mut st = PredictState::new(params);
    for &x in history.symbols() {
        st.observe(x)?;
    }
    Ok(st.next_distribution())
}

/// `(S b1, {S B_x S^-1}, S^-T b_inf)`. The projection, if any, is carried over
/// unchanged.
pub fn similarity_transform(params: &ParamTriplet, s: &DMatrix<f64>) -> Result<ParamTriplet> {
    let d = params.dim;
    if s.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "transform is {}x{}, expected {d}x{d}",
            s.nrows(),
            s.ncols()
        )));
    }
    let cond = condition_number(s);
    if !(cond < MAX_TRANSFORM_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let s_inv = s.clone().try_inverse().ok_or(Error::IllConditioned(f64::INFINITY))?;
    ParamTriplet::new(
        s * &params.b1,
        s_inv.transpose() * &params.b_inf,
        params.b_ops.iter().map(|b| s * b * &s_inv).collect(),
        params.projection.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> ParamTriplet {
        let one = DVector::from_element(1, 1.0);
        ParamTriplet::new(one.clone(), one, vec![DMatrix::from_element(1, 1, 1.0)], None).unwrap()
    }

    fn toy() -> ParamTriplet {
        ParamTriplet::new(
            DVector::from_vec(vec![0.6, 0.4]),
            DVector::from_vec(vec![1.0, 1.0]),
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.2, 0.3]),
                DMatrix::from_row_slice(2, 2, &[0.2, 0.4, 0.1, 0.2]),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn scalar_system_is_certain() {
        let p = scalar();
        for len in 0..5 {
            let s = SymbolSequence::new(vec![0; len]);
            assert_eq!(joint_prob(&p, &s).unwrap(), 1.0);
        }
    }

    #[test]
    fn rescaling_matches_direct_product() {
        let p = toy();
        let s = SymbolSequence::new(vec![0, 1, 1, 0, 1]);
        let mut b = p.b1.clone();
        for &x in s.symbols() {
            b = &p.b_ops[x] * b;
        }
        let direct = p.b_inf.dot(&b);
        assert!((joint_prob(&p, &s).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_symbol() {
        let s = SymbolSequence::new(vec![0, 2]);
        assert!(matches!(joint_prob(&toy(), &s), Err(Error::SymbolOutOfRange { symbol: 2, .. })));
        assert!(next_symbol_dist(&toy(), &s).is_err());
    }

    #[test]
    fn clamped_variant_floors() {
        let p = ParamTriplet::new(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -1.0),
            vec![DMatrix::from_element(1, 1, 1.0)],
            None,
        )
        .unwrap();
        let s = SymbolSequence::new(vec![0]);
        assert_eq!(joint_prob(&p, &s).unwrap(), -1.0);
        assert_eq!(joint_prob_clamped(&p, &s).unwrap(), PROB_FLOOR);
    }

    #[test]
    fn next_distribution_is_normalized() {
        let d = next_symbol_dist(&toy(), &SymbolSequence::new(vec![1, 0, 0])).unwrap();
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn all_negative_scores_fall_back_to_uniform() {
        let p = ParamTriplet::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            vec![DMatrix::from_element(2, 2, -1.0), DMatrix::from_element(2, 2, -2.0)],
            None,
        )
        .unwrap();
        let d = next_symbol_dist(&p, &SymbolSequence::new(vec![])).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.probs, vec![0.5, 0.5]);
        assert_eq!(d.argmax(), 0);
    }

    #[test]
    fn filtering_state_is_normalized() {
        let p = toy();
        let mut st = PredictState::new(&p);
        for x in [0, 1, 1] {
            st.observe(x).unwrap();
            assert!((p.b_inf.dot(st.state()) - 1.0).abs() < 1e-9);
        }
        assert!(!st.is_degenerate());
    }

    #[test]
    fn similarity_identity_and_inverse() {
        let p = toy();
        let id = similarity_transform(&p, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(id, p);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, -0.1, 0.5]);
        let back = similarity_transform(
            &similarity_transform(&p, &s).unwrap(),
            &s.clone().try_inverse().unwrap(),
        )
        .unwrap();
        assert!((back.b1 - &p.b1).amax() < 1e-9);
        for x in 0..2 {
            assert!((&back.b_ops[x] - &p.b_ops[x]).amax() < 1e-9);
        }
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let t = similarity_transform(&p, &diag).unwrap();
        let seq = SymbolSequence::new(vec![0, 1, 0]);
        assert!((joint_prob(&t, &seq).unwrap() - joint_prob(&p, &seq).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn singular_transform_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-9]);
        assert!(matches!(similarity_transform(&toy(), &s), Err(Error::IllConditioned(_))));
    }
}
