//! Evaluation metrics for fitted parameters.

use serde::{Deserialize, Serialize};
use specmoment_core::hmm::true_joint_prob;
use specmoment_core::{joint_prob, HmmModel, ParamTriplet, PredictState, SymbolSequence};

use crate::{BenchError, Result};

/// Test sequences whose true probability is below this are skipped.
pub const EXCLUSION_FLOOR: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelNorm {
    /// Mean over sequences of `|P_hat(s) - P(s)| / P(s)`.
    pub mean: f64,
    /// `||P_hat - P||_2 / ||P||_2` over the same sequences.
    pub l2: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Relative error of the (unclamped) estimated joint probabilities against
/// the true model.
pub fn rel_norm_diff(params: &ParamTriplet, model: &HmmModel, test: &[SymbolSequence]) -> Result<RelNorm> {
    if test.is_empty() {
        return Err(BenchError::EmptyTestSet);
    }
    let mut sum_rel = 0.0;
    let mut sq_diff = 0.0;
    let mut sq_true = 0.0;
    let mut included = 0;
    for seq in test {
        let p = true_joint_prob(model, seq)?;
        if p < EXCLUSION_FLOOR {
            continue;
        }
        let est = joint_prob(params, seq)?;
        sum_rel += (est - p).abs() / p;
        sq_diff += (est - p).powi(2);
        sq_true += p * p;
        included += 1;
    }
    if included == 0 {
        return Err(BenchError::AllExcluded(test.len()));
    }
    Ok(RelNorm {
        mean: sum_rel / included as f64,
        l2: (sq_diff / sq_true).sqrt(),
        included,
        excluded: test.len() - included,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredError {
    /// Fraction of predicted positions where the argmax symbol was wrong.
    pub rate: f64,
    pub positions: usize,
    /// Positions where every score was non-positive.
    pub degenerate: usize,
}

/// Argmax next-symbol mismatch rate over every position after the first.
pub fn predictive_error(params: &ParamTriplet, test: &[SymbolSequence]) -> Result<PredError> {
    let mut wrong = 0usize;
    let mut positions = 0usize;
    let mut degenerate = 0usize;
    for seq in test {
        seq.check_alphabet(params.n_obs)?;
        let mut st = PredictState::new(params);
        for (t, &x) in seq.symbols().iter().enumerate() {
            if t > 0 {
                let d = st.next_distribution();
                if d.degenerate {
                    degenerate += 1;
                }
                if d.argmax() != x {
                    wrong += 1;
                }
                positions += 1;
            }
            st.observe(x)?;
        }
    }
    if positions == 0 {
        return Err(BenchError::EmptyTestSet);
    }
    Ok(PredError { rate: wrong as f64 / positions as f64, positions, degenerate })
}

/// Mean and standard error; the error is `None` below two values.
pub fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some((var / n as f64).sqrt()))
}
