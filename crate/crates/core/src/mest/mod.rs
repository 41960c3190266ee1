//! Low-rank, weighted, L1-penalized spectral M-estimation.
//!
//! Each operator is factored as `B_x = R_x S_x^T` with `R_x, S_x` of size
//! `n x k`. For a weighting matrix `W` the criterion
//! `m^T W m + lambda N^{-1/2} ||R||_1` is minimized by alternating exact (or
//! proximal) block solves; the outer loop re-estimates `W` from the current
//! fit.

mod init;
mod objective;
mod solve;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use init::{init_from_spectral, init_random};
pub use objective::{grad, loss, penalty_scale, smooth_loss, Which};
pub use solve::{solve_r_given_s, solve_s_given_r, HalfStep, DEFICIENT_RIDGE};

use crate::hmm::TripletDataset;
use crate::moments::{estimate_stats, estimate_weight, ObservableStats, WeightMatrix, DEFAULT_RIDGE};
use crate::spectral::{fit_frobenius, ParamTriplet};
use crate::{Error, Result};

/// Losses at or below this are treated as an exact root.
const ZERO_LOSS: f64 = 1e-28;
const RESTART_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// The factors `{R_x}` and `{S_x}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub r: Vec<DMatrix<f64>>,
    pub s: Vec<DMatrix<f64>>,
}

impl FactorPair {
    pub fn new(r: Vec<DMatrix<f64>>, s: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = r.len();
        let k = r.first().map_or(0, |m| m.ncols());
        if n == 0 || k == 0 || k > n || s.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "need n >= 1 blocks of rank 1..=n, got {n} R blocks and {} S blocks of rank {k}",
                s.len()
            )));
        }
        if r.iter().chain(&s).any(|m| m.shape() != (n, k)) {
            return Err(Error::DimensionMismatch(format!("every factor block must be {n}x{k}")));
        }
        let f = Self { r, s };
        if !f.is_finite() {
            return Err(Error::NonFinite("factor entries".into()));
        }
        Ok(f)
    }

    pub fn zeros(n: usize, k: usize) -> Self {
        Self { r: vec![DMatrix::zeros(n, k); n], s: vec![DMatrix::zeros(n, k); n] }
    }

    /// See [`init_random`].
    pub fn random(n: usize, k: usize, scale: f64, seed: u64) -> Result<Self> {
        init_random(n, k, scale, seed)
    }

    pub fn n_obs(&self) -> usize {
        self.r.len()
    }

    pub fn rank(&self) -> usize {
        self.r.first().map_or(0, |m| m.ncols())
    }

    /// `B_x = R_x S_x^T`.
    pub fn b_op(&self, x: usize) -> DMatrix<f64> {
        &self.r[x] * self.s[x].transpose()
    }

    pub fn b_ops(&self) -> Vec<DMatrix<f64>> {
        (0..self.n_obs()).map(|x| self.b_op(x)).collect()
    }

    /// Sum of absolute entries of every `R_x`.
    pub fn l1_norm_r(&self) -> f64 {
        self.r.iter().map(objective::l1).sum()
    }

    pub fn frobenius_r(&self) -> f64 {
        self.r.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(&self.s).all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Ambient observable-operator parameters: `b1 = P1`, `B_x = R_x S_x^T`,
    /// `b_inf = 1`.
    pub fn to_params(&self, stats: &ObservableStats) -> Result<ParamTriplet> {
        let n = self.n_obs();
        ParamTriplet::new(stats.p1.clone(), DVector::from_element(n, 1.0), self.b_ops(), None)
    }
}

/// Options for [`fit`]. Every field is optional in a config file; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Factor rank `k`; `None` means `k = n`.
    pub rank: Option<usize>,
    pub lambda: f64,
    pub ridge: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub alt_tol: f64,
    pub alt_max_iters: usize,
    pub outer_max_iters: usize,
    pub outer_tol: f64,
    pub n_random_restarts: usize,
    pub seed: u64,
    /// Standard scale of random restarts; `None` derives it from the spectral
    /// start as `||R||_F / n`.
    pub init_scale: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rank: None,
            lambda: 0.0,
            ridge: DEFAULT_RIDGE,
            inner_tol: 1e-9,
            inner_max_iters: 500,
            alt_tol: 1e-7,
            alt_max_iters: 100,
            outer_max_iters: 5,
            outer_tol: 1e-4,
            n_random_restarts: 5,
            seed: 0,
            init_scale: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.rank == Some(0) {
            return bad("rank must be at least 1");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and >= 0");
        }
        for (name, v) in [
            ("ridge", self.ridge),
            ("inner_tol", self.inner_tol),
            ("alt_tol", self.alt_tol),
            ("outer_tol", self.outer_tol),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.inner_max_iters == 0 || self.alt_max_iters == 0 || self.outer_max_iters == 0 {
            return bad("iteration caps must be at least 1");
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0) || !s.is_finite() {
                return bad("init_scale must be positive");
            }
        }
        Ok(())
    }

    pub fn rank_for(&self, n_obs: usize) -> Result<usize> {
        let k = self.rank.unwrap_or(n_obs);
        if k == 0 || k > n_obs {
            return Err(Error::InvalidArgument(format!("rank {k} not in 1..={n_obs}")));
        }
        Ok(k)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Output of [`alt_min`].
#[derive(Clone, Debug)]
pub struct AltMinResult {
    pub factors: FactorPair,
    /// Loss at the start followed by the loss after each R-then-S pass.
    pub losses: Vec<f64>,
    pub converged: bool,
    pub ridged_blocks: usize,
}

impl AltMinResult {
    pub fn iterations(&self) -> usize {
        self.losses.len() - 1
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("initial loss is always recorded")
    }
}

/// Alternates [`solve_r_given_s`] and [`solve_s_given_r`] under a fixed
/// weight until the relative loss decrease drops below `cfg.alt_tol`.
pub fn alt_min(
    init: &FactorPair,
    weight: &WeightMatrix,
    stats: &ObservableStats,
    lambda: f64,
    n_samples: usize,
    cfg: &FitConfig,
) -> Result<AltMinResult> {
    let mut factors = init.clone();
    let mut prev = loss(&factors, weight, stats, lambda, n_samples)?;
    if !prev.is_finite() {
        return Err(Error::NonFinite("initial loss".into()));
    }
    let mut losses = vec![prev];
    let mut ridged = 0;
    let mut converged = false;
    for _ in 0..cfg.alt_max_iters {
        let r_step = solve_r_given_s(&factors, weight, stats, lambda, n_samples, cfg)?;
        factors.r = r_step.mats;
        let s_step = solve_s_given_r(&factors, weight, stats)?;
        factors.s = s_step.mats;
        ridged += r_step.ridged_blocks.len() + s_step.ridged_blocks.len();
        if !factors.is_finite() {
            return Err(Error::NonFinite("factors after alternating step".into()));
        }
        let cur = loss(&factors, weight, stats, lambda, n_samples)?;
        losses.push(cur);
        if cur <= ZERO_LOSS || prev - cur <= cfg.alt_tol * prev {
            converged = true;
            break;
        }
        prev = cur;
    }
    Ok(AltMinResult { factors, losses, converged, ridged_blocks: ridged })
}

/// One pass of the outer loop of a single restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub restart: usize,
    pub outer_index: usize,
    pub loss_after_alt_min: f64,
    pub penalty_value: f64,
    pub alt_losses: Vec<f64>,
    pub alt_converged: bool,
    pub ridged_blocks: usize,
    /// Largest per-block condition proxy of the weight in force.
    pub weight_condition_max: f64,
    /// Relative change of the operators against the previous pass.
    pub param_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub index: usize,
    /// `"spectral"` or `"random"`.
    pub kind: String,
    pub seed: Option<u64>,
    pub final_loss: Option<f64>,
    /// Loss of the first-pass (identity-weight) parameters under the final
    /// weight.
    pub first_pass_loss_under_final_weight: Option<f64>,
    pub outer_iterations: usize,
    pub outer_converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub rank: usize,
    pub lambda: f64,
    pub n_samples: usize,
    pub records: Vec<OuterRecord>,
    pub restarts: Vec<RestartSummary>,
    pub chosen_restart: usize,
    pub provenance: Provenance,
}

impl FitTrace {
    /// Records of the chosen restart.
    pub fn chosen_records(&self) -> impl Iterator<Item = &OuterRecord> {
        self.records.iter().filter(move |r| r.restart == self.chosen_restart)
    }

    pub fn final_loss(&self) -> f64 {
        self.restarts[self.chosen_restart].final_loss.unwrap_or(f64::NAN)
    }
}

struct RestartOutcome {
    factors: FactorPair,
    final_loss: f64,
    first_pass_loss: f64,
    records: Vec<OuterRecord>,
    converged: bool,
}

fn relative_change(old: &FactorPair, new: &FactorPair) -> f64 {
    let mut diff = 0.0;
    let mut base = 0.0;
    for x in 0..old.n_obs() {
        let a = old.b_op(x);
        diff += (new.b_op(x) - &a).norm_squared();
        base += a.norm_squared();
    }
    if base > 0.0 {
        (diff / base).sqrt()
    } else if diff > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn max_condition(w: &WeightMatrix) -> f64 {
    w.condition_proxy().iter().cloned().fold(1.0, f64::max)
}

struct Problem<'a> {
    stats: &'a ObservableStats,
    data: Option<&'a TripletDataset>,
    cfg: &'a FitConfig,
    n_samples: usize,
}

impl Problem<'_> {
    fn record(&self, restart: usize, outer_index: usize, w: &WeightMatrix, res: &AltMinResult, change: Option<f64>) -> OuterRecord {
        OuterRecord {
            restart,
            outer_index,
            loss_after_alt_min: res.final_loss(),
            penalty_value: penalty_scale(self.cfg.lambda, self.n_samples) * res.factors.l1_norm_r(),
            alt_losses: res.losses.clone(),
            alt_converged: res.converged,
            ridged_blocks: res.ridged_blocks,
            weight_condition_max: max_condition(w),
            param_change: change,
        }
    }

    fn run(&self, restart: usize, init: &FactorPair) -> Result<RestartOutcome> {
        let (stats, cfg, n_samples) = (self.stats, self.cfg, self.n_samples);
        let identity = WeightMatrix::identity(stats.n_obs);
        let first = alt_min(init, &identity, stats, cfg.lambda, n_samples, cfg)?;
        let mut records = vec![self.record(restart, 1, &identity, &first, None)];
        let first_params = first.factors;
        let mut current = first_params.clone();
        let mut final_loss = first.losses[first.losses.len() - 1];
        let mut first_pass_loss = final_loss;
        let mut converged = self.data.is_none();
        if let Some(data) = self.data {
            for s in 2..=cfg.outer_max_iters {
                let w = estimate_weight(data, &current, stats, cfg.ridge)?;
                let l_cur = loss(&current, &w, stats, cfg.lambda, n_samples)?;
                let l_first = loss(&first_params, &w, stats, cfg.lambda, n_samples)?;
                let start = if l_first < l_cur { &first_params } else { &current };
                let res = alt_min(start, &w, stats, cfg.lambda, n_samples, cfg)?;
                let change = relative_change(&current, &res.factors);
                records.push(self.record(restart, s, &w, &res, Some(change)));
                final_loss = res.final_loss();
                first_pass_loss = l_first;
                current = res.factors;
                if change < cfg.outer_tol {
                    converged = true;
                    break;
                }
            }
        }
        Ok(RestartOutcome { factors: current, final_loss, first_pass_loss, records, converged })
    }
}

/// Fits the M-estimator to a triplet dataset.
pub fn fit(data: &TripletDataset, cfg: &FitConfig) -> Result<(ParamTriplet, FitTrace)> {
    let stats = estimate_stats(data)?;
    fit_from_stats(&stats, Some(data), cfg)
}

/// Fits from precomputed statistics. Without the underlying triplets the
/// weight cannot be re-estimated, so only the identity-weight pass runs.
pub fn fit_from_stats(
    stats: &ObservableStats,
    data: Option<&TripletDataset>,
    cfg: &FitConfig,
) -> Result<(ParamTriplet, FitTrace)> {
    cfg.validate()?;
    let started = Instant::now();
    let n = stats.n_obs;
    let k = cfg.rank_for(n)?;
    if let Some(d) = data {
        if d.n_obs() != n {
            return Err(Error::DimensionMismatch("dataset and statistics alphabets differ".into()));
        }
    }
    let n_samples = data.map_or(stats.sample_count, |d| d.len()).max(1);
    let problem = Problem { stats, data, cfg, n_samples };

    let spectral = fit_frobenius(stats, k).and_then(|t| init_from_spectral(&t, k));
    let scale = cfg.init_scale.unwrap_or_else(|| match &spectral {
        Ok(f) if f.frobenius_r() > 0.0 => f.frobenius_r() / n as f64,
        _ => 1.0,
    });

    let outcomes: Vec<(RestartSummary, Option<RestartOutcome>)> = (0..=cfg.n_random_restarts)
        .into_par_iter()
        .map(|idx| {
            let (kind, seed, init) = if idx == 0 {
                ("spectral", None, spectral.as_ref().map(FactorPair::clone).map_err(|e| Error::InvalidArgument(format!("spectral start: {e}"))))
            } else {
                let seed = cfg.seed ^ (idx as u64).wrapping_mul(RESTART_SEED_STRIDE);
                ("random", Some(seed), init_random(n, k, scale, seed))
            };
            let run = init.and_then(|f| problem.run(idx, &f));
            let mut summary = RestartSummary {
                index: idx,
                kind: kind.to_string(),
                seed,
                final_loss: None,
                first_pass_loss_under_final_weight: None,
                outer_iterations: 0,
                outer_converged: false,
                error: None,
            };
            match run {
                Ok(out) => {
                    summary.final_loss = Some(out.final_loss);
                    summary.first_pass_loss_under_final_weight = Some(out.first_pass_loss);
                    summary.outer_iterations = out.records.len();
                    summary.outer_converged = out.converged;
                    (summary, Some(out))
                }
                Err(e) => {
                    log::warn!("restart {idx} failed: {e}");
                    summary.error = Some(e.to_string());
                    (summary, None)
                }
            }
        })
        .collect();

    let mut chosen: Option<usize> = None;
    for (i, (_, out)) in outcomes.iter().enumerate() {
        if let Some(o) = out {
            let better = match chosen {
                None => true,
                Some(c) => o.final_loss < outcomes[c].1.as_ref().map_or(f64::INFINITY, |b| b.final_loss),
            };
            if better {
                chosen = Some(i);
            }
        }
    }
    let Some(chosen) = chosen else {
        let first_error = outcomes
            .iter()
            .find_map(|(s, _)| s.error.clone())
            .unwrap_or_else(|| "no restarts ran".into());
        return Err(Error::InvalidArgument(format!("every restart failed; first error: {first_error}")));
    };

    let mut records = Vec::new();
    let mut restarts = Vec::with_capacity(outcomes.len());
    let mut best = None;
    for (i, (summary, out)) in outcomes.into_iter().enumerate() {
        restarts.push(summary);
        if let Some(o) = out {
            records.extend(o.records);
            if i == chosen {
                best = Some(o.factors);
            }
        }
    }
    let factors = best.expect("chosen restart has factors");
    let params = factors.to_params(stats)?;
    let trace = FitTrace {
        rank: k,
        lambda: cfg.lambda,
        n_samples,
        records,
        restarts,
        chosen_restart: chosen,
        provenance: Provenance { wall_time_secs: started.elapsed().as_secs_f64() },
    };
    Ok((params, trace))
}
