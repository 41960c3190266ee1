//! Experiment configurations and the replicate runner.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use specmoment_core::hmm::{
    make_chain_noisy, make_deterministic_string, make_grid, make_random, make_ring, sample_sequences,
    sample_triplets,
};
use specmoment_core::linalg::svd;
use specmoment_core::mest::fit;
use specmoment_core::moments::estimate_stats;
use specmoment_core::spectral::{fit_hsu, top_left_singular, SpectralOptions};
use specmoment_core::{FitConfig, FitTrace, HmmModel, ParamTriplet, SymbolSequence, TripletDataset, TripletMode};

use crate::dataset::{load_sequences, split_sequences, Alphabet, TokenMode};
use crate::metrics::{predictive_error, rel_norm_diff, PredError, RelNorm};
use crate::report::{summarize, ExperimentReport};
use crate::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Spec,
    M,
    MRegularized,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Spec => "spec",
            Self::M => "m",
            Self::MRegularized => "m_regularized",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spec" => Ok(Self::Spec),
            "m" => Ok(Self::M),
            "m_regularized" | "m-regularized" => Ok(Self::MRegularized),
            other => Err(BenchError::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// The string of ten zeros followed by ones, fitted at rank 1 from its
    /// sliding windows.
    DeterministicString { lengths: Vec<usize> },
    Ring { ranks: Vec<usize> },
    Grid {
        sizes: Vec<[usize; 2]>,
        obs_acc: f64,
        /// Defaults to the number of cells.
        rank: Option<usize>,
    },
    Chain {
        p_reset: Vec<f64>,
        n_states: usize,
        obs_noise: f64,
        rank: usize,
    },
    SyntheticHmm {
        n_hidden: usize,
        n_obs: usize,
        train_sizes: Vec<usize>,
        concentration: f64,
        /// Defaults to `n_hidden`.
        rank: Option<usize>,
    },
    DatasetFile {
        path: PathBuf,
        alphabet: Option<PathBuf>,
        token_mode: TokenMode,
        train_fraction: f64,
        rank: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: Scenario,
    /// Training triplets per replicate (toy scenarios).
    pub n_train: usize,
    pub triplet_mode: TripletMode,
    pub n_test_sequences: usize,
    pub test_sequence_length: usize,
    pub estimators: Vec<Estimator>,
    /// Penalty used by the regularized estimator.
    pub lambda_regularized: f64,
    #[serde(default)]
    pub fit: FitConfig,
    pub seed: u64,
    pub n_replicates: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.estimators.is_empty() {
            return bad("at least one estimator is required");
        }
        if self.n_replicates == 0 || self.n_train == 0 {
            return bad("n_replicates and n_train must be positive");
        }
        if self.n_test_sequences == 0 || self.test_sequence_length == 0 {
            return bad("test set size and sequence length must be positive");
        }
        if !(self.lambda_regularized >= 0.0) {
            return bad("lambda_regularized must be >= 0");
        }
        self.fit.validate()?;
        let empty = match &self.scenario {
            Scenario::DeterministicString { lengths } => lengths.is_empty(),
            Scenario::Ring { ranks } => ranks.is_empty(),
            Scenario::Grid { sizes, .. } => sizes.is_empty(),
            Scenario::Chain { p_reset, .. } => p_reset.is_empty(),
            Scenario::SyntheticHmm { train_sizes, .. } => train_sizes.is_empty(),
            Scenario::DatasetFile { .. } => false,
        };
        if empty {
            return bad("scenario lists no settings");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    /// Whether relnorm against a true model is available.
    pub fn has_truth(&self) -> bool {
        !matches!(self.scenario, Scenario::DeterministicString { .. } | Scenario::DatasetFile { .. })
    }
}

/// Paper-mirroring defaults for `string`, `ring`, `grid`, `chain` and
/// `synthetic`.
pub fn preset(name: &str, seed: u64) -> Result<ExperimentConfig> {
    let all = vec![Estimator::Spec, Estimator::M, Estimator::MRegularized];
    let base = |scenario, n_train, mode, lambda, reps| ExperimentConfig {
        name: name.to_string(),
        scenario,
        n_train,
        triplet_mode: mode,
        n_test_sequences: 100,
        test_sequence_length: 4,
        estimators: all.clone(),
        lambda_regularized: lambda,
        fit: FitConfig::default(),
        seed,
        n_replicates: reps,
    };
    let cfg = match name {
        "string" => ExperimentConfig {
            estimators: vec![Estimator::Spec, Estimator::M],
            ..base(
                Scenario::DeterministicString { lengths: vec![10, 15, 25, 50] },
                1,
                TripletMode::Sliding,
                0.0,
                1,
            )
        },
        "ring" => base(Scenario::Ring { ranks: vec![4, 3, 2] }, 100, TripletMode::Independent, 0.01, 30),
        "grid" => base(
            Scenario::Grid { sizes: vec![[2, 2], [3, 3]], obs_acc: 0.9, rank: None },
            100_000,
            TripletMode::Independent,
            1e-3,
            5,
        ),
        "chain" => base(
            Scenario::Chain { p_reset: vec![0.1, 0.3, 0.5], n_states: 5, obs_noise: 0.0, rank: CHAIN_RANK },
            50,
            TripletMode::Sliding,
            1e-3,
            30,
        ),
        "synthetic" => ExperimentConfig {
            estimators: vec![Estimator::Spec, Estimator::M],
            ..base(
                Scenario::SyntheticHmm {
                    n_hidden: 5,
                    n_obs: 10,
                    train_sizes: vec![100, 1000, 10_000],
                    concentration: 1.0,
                    rank: None,
                },
                1,
                TripletMode::Independent,
                0.0,
                10,
            )
        },
        other => return Err(BenchError::Config(format!("unknown experiment '{other}'"))),
    };
    Ok(cfg)
}

const CHAIN_RANK: usize = 3;

/// One row of a report table.
#[derive(Clone, Debug)]
pub(crate) struct Setting {
    pub label: String,
    pub value: f64,
    pub rank: usize,
    pub n_train: usize,
    pub source: Source,
}

#[derive(Clone, Debug)]
pub(crate) enum Source {
    Model(Box<HmmModel>),
    /// A fresh random model per replicate.
    RandomModel { n_obs: usize, n_hidden: usize, concentration: f64 },
    Fixed { train: TripletDataset, test: Vec<SymbolSequence> },
}

fn settings(cfg: &ExperimentConfig) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    match &cfg.scenario {
        Scenario::DeterministicString { lengths } => {
            for &len in lengths {
                let s = make_deterministic_string(len)?;
                let train = TripletDataset::from_sequences(std::slice::from_ref(&s), 2)?;
                out.push(Setting {
                    label: len.to_string(),
                    value: len as f64,
                    rank: 1,
                    n_train: train.len(),
                    source: Source::Fixed { train, test: vec![] },
                });
            }
        }
        Scenario::Ring { ranks } => {
            let model = make_ring();
            for &k in ranks {
                out.push(Setting {
                    label: k.to_string(),
                    value: k as f64,
                    rank: k,
                    n_train: cfg.n_train,
                    source: Source::Model(Box::new(model.clone())),
                });
            }
        }
        Scenario::Grid { sizes, obs_acc, rank } => {
            for &[r, c] in sizes {
                let model = make_grid(r, c, *obs_acc)?;
                out.push(Setting {
                    label: format!("{r}x{c}"),
                    value: (r * c) as f64,
                    rank: rank.unwrap_or(r * c).min(r * c),
                    n_train: cfg.n_train,
                    source: Source::Model(Box::new(model)),
                });
            }
        }
        Scenario::Chain { p_reset, n_states, obs_noise, rank } => {
            for &p in p_reset {
                out.push(Setting {
                    label: format!("{p}"),
                    value: p,
                    rank: *rank,
                    n_train: cfg.n_train,
                    source: Source::Model(Box::new(make_chain_noisy(*n_states, p, *obs_noise)?)),
                });
            }
        }
        Scenario::SyntheticHmm { n_hidden, n_obs, train_sizes, concentration, rank } => {
            for &n in train_sizes {
                out.push(Setting {
                    label: n.to_string(),
                    value: n as f64,
                    rank: rank.unwrap_or(*n_hidden),
                    n_train: n,
                    source: Source::RandomModel { n_obs: *n_obs, n_hidden: *n_hidden, concentration: *concentration },
                });
            }
        }
        Scenario::DatasetFile { path, alphabet, token_mode, train_fraction, rank } => {
            let alpha = alphabet.as_deref().map(Alphabet::load).transpose()?;
            let (seqs, induced) = load_sequences(path, alpha.as_ref(), *token_mode)?;
            let (train, test) = split_sequences(&seqs, *train_fraction)?;
            let train = TripletDataset::from_sequences(&train, induced.len())?;
            out.push(Setting {
                label: path.file_name().map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned()),
                value: train.len() as f64,
                rank: *rank,
                n_train: train.len(),
                source: Source::Fixed { train, test },
            });
        }
    }
    Ok(out)
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, setting: usize, replicate: usize, stream: u64) -> u64 {
    mix(mix(mix(base ^ mix(setting as u64)) ^ replicate as u64) ^ stream)
}

/// Compact, timing-free view of a [`FitTrace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub chosen_restart: usize,
    pub final_loss: f64,
    pub outer_losses: Vec<f64>,
    pub failed_restarts: usize,
}

impl From<&FitTrace> for TraceSummary {
    fn from(t: &FitTrace) -> Self {
        Self {
            chosen_restart: t.chosen_restart,
            final_loss: t.final_loss(),
            outer_losses: t.chosen_records().map(|r| r.loss_after_alt_min).collect(),
            failed_restarts: t.restarts.iter().filter(|r| r.error.is_some()).count(),
        }
    }
}

/// Metrics of one estimator on one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub replicate: usize,
    pub relnorm: Option<RelNorm>,
    pub prederr: Option<PredError>,
    /// Scalar summary of the operator for symbol 0 (rank-1 string runs).
    pub b0: Option<f64>,
    pub b0_sigma: Option<f64>,
    pub trace: Option<TraceSummary>,
    pub error: Option<String>,
}

/// Scalar `B_0` value: the operator itself for a one-dimensional projected
/// fit, `u^T B_0 u` along the top left singular vector of `P21` for an
/// ambient one.
pub fn b0_scalar(params: &ParamTriplet, p21: &nalgebra::DMatrix<f64>) -> Result<(f64, f64)> {
    let b0 = &params.b_ops[0];
    let sigma = svd(b0).s[0];
    if params.dim == 1 {
        return Ok((b0[(0, 0)], sigma));
    }
    let u = top_left_singular(p21, 1, &SpectralOptions::default())?;
    Ok(((u.transpose() * b0 * &u)[(0, 0)], sigma))
}

pub fn fit_estimator(
    est: Estimator,
    data: &TripletDataset,
    rank: usize,
    base: &FitConfig,
    lambda_regularized: f64,
    seed: u64,
) -> Result<(ParamTriplet, Option<FitTrace>)> {
    match est {
        Estimator::Spec => Ok((fit_hsu(&estimate_stats(data)?, rank)?, None)),
        Estimator::M | Estimator::MRegularized => {
            let cfg = FitConfig {
                rank: Some(rank),
                lambda: if est == Estimator::M { 0.0 } else { lambda_regularized },
                seed,
                ..base.clone()
            };
            let (p, t) = fit(data, &cfg)?;
            Ok((p, Some(t)))
        }
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    est: Estimator,
    setting: &Setting,
    replicate: usize,
    data: &TripletDataset,
    test: &[SymbolSequence],
    truth: Option<&HmmModel>,
    fit_seed: u64,
) -> CellResult {
    let mut cell = CellResult {
        replicate,
        relnorm: None,
        prederr: None,
        b0: None,
        b0_sigma: None,
        trace: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let (params, trace) = fit_estimator(est, data, setting.rank, &cfg.fit, cfg.lambda_regularized, fit_seed)?;
        cell.trace = trace.as_ref().map(TraceSummary::from);
        if let Some(model) = truth {
            cell.relnorm = Some(rel_norm_diff(&params, model, test)?);
        }
        if test.iter().any(|s| s.len() >= 2) {
            cell.prederr = Some(predictive_error(&params, test)?);
        }
        if matches!(cfg.scenario, Scenario::DeterministicString { .. }) {
            let (b0, sigma) = b0_scalar(&params, &estimate_stats(data)?.p21)?;
            cell.b0 = Some(b0);
            cell.b0_sigma = Some(sigma);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("{} / {} / replicate {replicate}: {e}", setting.label, est.name());
        cell.error = Some(e.to_string());
    }
    cell
}

type ReplicateCells = Vec<CellResult>;

fn run_replicate(cfg: &ExperimentConfig, si: usize, setting: &Setting, rep: usize) -> ReplicateCells {
    let data_seed = derive_seed(cfg.seed, si, rep, 1);
    let test_seed = derive_seed(cfg.seed, si, rep, 2);
    let fit_seed = derive_seed(cfg.seed, si, rep, 3);
    let model_seed = derive_seed(cfg.seed, si, rep, 4);
    let prepared = (|| -> Result<(TripletDataset, Vec<SymbolSequence>, Option<HmmModel>)> {
        match &setting.source {
            Source::Fixed { train, test } => Ok((train.clone(), test.clone(), None)),
            Source::Model(model) => Ok((
                sample_triplets(model, setting.n_train, cfg.triplet_mode, data_seed)?,
                sample_sequences(model, cfg.n_test_sequences, cfg.test_sequence_length, test_seed)?,
                Some((**model).clone()),
            )),
            Source::RandomModel { n_obs, n_hidden, concentration } => {
                let model = make_random(*n_obs, *n_hidden, *concentration, model_seed)?;
                Ok((
                    sample_triplets(&model, setting.n_train, cfg.triplet_mode, data_seed)?,
                    sample_sequences(&model, cfg.n_test_sequences, cfg.test_sequence_length, test_seed)?,
                    Some(model),
                ))
            }
        }
    })();
    match prepared {
        Ok((data, test, truth)) => cfg
            .estimators
            .iter()
            .map(|&est| run_cell(cfg, est, setting, rep, &data, &test, truth.as_ref(), fit_seed))
            .collect(),
        Err(e) => cfg
            .estimators
            .iter()
            .map(|_| CellResult {
                replicate: rep,
                relnorm: None,
                prederr: None,
                b0: None,
                b0_sigma: None,
                trace: None,
                error: Some(format!("data generation failed: {e}")),
            })
            .collect(),
    }
}

/// Runs every (setting, replicate) pair in parallel and aggregates in a fixed
/// order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let settings = settings(cfg)?;
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..cfg.n_replicates).map(move |r| (s, r)))
        .collect();
    let results: Vec<ReplicateCells> = jobs
        .par_iter()
        .map(|&(si, rep)| run_replicate(cfg, si, &settings[si], rep))
        .collect();
    Ok(summarize(cfg, &settings, &results))
}
