//! Aggregated experiment reports and their CSV / JSON renderings.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::experiment::{CellResult, Estimator, ExperimentConfig, Scenario, Setting};
use crate::metrics::mean_se;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Standard error over replicates; absent below two values.
    pub se: Option<f64>,
    pub n: usize,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, se) = mean_se(values);
        Some(Self { mean, se, n: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: Estimator,
    pub relnorm: Option<Stat>,
    pub relnorm_l2: Option<Stat>,
    pub prederr: Option<Stat>,
    pub b0: Option<Stat>,
    pub b0_sigma: Option<Stat>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub included_sequences: usize,
    pub excluded_sequences: usize,
    pub replicates: Vec<CellResult>,
}

impl CellSummary {
    /// Mean of the named metric, if present.
    pub fn metric(&self, name: &str) -> Option<&Stat> {
        match name {
            "relnorm" => self.relnorm.as_ref(),
            "relnorm_l2" => self.relnorm_l2.as_ref(),
            "prederr" => self.prederr.as_ref(),
            "b0" => self.b0.as_ref(),
            "b0_sigma" => self.b0_sigma.as_ref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub label: String,
    pub value: f64,
    pub rank: usize,
    pub n_train: usize,
    pub cells: Vec<CellSummary>,
}

impl SettingReport {
    pub fn cell(&self, est: Estimator) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.estimator == est)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software: String,
    pub version: String,
    pub seed: u64,
    pub generated_unix_secs: u64,
}

/// An ordering the report asserts about its own numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Metric shown in the wide table.
    pub primary_metric: String,
    pub settings: Vec<SettingReport>,
    #[serde(default)]
    pub checks: Vec<Check>,
    pub provenance: Provenance,
}

/// Relative slack for orderings between values that agree analytically.
pub const ORDER_RTOL: f64 = 1e-12;

/// `B_0` of the M-estimator must not exceed the spectral one from length 25 on.
fn string_checks(cfg: &ExperimentConfig, settings: &[SettingReport]) -> Vec<Check> {
    if !matches!(cfg.scenario, Scenario::DeterministicString { .. }) {
        return vec![];
    }
    let b0 = |s: &SettingReport, e| s.cell(e).and_then(|c| c.b0.as_ref()).map(|v| v.mean);
    settings
        .iter()
        .filter(|s| s.value >= 25.0)
        .filter_map(|s| {
            let (spec, m) = (b0(s, Estimator::Spec)?, b0(s, Estimator::M)?);
            Some(Check {
                name: format!("b0_m_le_spec_at_{}", s.label),
                passed: m <= spec + ORDER_RTOL * spec.abs(),
                detail: format!("m {m:e}, spec {spec:e}"),
            })
        })
        .collect()
}

fn primary_metric(cfg: &ExperimentConfig) -> &'static str {
    match cfg.scenario {
        Scenario::DeterministicString { .. } => "b0",
        Scenario::DatasetFile { .. } | Scenario::SyntheticHmm { .. } => "prederr",
        _ => "relnorm",
    }
}

pub(crate) fn summarize(cfg: &ExperimentConfig, settings: &[Setting], results: &[Vec<CellResult>]) -> ExperimentReport {
    let reps = cfg.n_replicates;
    let mut out = Vec::with_capacity(settings.len());
    for (si, s) in settings.iter().enumerate() {
        let rows = &results[si * reps..(si + 1) * reps];
        let cells = cfg
            .estimators
            .iter()
            .enumerate()
            .map(|(ei, &est)| {
                let reps: Vec<CellResult> = rows.iter().map(|r| r[ei].clone()).collect();
                let ok: Vec<&CellResult> = reps.iter().filter(|c| c.error.is_none()).collect();
                let collect = |f: &dyn Fn(&CellResult) -> Option<f64>| -> Vec<f64> {
                    ok.iter().filter_map(|c| f(c)).collect()
                };
                CellSummary {
                    estimator: est,
                    relnorm: Stat::of(&collect(&|c| c.relnorm.as_ref().map(|r| r.mean))),
                    relnorm_l2: Stat::of(&collect(&|c| c.relnorm.as_ref().map(|r| r.l2))),
                    prederr: Stat::of(&collect(&|c| c.prederr.as_ref().map(|p| p.rate))),
                    b0: Stat::of(&collect(&|c| c.b0)),
                    b0_sigma: Stat::of(&collect(&|c| c.b0_sigma)),
                    n_ok: ok.len(),
                    n_failed: reps.len() - ok.len(),
                    included_sequences: ok.iter().filter_map(|c| c.relnorm.as_ref()).map(|r| r.included).sum(),
                    excluded_sequences: ok.iter().filter_map(|c| c.relnorm.as_ref()).map(|r| r.excluded).sum(),
                    replicates: reps,
                }
            })
            .collect();
        out.push(SettingReport { label: s.label.clone(), value: s.value, rank: s.rank, n_train: s.n_train, cells });
    }
    ExperimentReport {
        config: cfg.clone(),
        primary_metric: primary_metric(cfg).to_string(),
        checks: string_checks(cfg, &out),
        settings: out,
        provenance: Provenance {
            software: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            generated_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        },
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn setting_header(cfg: &ExperimentConfig) -> &'static str {
    match cfg.scenario {
        Scenario::DeterministicString { .. } => "length",
        Scenario::Ring { .. } => "rank",
        Scenario::Grid { .. } => "grid_size",
        Scenario::Chain { .. } => "reset_probability",
        Scenario::SyntheticHmm { .. } => "n_train",
        Scenario::DatasetFile { .. } => "dataset",
    }
}

impl ExperimentReport {
    /// One row per setting, one column per estimator, holding the primary
    /// metric mean.
    pub fn wide_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![setting_header(&self.config).to_string()];
        header.extend(self.config.estimators.iter().map(|e| e.name().to_string()));
        w.write_record(&header)?;
        for s in &self.settings {
            let mut row = vec![s.label.clone()];
            row.extend(s.cells.iter().map(|c| num(c.metric(&self.primary_metric).map(|m| m.mean))));
            w.write_record(&row)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }

    /// One row per setting x estimator x metric.
    pub fn long_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "setting", "value", "rank", "n_train", "estimator", "metric", "mean", "se", "n_ok", "n_failed",
            "excluded_sequences",
        ])?;
        for s in &self.settings {
            for c in &s.cells {
                for metric in ["relnorm", "relnorm_l2", "prederr", "b0", "b0_sigma"] {
                    let Some(stat) = c.metric(metric) else { continue };
                    w.write_record([
                        s.label.clone(),
                        format!("{}", s.value),
                        s.rank.to_string(),
                        s.n_train.to_string(),
                        c.estimator.name().to_string(),
                        metric.to_string(),
                        num(Some(stat.mean)),
                        num(stat.se),
                        c.n_ok.to_string(),
                        c.n_failed.to_string(),
                        c.excluded_sequences.to_string(),
                    ])?;
                }
                if c.n_ok == 0 {
                    w.write_record([
                        s.label.clone(),
                        format!("{}", s.value),
                        s.rank.to_string(),
                        s.n_train.to_string(),
                        c.estimator.name().to_string(),
                        "failed".into(),
                        String::new(),
                        String::new(),
                        "0".into(),
                        c.n_failed.to_string(),
                        "0".into(),
                    ])?;
                }
            }
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<name>_table.csv`, `<name>_long.csv` and `<name>_report.json`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let name = &self.config.name;
        let files = [
            (dir.join(format!("{name}_table.csv")), self.wide_csv()?),
            (dir.join(format!("{name}_long.csv")), self.long_csv()?),
            (dir.join(format!("{name}_report.json")), self.to_json()? + "\n"),
        ];
        let mut paths = Vec::with_capacity(files.len());
        for (p, body) in files {
            fs::write(&p, body)?;
            paths.push(p);
        }
        Ok(paths)
    }
}
