//! `specmoment`: simulate triplet data, fit the spectral and M-estimators,
//! evaluate fitted parameters and reproduce the toy experiments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specmoment_bench::dataset::{load_sequences, read_triplets, write_sequences, write_triplets, Alphabet, TokenMode};
use specmoment_bench::{predictive_error, preset, rel_norm_diff, run_experiment, ExperimentConfig};
use specmoment_core::hmm::{
    make_chain_noisy, make_deterministic_string, make_grid, make_random, make_ring, sample_sequences, sample_triplets,
};
use specmoment_core::moments::estimate_stats;
use specmoment_core::spectral::{fit_hsu, operator_residuals};
use specmoment_core::{mest, FitConfig, HmmModel, ParamTriplet, TripletDataset, TripletMode};

#[derive(Parser, Debug)]
#[command(name = "specmoment", version, about = "Spectral method-of-moments estimation for discrete hidden Markov models")]
struct Cli {
    /// Worker threads for the parallel block and replicate solves
    /// [default: available parallelism]
    #[arg(long, global = true, env = "SPECMOMENT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a triplet file from a toy HMM and save the generating model
    Simulate(SimulateArgs),
    /// Fit the spectral or M-estimator to a triplet file
    Fit(FitArgs),
    /// Score fitted parameters against a true model or held-out sequences
    Eval(EvalArgs),
    /// Run a preset experiment and write its report tables
    Repro(ReproArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScenarioKind {
    Ring,
    Grid,
    Chain,
    String,
    RandomHmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Independent,
    Sliding,
}

impl From<ModeArg> for TripletMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Independent => TripletMode::Independent,
            ModeArg::Sliding => TripletMode::Sliding,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Generating model
    #[arg(long, value_enum)]
    scenario: ScenarioKind,
    /// Number of triplets to draw (ignored for `string`, which emits every window)
    #[arg(long)]
    n_triplets: Option<usize>,
    /// Triplet sampling: fresh rollout per triplet, or windows of one rollout
    #[arg(long, value_enum, default_value = "independent")]
    mode: ModeArg,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid rows (grid)
    #[arg(long, default_value_t = 2)]
    rows: usize,
    /// Grid columns (grid)
    #[arg(long, default_value_t = 2)]
    cols: usize,
    /// Probability of observing the true cell (grid)
    #[arg(long, default_value_t = 0.9)]
    obs_acc: f64,
    /// Number of chain states (chain)
    #[arg(long, default_value_t = 5)]
    states: usize,
    /// Probability of resetting to the first state (chain)
    #[arg(long, default_value_t = 0.5)]
    p_reset: f64,
    /// Observation noise (chain)
    #[arg(long, default_value_t = 0.0)]
    obs_noise: f64,
    /// String length (string)
    #[arg(long, default_value_t = 15)]
    length: usize,
    /// Alphabet size (random-hmm)
    #[arg(long, default_value_t = 10)]
    n_obs: usize,
    /// Hidden states (random-hmm)
    #[arg(long, default_value_t = 5)]
    n_hidden: usize,
    /// Dirichlet concentration of the random columns (random-hmm)
    #[arg(long, default_value_t = 1.0)]
    concentration: f64,
    /// Triplet file to write, one "x1 x2 x3" line per triplet
    #[arg(long)]
    out: PathBuf,
    /// Generating model file [default: <out>.model.json, or <out>.string.txt for `string`]
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Spec,
    M,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Triplet file
    #[arg(long)]
    triplets: PathBuf,
    /// Classical spectral estimator or the weighted M-estimator
    #[arg(long, value_enum)]
    estimator: EstimatorArg,
    /// Rank k, between 1 and the alphabet size
    #[arg(long)]
    rank: usize,
    /// L1 penalty on R (m only) [default: from --config, else 0]
    #[arg(long)]
    lambda: Option<f64>,
    /// Solver seed for random restarts (m only) [default: from --config, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file of solver options; unset keys keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Alphabet size [default: largest symbol in the file plus one]
    #[arg(long)]
    n_obs: Option<usize>,
    /// Parameter file to write (JSON)
    #[arg(long)]
    out: PathBuf,
    /// Trace file [default: <out>.trace.json]
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Relnorm,
    Prederr,
    Both,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("reference").required(true).multiple(true).args(["truth", "test_seqs"]))]
struct EvalArgs {
    /// Fitted parameter file
    #[arg(long)]
    model: PathBuf,
    /// True model file; needed for relnorm
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Sequence file, one sequence per line [default: sampled from --truth]
    #[arg(long)]
    test_seqs: Option<PathBuf>,
    /// Alphabet file (JSON array of tokens) [default: integer symbols]
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// How sequence lines split into tokens
    #[arg(long, value_enum, default_value = "whitespace")]
    token_mode: TokenModeArg,
    /// Metrics to report
    #[arg(long, value_enum, default_value = "both")]
    metric: MetricArg,
    /// Sequences sampled from --truth when --test-seqs is absent
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    /// Length of sampled test sequences
    #[arg(long, default_value_t = 4)]
    test_length: usize,
    /// Seed for sampled test sequences
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file to write (CSV)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TokenModeArg {
    Whitespace,
    Character,
}

impl From<TokenModeArg> for TokenMode {
    fn from(m: TokenModeArg) -> Self {
        match m {
            TokenModeArg::Whitespace => TokenMode::Whitespace,
            TokenModeArg::Character => TokenMode::Character,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExperimentArg {
    String,
    Ring,
    Grid,
    Chain,
    Synthetic,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["experiment", "config"]))]
struct ReproArgs {
    /// Preset experiment
    #[arg(long, value_enum)]
    experiment: Option<ExperimentArg>,
    /// Experiment config file (TOML) instead of a preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replicates per cell [default: the preset's]
    #[arg(long)]
    replicates: Option<usize>,
    /// Base seed [default: 0, or the config file's]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the table, long CSV and JSON report
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

/// Failures split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, body: &str) -> Outcome {
    fs::write(path, body).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn simulate(a: SimulateArgs) -> Outcome {
    let model_out = |default: &str| a.model_out.clone().unwrap_or_else(|| with_suffix(&a.out, default));
    if a.scenario == ScenarioKind::String {
        let seq = make_deterministic_string(a.length).map_err(usage)?;
        let data = TripletDataset::from_sequences(std::slice::from_ref(&seq), 2).map_err(usage)?;
        write_triplets(&a.out, &data).map_err(runtime)?;
        let alphabet = Alphabet::from_tokens(vec!["0".into(), "1".into()]).map_err(runtime)?;
        let path = model_out(".string.txt");
        write_sequences(&path, &[seq], &alphabet, TokenMode::Character).map_err(runtime)?;
        println!("wrote {} triplets to {} and the string to {}", data.len(), a.out.display(), path.display());
        return Ok(());
    }
    let n = a.n_triplets.ok_or_else(|| usage(anyhow!("--n-triplets is required for scenario {:?}", a.scenario)))?;
    let model = match a.scenario {
        ScenarioKind::Ring => Ok(make_ring()),
        ScenarioKind::Grid => make_grid(a.rows, a.cols, a.obs_acc),
        ScenarioKind::Chain => make_chain_noisy(a.states, a.p_reset, a.obs_noise),
        ScenarioKind::RandomHmm => make_random(a.n_obs, a.n_hidden, a.concentration, a.seed),
        ScenarioKind::String => unreachable!(),
    }
    .map_err(usage)?;
    // the data stream is seeded apart from the random model draw
    let data = sample_triplets(&model, n, a.mode.into(), a.seed.wrapping_add(1)).map_err(usage)?;
    write_triplets(&a.out, &data).map_err(runtime)?;
    let path = model_out(".model.json");
    write_file(&path, &(model.to_json().map_err(runtime)? + "\n"))?;
    println!("wrote {} triplets to {} and the model to {}", data.len(), a.out.display(), path.display());
    Ok(())
}

fn fit(a: FitArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            FitConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display())).map_err(usage)?
        }
        None => FitConfig::default(),
    };
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.rank = Some(a.rank);
    cfg.validate().map_err(usage)?;
    let data = read_triplets(&a.triplets, a.n_obs)
        .with_context(|| format!("reading {}", a.triplets.display()))
        .map_err(usage)?;
    cfg.rank_for(data.n_obs()).map_err(usage)?;

    let started = Instant::now();
    let (params, trace) = match a.estimator {
        EstimatorArg::Spec => {
            let stats = estimate_stats(&data).map_err(runtime)?;
            let params = fit_hsu(&stats, a.rank).map_err(runtime)?;
            let ambient = params.projection.as_ref().map(|u| {
                let ops = params.b_ops.iter().map(|b| u * b * u.transpose()).collect();
                ParamTriplet::new(stats.p1.clone(), stats.p1.map(|_| 1.0), ops, None)
            });
            let residual: f64 = match ambient {
                Some(p) => operator_residuals(&stats, &p.map_err(runtime)?).iter().map(|r| r * r).sum(),
                None => operator_residuals(&stats, &params).iter().map(|r| r * r).sum(),
            };
            let trace = serde_json::json!({
                "estimator": "spec",
                "rank": a.rank,
                "n_samples": data.len(),
                "final_loss": residual,
                "provenance": { "wall_time_secs": started.elapsed().as_secs_f64() },
            });
            (params, trace)
        }
        EstimatorArg::M => {
            let (params, trace) = mest::fit(&data, &cfg).map_err(runtime)?;
            let mut value = serde_json::to_value(&trace).map_err(runtime)?;
            value["estimator"] = "m".into();
            value["final_loss"] = trace.final_loss().into();
            (params, value)
        }
    };
    let elapsed = started.elapsed().as_secs_f64();
    write_file(&a.out, &(params.to_json().map_err(runtime)? + "\n"))?;
    let trace_path = a.trace.clone().unwrap_or_else(|| with_suffix(&a.out, ".trace.json"));
    write_file(&trace_path, &(serde_json::to_string_pretty(&trace).map_err(runtime)? + "\n"))?;
    let loss = trace["final_loss"].as_f64().unwrap_or(f64::NAN);
    println!(
        "estimator={} rank={} n={} loss={loss:.6e} time={elapsed:.3}s",
        match a.estimator {
            EstimatorArg::Spec => "spec",
            EstimatorArg::M => "m",
        },
        a.rank,
        data.len()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let want_rel = matches!(a.metric, MetricArg::Relnorm | MetricArg::Both);
    let want_pred = matches!(a.metric, MetricArg::Prederr | MetricArg::Both);
    if want_rel && a.truth.is_none() {
        return Err(usage(anyhow!("relnorm needs --truth")));
    }
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage);
    let params = ParamTriplet::from_json(&read(&a.model)?).map_err(usage)?;
    let truth = match &a.truth {
        Some(p) => Some(HmmModel::from_json(&read(p)?).map_err(usage)?),
        None => None,
    };
    let test = match (&a.test_seqs, &truth) {
        (Some(path), _) => {
            let alphabet = match &a.alphabet {
                Some(p) => Alphabet::load(p).map_err(usage)?,
                None => Alphabet::from_tokens((0..params.n_obs).map(|x| x.to_string()).collect()).map_err(runtime)?,
            };
            load_sequences(path, Some(&alphabet), a.token_mode.into()).map_err(usage)?.0
        }
        (None, Some(model)) => sample_sequences(model, a.n_test, a.test_length, a.seed).map_err(usage)?,
        (None, None) => unreachable!("clap requires --truth or --test-seqs"),
    };

    let mut report = String::from("metric,value,count\n");
    if let (true, Some(model)) = (want_rel, &truth) {
        let r = rel_norm_diff(&params, model, &test).map_err(runtime)?;
        println!("relnorm={:.6e} relnorm_l2={:.6e} included={} excluded={}", r.mean, r.l2, r.included, r.excluded);
        let _ = writeln!(report, "relnorm,{},{}", r.mean, r.included);
        let _ = writeln!(report, "relnorm_l2,{},{}", r.l2, r.included);
        let _ = writeln!(report, "excluded,{},{}", r.excluded, r.excluded);
    }
    if want_pred {
        let e = predictive_error(&params, &test).map_err(runtime)?;
        println!("prederr={:.6} positions={} degenerate={}", e.rate, e.positions, e.degenerate);
        let _ = writeln!(report, "prederr,{},{}", e.rate, e.positions);
    }
    if let Some(p) = &a.out {
        write_file(p, &report)?;
    }
    Ok(())
}

fn repro(a: ReproArgs) -> Outcome {
    let mut cfg: ExperimentConfig = match (&a.experiment, &a.config) {
        (Some(e), _) => {
            let name = e.to_possible_value().expect("no skipped variants").get_name().to_string();
            preset(&name, a.seed.unwrap_or(0)).map_err(usage)?
        }
        (None, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            ExperimentConfig::from_toml(&text).map_err(usage)?
        }
        (None, None) => unreachable!("clap requires --experiment or --config"),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.replicates {
        cfg.n_replicates = r;
    }
    cfg.validate().map_err(usage)?;
    let started = Instant::now();
    let report = run_experiment(&cfg).map_err(runtime)?;
    let paths = report.write_to(&a.out).map_err(runtime)?;
    print!("{}", report.wide_csv().map_err(runtime)?);
    for c in &report.checks {
        println!("check {}: {} ({})", c.name, if c.passed { "pass" } else { "fail" }, c.detail);
    }
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    eprintln!("finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(runtime)?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Repro(a) => repro(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
