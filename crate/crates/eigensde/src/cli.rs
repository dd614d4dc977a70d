//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use eigensde_core::nets::CheckpointRecord;
use eigensde_core::oracle::{check_filtering, check_integrals, check_propagation, OracleCheck};
use eigensde_core::seeds::stream;
use eigensde_core::synth::{generate, DosingEnv, DosingEnvConfig, Mode};
use eigensde_core::train::{evaluate, evaluate_with, unroll_source, EpochRecord, Metrics, PredictionRow, TrainState, Trajectory};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ControlMask, RunConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{fit, ground_truth_regime, forecast, infer_dims, select, split_indices, summarize_spectra, trajectory_spectrum};
use crate::io::{read_checkpoint, read_json, read_trajectories, sibling, write_checkpoint, write_csv, write_csv_records, write_dataset, write_json};
use crate::run::{run_dir, RunTimer};

#[derive(Debug, Parser)]
#[command(name = "eigensde", version, about = "Continuous-time forecasting with piecewise-linear spectral SDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a benchmark dataset (JSON Lines).
    Generate(GenerateArgs),
    /// Fit a model; writes the best-validation checkpoint and history CSV.
    Train(TrainArgs),
    /// Score a model (and the last-value baseline) on a dataset.
    Eval(EvalArgs),
    /// Predictive mean and variance at arbitrary query times.
    Forecast(ForecastArgs),
    /// Per-trajectory eigenvalues emitted by a model.
    Spectrum(SpectrumArgs),
    /// Compare the closed-form solver and filter with independent oracles.
    OracleCheck(OracleArgs),
    /// Roll out the dosing simulator under a fixed policy.
    EnvRollout(EnvArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of every randomized step.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for run.json (default: next to the primary output).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Complex,
    Real,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Named benchmark: section5-complex, section5-real, section5-ood-complex,
    /// section5-ood-real, coupled-complex, coupled-ood-complex, ou,
    /// spectrum-a1, spectrum-a2, spectrum-a3, dosing.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Feedback gain of the observable in the control law.
    #[arg(long, allow_hyphen_values = true)]
    pub coupling: Option<f64>,
    /// Inclusive observation-count range, e.g. `5,15`.
    #[arg(long, value_delimiter = ',')]
    pub obs_per_traj: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint path; history and resume state are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub interval_dt: Option<f64>,
    #[arg(long)]
    pub subsample_prob: Option<f64>,
    /// Latent dimension.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_complex_pairs: Option<usize>,
    /// Train all-real and all-pair spectra; keep the better validation NLL.
    #[arg(long)]
    pub select_spectrum: bool,
    /// Initializations per spectrum layout.
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Leave eigenvalue real parts unconstrained.
    #[arg(long)]
    pub unstable: bool,
    #[arg(long)]
    pub penalty_weight: Option<f64>,
    /// Replace the context input of the networks by a constant.
    #[arg(long)]
    pub ablate_hypernet: bool,
    #[arg(long, value_enum)]
    pub control_mask: Option<ControlMask>,
    /// Train / validation / test fractions, e.g. `0.6,0.1,0.3`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    /// Continue from a `.last.json` resume file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required_unless_present = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Score the dynamics stored in the dataset header instead of a model.
    #[arg(long)]
    pub ground_truth: bool,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Part of the seeded split to score.
    #[arg(long, value_enum, default_value = "all")]
    pub subset: Subset,
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    /// Absorb observations up to this time and score the later ones.
    #[arg(long)]
    pub condition_until: Option<f64>,
    /// Bin edges of the time since the last observation.
    #[arg(long, value_delimiter = ',')]
    pub horizon_bins: Option<Vec<f64>>,
    /// Metrics JSON; tables are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset or plain trajectory file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Trajectory indices (default: all).
    #[arg(long, value_delimiter = ',')]
    pub traj: Option<Vec<usize>>,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long)]
    pub queries: String,
    #[arg(long)]
    pub condition_until: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Per-trajectory CSV; the summary JSON is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 100)]
    pub n_cases: usize,
    /// Riemann-sum step of the integral check.
    #[arg(long, default_value_t = 1e-5)]
    pub riemann_step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Zero,
    Constant,
    Random,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 24.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    #[arg(long, value_enum, default_value = "random")]
    pub policy: Policy,
    /// Dose of the constant policy; upper bound of the random one.
    #[arg(long, default_value_t = 1.0)]
    pub dose: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Summary printed by a command.
pub type Report = String;

pub fn run(cli: Cli) -> CliResult<Report> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
        Command::EnvRollout(a) => cmd_env_rollout(a),
    }
}

fn load_config(common: &Common, preset: Option<&str>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), preset)?;
    cfg.set_seed(common.seed);
    Ok(cfg)
}

fn split_override(cfg: &mut RunConfig, split: &Option<Vec<f64>>) -> CliResult<()> {
    if let Some(s) = split {
        let [a, b, c] = s[..] else {
            return Err(CliError::Config("--split takes three fractions".into()));
        };
        cfg.split = [a, b, c];
    }
    cfg.validate_split()
}

pub fn cmd_generate(a: GenerateArgs) -> CliResult<Report> {
    let timer = RunTimer::start("generate");
    let mut cfg = load_config(&a.common, a.preset.as_deref())?;
    let seed = cfg.require_seed()?;
    let g = &mut cfg.generator;
    if let Some(n) = a.n_traj {
        g.n_traj = n;
    }
    if let Some(m) = a.mode {
        g.mode = match m {
            ModeArg::Complex => Mode::Complex,
            ModeArg::Real => Mode::Real,
        };
    }
    if let Some(c) = a.coupling {
        g.coupling = c;
    }
    if let Some(r) = &a.obs_per_traj {
        let [lo, hi] = r[..] else {
            return Err(CliError::Config("--obs-per-traj takes a minimum and a maximum".into()));
        };
        g.obs_per_traj = [lo, hi];
    }
    let ds = generate(g)?;
    write_dataset(&a.out, &ds)?;
    timer.finish(&run_dir(a.common.run_dir.as_deref(), &a.out), Some(seed), &cfg, vec![a.out.clone()])?;
    Ok(format!("generated {} trajectories, mean observation count {:.3} -> {}", ds.trajectories.len(), ds.mean_obs_count(), a.out.display()))
}

/// Everything needed to continue an interrupted training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResumeFile {
    pub config: RunConfig,
    pub initial: CheckpointRecord,
    pub state: TrainState,
}

pub fn cmd_train(a: TrainArgs) -> CliResult<Report> {
    let timer = RunTimer::start("train");
    let resume: Option<ResumeFile> = a.resume.as_deref().map(read_json).transpose()?;
    let mut cfg = match &resume {
        Some(r) if a.common.config.is_none() => {
            let mut c = r.config.clone();
            c.set_seed(a.common.seed);
            c
        }
        _ => load_config(&a.common, None)?,
    };
    let seed = cfg.require_seed()?;
    let t = &mut cfg.train;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { t.$f = v; } )* };
    }
    set!(epochs, lr, batch_size, interval_dt, subsample_prob, n, n_complex_pairs, penalty_weight);
    if a.unstable {
        t.stable = false;
    }
    if a.select_spectrum {
        cfg.select_spectrum = true;
    }
    if let Some(r) = a.restarts {
        cfg.restarts = r;
    }
    if cfg.restarts == 0 {
        return Err(CliError::Config("restarts must be at least 1".into()));
    }
    if a.ablate_hypernet {
        cfg.ablate_hypernet = true;
    }
    if let Some(m) = a.control_mask {
        cfg.control_mask = m;
    }
    split_override(&mut cfg, &a.split)?;
    cfg.train.validate()?;

    let (_, trajs) = read_trajectories(&a.dataset)?;
    let [tr, va, _] = split_indices(trajs.len(), cfg.split, seed);
    let (train_set, val_set) = (select(&trajs, &tr), select(&trajs, &va));
    if train_set.is_empty() {
        return Err(CliError::Data("training split is empty".into()));
    }
    let resume_pair = match resume {
        Some(r) => {
            if cfg.select_spectrum || cfg.restarts > 1 {
                return Err(CliError::Config("resuming is supported for a single spectrum layout".into()));
            }
            let model = eigensde_core::nets::HyperModel::try_from(r.initial).map_err(|e| CliError::Data(e.to_string()))?;
            Some((model, r.state))
        }
        None => None,
    };
    let last_path = sibling(&a.out, "last.json");
    let history_path = sibling(&a.out, "history.csv");
    let mut write_err: Option<CliError> = None;
    let fitted = fit(&cfg, &train_set, &val_set, resume_pair, |init, state| {
        if write_err.is_some() {
            return;
        }
        let file = ResumeFile {
            config: cfg.clone(),
            initial: CheckpointRecord::from(init),
            state: state.clone(),
        };
        if let Err(e) = write_json(&last_path, &file) {
            write_err = Some(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_checkpoint(&a.out, &fitted.model)?;
    write_csv::<EpochRecord>(&history_path, &fitted.state.history)?;
    let record = TrainRecord {
        config: &cfg,
        dims: infer_dims(&train_set)?,
        n_train: train_set.len(),
        n_val: val_set.len(),
        best_epoch: fitted.state.best_epoch,
        best_val_nll: fitted.state.best_val,
        candidates: &fitted.candidates,
        skipped_batches: &fitted.state.skipped,
    };
    timer.finish(&run_dir(a.common.run_dir.as_deref(), &a.out), Some(seed), &record, vec![a.out.clone(), history_path, last_path])?;
    Ok(format!(
        "trained on {} sequences ({} validation); best epoch {} with validation NLL {:.5} -> {}",
        train_set.len(),
        val_set.len(),
        fitted.state.best_epoch,
        fitted.state.best_val.unwrap_or(f64::NAN),
        a.out.display()
    ))
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    config: &'a RunConfig,
    dims: crate::experiment::DataDims,
    n_train: usize,
    n_val: usize,
    best_epoch: usize,
    best_val_nll: Option<f64>,
    candidates: &'a [(usize, f64)],
    skipped_batches: &'a [String],
}

/// One line of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    #[serde(with = "eigensde_core::serde_float")]
    pub mse: f64,
    #[serde(with = "eigensde_core::serde_float")]
    pub nll: f64,
    pub n_rows: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: Subset,
    pub metrics: Metrics,
    pub summary: Vec<SummaryRow>,
}

fn subset_of(trajs: Vec<Trajectory>, subset: Subset, cfg: &RunConfig) -> CliResult<Vec<Trajectory>> {
    if subset == Subset::All {
        return Ok(trajs);
    }
    let seed = cfg.seed.ok_or_else(|| CliError::Config("selecting a split subset needs --seed".into()))?;
    let parts = split_indices(trajs.len(), cfg.split, seed);
    let idx = match subset {
        Subset::Train => &parts[0],
        Subset::Val => &parts[1],
        _ => &parts[2],
    };
    Ok(select(&trajs, idx))
}

pub fn cmd_eval(a: EvalArgs) -> CliResult<Report> {
    let timer = RunTimer::start("eval");
    let mut cfg = load_config(&a.common, None)?;
    split_override(&mut cfg, &a.split)?;
    if let Some(b) = &a.horizon_bins {
        if b.len() < 2 || b.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CliError::Config("horizon bins must be increasing".into()));
        }
        cfg.eval.horizon_bins = b.clone();
    }
    if a.condition_until.is_some() {
        cfg.eval.condition_until = a.condition_until;
    }
    let (header, trajs) = read_trajectories(&a.dataset)?;
    let trajs = subset_of(trajs, a.subset, &cfg)?;
    let (metrics, rows) = if a.ground_truth {
        let header = header.ok_or_else(|| CliError::Data("dataset has no header with ground truth".into()))?;
        let regime = ground_truth_regime(&header)?;
        evaluate_with(&trajs, &cfg.eval, |t, o| unroll_source(&regime, t, o))?
    } else {
        let path = a.checkpoint.as_ref().ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
        let model = read_checkpoint(path)?;
        evaluate(&model, &trajs, &cfg.eval)?
    };
    let method = if a.ground_truth { "ground-truth" } else { "model" };
    let summary = vec![
        SummaryRow {
            method: method.into(),
            mse: metrics.mse,
            nll: metrics.nll,
            n_rows: metrics.n_rows,
        },
        SummaryRow {
            method: "naive".into(),
            mse: metrics.naive_mse,
            nll: f64::NAN,
            n_rows: metrics.n_rows,
        },
    ];
    let paths = [sibling(&a.out, "predictions.csv"), sibling(&a.out, "horizon.csv"), sibling(&a.out, "obs_count.csv"), sibling(&a.out, "summary.csv")];
    write_csv::<PredictionRow>(&paths[0], &rows)?;
    write_csv(&paths[1], &metrics.per_horizon)?;
    write_csv(&paths[2], &metrics.per_obs_count)?;
    write_csv(&paths[3], &summary)?;
    let report = EvalReport {
        subset: a.subset,
        metrics,
        summary,
    };
    write_json(&a.out, &report)?;
    let mut outputs = vec![a.out.clone()];
    outputs.extend(paths);
    timer.finish(&run_dir(a.common.run_dir.as_deref(), &a.out), cfg.seed, &cfg, outputs)?;
    let m = &report.metrics;
    Ok(format!(
        "{method}: MSE {:.5}, NLL {:.5} over {} values ({} events); naive MSE {:.5}",
        m.mse, m.nll, m.n_rows, m.n_events, m.naive_mse
    ))
}

/// `start:stop:step` (inclusive of `stop` up to rounding) or `a,b,c`.
pub fn parse_queries(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::Config(format!("cannot parse query times '{spec}'"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let out = if spec.contains(':') {
        let parts: Vec<f64> = spec.split(':').map(num).collect::<CliResult<_>>()?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=count).map(|i| start + i as f64 * step).collect()
    } else {
        spec.split(',').map(num).collect::<CliResult<Vec<f64>>>()?
    };
    if out.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(CliError::Config("query times must be finite and non-negative".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct ForecastConfig<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    trajectories: Vec<usize>,
    queries: &'a str,
    condition_until: Option<f64>,
}

pub fn cmd_forecast(a: ForecastArgs) -> CliResult<Report> {
    let timer = RunTimer::start("forecast");
    let model = read_checkpoint(&a.checkpoint)?;
    let (_, trajs) = read_trajectories(&a.dataset)?;
    let queries = parse_queries(&a.queries)?;
    let ids: Vec<usize> = a.traj.clone().unwrap_or_else(|| (0..trajs.len()).collect());
    let mut rows = Vec::new();
    for &i in &ids {
        let t = trajs.get(i).ok_or_else(|| CliError::Config(format!("no trajectory {i}")))?;
        rows.extend(forecast(&model, t, i, &queries, a.condition_until)?);
    }
    write_csv(&a.out, &rows)?;
    let cfg = ForecastConfig {
        checkpoint: &a.checkpoint,
        dataset: &a.dataset,
        trajectories: ids.clone(),
        queries: &a.queries,
        condition_until: a.condition_until,
    };
    timer.finish(&run_dir(a.common.run_dir.as_deref(), &a.out), a.common.seed, &cfg, vec![a.out.clone()])?;
    Ok(format!("{} forecast rows for {} trajectories -> {}", rows.len(), ids.len(), a.out.display()))
}

#[derive(Serialize)]
struct PathsConfig<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
}

pub fn cmd_spectrum(a: SpectrumArgs) -> CliResult<Report> {
    let timer = RunTimer::start("spectrum");
    let model = read_checkpoint(&a.checkpoint)?;
    let (_, trajs) = read_trajectories(&a.dataset)?;
    let items = trajs.iter().enumerate().map(|(i, t)| trajectory_spectrum(&model, t, i)).collect::<CliResult<Vec<_>>>()?;
    let summary = summarize_spectra(&items)?;
    let n_eig = items[0].eigenvalues.len();
    let mut header = vec!["traj_id".to_string(), "n_regimes".to_string()];
    for i in 0..n_eig {
        header.push(format!("eig{i}_re"));
        header.push(format!("eig{i}_im"));
    }
    header.push("class".into());
    let rows: Vec<Vec<String>> = items
        .iter()
        .map(|s| {
            let mut r = vec![s.traj_id.to_string(), s.n_regimes.to_string()];
            for e in &s.eigenvalues {
                r.push(e.0.to_string());
                r.push(e.1.to_string());
            }
            r.push(s.class.as_str().into());
            r
        })
        .collect();
    write_csv_records(&a.out, &header, &rows)?;
    let summary_path = sibling(&a.out, "summary.json");
    write_json(&summary_path, &summary)?;
    let cfg = PathsConfig {
        checkpoint: &a.checkpoint,
        dataset: &a.dataset,
    };
    timer.finish(&run_dir(a.common.run_dir.as_deref(), &a.out), a.common.seed, &cfg, vec![a.out.clone(), summary_path])?;
    let mut msg = format!("majority class {} over {} trajectories", summary.majority_class.as_str(), summary.n_traj);
    for e in &summary.eigenvalues {
        msg.push_str(&format!("\n  eigenvalue {}: {:.4} ± {:.4}i (std {:.4}, {:.4})", e.index, e.mean_re, e.mean_im, e.std_re, e.std_im));
    }
    Ok(msg)
}

#[derive(Serialize)]
struct OracleConfig {
    n_cases: usize,
    riemann_step: f64,
}

#[derive(Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub checks: Vec<OracleCheck>,
    pub passed: bool,
}

pub fn cmd_oracle_check(a: OracleArgs) -> CliResult<Report> {
    let timer = RunTimer::start("oracle-check");
    let seed = a.common.seed.ok_or_else(|| CliError::Config("oracle-check needs --seed".into()))?;
    if a.n_cases == 0 || !(a.riemann_step > 0.0) {
        return Err(CliError::Config("n_cases and riemann_step must be positive".into()));
    }
    let checks = vec![check_propagation(seed, a.n_cases)?, check_filtering(seed, a.n_cases)?, check_integrals(seed, a.n_cases, a.riemann_step)?];
    let passed = checks.iter().all(|c| c.passed);
    let report = OracleReport { seed, checks, passed };
    write_json(&a.out, &report)?;
    let cfg = OracleConfig {
        n_cases: a.n_cases,
        riemann_step: a.riemann_step,
    };
    timer.finish(&run_dir(a.common.run_dir.as_deref(), &a.out), Some(seed), &cfg, vec![a.out.clone()])?;
    let lines: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{} {}: max error {:.3e} over {} cases (threshold {:.0e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.max_error, c.cases, c.threshold))
        .collect();
    let text = lines.join("\n");
    if passed {
        Ok(text)
    } else {
        Err(CliError::Numeric(format!("oracle mismatch\n{text}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub episode: usize,
    pub t: f64,
    pub dose: f64,
    pub reward: f64,
    /// Lab value reported during the step, if any.
    pub lab_t: Option<f64>,
    pub lab_y: Option<f64>,
}

#[derive(Serialize)]
struct EnvConfig<'a> {
    env: &'a DosingEnvConfig,
    episodes: usize,
    horizon: f64,
    dt: f64,
    policy: Policy,
    dose: f64,
}

pub fn cmd_env_rollout(a: EnvArgs) -> CliResult<Report> {
    let timer = RunTimer::start("env-rollout");
    let cfg = load_config(&a.common, None)?;
    let seed = cfg.require_seed()?;
    if !(a.dt > 0.0 && a.horizon > 0.0 && a.dose >= 0.0) {
        return Err(CliError::Config("dt and horizon must be positive and dose non-negative".into()));
    }
    let env_cfg = &cfg.generator.dosing;
    let steps = (a.horizon / a.dt).round() as usize;
    let mut rows = Vec::new();
    let mut contexts = Vec::new();
    let mut total = 0.0;
    for ep in 0..a.episodes {
        let mut rng = stream(seed, &[ep as u64]);
        let (mut env, context) = DosingEnv::reset(env_cfg, &mut rng)?;
        contexts.push(context);
        for _ in 0..steps {
            let dose = match a.policy {
                Policy::Zero => 0.0,
                Policy::Constant => a.dose,
                Policy::Random => a.dose * rng.random::<f64>(),
            };
            let step = env.step(dose, a.dt)?;
            total += step.reward;
            rows.push(RolloutRow {
                episode: ep,
                t: env.state().t(),
                dose,
                reward: step.reward,
                lab_t: step.observation.as_ref().map(|o| o.t),
                lab_y: step.observation.as_ref().map(|o| o.y[0]),
            });
        }
    }
    write_csv(&a.out, &rows)?;
    let ctx_path = sibling(&a.out, "contexts.json");
    write_json(&ctx_path, &contexts)?;
    let rcfg = EnvConfig {
        env: env_cfg,
        episodes: a.episodes,
        horizon: a.horizon,
        dt: a.dt,
        policy: a.policy,
        dose: a.dose,
    };
    timer.finish(&run_dir(a.common.run_dir.as_deref(), &a.out), Some(seed), &rcfg, vec![a.out.clone(), ctx_path])?;
    Ok(format!("{} episodes, mean return {:.4} -> {}", a.episodes, total / a.episodes.max(1) as f64, a.out.display()))
}
