//! Building, fitting and inspecting models on datasets.

use eigensde_core::linalg::Mat;
use eigensde_core::nets::{dynamics_heads, HeadConfig, HyperModel};
use eigensde_core::seeds::stream;
use eigensde_core::spectral::SpectralDynamics;
use eigensde_core::synth::DatasetHeader;
use eigensde_core::train::{train, unroll, BoundModel, FixedRegime, Prediction, TrainConfig, TrainState, Trajectory, UnrollOptions};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ControlMask, RunConfig};
use crate::error::{CliError, CliResult};

const SPLIT_STREAM: u64 = 0x5111;
const INIT_STREAM: u64 = 0x1417;

/// Seeded shuffle into train / validation / test index sets.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[SPLIT_STREAM]));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    [idx, val, test]
}

pub fn select(trajs: &[Trajectory], idx: &[usize]) -> Vec<Trajectory> {
    idx.iter().map(|&i| trajs[i].clone()).collect()
}

/// Sizes read off a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub m: usize,
    pub k: usize,
    pub context_dim: usize,
}

pub fn infer_dims(trajs: &[Trajectory]) -> CliResult<DataDims> {
    let first = trajs.first().ok_or_else(|| CliError::Data("empty dataset".into()))?;
    let m = trajs.iter().find_map(|t| t.observations.first().map(|o| o.y.len())).ok_or_else(|| CliError::Data("dataset has no observations".into()))?;
    let k = trajs.iter().find_map(|t| t.controls.first().map(|c| c.u.len())).unwrap_or(0);
    let context_dim = first.context.len();
    for (i, t) in trajs.iter().enumerate() {
        let bad_obs = t.observations.iter().any(|o| o.y.len() != m);
        let bad_ctl = t.controls.iter().any(|c| c.u.len() != k);
        if bad_obs || bad_ctl || t.context.len() != context_dim {
            return Err(CliError::Data(format!("trajectory {i} has inconsistent sizes")));
        }
    }
    Ok(DataDims { m, k, context_dim })
}

/// Freshly initialized model for the run configuration and data sizes.
pub fn build_model(cfg: &RunConfig, dims: DataDims, n_complex_pairs: usize) -> CliResult<HyperModel> {
    build_model_restart(cfg, dims, n_complex_pairs, 0)
}

/// As [`build_model`], with an independent initialization per `restart`.
pub fn build_model_restart(cfg: &RunConfig, dims: DataDims, n_complex_pairs: usize, restart: usize) -> CliResult<HyperModel> {
    let t = &cfg.train;
    if t.n < dims.m {
        return Err(CliError::Config(format!("latent dimension n = {} is below the observed dimension {}", t.n, dims.m)));
    }
    let head = HeadConfig {
        n: t.n,
        m: dims.m,
        k: dims.k,
        context_dim: dims.context_dim,
        n_complex_pairs,
        stable: t.stable,
        hypernet_disabled: cfg.ablate_hypernet,
        interval_dt: t.interval_dt,
    };
    head.validate()?;
    let mask = (0..t.n).map(|i| cfg.control_mask == ControlMask::None || i >= dims.m).collect();
    let mut rng = match restart {
        0 => stream(t.seed, &[INIT_STREAM, n_complex_pairs as u64]),
        r => stream(t.seed, &[INIT_STREAM, n_complex_pairs as u64, r as u64]),
    };
    Ok(HyperModel::new(head, &cfg.architecture, mask, &mut rng)?)
}

/// Training configuration with the data-dependent sizes filled in.
pub fn resolved_train_config(cfg: &RunConfig, dims: DataDims) -> TrainConfig {
    TrainConfig {
        m: dims.m,
        k: dims.k,
        ..cfg.train.clone()
    }
}

/// Outcome of fitting one or more candidate spectra.
pub struct Fitted {
    /// Best-validation parameters of the chosen candidate.
    pub model: HyperModel,
    pub state: TrainState,
    /// Validation NLL per candidate run, keyed by its number of complex pairs.
    pub candidates: Vec<(usize, f64)>,
}

fn spectrum_candidates(cfg: &RunConfig) -> Vec<usize> {
    if cfg.select_spectrum {
        let mut c = vec![0, cfg.train.n / 2];
        c.dedup();
        c
    } else {
        vec![cfg.train.n_complex_pairs]
    }
}

/// Train from scratch (or from `resume` for a single candidate) and keep the
/// best-validation model. With spectrum selection the all-real and all-pair
/// layouts are both trained and the lower validation NLL wins; each layout is
/// trained from `restarts` initializations.
pub fn fit(
    cfg: &RunConfig,
    train_set: &[Trajectory],
    val_set: &[Trajectory],
    resume: Option<(HyperModel, TrainState)>,
    mut on_epoch: impl FnMut(&HyperModel, &TrainState),
) -> CliResult<Fitted> {
    let dims = infer_dims(train_set)?;
    let tcfg = resolved_train_config(cfg, dims);
    let mut best: Option<Fitted> = None;
    let mut candidates = Vec::new();
    let runs: Vec<(HyperModel, Option<TrainState>)> = match resume {
        Some((m, s)) => vec![(m, Some(s))],
        None => spectrum_candidates(cfg)
            .into_iter()
            .flat_map(|p| (0..cfg.restarts.max(1)).map(move |r| (p, r)))
            .map(|(p, r)| build_model_restart(cfg, dims, p, r).map(|m| (m, None)))
            .collect::<CliResult<_>>()?,
    };
    for (init, state) in runs {
        let pairs = init.head_config.n_complex_pairs;
        let state = train(&init, train_set, val_set, &tcfg, state, |s| on_epoch(&init, s))?;
        let mut model = init.clone();
        model.set_params(&state.best_params)?;
        let score = state.best_val.unwrap_or(f64::INFINITY);
        candidates.push((pairs, score));
        let better = best.as_ref().is_none_or(|b| score < b.state.best_val.unwrap_or(f64::INFINITY));
        if better {
            best = Some(Fitted {
                model,
                state,
                candidates: Vec::new(),
            });
        }
    }
    let mut out = best.ok_or_else(|| CliError::Config("no model candidates".into()))?;
    out.candidates = candidates;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumClass {
    Real,
    ComplexDecaying,
    ComplexGrowing,
    NearImaginary,
}

impl SpectrumClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SpectrumClass::Real => "real",
            SpectrumClass::ComplexDecaying => "complex-decaying",
            SpectrumClass::ComplexGrowing => "complex-growing",
            SpectrumClass::NearImaginary => "near-imaginary",
        }
    }
}

pub const NEAR_IMAGINARY: f64 = 0.1;

/// `(re, im)` per eigenvalue, one entry per conjugate pair (positive `im`).
pub fn classify(eigs: &[(f64, f64)]) -> SpectrumClass {
    let pairs: Vec<&(f64, f64)> = eigs.iter().filter(|e| e.1 > 0.0).collect();
    if pairs.is_empty() {
        SpectrumClass::Real
    } else if pairs.iter().any(|e| e.0.abs() < NEAR_IMAGINARY) {
        SpectrumClass::NearImaginary
    } else if pairs.iter().all(|e| e.0 < 0.0) {
        SpectrumClass::ComplexDecaying
    } else {
        SpectrumClass::ComplexGrowing
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpectrum {
    pub traj_id: usize,
    pub n_regimes: usize,
    /// Mean over the trajectory's regimes.
    pub eigenvalues: Vec<(f64, f64)>,
    pub class: SpectrumClass,
}

fn ordered(real: &[f64], pairs: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut r: Vec<f64> = real.to_vec();
    r.sort_by(|a, b| b.total_cmp(a));
    let mut p: Vec<(f64, f64)> = pairs.to_vec();
    p.sort_by(|a, b| a.1.total_cmp(&b.1));
    r.into_iter().map(|x| (x, 0.0)).chain(p).collect()
}

/// Eigenvalues the model emits along one trajectory, averaged over regimes.
pub fn trajectory_spectrum(model: &HyperModel, traj: &Trajectory, traj_id: usize) -> CliResult<TrajectorySpectrum> {
    let bound = BoundModel::new(model, &traj.context)?;
    let out = unroll(model, traj, &UnrollOptions { traj_id, ..UnrollOptions::default() })?;
    let summaries = if out.summaries.is_empty() {
        vec![eigensde_core::nets::prior(model, &traj.context)?.0]
    } else {
        out.summaries
    };
    let mut acc: Vec<(f64, f64)> = Vec::new();
    for s in &summaries {
        let h = dynamics_heads::<f64>(model, &bound.w, &s.mu, &s.sigma)?;
        let e = ordered(&h.spectrum.real, &h.spectrum.pairs);
        if acc.is_empty() {
            acc = vec![(0.0, 0.0); e.len()];
        }
        for (a, x) in acc.iter_mut().zip(e) {
            a.0 += x.0;
            a.1 += x.1;
        }
    }
    let k = summaries.len() as f64;
    let eigenvalues: Vec<(f64, f64)> = acc.into_iter().map(|(a, b)| (a / k, b / k)).collect();
    Ok(TrajectorySpectrum {
        traj_id,
        n_regimes: summaries.len(),
        class: classify(&eigenvalues),
        eigenvalues,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueStats {
    pub index: usize,
    pub mean_re: f64,
    pub mean_im: f64,
    pub std_re: f64,
    pub std_im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub n_traj: usize,
    pub eigenvalues: Vec<EigenvalueStats>,
    pub class_counts: Vec<(SpectrumClass, usize)>,
    pub majority_class: SpectrumClass,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize_spectra(items: &[TrajectorySpectrum]) -> CliResult<SpectrumSummary> {
    let first = items.first().ok_or_else(|| CliError::Data("no trajectories".into()))?;
    let eigenvalues = (0..first.eigenvalues.len())
        .map(|i| {
            let (mean_re, std_re) = mean_std(items.iter().map(|s| s.eigenvalues[i].0));
            let (mean_im, std_im) = mean_std(items.iter().map(|s| s.eigenvalues[i].1));
            EigenvalueStats { index: i, mean_re, mean_im, std_re, std_im }
        })
        .collect();
    let classes = [SpectrumClass::Real, SpectrumClass::ComplexDecaying, SpectrumClass::ComplexGrowing, SpectrumClass::NearImaginary];
    let class_counts: Vec<(SpectrumClass, usize)> = classes.iter().map(|&c| (c, items.iter().filter(|s| s.class == c).count())).filter(|x| x.1 > 0).collect();
    let majority_class = class_counts.iter().max_by_key(|x| x.1).map(|x| x.0).unwrap_or(SpectrumClass::Real);
    Ok(SpectrumSummary {
        n_traj: items.len(),
        eigenvalues,
        class_counts,
        majority_class,
    })
}

/// Shared ground-truth dynamics of a dataset, with the initial law of the
/// simulator (state mean zero).
pub fn ground_truth_regime(header: &DatasetHeader) -> CliResult<FixedRegime> {
    let gt = &header.ground_truth;
    if gt.family.is_some() {
        return Err(CliError::Data("dataset dynamics depend on the trajectory; no shared ground truth".into()));
    }
    let d = SpectralDynamics::try_from(gt.dynamics.clone()).map_err(|e| CliError::Data(e.to_string()))?;
    let x0_cov = Mat::try_from_rows(&gt.x0_cov).map_err(|e| CliError::Data(e.to_string()))?;
    let mu0 = d.alpha.iter().map(|a| -a).collect();
    Ok(FixedRegime::new(d, mu0, x0_cov)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub traj_id: usize,
    pub t: f64,
    pub dim: usize,
    pub mean: f64,
    /// Predictive variance of the measurement, observation noise included.
    pub var: f64,
    pub n_seen: usize,
}

/// Pre-filter predictions at the query times.
pub fn forecast(model: &HyperModel, traj: &Trajectory, traj_id: usize, queries: &[f64], condition_until: Option<f64>) -> CliResult<Vec<ForecastRow>> {
    let opts = UnrollOptions {
        queries: queries.to_vec(),
        condition_until,
        traj_id,
    };
    let out = unroll(model, traj, &opts)?;
    let near = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
    let mut rows = Vec::new();
    let preds: Vec<&Prediction> = out.predictions.iter().filter(|p| queries.iter().any(|&q| near(q, p.t))).collect();
    for p in preds {
        for d in 0..p.mean.len() {
            rows.push(ForecastRow {
                traj_id,
                t: p.t,
                dim: d,
                mean: p.mean[d],
                var: p.cov[(d, d)],
                n_seen: p.n_seen,
            });
        }
    }
    Ok(rows)
}
