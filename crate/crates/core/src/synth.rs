//! Ground-truth simulators and benchmark generators.
//!
//! Every path is sampled from the exact Gaussian transition law of the linear
//! SDE between consecutive event times, so refining the time grid does not
//! change the distribution of the samples.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esde::{ControlSegment, GaussianBelief, Propagator};
use crate::filter::Observation;
use crate::linalg::Mat;
use crate::seeds::stream;
use crate::spectral::{decompose, SpectralDynamics, SpectralDynamicsRecord};
use crate::train::{Trajectory, TruthSample};

pub const DATASET_VERSION: u32 = 1;

/// `[[−0.5, −2], [2, −1]]`: decay with rotation, eigenvalues ≈ −0.75 ± 1.98i.
pub fn matrix_a1() -> Mat<f64> {
    Mat::from_rows(&[vec![-0.5, -2.0], vec![2.0, -1.0]])
}

/// `[[−0.5, −0.5], [−0.5, −1]]`: pure decay, eigenvalues ≈ −1.31, −0.19.
pub fn matrix_a2() -> Mat<f64> {
    Mat::from_rows(&[vec![-0.5, -0.5], vec![-0.5, -1.0]])
}

/// `[[1, −2], [2, −1]]`: undamped rotation, eigenvalues ±√3·i.
pub fn matrix_a3() -> Mat<f64> {
    Mat::from_rows(&[vec![1.0, -2.0], vec![2.0, -1.0]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Section5,
    Ou,
    Spectrum,
    Dosing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Complex,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectrumProcess {
    A1,
    A2,
    A3,
}

impl SpectrumProcess {
    pub fn matrix(self) -> Mat<f64> {
        match self {
            SpectrumProcess::A1 => matrix_a1(),
            SpectrumProcess::A2 => matrix_a2(),
            SpectrumProcess::A3 => matrix_a3(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub generator: Generator,
    pub n_traj: usize,
    pub mode: Mode,
    /// Gain of the observable in the control law `u = b + coupling·Y`.
    pub coupling: f64,
    /// Inclusive range of observations per trajectory.
    pub obs_per_traj: [usize; 2],
    pub support: f64,
    pub seed: u64,
    pub b_segments: usize,
    pub b_range: [f64; 2],
    /// Evenly spaced times at which the control law is re-evaluated.
    pub control_ticks: usize,
    /// `m × m` observation noise covariance.
    pub observation_noise: Vec<Vec<f64>>,
    /// Diffusion covariance is this multiple of the identity (OU excepted).
    pub process_noise: f64,
    /// Standard deviation of the isotropic initial state (OU excepted).
    pub x0_std: f64,
    /// Spacing of the dense ground-truth samples; zero disables them.
    pub truth_step: f64,
    /// Observation rate per time unit of the OU benchmark.
    pub sample_rate: f64,
    /// Mean-reversion rate of the OU benchmark.
    pub ou_theta: f64,
    pub ou_center_range: [f64; 2],
    pub spectrum_process: Option<SpectrumProcess>,
    pub dosing: DosingEnvConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            generator: Generator::Section5,
            n_traj: 1000,
            mode: Mode::Complex,
            coupling: -0.5,
            obs_per_traj: [5, 15],
            support: 10.0,
            seed: 0,
            b_segments: 10,
            b_range: [0.0, 0.5],
            control_ticks: 10,
            observation_noise: vec![vec![0.0]],
            process_noise: 0.2,
            x0_std: 1.0,
            truth_step: 0.1,
            sample_rate: 0.6,
            ou_theta: 1.0,
            ou_center_range: [-1.0, 1.0],
            spectrum_process: None,
            dosing: DosingEnvConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// Named benchmark settings.
    pub fn preset(name: &str) -> Result<Self> {
        let base = GeneratorConfig::default();
        let cfg = match name {
            "section5-complex" => base,
            "section5-real" => GeneratorConfig { mode: Mode::Real, ..base },
            "section5-ood-complex" => GeneratorConfig { coupling: 0.5, ..base },
            "section5-ood-real" => GeneratorConfig {
                mode: Mode::Real,
                coupling: 0.5,
                ..base
            },
            "coupled-complex" => GeneratorConfig { coupling: -0.8, ..base },
            "coupled-ood-complex" => GeneratorConfig { coupling: 0.8, ..base },
            "ou" => GeneratorConfig {
                generator: Generator::Ou,
                n_traj: 400,
                obs_per_traj: [2, usize::MAX],
                observation_noise: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
                ..base
            },
            "spectrum-a1" | "spectrum-a2" | "spectrum-a3" => {
                let which = match name {
                    "spectrum-a1" => SpectrumProcess::A1,
                    "spectrum-a2" => SpectrumProcess::A2,
                    _ => SpectrumProcess::A3,
                };
                GeneratorConfig {
                    generator: Generator::Spectrum,
                    n_traj: 200,
                    obs_per_traj: [5, 20],
                    coupling: 0.0,
                    process_noise: 0.05,
                    spectrum_process: Some(which),
                    ..base
                }
            }
            "dosing" => GeneratorConfig {
                generator: Generator::Dosing,
                n_traj: 600,
                ..base
            },
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.obs_per_traj;
        if !(self.support > 0.0) || lo < 2 || hi < lo {
            return Err(Error::Config("support must be positive and obs_per_traj ≥ 2".into()));
        }
        if self.b_range[1] < self.b_range[0] || self.ou_center_range[1] < self.ou_center_range[0] {
            return Err(Error::Config("empty sampling range".into()));
        }
        if self.process_noise < 0.0 || self.x0_std < 0.0 || self.truth_step < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.generator == Generator::Ou && !(self.sample_rate > 0.0 && self.ou_theta > 0.0) {
            return Err(Error::Config("OU sample rate and reversion rate must be positive".into()));
        }
        if self.generator == Generator::Spectrum && self.spectrum_process.is_none() {
            return Err(Error::Config("spectrum generator needs spectrum_process".into()));
        }
        let r = Mat::try_from_rows(&self.observation_noise)?;
        if !r.is_square() || r.min_sym_eigenvalue() < -1e-10 {
            return Err(Error::Config("observation_noise must be a square PSD matrix".into()));
        }
        Ok(())
    }
}

/// Ground truth recorded in a dataset header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Shared linear regime; per-trajectory quantities are described below.
    pub dynamics: SpectralDynamicsRecord,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    /// `(re, im)` of every eigenvalue.
    pub eigenvalues: Vec<[f64; 2]>,
    /// Covariance of the initial state around its mean.
    pub x0_cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wiener_cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_ticks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    /// Free-form description of context-dependent parts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub generator: Generator,
    pub config: GeneratorConfig,
    pub ground_truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn mean_obs_count(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.observations.len()).sum::<usize>() as f64 / self.trajectories.len() as f64
    }
}

fn standard_normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// One exact transition of the centered state over `[t0, t1)` under constant
/// control `u`.
fn exact_step<R: Rng>(prop: &Propagator<f64>, x: &[f64], u: &[f64], t0: f64, t1: f64, rng: &mut R) -> Result<Vec<f64>> {
    let n = x.len();
    let belief = GaussianBelief::new(x.to_vec(), Mat::zeros(n, n), t0);
    let schedule = [ControlSegment::new(t0, t1, u.to_vec())];
    let next = prop.propagate(&belief, &schedule, t1)?;
    let l = next.sigma.psd_sqrt();
    let z = standard_normals(rng, n);
    Ok(next.mu.iter().zip(l.matvec(&z)).map(|(m, e)| m + e).collect())
}

/// Exact sample path of `dX = [A(X − α) + Bu]dt + dW` at the times of
/// `t_grid`, starting from `x0` at `t_grid[0]`.
pub fn simulate_linear_sde<R: Rng>(dynamics: &SpectralDynamics<f64>, schedule: &[ControlSegment], x0: &[f64], t_grid: &[f64], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    dynamics.validate()?;
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("time grid must be sorted".into()));
    }
    if x0.len() != dynamics.dim() {
        return Err(Error::Dimension("initial state does not match the dynamics".into()));
    }
    let prop = Propagator::from_dynamics(dynamics)?;
    let alpha = &dynamics.alpha;
    let mut x: Vec<f64> = x0.iter().zip(alpha).map(|(a, b)| a - b).collect();
    let mut path = Vec::with_capacity(t_grid.len());
    if let Some(&t) = t_grid.first() {
        path.push(x0.to_vec());
        let mut prev = t;
        for &t in &t_grid[1..] {
            if t > prev {
                let n = x.len();
                let belief = GaussianBelief::new(x.clone(), Mat::zeros(n, n), prev);
                let next = prop.propagate(&belief, schedule, t)?;
                let l = next.sigma.psd_sqrt();
                let z = standard_normals(rng, n);
                x = next.mu.iter().zip(l.matvec(&z)).map(|(m, e)| m + e).collect();
            }
            path.push(x.iter().zip(alpha).map(|(a, b)| a + b).collect());
            prev = t;
        }
    }
    Ok(path)
}

fn eigenvalue_list(d: &SpectralDynamics<f64>) -> Vec<[f64; 2]> {
    d.spectrum.eigenvalues().into_iter().map(|(a, b)| [a, b]).collect()
}

fn observation_times<R: Rng>(rng: &mut R, count: usize, support: f64) -> Vec<f64> {
    loop {
        let mut ts: Vec<f64> = (0..count).map(|_| uniform(rng, 0.0, support)).filter(|&t| t > 0.0).collect();
        ts.sort_by(|a, b| a.total_cmp(b));
        ts.dedup();
        if ts.len() == count {
            return ts;
        }
    }
}

fn noisy<R: Rng>(y: &[f64], r_sqrt: &Mat<f64>, rng: &mut R) -> Vec<f64> {
    let z = standard_normals(rng, y.len());
    y.iter().zip(r_sqrt.matvec(&z)).map(|(a, b)| a + b).collect()
}

/// Dynamics of a two-dimensional controlled benchmark: control enters the
/// latent coordinate only.
fn controlled_dynamics(a: &Mat<f64>, cfg: &GeneratorConfig) -> Result<SpectralDynamics<f64>> {
    let n = a.rows();
    let mut b = Mat::zeros(n, 1);
    b[(n - 1, 0)] = 1.0;
    let mut mask = vec![true; n];
    mask[0] = false;
    SpectralDynamics::from_matrix(
        a,
        Mat::identity(n).scale(cfg.process_noise),
        vec![0.0; n],
        b,
        mask,
        Mat::try_from_rows(&cfg.observation_noise)?,
    )
}

fn controlled_trajectory(dynamics: &SpectralDynamics<f64>, prop: &Propagator<f64>, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let n = dynamics.dim();
    let m = dynamics.obs_dim();
    let support = cfg.support;
    let [lo, hi] = cfg.obs_per_traj;
    let count = rng.random_range(lo..=hi);
    let obs_times = observation_times(rng, count, support);
    let b_values: Vec<f64> = (0..cfg.b_segments.max(1)).map(|_| uniform(rng, cfg.b_range[0], cfg.b_range[1])).collect();
    let seg_len = support / b_values.len() as f64;
    let ticks = cfg.control_ticks.max(1);
    let tick_len = support / ticks as f64;

    let mut cuts: Vec<f64> = (0..b_values.len()).map(|j| j as f64 * seg_len).collect();
    cuts.extend((0..ticks).map(|j| j as f64 * tick_len));
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let is_tick = |t: f64| {
        let k = libm::round(t / tick_len);
        (t - k * tick_len).abs() < 1e-9
    };

    let mut events: Vec<f64> = cuts.clone();
    events.extend_from_slice(&obs_times);
    let truth_times: Vec<f64> = if cfg.truth_step > 0.0 {
        let k = libm::floor(support / cfg.truth_step + 1e-9) as usize;
        (0..=k).map(|i| i as f64 * cfg.truth_step).collect()
    } else {
        Vec::new()
    };
    events.extend_from_slice(&truth_times);
    events.push(support);
    events.sort_by(|a, b| a.total_cmp(b));
    events.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let r_sqrt = dynamics.r.psd_sqrt();
    let mut x = standard_normals(rng, n).iter().map(|z| z * cfg.x0_std).collect::<Vec<_>>();
    let mut t = 0.0;
    let mut y_tick = x[0];
    let mut u = 0.0;
    let mut controls: Vec<ControlSegment> = Vec::new();
    let mut observations = Vec::new();
    let mut truth = Vec::new();
    let (mut oi, mut ci, mut ti) = (0usize, 0usize, 0usize);
    for &e in &events {
        if e > t {
            x = exact_step(prop, &x, &[u], t, e, rng)?;
            t = e;
        }
        if ti < truth_times.len() && (truth_times[ti] - e).abs() < 1e-12 {
            truth.push(TruthSample { t: e, y: x[..m].to_vec() });
            ti += 1;
        }
        if oi < obs_times.len() && (obs_times[oi] - e).abs() < 1e-12 {
            observations.push(Observation::full(e, noisy(&x[..m], &r_sqrt, rng)));
            oi += 1;
        }
        if ci < cuts.len() && (cuts[ci] - e).abs() < 1e-12 {
            if is_tick(e) {
                y_tick = x[0];
            }
            let seg = libm::floor(e / seg_len + 1e-9) as usize;
            let b = b_values[seg.min(b_values.len() - 1)];
            u = b + cfg.coupling * y_tick;
            let end = cuts.get(ci + 1).copied().unwrap_or(support);
            controls.push(ControlSegment::new(e, end, vec![u]));
            ci += 1;
        }
    }
    Ok(Trajectory {
        context: vec![1.0],
        observations,
        controls,
        truth: (!truth.is_empty()).then_some(truth),
    })
}

fn gen_controlled(cfg: &GeneratorConfig, a: Mat<f64>, generator: Generator) -> Result<Dataset> {
    cfg.validate()?;
    let dynamics = controlled_dynamics(&a, cfg)?;
    let prop = Propagator::from_dynamics(&dynamics)?;
    let mut trajectories = Vec::with_capacity(cfg.n_traj);
    for i in 0..cfg.n_traj {
        let mut rng = stream(cfg.seed, &[i as u64]);
        trajectories.push(controlled_trajectory(&dynamics, &prop, cfg, &mut rng)?);
    }
    let n = dynamics.dim();
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_VERSION,
            generator,
            config: cfg.clone(),
            ground_truth: GroundTruth {
                eigenvalues: eigenvalue_list(&dynamics),
                dynamics: SpectralDynamicsRecord::from(&dynamics),
                a: a.to_rows(),
                x0_cov: Mat::identity(n).scale(cfg.x0_std * cfg.x0_std).to_rows(),
                wiener_cov: None,
                theta: None,
                sample_rate: None,
                center_range: None,
                control_ticks: Some(cfg.control_ticks),
                coupling: Some(cfg.coupling),
                family: None,
            },
        },
        trajectories,
    })
}

/// Controlled two-dimensional benchmark: the observable is mixed with a latent
/// coordinate that receives the control.
pub fn gen_section5(cfg: &GeneratorConfig) -> Result<Dataset> {
    let a = match cfg.mode {
        Mode::Complex => matrix_a1(),
        Mode::Real => matrix_a2(),
    };
    gen_controlled(cfg, a, Generator::Section5)
}

/// One of the three spectrum-study processes under open-loop control.
pub fn gen_spectrum(cfg: &GeneratorConfig) -> Result<Dataset> {
    let which = cfg.spectrum_process.ok_or_else(|| Error::Config("spectrum generator needs spectrum_process".into()))?;
    gen_controlled(cfg, which.matrix(), Generator::Spectrum)
}

/// Wiener covariance of the OU benchmark.
pub fn ou_wiener_cov() -> Mat<f64> {
    Mat::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]])
}

/// Two-dimensional Ornstein-Uhlenbeck process with a random center per
/// trajectory and random partial observation masks.
pub fn gen_ou(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let w = ou_wiener_cov();
    let theta = cfg.ou_theta;
    let a = Mat::identity(2).scale(-theta);
    let base = SpectralDynamics::from_matrix(&a, w.clone(), vec![0.0; 2], Mat::zeros(2, 0), vec![false; 2], Mat::try_from_rows(&cfg.observation_noise)?)?;
    let prop = Propagator::from_dynamics(&base)?;
    let stationary = w.scale(0.5 / theta);
    let x0_sqrt = stationary.psd_sqrt();
    let r_sqrt = base.r.psd_sqrt();
    let gaps = Exp::new(cfg.sample_rate).map_err(|_| Error::Config("invalid sample rate".into()))?;
    let [lo, hi] = cfg.obs_per_traj;

    let mut trajectories = Vec::with_capacity(cfg.n_traj);
    for i in 0..cfg.n_traj {
        let mut rng = stream(cfg.seed, &[i as u64]);
        let center: Vec<f64> = (0..2).map(|_| uniform(&mut rng, cfg.ou_center_range[0], cfg.ou_center_range[1])).collect();
        let times = loop {
            let mut ts = Vec::new();
            let mut t = rng.sample(gaps);
            while t < cfg.support {
                ts.push(t);
                t += rng.sample(gaps);
            }
            if ts.len() >= lo && ts.len() <= hi {
                break ts;
            }
        };
        let mut events = times.clone();
        let truth_times: Vec<f64> = if cfg.truth_step > 0.0 {
            let k = libm::floor(cfg.support / cfg.truth_step + 1e-9) as usize;
            (0..=k).map(|i| i as f64 * cfg.truth_step).collect()
        } else {
            Vec::new()
        };
        events.extend_from_slice(&truth_times);
        events.sort_by(|a, b| a.total_cmp(b));
        events.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        let mut x = x0_sqrt.matvec(&standard_normals(&mut rng, 2));
        let mut t = 0.0;
        let mut observations = Vec::new();
        let mut truth = Vec::new();
        let (mut oi, mut ti) = (0usize, 0usize);
        for &e in &events {
            if e > t {
                x = exact_step(&prop, &x, &[], t, e, &mut rng)?;
                t = e;
            }
            let raw: Vec<f64> = x.iter().zip(&center).map(|(a, b)| a + b).collect();
            if ti < truth_times.len() && (truth_times[ti] - e).abs() < 1e-12 {
                truth.push(TruthSample { t: e, y: raw.clone() });
                ti += 1;
            }
            if oi < times.len() && (times[oi] - e).abs() < 1e-12 {
                let mask = loop {
                    let m: Vec<bool> = (0..2).map(|_| rng.random::<f64>() < 0.5).collect();
                    if m.iter().any(|&b| b) {
                        break m;
                    }
                };
                let y = noisy(&raw, &r_sqrt, &mut rng);
                let y = y.iter().zip(&mask).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
                observations.push(Observation { t: e, y, mask });
                oi += 1;
            }
        }
        trajectories.push(Trajectory {
            context: vec![1.0],
            observations,
            controls: Vec::new(),
            truth: (!truth.is_empty()).then_some(truth),
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_VERSION,
            generator: Generator::Ou,
            config: cfg.clone(),
            ground_truth: GroundTruth {
                eigenvalues: eigenvalue_list(&base),
                dynamics: SpectralDynamicsRecord::from(&base),
                a: a.to_rows(),
                x0_cov: stationary.to_rows(),
                wiener_cov: Some(w.to_rows()),
                theta: Some(theta),
                sample_rate: Some(cfg.sample_rate),
                center_range: Some(cfg.ou_center_range),
                control_ticks: None,
                coupling: None,
                family: Some(String::from("alpha = per-trajectory center drawn uniformly from center_range in each coordinate; x0 drawn from the stationary law around it")),
            },
        },
        trajectories,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DosingEnvConfig {
    /// Range of the uniform gap between lab tests.
    pub lab_gap: [f64; 2],
    pub process_noise: f64,
    pub observation_noise: f64,
    /// Desired range of the observable.
    pub target_band: [f64; 2],
    /// Standard deviation of the initial deviation from the offset.
    pub x0_std: f64,
}

impl Default for DosingEnvConfig {
    fn default() -> Self {
        DosingEnvConfig {
            lab_gap: [1.0, 3.0],
            process_noise: 0.05,
            observation_noise: 0.01,
            target_band: [1.5, 2.5],
            x0_std: 0.3,
        }
    }
}

pub const DOSING_CONTEXT_DIM: usize = 3;

/// Context-conditioned ground truth of the dosing simulator.
///
/// The drug (control) enters the second coordinate only; the observable
/// responds through a context-dependent gain, and decays at a
/// context-dependent rate toward a context-dependent baseline. A slow damped
/// oscillation in the last two coordinates perturbs the observable.
pub fn dosing_dynamics(context: &[f64], cfg: &DosingEnvConfig) -> Result<SpectralDynamics<f64>> {
    if context.len() != DOSING_CONTEXT_DIM {
        return Err(Error::Dimension(format!("dosing context has {} entries, expected 3", context.len())));
    }
    let c: Vec<f64> = context.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    let k1 = 0.55 + 0.35 * c[0];
    let k2 = 1.3 + 0.3 * c[1];
    let gain = 1.0 + 0.6 * c[2];
    let a = Mat::from_rows(&[
        vec![-k1, gain, 0.3, 0.0],
        vec![0.0, -k2, 0.0, 0.0],
        vec![0.0, 0.0, -0.3, 1.0],
        vec![0.0, 0.0, -1.0, -0.3],
    ]);
    let alpha = vec![1.0 + 0.5 * c[1] - 0.3 * c[2], 0.0, 0.0, 0.0];
    let mut b = Mat::zeros(4, 1);
    b[(1, 0)] = 1.0;
    SpectralDynamics::from_matrix(
        &a,
        Mat::identity(4).scale(cfg.process_noise),
        alpha,
        b,
        vec![false, true, true, true],
        Mat::from_rows(&[vec![cfg.observation_noise]]),
    )
}

pub const DOSING_FAMILY: &str = "A = [[-k1, g, 0.3, 0], [0, -k2, 0, 0], [0, 0, -0.3, 1], [0, 0, -1, -0.3]] with k1 = 0.55 + 0.35 c0, k2 = 1.3 + 0.3 c1, g = 1 + 0.6 c2; alpha = (1 + 0.5 c1 - 0.3 c2, 0, 0, 0); B = e2; context c ~ U[-1, 1]^3";

/// Hidden state of one dosing episode. Only observations leave the simulator.
#[derive(Clone, Debug)]
pub struct DosingEnvState {
    x: Vec<f64>,
    t: f64,
    context: Vec<f64>,
    next_lab: f64,
    rng: ChaCha8Rng,
}

impl DosingEnvState {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DosingStep {
    pub observation: Option<Observation>,
    /// `−(distance of the observable from the target band)²` at the end of the step.
    pub reward: f64,
}

/// Gym-style dosing simulator.
#[derive(Clone, Debug)]
pub struct DosingEnv {
    cfg: DosingEnvConfig,
    dynamics: SpectralDynamics<f64>,
    propagator: Propagator<f64>,
    state: DosingEnvState,
}

impl DosingEnv {
    /// New episode with a context drawn uniformly from `[−1, 1]³`.
    pub fn reset<R: Rng>(cfg: &DosingEnvConfig, rng: &mut R) -> Result<(Self, Vec<f64>)> {
        let context: Vec<f64> = (0..DOSING_CONTEXT_DIM).map(|_| uniform(rng, -1.0, 1.0)).collect();
        let env = Self::reset_with_context(cfg, &context, rng.random::<u64>())?;
        Ok((env, context))
    }

    pub fn reset_with_context(cfg: &DosingEnvConfig, context: &[f64], seed: u64) -> Result<Self> {
        if !(cfg.lab_gap[0] > 0.0 && cfg.lab_gap[1] >= cfg.lab_gap[0]) {
            return Err(Error::Config("lab gaps must be positive".into()));
        }
        let dynamics = dosing_dynamics(context, cfg)?;
        let propagator = Propagator::from_dynamics(&dynamics)?;
        let mut rng = stream(seed, &[]);
        let x = standard_normals(&mut rng, 4).iter().map(|z| z * cfg.x0_std).collect();
        let next_lab = uniform(&mut rng, cfg.lab_gap[0], cfg.lab_gap[1]);
        Ok(DosingEnv {
            cfg: cfg.clone(),
            dynamics,
            propagator,
            state: DosingEnvState {
                x,
                t: 0.0,
                context: context.to_vec(),
                next_lab,
                rng,
            },
        })
    }

    pub fn state(&self) -> &DosingEnvState {
        &self.state
    }

    /// Ground-truth dynamics of this episode, for oracle evaluation.
    pub fn dynamics(&self) -> &SpectralDynamics<f64> {
        &self.dynamics
    }

    fn advance(&mut self, dose: f64, to: f64) -> Result<()> {
        if to > self.state.t {
            let x = exact_step(&self.propagator, &self.state.x, &[dose], self.state.t, to, &mut self.state.rng)?;
            self.state.x = x;
            self.state.t = to;
        }
        Ok(())
    }

    fn observable(&self) -> f64 {
        self.state.x[0] + self.dynamics.alpha[0]
    }

    /// Hold `dose` for `dt`. Lab tests falling inside the step are taken; the
    /// latest one is returned.
    pub fn step(&mut self, dose: f64, dt: f64) -> Result<DosingStep> {
        if !(dose >= 0.0) || !(dt > 0.0) {
            return Err(Error::Config(format!("dose must be non-negative and dt positive (dose {dose}, dt {dt})")));
        }
        let end = self.state.t + dt;
        let mut observation = None;
        while self.state.next_lab <= end {
            let lab = self.state.next_lab;
            self.advance(dose, lab)?;
            let noise = libm::sqrt(self.cfg.observation_noise) * self.state.rng.sample::<f64, _>(StandardNormal);
            observation = Some(Observation::full(lab, vec![self.observable() + noise]));
            self.state.next_lab = lab + uniform(&mut self.state.rng, self.cfg.lab_gap[0], self.cfg.lab_gap[1]);
        }
        self.advance(dose, end)?;
        let y = self.observable();
        let [lo, hi] = self.cfg.target_band;
        let dist = if y < lo {
            lo - y
        } else if y > hi {
            y - hi
        } else {
            0.0
        };
        Ok(DosingStep {
            observation,
            reward: -dist * dist,
        })
    }
}

/// Episodes of the dosing simulator under a random open-loop policy: each
/// time unit a dose from `U[0, 1]` is given with probability one half.
pub fn gen_dosing(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let step = if cfg.truth_step > 0.0 { cfg.truth_step } else { 0.1 };
    let sub = libm::round(1.0 / step).max(1.0) as usize;
    let units = libm::ceil(cfg.support - 1e-9) as usize;
    let mut trajectories = Vec::with_capacity(cfg.n_traj);
    for i in 0..cfg.n_traj {
        let mut rng = stream(cfg.seed, &[i as u64]);
        let (mut env, context) = DosingEnv::reset(&cfg.dosing, &mut rng)?;
        let mut observations = Vec::new();
        let mut controls = Vec::new();
        let mut truth = vec![TruthSample { t: 0.0, y: vec![env.observable()] }];
        for j in 0..units {
            let dose = if rng.random::<f64>() < 0.5 { rng.random::<f64>() } else { 0.0 };
            let t0 = j as f64;
            controls.push(ControlSegment::new(t0, t0 + 1.0, vec![dose]));
            for s in 0..sub {
                let target = t0 + (s + 1) as f64 / sub as f64;
                let out = env.step(dose, target - env.state.t)?;
                if let Some(o) = out.observation {
                    observations.push(o);
                }
                truth.push(TruthSample { t: target, y: vec![env.observable()] });
            }
        }
        trajectories.push(Trajectory {
            context,
            observations,
            controls,
            truth: (cfg.truth_step > 0.0).then_some(truth),
        });
    }
    let reference = dosing_dynamics(&[0.0; DOSING_CONTEXT_DIM], &cfg.dosing)?;
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_VERSION,
            generator: Generator::Dosing,
            config: cfg.clone(),
            ground_truth: GroundTruth {
                eigenvalues: eigenvalue_list(&reference),
                dynamics: SpectralDynamicsRecord::from(&reference),
                a: reference.dynamics_matrix()?.to_rows(),
                x0_cov: Mat::identity(4).scale(cfg.dosing.x0_std * cfg.dosing.x0_std).to_rows(),
                wiener_cov: None,
                theta: None,
                sample_rate: None,
                center_range: None,
                control_ticks: None,
                coupling: None,
                family: Some(String::from(DOSING_FAMILY)),
            },
        },
        trajectories,
    })
}

/// Dispatch on `cfg.generator`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    match cfg.generator {
        Generator::Section5 => gen_section5(cfg),
        Generator::Ou => gen_ou(cfg),
        Generator::Spectrum => gen_spectrum(cfg),
        Generator::Dosing => gen_dosing(cfg),
    }
}

/// Ground truth of a two-dimensional benchmark matrix, for oracle checks.
pub fn decompose_benchmark(a: &Mat<f64>) -> Result<Vec<[f64; 2]>> {
    let (s, _) = decompose(a)?;
    Ok(s.eigenvalues().into_iter().map(|(re, im)| [re, im]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str, n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_traj: n,
            seed: 7,
            ..GeneratorConfig::preset(name).unwrap()
        }
    }

    #[test]
    fn section5_contract() {
        let d = gen_section5(&small("section5-complex", 20)).unwrap();
        assert_eq!(d.trajectories.len(), 20);
        let ev = &d.header.ground_truth.eigenvalues;
        assert!((ev[0][0] + 0.75).abs() < 1e-12 && (ev[0][1] - 1.984_313_483_298_443).abs() < 1e-9);
        for t in &d.trajectories {
            t.validate().unwrap();
            assert!((5..=15).contains(&t.observations.len()));
            assert_eq!(t.controls.len(), 10);
            assert!((t.controls.last().unwrap().t1 - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn open_loop_controls_are_the_noise_segments() {
        let cfg = GeneratorConfig {
            coupling: 0.0,
            ..small("section5-complex", 5)
        };
        for t in gen_section5(&cfg).unwrap().trajectories {
            let b: Vec<f64> = t.controls.iter().map(|c| c.u[0]).collect();
            assert!(b.iter().all(|&x| (0.0..=0.5).contains(&x)));
            assert_eq!(b.len(), 10);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = gen_section5(&small("section5-real", 4)).unwrap();
        let b = gen_section5(&small("section5-real", 4)).unwrap();
        assert_eq!(a, b);
        let c = gen_section5(&GeneratorConfig {
            seed: 8,
            ..small("section5-real", 4)
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ou_contract() {
        let d = gen_ou(&small("ou", 50)).unwrap();
        assert_eq!(d.header.ground_truth.wiener_cov, Some(vec![vec![1.0, 0.5], vec![0.5, 1.0]]));
        assert_eq!(d.header.ground_truth.sample_rate, Some(0.6));
        for t in &d.trajectories {
            t.validate().unwrap();
            assert!(t.observations.len() >= 2);
            assert!(t.observations.iter().all(|o| o.mask.iter().any(|&m| m)));
        }
    }

    #[test]
    fn spectrum_counts() {
        let d = gen_spectrum(&small("spectrum-a3", 30)).unwrap();
        assert!(d.trajectories.iter().all(|t| (5..=20).contains(&t.observations.len())));
        assert!(d.header.ground_truth.eigenvalues[0][0].abs() < 1e-9);
    }

    #[test]
    fn dosing_masks_the_observable_row() {
        let mut rng = stream(1, &[]);
        for _ in 0..5 {
            let (env, _) = DosingEnv::reset(&DosingEnvConfig::default(), &mut rng).unwrap();
            assert_eq!(env.dynamics().b[(0, 0)], 0.0);
            assert!(env.dynamics().spectrum.is_stable());
        }
    }

    #[test]
    fn dosing_rejects_negative_dose() {
        let mut env = DosingEnv::reset_with_context(&DosingEnvConfig::default(), &[0.0; 3], 1).unwrap();
        assert!(env.step(-1.0, 1.0).is_err());
        assert!(env.step(1.0, 0.0).is_err());
    }

    #[test]
    fn deterministic_path_without_noise() {
        let d = controlled_dynamics(
            &matrix_a1(),
            &GeneratorConfig {
                process_noise: 0.0,
                ..GeneratorConfig::default()
            },
        )
        .unwrap();
        let sched = [ControlSegment::new(0.0, 5.0, vec![0.3])];
        let grid = [0.0, 0.5, 1.7, 3.0];
        let path = simulate_linear_sde(&d, &sched, &[1.0, -1.0], &grid, &mut stream(1, &[])).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let b = crate::esde::propagate(&GaussianBelief::new(vec![1.0, -1.0], Mat::zeros(2, 2), 0.0), &d, &sched, t, false).unwrap();
            assert!((path[i][0] - b.mu[0]).abs() < 1e-12 && (path[i][1] - b.mu[1]).abs() < 1e-12);
        }
    }
}
