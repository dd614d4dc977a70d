//! Sequence unrolling, the likelihood objective, Adam and evaluation.

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esde::{predict_observable, ControlSegment, GaussianBelief, Propagator};
use crate::filter::{condition, Observation};
use crate::linalg::Mat;
use crate::nets::{dynamics_heads, prior_heads, HyperModel};
use crate::real::Real;
use crate::seeds::stream;
use crate::spectral::SpectralDynamics;
use crate::tape::{Tape, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Times closer than this are treated as one event.
const TIME_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub t: f64,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub context: Vec<f64>,
    #[serde(rename = "obs")]
    pub observations: Vec<Observation>,
    #[serde(default)]
    pub controls: Vec<ControlSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<TruthSample>>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        for w in self.observations.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Config(format!("observation times not increasing at t = {}", w[1].t)));
            }
        }
        if let Some(o) = self.observations.first() {
            if !(o.t >= 0.0) {
                return Err(Error::Config(format!("negative observation time {}", o.t)));
            }
        }
        for o in &self.observations {
            if o.y.len() != o.mask.len() || o.y.iter().any(|y| !y.is_finite()) {
                return Err(Error::Config(format!("malformed observation at t = {}", o.t)));
            }
        }
        for s in &self.controls {
            if !(s.t1 > s.t0) {
                return Err(Error::Config(format!("empty control segment [{}, {})", s.t0, s.t1)));
            }
        }
        for w in self.controls.windows(2) {
            if w[1].t0 < w[0].t1 {
                return Err(Error::Config(format!("overlapping control segments at t = {}", w[1].t0)));
            }
        }
        Ok(())
    }

    pub fn last_observation_time(&self) -> f64 {
        self.observations.last().map(|o| o.t).unwrap_or(0.0)
    }
}

/// Supplies the prior and the dynamics of each interval.
pub trait RegimeSource<T: Real> {
    /// Belief at `t = 0` with the sequence-level `(α, R)`.
    fn initial(&self) -> Result<(GaussianBelief<T>, Vec<T>, Mat<T>)>;
    /// Dynamics for the interval starting at the given (detached) belief,
    /// with its conditioning penalty.
    fn regime(&self, belief: &GaussianBelief<f64>) -> Result<(Propagator<T>, T)>;
    /// Period of dynamics refreshes between observations, if any.
    fn refresh_period(&self) -> Option<f64>;
}

/// A model evaluated for one sequence: g2 weights, prior outputs and `B`.
pub struct BoundModel<'m, T> {
    pub model: &'m HyperModel,
    pub w: Vec<T>,
    pub prior_raw: Vec<T>,
    pub b: Mat<T>,
}

impl<'m> BoundModel<'m, f64> {
    pub fn new(model: &'m HyperModel, context: &[f64]) -> Result<Self> {
        Ok(BoundModel {
            model,
            w: model.hyper_forward(context)?,
            prior_raw: model.prior_raw_generic(&model.prior_params, context)?,
            b: model.b_global.clone(),
        })
    }
}

impl<T: Real> RegimeSource<T> for BoundModel<'_, T> {
    fn initial(&self) -> Result<(GaussianBelief<T>, Vec<T>, Mat<T>)> {
        prior_heads(&self.model.head_config, &self.prior_raw)
    }

    fn regime(&self, belief: &GaussianBelief<f64>) -> Result<(Propagator<T>, T)> {
        let heads = dynamics_heads(self.model, &self.w, &belief.mu, &belief.sigma)?;
        let prop = Propagator::new(&heads.spectrum, &heads.basis, &heads.q, &self.b)?;
        Ok((prop, heads.penalty))
    }

    fn refresh_period(&self) -> Option<f64> {
        Some(self.model.head_config.interval_dt)
    }
}

/// Known dynamics with a known prior on the centered state.
pub struct FixedRegime {
    dynamics: SpectralDynamics<f64>,
    propagator: Propagator<f64>,
    prior: GaussianBelief<f64>,
}

impl FixedRegime {
    pub fn new(dynamics: SpectralDynamics<f64>, mu0: Vec<f64>, sigma0: Mat<f64>) -> Result<Self> {
        dynamics.validate()?;
        let propagator = Propagator::from_dynamics(&dynamics)?;
        Ok(FixedRegime {
            dynamics,
            propagator,
            prior: GaussianBelief::new(mu0, sigma0, 0.0),
        })
    }
}

impl RegimeSource<f64> for FixedRegime {
    fn initial(&self) -> Result<(GaussianBelief<f64>, Vec<f64>, Mat<f64>)> {
        Ok((self.prior.clone(), self.dynamics.alpha.clone(), self.dynamics.r.clone()))
    }

    fn regime(&self, _: &GaussianBelief<f64>) -> Result<(Propagator<f64>, f64)> {
        Ok((self.propagator.clone(), 0.0))
    }

    fn refresh_period(&self) -> Option<f64> {
        None
    }
}

/// Replays recorded belief summaries instead of the live ones, so that the
/// detached hypernetwork input can be held fixed under finite differences.
pub struct FrozenSummaries<'a, S> {
    pub inner: &'a S,
    pub summaries: &'a [GaussianBelief<f64>],
    next: core::cell::Cell<usize>,
}

impl<'a, S> FrozenSummaries<'a, S> {
    pub fn new(inner: &'a S, summaries: &'a [GaussianBelief<f64>]) -> Self {
        FrozenSummaries {
            inner,
            summaries,
            next: core::cell::Cell::new(0),
        }
    }
}

impl<T: Real, S: RegimeSource<T>> RegimeSource<T> for FrozenSummaries<'_, S> {
    fn initial(&self) -> Result<(GaussianBelief<T>, Vec<T>, Mat<T>)> {
        self.inner.initial()
    }

    fn regime(&self, _: &GaussianBelief<f64>) -> Result<(Propagator<T>, T)> {
        let i = self.next.get();
        self.next.set(i + 1);
        let b = self.summaries.get(i).ok_or_else(|| Error::Dimension("ran out of recorded summaries".into()))?;
        self.inner.regime(b)
    }

    fn refresh_period(&self) -> Option<f64> {
        self.inner.refresh_period()
    }
}

#[derive(Clone, Debug, Default)]
pub struct UnrollOptions {
    /// Extra prediction times besides the observations.
    pub queries: Vec<f64>,
    /// Observations after this time are predicted but not filtered.
    pub condition_until: Option<f64>,
    /// Reported in non-finite diagnostics.
    pub traj_id: usize,
}

/// Predictive law of the observable block at one time, taken before any
/// observation at that time is absorbed.
#[derive(Clone, Debug)]
pub struct Prediction<T = f64> {
    pub t: f64,
    pub mean: Vec<T>,
    pub cov: Mat<T>,
    /// Index of the observation at this time, if any.
    pub observation: Option<usize>,
    /// Negative log-likelihood of that observation on its observed coordinates.
    pub nll: Option<T>,
    /// Observations absorbed before this prediction.
    pub n_seen: usize,
}

#[derive(Clone, Debug)]
pub struct Unrolled<T = f64> {
    pub predictions: Vec<Prediction<T>>,
    pub nll_sum: T,
    pub n_nll: usize,
    pub penalty_sum: T,
    pub n_regimes: usize,
    /// Beliefs handed to the dynamics source, one per regime.
    pub summaries: Vec<GaussianBelief<f64>>,
}

/// Interval boundaries: `0`, every observation time and the refresh grid,
/// restricted to `[0, t_end)`.
pub fn boundaries(obs_times: &[f64], period: Option<f64>, t_end: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    out.extend(obs_times.iter().copied().filter(|&t| t < t_end));
    if let Some(dt) = period {
        let mut k = 1u64;
        loop {
            let t = k as f64 * dt;
            if t >= t_end {
                break;
            }
            out.push(t);
            k += 1;
        }
    }
    sort_merge(&mut out);
    out
}

fn sort_merge(v: &mut Vec<f64>) {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS * (1.0 + b.abs()));
}

/// Number of dynamics refreshes an unroll over these events performs.
pub fn regime_count(traj: &Trajectory, period: Option<f64>, queries: &[f64]) -> usize {
    let t_end = queries.iter().copied().fold(traj.last_observation_time(), f64::max);
    if t_end <= 0.0 {
        return 0;
    }
    let times: Vec<f64> = traj.observations.iter().map(|o| o.t).collect();
    boundaries(&times, period, t_end).len()
}

/// Run the predict / filter / refresh loop over one sequence.
pub fn unroll_source<T: Real, S: RegimeSource<T>>(source: &S, traj: &Trajectory, opts: &UnrollOptions) -> Result<Unrolled<T>> {
    let (mut belief, alpha, r) = source.initial()?;
    let obs_times: Vec<f64> = traj.observations.iter().map(|o| o.t).collect();
    let mut queries = opts.queries.clone();
    if queries.iter().any(|q| !(*q >= 0.0)) {
        return Err(Error::Config("query times must be non-negative".into()));
    }
    sort_merge(&mut queries);
    let t_end = queries.iter().copied().fold(traj.last_observation_time(), f64::max);
    let bounds = boundaries(&obs_times, source.refresh_period(), t_end);

    let mut events: Vec<f64> = bounds.clone();
    events.extend_from_slice(&obs_times);
    events.extend_from_slice(&queries);
    sort_merge(&mut events);

    let near = |a: f64, b: f64| (a - b).abs() <= TIME_EPS * (1.0 + b.abs());
    let (mut bi, mut oi, mut qi) = (0usize, 0usize, 0usize);
    let mut regime: Option<Propagator<T>> = None;
    let mut stale = false;
    let mut out = Unrolled {
        predictions: Vec::new(),
        nll_sum: T::zero(),
        n_nll: 0,
        penalty_sum: T::zero(),
        n_regimes: 0,
        summaries: Vec::new(),
    };
    let mut n_seen = 0usize;
    for &t in &events {
        if t > belief.t {
            if stale || regime.is_none() {
                let summary = belief.values();
                let (p, pen) = source.regime(&summary)?;
                out.summaries.push(summary);
                out.penalty_sum = out.penalty_sum + pen;
                out.n_regimes += 1;
                regime = Some(p);
                stale = false;
            }
            if let Some(p) = &regime {
                belief = p.propagate(&belief, &traj.controls, t)?;
            }
            if !belief.is_finite() {
                return Err(Error::NonFinite {
                    trajectory: opts.traj_id,
                    interval: out.n_regimes,
                    t,
                });
            }
        }
        let is_obs = oi < obs_times.len() && near(obs_times[oi], t);
        let is_query = qi < queries.len() && near(queries[qi], t);
        if is_query {
            qi += 1;
        }
        if is_obs || is_query {
            let (mean, cov) = predict_observable(&belief, &alpha, &r);
            let mut pred = Prediction {
                t,
                mean,
                cov,
                observation: None,
                nll: None,
                n_seen,
            };
            if is_obs {
                let obs = &traj.observations[oi];
                pred.observation = Some(oi);
                if let Some(v) = masked_nll(&obs.y, &obs.mask, &pred.mean, &pred.cov)? {
                    if !v.val().is_finite() {
                        return Err(Error::NonFinite {
                            trajectory: opts.traj_id,
                            interval: out.n_regimes,
                            t,
                        });
                    }
                    out.nll_sum = out.nll_sum + v;
                    out.n_nll += 1;
                    pred.nll = Some(v);
                }
            }
            out.predictions.push(pred);
        }
        if is_obs {
            let obs = &traj.observations[oi];
            if opts.condition_until.is_none_or(|c| obs.t <= c) {
                let aligned = Observation {
                    t: belief.t,
                    y: obs.y.clone(),
                    mask: obs.mask.clone(),
                };
                belief = condition(&belief, &aligned, &r, &alpha)?;
                n_seen += 1;
            }
            oi += 1;
        }
        if bi < bounds.len() && near(bounds[bi], t) {
            stale = true;
            bi += 1;
        }
    }
    Ok(out)
}

/// Unroll a model on one sequence in plain floating point.
pub fn unroll(model: &HyperModel, traj: &Trajectory, opts: &UnrollOptions) -> Result<Unrolled<f64>> {
    let bound = BoundModel::new(model, &traj.context)?;
    unroll_source(&bound, traj, opts)
}

/// Gaussian negative log density of `y` under `N(mean, cov)`.
pub fn nll<T: Real>(y: &[f64], mean: &[T], cov: &Mat<T>) -> Result<T> {
    let d = y.len();
    if mean.len() != d || cov.rows() != d || cov.cols() != d {
        return Err(Error::Dimension(format!("nll of a {d}-vector against a {}-dim law", mean.len())));
    }
    let l = cov.cholesky()?;
    let mut z: Vec<T> = Vec::with_capacity(d);
    let mut log_det = T::zero();
    for i in 0..d {
        let mut s = T::cst(y[i]) - mean[i];
        for (k, &zk) in z.iter().enumerate() {
            s = s - l[(i, k)] * zk;
        }
        z.push(s / l[(i, i)]);
        log_det = log_det + l[(i, i)].ln();
    }
    let quad = z.iter().fold(T::zero(), |acc, &x| acc + x * x);
    Ok(quad * 0.5 + log_det + 0.5 * LN_2PI * d as f64)
}

/// [`nll`] restricted to the masked coordinates; `None` for an empty mask.
pub fn masked_nll<T: Real>(y: &[f64], mask: &[bool], mean: &[T], cov: &Mat<T>) -> Result<Option<T>> {
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let ms: Vec<T> = idx.iter().map(|&i| mean[i]).collect();
    nll(&ys, &ms, &cov.submatrix(&idx, &idx)).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension("adam_step shape mismatch".into()));
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - libm::pow(b1, state.step as f64);
    let c2 = 1.0 - libm::pow(b2, state.step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub interval_dt: f64,
    pub subsample_prob: f64,
    pub seed: u64,
    pub stable: bool,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub n_complex_pairs: usize,
    /// Weight of the mean basis-conditioning penalty in the loss.
    pub penalty_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            interval_dt: 1.0,
            subsample_prob: 0.7,
            seed: 0,
            stable: true,
            n: 2,
            m: 1,
            k: 1,
            n_complex_pairs: 1,
            penalty_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.subsample_prob > 0.0 && self.subsample_prob <= 1.0) {
            return Err(Error::Config(format!("subsample_prob must lie in (0, 1], got {}", self.subsample_prob)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.interval_dt > 0.0) {
            return Err(Error::Config("batch_size, lr and interval_dt must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.eps,
        }
    }
}

/// Loss pieces of one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SequenceLoss {
    pub nll_sum: f64,
    pub n_obs: usize,
    pub penalty_sum: f64,
    pub n_regimes: usize,
}

/// Accumulate into `grad` the gradient of
/// `nll_weight·ΣNLL + penalty_weight·Σpenalty` over one sequence, with respect
/// to the flat parameter vector of [`HyperModel::params`].
pub fn sequence_gradient(model: &HyperModel, traj: &Trajectory, nll_weight: f64, penalty_weight: f64, traj_id: usize, grad: &mut [f64]) -> Result<SequenceLoss> {
    if grad.len() != model.n_params() {
        return Err(Error::Dimension("gradient buffer does not match the model".into()));
    }
    let c = model.network_input(&traj.context)?;
    let g1 = model.g1_spec.forward_trace(&model.theta, &c)?;
    let pr = model.prior_spec.forward_trace(&model.prior_params, &c)?;

    let tape = Tape::with_capacity(1 << 16);
    let w = tape.vars(g1.output());
    let prior_raw = tape.vars(pr.output());
    let (n, k) = (model.b_global.rows(), model.b_global.cols());
    let b = Mat::from_fn(n, k, |i, j| {
        if model.b_mask[i] {
            tape.var(model.b_global[(i, j)])
        } else {
            Var::constant(0.0)
        }
    });
    let bound = BoundModel {
        model,
        w: w.clone(),
        prior_raw: prior_raw.clone(),
        b: b.clone(),
    };
    let opts = UnrollOptions {
        traj_id,
        ..UnrollOptions::default()
    };
    let out = unroll_source(&bound, traj, &opts)?;
    let loss = out.nll_sum * nll_weight + out.penalty_sum * penalty_weight;
    if !loss.value().is_finite() {
        return Err(Error::NonFinite {
            trajectory: traj_id,
            interval: out.n_regimes,
            t: traj.last_observation_time(),
        });
    }
    let g = tape.gradient(loss);
    let (g_theta, _) = model.g1_spec.backward(&model.theta, &g1, &g.wrt_all(&w));
    let (g_prior, _) = model.prior_spec.backward(&model.prior_params, &pr, &g.wrt_all(&prior_raw));
    let nt = g_theta.len();
    let np = g_prior.len();
    for (a, x) in grad[..nt].iter_mut().zip(&g_theta) {
        *a += x;
    }
    for (a, x) in grad[nt..nt + np].iter_mut().zip(&g_prior) {
        *a += x;
    }
    for i in 0..n {
        for j in 0..k {
            grad[nt + np + i * k + j] += g.wrt(b[(i, j)]);
        }
    }
    Ok(SequenceLoss {
        nll_sum: out.nll_sum.value(),
        n_obs: out.n_nll,
        penalty_sum: out.penalty_sum.value(),
        n_regimes: out.n_regimes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(with = "crate::serde_float")]
    pub train_nll: f64,
    #[serde(with = "crate::serde_float")]
    pub val_nll: f64,
    #[serde(with = "crate::serde_float")]
    pub penalty: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub best_params: Vec<f64>,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Diagnostics of skipped batches.
    pub skipped: Vec<String>,
}

impl TrainState {
    pub fn fresh(model: &HyperModel) -> Self {
        let params = model.params();
        TrainState {
            epochs_done: 0,
            adam: AdamState::new(params.len()),
            best_params: params.clone(),
            params,
            best_val: None,
            best_epoch: 0,
            history: Vec::new(),
            skipped: Vec::new(),
        }
    }
}

pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

/// Mean per-observation NLL of a model over sequences.
pub fn mean_nll(model: &HyperModel, trajs: &[Trajectory]) -> Result<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for (i, traj) in trajs.iter().enumerate() {
        let opts = UnrollOptions {
            traj_id: i,
            ..UnrollOptions::default()
        };
        let out = unroll(model, traj, &opts)?;
        s += out.nll_sum;
        c += out.n_nll;
    }
    Ok(if c == 0 { f64::NAN } else { s / c as f64 })
}

fn subsample<'a, R: Rng>(traj: &'a Trajectory, p: f64, rng: &mut R) -> Cow<'a, Trajectory> {
    if p >= 1.0 {
        return Cow::Borrowed(traj);
    }
    let mut t = traj.clone();
    t.observations.retain(|_| rng.random::<f64>() < p);
    Cow::Owned(t)
}

/// Train `model` for `cfg.epochs` epochs in total, continuing from `state`.
/// `on_epoch` sees the state after every epoch. Returns the final state; the
/// best-validation parameters are in `best_params`.
pub fn train(
    model: &HyperModel,
    train_set: &[Trajectory],
    val_set: &[Trajectory],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState),
) -> Result<TrainState> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for t in train_set.iter().chain(val_set) {
        t.validate()?;
    }
    let mut state = state.unwrap_or_else(|| TrainState::fresh(model));
    let mut current = model.clone();
    current.set_params(&state.params)?;
    let adam = cfg.adam();
    let period = Some(current.head_config.interval_dt);
    let mut consecutive = 0usize;

    for epoch in state.epochs_done + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[epoch as u64, 0]));
        let mut sub_rng = stream(cfg.seed, &[epoch as u64, 1]);
        let batch_trajs: Vec<Cow<Trajectory>> = order.iter().map(|&i| subsample(&train_set[i], cfg.subsample_prob, &mut sub_rng)).collect();

        let (mut nll_total, mut obs_total, mut pen_total, mut reg_total) = (0.0, 0usize, 0.0, 0usize);
        for (chunk_ids, chunk) in order.chunks(cfg.batch_size).zip(batch_trajs.chunks(cfg.batch_size)) {
            let n_obs: usize = chunk.iter().map(|t| t.observations.iter().filter(|o| o.mask.iter().any(|&m| m)).count()).sum();
            let n_reg: usize = chunk.iter().map(|t| regime_count(t, period, &[])).sum();
            if n_obs == 0 {
                continue;
            }
            let w_nll = 1.0 / n_obs as f64;
            let w_pen = if n_reg == 0 { 0.0 } else { cfg.penalty_weight / n_reg as f64 };
            let mut grad = vec![0.0; current.n_params()];
            let mut batch = SequenceLoss::default();
            let mut failure: Option<String> = None;
            for (&id, traj) in chunk_ids.iter().zip(chunk) {
                match sequence_gradient(&current, traj, w_nll, w_pen, id, &mut grad) {
                    Ok(l) => {
                        batch.nll_sum += l.nll_sum;
                        batch.n_obs += l.n_obs;
                        batch.penalty_sum += l.penalty_sum;
                        batch.n_regimes += l.n_regimes;
                    }
                    Err(e) if e.is_numeric() => {
                        failure = Some(format!("epoch {epoch}, trajectory {id}: {e}"));
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if failure.is_none() && grad.iter().any(|g| !g.is_finite()) {
                failure = Some(format!("epoch {epoch}: non-finite gradient"));
            }
            if let Some(msg) = failure {
                consecutive += 1;
                state.skipped.push(msg.clone());
                if consecutive >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::TrainingDiverged {
                        skips: consecutive,
                        last: msg,
                    });
                }
                continue;
            }
            consecutive = 0;
            adam_step(&mut state.params, &grad, &mut state.adam, &adam)?;
            current.set_params(&state.params)?;
            state.params = current.params();
            nll_total += batch.nll_sum;
            obs_total += batch.n_obs;
            pen_total += batch.penalty_sum;
            reg_total += batch.n_regimes;
        }

        let train_nll = if obs_total == 0 { f64::NAN } else { nll_total / obs_total as f64 };
        let val_nll = if val_set.is_empty() {
            train_nll
        } else {
            match mean_nll(&current, val_set) {
                Ok(v) => v,
                Err(e) if e.is_numeric() => f64::NAN,
                Err(e) => return Err(e),
            }
        };
        let penalty = if reg_total == 0 { 0.0 } else { pen_total / reg_total as f64 };
        state.history.push(EpochRecord {
            epoch,
            train_nll,
            val_nll,
            penalty,
        });
        if val_nll.is_finite() && state.best_val.is_none_or(|b| val_nll < b) {
            state.best_val = Some(val_nll);
            state.best_params = state.params.clone();
            state.best_epoch = epoch;
        }
        state.epochs_done = epoch;
        on_epoch(&state);
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Increasing bin edges for the time since the previous observation.
    #[serde(with = "crate::serde_float::vec")]
    pub horizon_bins: Vec<f64>,
    /// Observations up to this time are absorbed and only later ones scored.
    pub condition_until: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            horizon_bins: vec![0.0, 0.5, 1.0, 2.0, 4.0, f64::INFINITY],
            condition_until: None,
        }
    }
}

/// One scored coordinate of one observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub traj_id: usize,
    pub t: f64,
    pub horizon: f64,
    pub y_true: f64,
    pub y_pred: f64,
    pub var_pred: f64,
    /// Univariate marginal NLL of this coordinate.
    pub nll: f64,
    pub dim: usize,
    pub naive: f64,
    pub n_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    #[serde(with = "crate::serde_float")]
    pub lo: f64,
    #[serde(with = "crate::serde_float")]
    pub hi: f64,
    pub count: usize,
    #[serde(with = "crate::serde_float")]
    pub mse: f64,
    #[serde(with = "crate::serde_float")]
    pub naive_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsCountRow {
    pub n_seen: usize,
    pub count: usize,
    #[serde(with = "crate::serde_float")]
    pub mse: f64,
    #[serde(with = "crate::serde_float")]
    pub naive_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean squared error over scored coordinates.
    #[serde(with = "crate::serde_float")]
    pub mse: f64,
    /// Mean joint NLL over scored observations.
    #[serde(with = "crate::serde_float")]
    pub nll: f64,
    /// Last-observed-value baseline on the same coordinates.
    #[serde(with = "crate::serde_float")]
    pub naive_mse: f64,
    pub n_rows: usize,
    pub n_events: usize,
    pub per_horizon: Vec<HorizonRow>,
    pub per_obs_count: Vec<ObsCountRow>,
}

/// Score pre-filter predictions at observation times. `predict` unrolls one
/// sequence with the given options.
pub fn evaluate_with<F>(trajs: &[Trajectory], opts: &EvalOptions, mut predict: F) -> Result<(Metrics, Vec<PredictionRow>)>
where
    F: FnMut(&Trajectory, &UnrollOptions) -> Result<Unrolled<f64>>,
{
    let mut rows = Vec::new();
    let (mut nll_sum, mut n_events) = (0.0, 0usize);
    for (id, traj) in trajs.iter().enumerate() {
        let uopts = UnrollOptions {
            queries: Vec::new(),
            condition_until: opts.condition_until,
            traj_id: id,
        };
        let out = predict(traj, &uopts)?;
        let m = traj.observations.first().map(|o| o.y.len()).unwrap_or(0);
        let mut last_value: Vec<Option<f64>> = vec![None; m];
        let mut last_time = 0.0;
        let mut preds = out.predictions.iter().filter(|p| p.observation.is_some());
        for (oi, obs) in traj.observations.iter().enumerate() {
            let pred = preds.next().ok_or_else(|| Error::Dimension(format!("missing prediction for observation {oi}")))?;
            let scored = opts.condition_until.is_none_or(|c| obs.t > c);
            if scored {
                if let Some(v) = pred.nll {
                    nll_sum += v;
                    n_events += 1;
                }
                for d in 0..m {
                    if !obs.mask[d] {
                        continue;
                    }
                    let (mu, var) = (pred.mean[d], pred.cov[(d, d)]);
                    let y = obs.y[d];
                    let nll_d = 0.5 * (LN_2PI + libm::log(var) + (y - mu) * (y - mu) / var);
                    rows.push(PredictionRow {
                        traj_id: id,
                        t: obs.t,
                        horizon: obs.t - last_time,
                        y_true: y,
                        y_pred: mu,
                        var_pred: var,
                        nll: nll_d,
                        dim: d,
                        naive: last_value[d].unwrap_or(0.0),
                        n_seen: pred.n_seen,
                    });
                }
            }
            if opts.condition_until.is_none_or(|c| obs.t <= c) {
                for d in 0..m {
                    if obs.mask[d] {
                        last_value[d] = Some(obs.y[d]);
                    }
                }
                last_time = obs.t;
            }
        }
    }
    Ok((summarize(&rows, nll_sum, n_events, &opts.horizon_bins), rows))
}

fn mse_of<'a>(rows: impl Iterator<Item = &'a PredictionRow>) -> (usize, f64, f64) {
    let (mut c, mut se, mut ne) = (0usize, 0.0, 0.0);
    for r in rows {
        c += 1;
        se += (r.y_true - r.y_pred) * (r.y_true - r.y_pred);
        ne += (r.y_true - r.naive) * (r.y_true - r.naive);
    }
    if c == 0 {
        (0, f64::NAN, f64::NAN)
    } else {
        (c, se / c as f64, ne / c as f64)
    }
}

fn summarize(rows: &[PredictionRow], nll_sum: f64, n_events: usize, bins: &[f64]) -> Metrics {
    let (n_rows, mse, naive_mse) = mse_of(rows.iter());
    let per_horizon = bins
        .windows(2)
        .map(|w| {
            let (count, mse, naive_mse) = mse_of(rows.iter().filter(|r| r.horizon >= w[0] && r.horizon < w[1]));
            HorizonRow {
                lo: w[0],
                hi: w[1],
                count,
                mse,
                naive_mse,
            }
        })
        .collect();
    let max_seen = rows.iter().map(|r| r.n_seen).max().unwrap_or(0);
    let per_obs_count = (0..=max_seen)
        .filter_map(|s| {
            let (count, mse, naive_mse) = mse_of(rows.iter().filter(|r| r.n_seen == s));
            (count > 0).then_some(ObsCountRow {
                n_seen: s,
                count,
                mse,
                naive_mse,
            })
        })
        .collect();
    Metrics {
        mse,
        nll: if n_events == 0 { f64::NAN } else { nll_sum / n_events as f64 },
        naive_mse,
        n_rows,
        n_events,
        per_horizon,
        per_obs_count,
    }
}

pub fn evaluate(model: &HyperModel, trajs: &[Trajectory], opts: &EvalOptions) -> Result<(Metrics, Vec<PredictionRow>)> {
    evaluate_with(trajs, opts, |traj, o| unroll(model, traj, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Architecture, HeadConfig};
    use crate::spectral::{EigenBasis, Spectrum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> HyperModel {
        let cfg = HeadConfig {
            n: 2,
            m: 1,
            k: 1,
            context_dim: 1,
            n_complex_pairs: 1,
            stable: true,
            hypernet_disabled: false,
            interval_dt: 1.0,
        };
        let arch = Architecture {
            g1_hidden: vec![4],
            g2_hidden: vec![3],
            prior_hidden: vec![3],
            activation: Activation::Tanh,
        };
        HyperModel::new(cfg, &arch, vec![false, true], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn toy_traj() -> Trajectory {
        Trajectory {
            context: vec![0.5],
            observations: vec![Observation::full(0.7, vec![0.3]), Observation::full(2.2, vec![-0.1])],
            controls: vec![ControlSegment::new(0.0, 1.5, vec![0.4])],
            truth: None,
        }
    }

    #[test]
    fn standard_normal_nll() {
        let v = nll(&[0.0], &[0.0], &Mat::identity(1)).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = nll(&[1.0], &[0.0], &Mat::identity(1)).unwrap();
        assert!((v - 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn boundaries_union() {
        assert_eq!(boundaries(&[0.5, 2.0], Some(1.0), 3.0), vec![0.0, 0.5, 1.0, 2.0]);
        assert_eq!(boundaries(&[], None, 3.0), vec![0.0]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.01], &mut s, &AdamConfig::default()).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-6);
        let before = p.clone();
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn empty_trajectory_rolls_out_the_prior() {
        let model = toy_model(1);
        let traj = Trajectory {
            observations: vec![],
            ..toy_traj()
        };
        let opts = UnrollOptions {
            queries: vec![0.0, 1.5, 4.0],
            ..Default::default()
        };
        let out = unroll(&model, &traj, &opts).unwrap();
        assert_eq!(out.predictions.len(), 3);
        assert!(out.predictions.iter().all(|p| p.mean[0].is_finite() && p.cov[(0, 0)] > 0.0));
        let (b, alpha, r) = crate::nets::prior(&model, &traj.context).unwrap();
        assert_eq!(out.predictions[0].mean[0], b.mu[0] + alpha[0]);
        assert_eq!(out.predictions[0].cov[(0, 0)], b.sigma[(0, 0)] + r[(0, 0)]);
    }

    #[test]
    fn prediction_at_observation_is_pre_filter() {
        let model = toy_model(2);
        let traj = toy_traj();
        let t = traj.observations[1].t;
        let near = unroll(
            &model,
            &traj,
            &UnrollOptions {
                queries: vec![t - 1e-9],
                ..Default::default()
            },
        )
        .unwrap();
        let at = unroll(&model, &traj, &UnrollOptions::default()).unwrap();
        let p_near = &near.predictions[1];
        let p_at = &at.predictions[1];
        assert!((p_near.mean[0] - p_at.mean[0]).abs() < 1e-7);
        assert!((p_near.cov[(0, 0)] - p_at.cov[(0, 0)]).abs() < 1e-7);
    }

    #[test]
    fn sequence_gradient_matches_finite_differences() {
        let model = toy_model(4);
        let traj = toy_traj();
        let mut grad = vec![0.0; model.n_params()];
        sequence_gradient(&model, &traj, 1.0, 1.0, 0, &mut grad).unwrap();
        let p0 = model.params();
        let base = unroll(&model, &traj, &UnrollOptions::default()).unwrap();
        let loss = |p: &[f64]| {
            let mut m = model.clone();
            m.set_params(p).unwrap();
            let bound = BoundModel::new(&m, &traj.context).unwrap();
            let frozen = FrozenSummaries::new(&bound, &base.summaries);
            let out: Unrolled<f64> = unroll_source(&frozen, &traj, &UnrollOptions::default()).unwrap();
            out.nll_sum + out.penalty_sum
        };
        let h = 1e-6;
        for i in (0..p0.len()).step_by(7).chain([p0.len() - 1]) {
            let mut a = p0.clone();
            let mut b = p0.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 + 1e-4 * fd.abs(), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let model = toy_model(5);
        let data: Vec<Trajectory> = (0..6).map(|_| toy_traj()).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train(&model, &data, &data[..2], &cfg, None, |_| {}).unwrap();
        let b = train(&model, &data, &data[..2], &cfg, None, |_| {}).unwrap();
        assert_eq!(a, b);
        assert!(a.history.iter().all(|h| h.train_nll.is_finite()));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let model = toy_model(6);
        let data: Vec<Trajectory> = (0..5).map(|_| toy_traj()).collect();
        let full_cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let full = train(&model, &data, &[], &full_cfg, None, |_| {}).unwrap();
        let half = train(&model, &data, &[], &TrainConfig { epochs: 2, ..full_cfg.clone() }, None, |_| {}).unwrap();
        let resumed = train(&model, &data, &[], &full_cfg, Some(half), |_| {}).unwrap();
        assert_eq!(full, resumed);
    }

    #[test]
    fn fixed_regime_evaluation() {
        let dynamics = SpectralDynamics {
            spectrum: Spectrum::new(vec![-1.0], vec![]),
            basis: EigenBasis::new(Mat::identity(1)),
            q: Mat::zeros(1, 1),
            alpha: vec![0.0],
            b: Mat::zeros(1, 0),
            b_mask: vec![false],
            r: Mat::from_rows(&[vec![0.01]]),
        };
        let src = FixedRegime::new(dynamics, vec![1.0], Mat::from_rows(&[vec![1e-6]])).unwrap();
        let e = libm::exp(-1.0);
        let traj = Trajectory {
            context: vec![],
            observations: vec![Observation::full(1.0, vec![e]), Observation::full(2.0, vec![e * e])],
            controls: vec![],
            truth: None,
        };
        let (m, rows) = evaluate_with(&[traj], &EvalOptions::default(), |t, o| unroll_source(&src, t, o)).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(m.mse < 1e-10);
        assert!((rows[1].naive - e).abs() < 1e-15);
        assert!((rows[1].horizon - 1.0).abs() < 1e-15);
    }
}
