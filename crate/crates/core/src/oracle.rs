//! Independent reference computations: dense matrix exponentials, Riemann
//! sums, joint-Gaussian conditioning, and random test systems.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::esde::{control_at, control_integral_analytic, moment_ode_oracle, noise_integral_analytic, propagate, ControlSegment, GaussianBelief};
use crate::filter::{condition, Observation};
use crate::linalg::Mat;
use crate::seeds::stream;
use crate::spectral::{dynamics_matrix, normalize_basis, EigenBasis, SpectralDynamics, Spectrum, DEFAULT_DET_FLOOR};

/// `e^{A}` by scaling and squaring a degree-20 Taylor polynomial.
pub fn expm(a: &Mat<f64>) -> Mat<f64> {
    let n = a.rows();
    let norm = (0..n).map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut s = 0u32;
    while norm / libm::pow(2.0, s as f64) > 0.5 {
        s += 1;
    }
    let scaled = a.scale(1.0 / libm::pow(2.0, s as f64));
    let mut term = Mat::identity(n);
    let mut sum = Mat::identity(n);
    for k in 1..=20 {
        term = term.matmul(&scaled).scale(1.0 / k as f64);
        sum = &sum + &term;
    }
    for _ in 0..s {
        sum = sum.matmul(&sum);
    }
    sum
}

/// Midpoint Riemann sum of `∫_{t0}^{t} e^{A(t−τ)}B·u(τ) dτ`.
pub fn control_integral_riemann(a: &Mat<f64>, b: &Mat<f64>, schedule: &[ControlSegment], t0: f64, t: f64, step: f64) -> Vec<f64> {
    let n = a.rows();
    let steps = libm::ceil((t - t0) / step).max(1.0) as usize;
    let h = (t - t0) / steps as f64;
    let e_h = expm(&a.scale(h));
    // walk backward from τ = t so the kernel is built by repeated products
    let mut kernel = expm(&a.scale(0.5 * h));
    let mut acc = vec![0.0; n];
    for i in (0..steps).rev() {
        let tau = t0 + (i as f64 + 0.5) * h;
        if let Some(u) = control_at(schedule, tau) {
            let v = kernel.matvec(&b.matvec(u));
            for (x, y) in acc.iter_mut().zip(v) {
                *x += y * h;
            }
        }
        kernel = kernel.matmul(&e_h);
    }
    acc
}

/// Midpoint Riemann sum of `∫_0^{Δ} e^{As} Q e^{Aᵀs} ds`.
pub fn noise_integral_riemann(a: &Mat<f64>, q: &Mat<f64>, dt: f64, step: f64) -> Mat<f64> {
    let n = a.rows();
    let steps = libm::ceil(dt / step).max(1.0) as usize;
    let h = dt / steps as f64;
    let e_h = expm(&a.scale(h));
    let mut kernel = expm(&a.scale(0.5 * h));
    let mut acc = Mat::zeros(n, n);
    for _ in 0..steps {
        acc = &acc + &kernel.congruence(q);
        kernel = e_h.matmul(&kernel);
    }
    acc.scale(h).symmetrize()
}

/// Conditioning through the joint law of `(X, Ŷ_I)`: builds the full joint
/// covariance and applies the Schur complement with a dense LU solve.
pub fn schur_condition(belief: &GaussianBelief<f64>, obs: &Observation, r: &Mat<f64>, alpha: &[f64]) -> GaussianBelief<f64> {
    let n = belief.dim();
    let idx = obs.observed();
    let p = idx.len();
    if p == 0 {
        return belief.clone();
    }
    let mut joint = nalgebra::DMatrix::<f64>::zeros(n + p, n + p);
    let mut mean = nalgebra::DVector::<f64>::zeros(n + p);
    for i in 0..n {
        mean[i] = belief.mu[i] + alpha[i];
        for j in 0..n {
            joint[(i, j)] = belief.sigma[(i, j)];
        }
    }
    for (a, &k) in idx.iter().enumerate() {
        mean[n + a] = belief.mu[k] + alpha[k];
        for i in 0..n {
            joint[(i, n + a)] = belief.sigma[(i, k)];
            joint[(n + a, i)] = belief.sigma[(k, i)];
        }
        for (b, &l) in idx.iter().enumerate() {
            joint[(n + a, n + b)] = belief.sigma[(k, l)] + r[(k, l)];
        }
    }
    let sxx = joint.view((0, 0), (n, n)).into_owned();
    let sxy = joint.view((0, n), (n, p)).into_owned();
    let syy = joint.view((n, n), (p, p)).into_owned();
    let resid = nalgebra::DVector::from_iterator(p, idx.iter().enumerate().map(|(a, &k)| obs.y[k] - mean[n + a]));
    let lu = syy.lu();
    let gain_t = lu.solve(&sxy.transpose()).expect("innovation covariance is singular");
    let w = lu.solve(&resid).expect("innovation covariance is singular");
    let mu_x = mean.rows(0, n).into_owned() + &sxy * w;
    let sigma = sxx - &sxy * gain_t;
    GaussianBelief::new(
        (0..n).map(|i| mu_x[i] - alpha[i]).collect(),
        Mat::from_nalgebra(&sigma).symmetrize(),
        belief.t,
    )
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random positive semi-definite matrix `LLᵀ + floor·I`.
pub fn random_psd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> Mat<f64> {
    let l = Mat::from_fn(n, n, |_, _| normal(rng) * 0.5);
    let mut out = l.matmul(&l.transpose());
    for i in 0..n {
        out[(i, i)] += floor;
    }
    out.symmetrize()
}

/// Random stable system with `n_pairs` complex pairs, a well-conditioned
/// eigenbasis, and `k` control channels.
pub fn random_stable_dynamics<R: Rng>(rng: &mut R, n: usize, n_pairs: usize, m: usize, k: usize) -> SpectralDynamics<f64> {
    assert!(2 * n_pairs <= n && m <= n);
    let n_real = n - 2 * n_pairs;
    let real = (0..n_real).map(|_| uniform(rng, -2.0, -0.1)).collect();
    let pairs = (0..n_pairs).map(|_| (uniform(rng, -1.5, -0.05), uniform(rng, 0.3, 3.0))).collect();
    let spectrum = Spectrum::new(real, pairs);
    let v = loop {
        let v = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + 0.4 * normal(rng));
        let v = normalize_basis((n_real, n_pairs), &v);
        if v.condition_number() < 30.0 {
            break v;
        }
    };
    SpectralDynamics {
        spectrum,
        basis: EigenBasis::new(v),
        q: random_psd(rng, n, 0.05),
        alpha: (0..n).map(|_| normal(rng)).collect(),
        b: Mat::from_fn(n, k, |_, _| normal(rng)),
        b_mask: vec![true; n],
        r: Mat::zeros(m, m),
    }
}

/// Piecewise-constant control on `[0, horizon)` with 1 to 6 random pieces.
pub fn random_schedule<R: Rng>(rng: &mut R, k: usize, horizon: f64) -> Vec<ControlSegment> {
    let pieces = rng.random_range(1..=6usize);
    let mut cuts: Vec<f64> = (1..pieces).map(|_| uniform(rng, 0.0, horizon)).collect();
    cuts.push(0.0);
    cuts.push(horizon);
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| ControlSegment::new(w[0], w[1], (0..k).map(|_| uniform(rng, -1.0, 1.0)).collect()))
        .collect()
}

pub fn max_rel_diff(x: &Mat<f64>, reference: &Mat<f64>) -> f64 {
    x.max_abs_diff(reference) / reference.max_abs().max(1e-300)
}

fn vec_rel_diff(x: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
    x.iter().zip(reference).fold(0.0f64, |a, (p, q)| a.max((p - q).abs())) / scale
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &'static str, cases: usize, max_error: f64, threshold: f64) -> Self {
        OracleCheck {
            name,
            cases,
            max_error,
            threshold,
            passed: max_error <= threshold,
        }
    }
}

pub const PROPAGATE_TOL: f64 = 1e-6;
pub const FILTER_TOL: f64 = 1e-10;
pub const INTEGRAL_TOL: f64 = 1e-4;

/// Closed-form propagation against RK4 moment equations over horizon 5.
pub fn check_propagation(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = stream(seed, &[0, c as u64]);
        let n = [2, 4, 6][c % 3];
        let pairs = rng.random_range(0..=n / 2);
        let d = random_stable_dynamics(&mut rng, n, pairs, 1, 2);
        let sched = random_schedule(&mut rng, 2, 5.0);
        let b0 = GaussianBelief::new((0..n).map(|_| normal(&mut rng)).collect(), random_psd(&mut rng, n, 0.1), 0.0);
        let fast = propagate(&b0, &d, &sched, 5.0, false)?;
        let slow = moment_ode_oracle(&d, &sched, &b0, 5.0, 1e-3)?;
        worst = worst.max(vec_rel_diff(&fast.mu, &slow.mu)).max(max_rel_diff(&fast.sigma, &slow.sigma));
    }
    Ok(OracleCheck::new("propagate_vs_rk4", cases, worst, PROPAGATE_TOL))
}

/// Filter against the joint-Gaussian Schur complement, with and without
/// noise and with partial masks.
pub fn check_filtering(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = stream(seed, &[1, c as u64]);
        let n = rng.random_range(2..=6usize);
        let m = rng.random_range(1..=n);
        let sigma = random_psd(&mut rng, n, 0.2);
        let belief = GaussianBelief::new((0..n).map(|_| normal(&mut rng)).collect(), sigma, 0.0);
        let r = if c % 2 == 0 { Mat::zeros(m, m) } else { random_psd(&mut rng, m, 0.05) };
        let mask = loop {
            let mask: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < 0.6).collect();
            if mask.iter().any(|&x| x) {
                break mask;
            }
        };
        let obs = Observation {
            t: 0.0,
            y: (0..m).map(|_| 2.0 * normal(&mut rng)).collect(),
            mask,
        };
        let alpha: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let got = condition(&belief, &obs, &r, &alpha)?;
        let want = schur_condition(&belief, &obs, &r, &alpha);
        let dmu = got.mu.iter().zip(&want.mu).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        worst = worst.max(dmu).max(got.sigma.max_abs_diff(&want.sigma));
    }
    Ok(OracleCheck::new("filter_vs_schur", cases, worst, FILTER_TOL))
}

/// Analytic control and noise integrals against midpoint Riemann sums of
/// the dense exponential. Every third case uses a purely imaginary pair.
pub fn check_integrals(seed: u64, cases: usize, step: f64) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = stream(seed, &[2, c as u64]);
        let n = [2, 3, 4][c % 3];
        let pairs = if n == 2 { 1 } else { rng.random_range(0..=n / 2) };
        let mut d = random_stable_dynamics(&mut rng, n, pairs, 1, 1);
        if c % 3 == 0 {
            d.spectrum.pairs[0].0 = 0.0;
        }
        let a = dynamics_matrix(&d.spectrum, &d.basis, DEFAULT_DET_FLOOR)?;
        let dt = uniform(&mut rng, 0.2, 1.5);
        let u = vec![uniform(&mut rng, -1.0, 1.0)];
        let sched = [ControlSegment::new(0.0, dt, u.clone())];
        let ctrl = control_integral_analytic(&d.spectrum, &d.basis, &u, &d.b, 0.0, dt)?;
        let ctrl_ref = control_integral_riemann(&a, &d.b, &sched, 0.0, dt, step);
        let noise = noise_integral_analytic(&d.spectrum, &d.basis, &d.q, 0.0, dt)?;
        let noise_ref = noise_integral_riemann(&a, &d.q, dt, step);
        let dc = ctrl.iter().zip(&ctrl_ref).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        worst = worst.max(dc).max(noise.max_abs_diff(&noise_ref));
    }
    Ok(OracleCheck::new("integrals_vs_riemann", cases, worst, INTEGRAL_TOL))
}
