//! Closed-form propagation of Gaussian beliefs through one linear regime.
//!
//! Beliefs are kept in centered coordinates (`X − α`). Inside a constant
//! control piece of length `Δ` the exact transition in eigen-coordinates
//! (`ξ = V⁻¹x`) is
//!
//! ```text
//! ξ ← E(Δ)ξ + G(Δ)V⁻¹Bu,          G(Δ) = ∫₀^Δ E(s) ds
//! P ← E(Δ)P E(Δ)ᵀ + N(Δ),          N(Δ) = ∫₀^Δ E(s) Q̃ E(s)ᵀ ds,  Q̃ = V⁻¹QV⁻ᵀ
//! ```
//!
//! Both integrals are taken in the complex modal basis where `E` is diagonal
//! with entries `e^{z s}`: `G` has entries `(e^{zΔ}−1)/z` and `N` is the
//! Hadamard product of the modal noise with `(e^{(zᵢ+z̄ⱼ)Δ}−1)/(zᵢ+z̄ⱼ)`.
//! Every exponential is anchored at the end of the interval, so nothing grows
//! with absolute time.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cplx, Mat};
use crate::real::Real;
use crate::spectral::{dynamics_matrix, modal_exp, EigenBasis, SpectralDynamics, Spectrum, DEFAULT_DET_FLOOR};

/// Below this `|zΔ|` the factor `(e^{zΔ}−1)/z` switches to its series.
pub const SERIES_GUARD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief<T = f64> {
    pub mu: Vec<T>,
    pub sigma: Mat<T>,
    pub t: f64,
}

impl<T: Real> GaussianBelief<T> {
    pub fn new(mu: Vec<T>, sigma: Mat<T>, t: f64) -> Self {
        GaussianBelief { mu, sigma, t }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn values(&self) -> GaussianBelief<f64> {
        GaussianBelief {
            mu: self.mu.iter().map(|x| x.val()).collect(),
            sigma: self.sigma.values(),
            t: self.t,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|x| x.val().is_finite()) && self.sigma.as_slice().iter().all(|x| x.val().is_finite())
    }
}

/// Control held constant on `[t0, t1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSegment {
    pub t0: f64,
    pub t1: f64,
    pub u: Vec<f64>,
}

impl ControlSegment {
    pub fn new(t0: f64, t1: f64, u: Vec<f64>) -> Self {
        ControlSegment { t0, t1, u }
    }
}

/// Control value at `t`, `None` inside a gap.
pub fn control_at(schedule: &[ControlSegment], t: f64) -> Option<&[f64]> {
    schedule.iter().find(|s| s.t0 <= t && t < s.t1).map(|s| s.u.as_slice())
}

/// Split `[from, to)` into pieces of constant control.
pub fn control_pieces(schedule: &[ControlSegment], from: f64, to: f64, strict: bool) -> Result<Vec<(f64, f64, Option<&[f64]>)>> {
    let mut cuts = vec![from, to];
    for s in schedule {
        for c in [s.t0, s.t1] {
            if c > from && c < to {
                cuts.push(c);
            }
        }
    }
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let mut out = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let u = control_at(schedule, a + 0.5 * (b - a));
        if strict && u.is_none() {
            return Err(Error::ScheduleGap { from: a, to: b });
        }
        out.push((a, b, u));
    }
    Ok(out)
}

/// `(e^{zΔ} − 1)/z` with the series `Δ(1 + zΔ/2 + (zΔ)²/6)` near `zΔ = 0`.
pub fn expm1_ratio<T: Real>(z: Cplx<T>, dt: f64) -> Cplx<T> {
    let zd = z.scale(T::cst(dt));
    if zd.norm_sq().val().sqrt() < SERIES_GUARD {
        let one = Cplx::real(T::one());
        let half = zd.scale(T::cst(0.5));
        let sixth = (zd * zd).scale(T::cst(1.0 / 6.0));
        (one + half + sixth).scale(T::cst(dt))
    } else {
        let (e, _) = zd.exp_clamped();
        (e - Cplx::real(T::one())).div(z)
    }
}

/// Eigenvalues as complex numbers in column order (`a+ib`, then `a−ib`).
fn modal_eigenvalues<T: Real>(spectrum: &Spectrum<T>) -> Vec<Cplx<T>> {
    let mut z: Vec<Cplx<T>> = spectrum.real.iter().map(|&l| Cplx::real(l)).collect();
    for &(a, b) in &spectrum.pairs {
        z.push(Cplx::new(a, b));
        z.push(Cplx::new(a, -b));
    }
    z
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;

/// `Uᴴ·X·U` for real symmetric `X`, where `U` is block-diagonal with `1` for
/// real modes and `[[1, 1], [i, −i]]/√2` for pairs.
fn to_modal<T: Real>(n_real: usize, x: &Mat<T>) -> Vec<Vec<Cplx<T>>> {
    let n = x.rows();
    let s = T::cst(FRAC_1_SQRT_2);
    // rows: Uᴴ X
    let mut rows: Vec<Vec<Cplx<T>>> = (0..n)
        .map(|i| (0..n).map(|j| Cplx::real(x[(i, j)])).collect())
        .collect();
    let mut k = n_real;
    while k < n {
        for j in 0..n {
            let (a, b) = (rows[k][j], rows[k + 1][j]);
            // (a − i b)/√2, (a + i b)/√2
            rows[k][j] = Cplx::new(a.re + b.im, a.im - b.re).scale(s);
            rows[k + 1][j] = Cplx::new(a.re - b.im, a.im + b.re).scale(s);
        }
        k += 2;
    }
    // columns: (·) U
    let mut k = n_real;
    while k < n {
        for row in rows.iter_mut() {
            let (a, b) = (row[k], row[k + 1]);
            // (a + i b)/√2, (a − i b)/√2
            row[k] = Cplx::new(a.re - b.im, a.im + b.re).scale(s);
            row[k + 1] = Cplx::new(a.re + b.im, a.im - b.re).scale(s);
        }
        k += 2;
    }
    rows
}

/// `Re(U·Y·Uᴴ)`.
fn from_modal<T: Real>(n_real: usize, y: &[Vec<Cplx<T>>]) -> Mat<T> {
    let n = y.len();
    let s = T::cst(FRAC_1_SQRT_2);
    let mut rows: Vec<Vec<Cplx<T>>> = y.to_vec();
    // rows: U Y
    let mut k = n_real;
    while k < n {
        for j in 0..n {
            let (a, b) = (rows[k][j], rows[k + 1][j]);
            // (a + b)/√2, i(a − b)/√2
            rows[k][j] = (a + b).scale(s);
            let d = a - b;
            rows[k + 1][j] = Cplx::new(-d.im, d.re).scale(s);
        }
        k += 2;
    }
    // columns: (·) Uᴴ, keep the real part only
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = rows[i][j].re;
        }
        let mut k = n_real;
        while k < n {
            let (a, b) = (rows[i][k], rows[i][k + 1]);
            // (a + b)/√2, (−i a + i b)/√2 → real parts
            out[(i, k)] = (a.re + b.re) * s;
            out[(i, k + 1)] = (a.im - b.im) * s;
            k += 2;
        }
    }
    out
}

/// `G(Δ) = ∫₀^Δ E(s) ds` in the real canonical layout.
fn modal_integral<T: Real>(spectrum: &Spectrum<T>, dt: f64) -> Mat<T> {
    let n = spectrum.dim();
    let mut g = Mat::zeros(n, n);
    for (i, &l) in spectrum.real.iter().enumerate() {
        g[(i, i)] = expm1_ratio(Cplx::real(l), dt).re;
    }
    let off = spectrum.real.len();
    for (p, &(a, b)) in spectrum.pairs.iter().enumerate() {
        let k = off + 2 * p;
        let cs = expm1_ratio(Cplx::new(a, b), dt);
        g[(k, k)] = cs.re;
        g[(k, k + 1)] = cs.im;
        g[(k + 1, k)] = -cs.im;
        g[(k + 1, k + 1)] = cs.re;
    }
    g
}

/// `N(Δ)` in eigen-coordinates given the modal noise `Uᴴ Q̃ U`.
fn modal_noise<T: Real>(spectrum: &Spectrum<T>, z: &[Cplx<T>], q_modal: &[Vec<Cplx<T>>], dt: f64) -> Mat<T> {
    let n = z.len();
    let mut h = q_modal.to_vec();
    for i in 0..n {
        for j in 0..n {
            let rate = z[i] + z[j].conj();
            h[i][j] = q_modal[i][j] * expm1_ratio(rate, dt);
        }
    }
    from_modal(spectrum.real.len(), &h).symmetrize()
}

/// Cached pieces of one regime, reused for every propagation inside it.
#[derive(Clone, Debug)]
pub struct Propagator<T: Real> {
    spectrum: Spectrum<T>,
    v: Mat<T>,
    vinv: Mat<T>,
    z: Vec<Cplx<T>>,
    q_modal: Vec<Vec<Cplx<T>>>,
    vinv_b: Mat<T>,
}

impl<T: Real> Propagator<T> {
    pub fn new(spectrum: &Spectrum<T>, basis: &EigenBasis<T>, q: &Mat<T>, b: &Mat<T>) -> Result<Self> {
        Self::with_det_floor(spectrum, basis, q, b, DEFAULT_DET_FLOOR)
    }

    pub fn with_det_floor(spectrum: &Spectrum<T>, basis: &EigenBasis<T>, q: &Mat<T>, b: &Mat<T>, det_floor: f64) -> Result<Self> {
        let vinv = basis.inverse(det_floor)?;
        let q_tilde = vinv.congruence(q).symmetrize();
        Ok(Propagator {
            spectrum: spectrum.clone(),
            v: basis.v.clone(),
            z: modal_eigenvalues(spectrum),
            q_modal: to_modal(spectrum.real.len(), &q_tilde),
            vinv_b: vinv.matmul(b),
            vinv,
        })
    }

    pub fn from_dynamics(d: &SpectralDynamics<T>) -> Result<Self> {
        Self::new(&d.spectrum, &d.basis, &d.q, &d.b)
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    /// One constant-control step in eigen-coordinates. Returns the saturation flag.
    fn step(&self, xi: &mut Vec<T>, p: &mut Mat<T>, dt: f64, u: Option<&[f64]>) -> bool {
        let (e, saturated) = modal_exp(&self.spectrum, dt);
        let mut next = e.matvec(xi);
        if let Some(u) = u {
            if u.iter().any(|&x| x != 0.0) {
                let w: Vec<T> = (0..self.dim())
                    .map(|i| {
                        let mut acc = T::zero();
                        for (k, &uk) in u.iter().enumerate() {
                            if uk != 0.0 {
                                acc = acc + self.vinv_b[(i, k)] * uk;
                            }
                        }
                        acc
                    })
                    .collect();
                let g = modal_integral(&self.spectrum, dt);
                for (x, c) in next.iter_mut().zip(g.matvec(&w)) {
                    *x = *x + c;
                }
            }
        }
        *xi = next;
        let noise = modal_noise(&self.spectrum, &self.z, &self.q_modal, dt);
        *p = &e.congruence(p) + &noise;
        saturated
    }

    /// Exact propagation to `t_target`; the flag reports exponent clamping.
    pub fn advance(&self, belief: &GaussianBelief<T>, schedule: &[ControlSegment], t_target: f64, strict: bool) -> Result<(GaussianBelief<T>, bool)> {
        if t_target < belief.t {
            return Err(Error::TimeReversal {
                current: belief.t,
                target: t_target,
            });
        }
        if t_target == belief.t {
            return Ok((belief.clone(), false));
        }
        let mut xi = self.vinv.matvec(&belief.mu);
        let mut p = self.vinv.congruence(&belief.sigma);
        let mut saturated = false;
        for (a, b, u) in control_pieces(schedule, belief.t, t_target, strict)? {
            saturated |= self.step(&mut xi, &mut p, b - a, u);
        }
        let mu = self.v.matvec(&xi);
        let sigma = self.v.congruence(&p).symmetrize();
        Ok((GaussianBelief::new(mu, sigma, t_target), saturated))
    }

    pub fn propagate(&self, belief: &GaussianBelief<T>, schedule: &[ControlSegment], t_target: f64) -> Result<GaussianBelief<T>> {
        self.advance(belief, schedule, t_target, false).map(|(b, _)| b)
    }
}

/// Exact `N(μ(t), Σ(t))` of the centered state at `t_target`.
/// Gaps in the schedule are zero control unless `strict`.
pub fn propagate<T: Real>(belief: &GaussianBelief<T>, dynamics: &SpectralDynamics<T>, schedule: &[ControlSegment], t_target: f64, strict: bool) -> Result<GaussianBelief<T>> {
    Propagator::from_dynamics(dynamics)?
        .advance(belief, schedule, t_target, strict)
        .map(|(b, _)| b)
}

/// `Φ(t)∫_{t0}^{t}Φ(τ)⁻¹Bu dτ = V·G(t−t0)·V⁻¹Bu` for constant `u`.
pub fn control_integral_analytic<T: Real>(spectrum: &Spectrum<T>, basis: &EigenBasis<T>, u: &[f64], b: &Mat<T>, t0: f64, t: f64) -> Result<Vec<T>> {
    let vinv = basis.inverse(DEFAULT_DET_FLOOR)?;
    let bu: Vec<T> = b.matvec(&u.iter().map(|&x| T::cst(x)).collect::<Vec<_>>());
    let g = modal_integral(spectrum, t - t0);
    Ok(basis.v.matvec(&g.matvec(&vinv.matvec(&bu))))
}

/// `Φ(t)[∫_{t0}^{t}Φ(τ)⁻¹Q Φ(τ)⁻ᵀ dτ]Φ(t)ᵀ`.
pub fn noise_integral_analytic<T: Real>(spectrum: &Spectrum<T>, basis: &EigenBasis<T>, q: &Mat<T>, t0: f64, t: f64) -> Result<Mat<T>> {
    let vinv = basis.inverse(DEFAULT_DET_FLOOR)?;
    let q_modal = to_modal(spectrum.real.len(), &vinv.congruence(q).symmetrize());
    let n = modal_noise(spectrum, &modal_eigenvalues(spectrum), &q_modal, t - t0);
    Ok(basis.v.congruence(&n).symmetrize())
}

/// Left Riemann sum of `Φ(t)Φ(τ)⁻¹B·u(τ)` on a grid of step `dt`.
/// Each term is independent of the others.
pub fn control_integral_numeric(spectrum: &Spectrum<f64>, basis: &EigenBasis<f64>, u_fn: &dyn Fn(f64) -> Vec<f64>, b: &Mat<f64>, t0: f64, t: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config("numeric integration step must be positive".into()));
    }
    let vinv = basis.inverse(DEFAULT_DET_FLOOR)?;
    let n = basis.dim();
    let steps = libm::ceil((t - t0) / dt - 1e-9).max(0.0) as usize;
    let mut acc = vec![0.0; n];
    for i in 0..steps {
        let tau = t0 + i as f64 * dt;
        let h = dt.min(t - tau);
        if h <= 0.0 {
            break;
        }
        let u = u_fn(tau);
        if u.iter().all(|&x| x == 0.0) {
            continue;
        }
        let (e, _) = modal_exp(spectrum, t - tau);
        let term = basis.v.matvec(&e.matvec(&vinv.matvec(&b.matvec(&u))));
        for (a, x) in acc.iter_mut().zip(term) {
            *a += x * h;
        }
    }
    Ok(acc)
}

/// RK4 integration of `dμ/dt = Aμ + Bu`, `dΣ/dt = AΣ + ΣAᵀ + Q`.
/// Reference implementation for tests and the oracle command.
pub fn moment_ode_oracle(dynamics: &SpectralDynamics<f64>, schedule: &[ControlSegment], belief: &GaussianBelief<f64>, t_target: f64, step: f64) -> Result<GaussianBelief<f64>> {
    if t_target < belief.t {
        return Err(Error::TimeReversal {
            current: belief.t,
            target: t_target,
        });
    }
    let a = dynamics_matrix(&dynamics.spectrum, &dynamics.basis, DEFAULT_DET_FLOOR)?;
    let at = a.transpose();
    let q = &dynamics.q;
    let n = a.rows();
    let mut mu = belief.mu.clone();
    let mut sigma = belief.sigma.clone();
    for (t0, t1, u) in control_pieces(schedule, belief.t, t_target, false)? {
        let bu: Vec<f64> = match u {
            Some(u) => dynamics.b.matvec(u),
            None => vec![0.0; n],
        };
        let steps = libm::ceil((t1 - t0) / step).max(1.0) as usize;
        let h = (t1 - t0) / steps as f64;
        let f_mu = |m: &[f64]| -> Vec<f64> { a.matvec(m).iter().zip(&bu).map(|(x, y)| x + y).collect() };
        let f_sig = |s: &Mat<f64>| -> Mat<f64> { &(&a.matmul(s) + &s.matmul(&at)) + q };
        for _ in 0..steps {
            let k1 = f_mu(&mu);
            let m2: Vec<f64> = mu.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect();
            let k2 = f_mu(&m2);
            let m3: Vec<f64> = mu.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect();
            let k3 = f_mu(&m3);
            let m4: Vec<f64> = mu.iter().zip(&k3).map(|(x, k)| x + h * k).collect();
            let k4 = f_mu(&m4);
            for i in 0..n {
                mu[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let s1 = f_sig(&sigma);
            let s2 = f_sig(&(&sigma + &s1.scale(0.5 * h)));
            let s3 = f_sig(&(&sigma + &s2.scale(0.5 * h)));
            let s4 = f_sig(&(&sigma + &s3.scale(h)));
            let incr = &(&s1 + &s2.scale(2.0)) + &(&s3.scale(2.0) + &s4);
            sigma = &sigma + &incr.scale(h / 6.0);
        }
    }
    Ok(GaussianBelief::new(mu, sigma.symmetrize(), t_target))
}

/// Predictive law of the observable block: `N((μ+α)₁..ₘ, Σ₁..ₘ,₁..ₘ + R)`.
pub fn predict_observable<T: Real>(belief: &GaussianBelief<T>, alpha: &[T], r: &Mat<T>) -> (Vec<T>, Mat<T>) {
    let m = r.rows();
    let mean = (0..m).map(|i| belief.mu[i] + alpha[i]).collect();
    let cov = Mat::from_fn(m, m, |i, j| belief.sigma[(i, j)] + r[(i, j)]);
    (mean, cov)
}
