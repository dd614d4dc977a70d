//! Conditioning a Gaussian belief on a partial, possibly noisy observation of
//! the leading `m` coordinates.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esde::GaussianBelief;
use crate::linalg::Mat;
use crate::real::Real;

/// Largest innovation condition number accepted by [`condition`].
pub const MAX_INNOVATION_COND: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub y: Vec<f64>,
    /// Which of the `m` observable coordinates were measured.
    pub mask: Vec<bool>,
}

impl Observation {
    pub fn full(t: f64, y: Vec<f64>) -> Self {
        let mask = alloc::vec![true; y.len()];
        Observation { t, y, mask }
    }

    pub fn observed(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Posterior of the centered state given `Ŷ = y` on the masked coordinates.
///
/// With zero noise on every observed coordinate the exact Schur-complement
/// form is used (observed block pinned, its covariance zeroed); otherwise
/// the Kalman gain form `K = ΣHᵀ(HΣHᵀ + R)⁻¹`.
pub fn condition<T: Real>(belief: &GaussianBelief<T>, obs: &Observation, r: &Mat<T>, alpha: &[T]) -> Result<GaussianBelief<T>> {
    let n = belief.dim();
    let m = r.rows();
    if obs.y.len() != m || obs.mask.len() != m || alpha.len() != n || m > n {
        return Err(Error::Dimension(format!(
            "observation of size {} / mask {} against m = {m}, n = {n}",
            obs.y.len(),
            obs.mask.len()
        )));
    }
    if (obs.t - belief.t).abs() > 1e-9 * (1.0 + obs.t.abs()) {
        return Err(Error::Dimension(format!(
            "observation at t = {} but belief at t = {}",
            obs.t, belief.t
        )));
    }
    let idx = obs.observed();
    if idx.is_empty() {
        return Ok(belief.clone());
    }
    let all: Vec<usize> = (0..n).collect();
    let r_obs = r.submatrix(&idx, &idx);
    let s = &belief.sigma.submatrix(&idx, &idx) + &r_obs;
    let cond = innovation_condition(&s.values());
    if !(cond <= MAX_INNOVATION_COND) {
        return Err(Error::SingularInnovation { cond });
    }
    let residual: Mat<T> = Mat::from_fn(idx.len(), 1, |i, _| {
        let k = idx[i];
        T::cst(obs.y[k]) - alpha[k] - belief.mu[k]
    });
    let noiseless = r_obs.as_slice().iter().all(|x| x.val() == 0.0);

    let cross = belief.sigma.submatrix(&all, &idx); // Σ Hᵀ, n × |I|
    let s_inv_r = s.solve(&residual)?;
    let s_inv_cross_t = s.solve(&cross.transpose())?; // S⁻¹ H Σ
    let dmu = cross.matmul(&s_inv_r);
    let dsigma = cross.matmul(&s_inv_cross_t);

    let mut mu: Vec<T> = (0..n).map(|i| belief.mu[i] + dmu[(i, 0)]).collect();
    let mut sigma = (&belief.sigma - &dsigma).symmetrize();
    if noiseless {
        let mut observed = alloc::vec![false; n];
        for &k in &idx {
            observed[k] = true;
            mu[k] = T::cst(obs.y[k]) - alpha[k];
        }
        for i in 0..n {
            for j in 0..n {
                if observed[i] || observed[j] {
                    sigma[(i, j)] = T::zero();
                }
            }
        }
    }
    Ok(GaussianBelief::new(mu, sigma, belief.t))
}

fn innovation_condition(s: &Mat<f64>) -> f64 {
    if s.rows() == 1 {
        let v = s[(0, 0)];
        return if v > 0.0 && v.is_finite() { 1.0 } else { f64::INFINITY };
    }
    let ev = s.sym_eigenvalues();
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn belief() -> GaussianBelief<f64> {
        GaussianBelief::new(vec![0.0, 0.0], Mat::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]), 0.0)
    }

    #[test]
    fn noiseless_substitution() {
        let out = condition(&belief(), &Observation::full(0.0, vec![1.0]), &Mat::zeros(1, 1), &[0.0, 0.0]).unwrap();
        assert_eq!(out.mu, vec![1.0, 0.5]);
        assert_eq!(out.sigma[(0, 0)], 0.0);
        assert_eq!(out.sigma[(1, 1)], 0.75);
    }

    #[test]
    fn scalar_gain() {
        let out = condition(&belief(), &Observation::full(0.0, vec![1.0]), &Mat::from_rows(&[vec![1.0]]), &[0.0, 0.0]).unwrap();
        assert!((out.mu[0] - 0.5).abs() < 1e-15 && (out.mu[1] - 0.25).abs() < 1e-15);
        assert!((out.sigma[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_a_no_op() {
        let obs = Observation {
            t: 0.0,
            y: vec![3.0],
            mask: vec![false],
        };
        assert_eq!(condition(&belief(), &obs, &Mat::zeros(1, 1), &[0.0, 0.0]).unwrap(), belief());
    }

    #[test]
    fn alpha_centers_the_observation() {
        let out = condition(&belief(), &Observation::full(0.0, vec![6.0]), &Mat::zeros(1, 1), &[5.0, 0.0]).unwrap();
        assert_eq!(out.mu, vec![1.0, 0.5]);
    }

    #[test]
    fn degenerate_innovation_is_an_error() {
        let b = GaussianBelief::new(vec![0.0, 0.0], Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]), 0.0);
        assert!(matches!(
            condition(&b, &Observation::full(0.0, vec![1.0]), &Mat::zeros(1, 1), &[0.0, 0.0]),
            Err(Error::SingularInnovation { .. })
        ));
    }

    #[test]
    fn time_mismatch_is_rejected() {
        assert!(condition(&belief(), &Observation::full(1.0, vec![1.0]), &Mat::zeros(1, 1), &[0.0, 0.0]).is_err());
    }
}
