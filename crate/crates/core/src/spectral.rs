//! Linear dynamics in spectral form.
//!
//! A dynamics operator `A = V·M·V⁻¹` is stored through its eigenvalues and a
//! real eigenbasis `V`. Real eigenvalues own one column each; a complex pair
//! `a ± ib` (stored once, with `b > 0`) owns two consecutive columns
//! `(v_real, v_im)` of the eigenvector `v_real + i·v_im` belonging to `a + ib`.
//! Real eigenvalues come first, then the pairs. In that basis `M` is block
//! diagonal with `[λ]` and `[[a, b], [-b, a]]` blocks, so the fundamental
//! matrix `Φ(t) = V·E(t)` with `E(t)` built from `e^{λt}` and
//! `e^{at}·[[cos bt, sin bt], [-sin bt, cos bt]]` is real by construction.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::real::Real;

pub const DEFAULT_DET_FLOOR: f64 = 1e-8;
const DEFECTIVE_COND: f64 = 1e10;

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T = f64> {
    pub real: Vec<T>,
    /// `(a, b)` for the pair `a ± ib`, `b > 0`.
    pub pairs: Vec<(T, T)>,
}

impl<T: Real> Spectrum<T> {
    pub fn new(real: Vec<T>, pairs: Vec<(T, T)>) -> Self {
        Spectrum { real, pairs }
    }

    pub fn dim(&self) -> usize {
        self.real.len() + 2 * self.pairs.len()
    }

    pub fn values(&self) -> Spectrum<f64> {
        Spectrum {
            real: self.real.iter().map(|x| x.val()).collect(),
            pairs: self.pairs.iter().map(|(a, b)| (a.val(), b.val())).collect(),
        }
    }

    /// Every eigenvalue as `(re, im)`, conjugates included, in column order.
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self.real.iter().map(|x| (x.val(), 0.0)).collect();
        for (a, b) in &self.pairs {
            out.push((a.val(), b.val()));
            out.push((a.val(), -b.val()));
        }
        out
    }

    pub fn is_stable(&self) -> bool {
        self.real.iter().all(|x| x.val() < 0.0) && self.pairs.iter().all(|(a, _)| a.val() < 0.0)
    }

    pub fn max_real_part(&self) -> f64 {
        self.real
            .iter()
            .map(|x| x.val())
            .chain(self.pairs.iter().map(|(a, _)| a.val()))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenBasis<T = f64> {
    pub v: Mat<T>,
}

impl<T: Real> EigenBasis<T> {
    pub fn new(v: Mat<T>) -> Self {
        EigenBasis { v }
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn check_invertible(&self, det_floor: f64) -> Result<()> {
        let det = self.v.determinant().val();
        if !(det.abs() >= det_floor) {
            return Err(Error::SingularBasis {
                det,
                floor: det_floor,
            });
        }
        Ok(())
    }

    pub fn inverse(&self, det_floor: f64) -> Result<Mat<T>> {
        self.check_invertible(det_floor)?;
        self.v.inverse()
    }
}

/// One linear regime: `dX = [A(X − α) + B·u]dt + dW`, `Cov(dW) = Q dt`,
/// observed as `Ŷ = X₁..ₘ + ν`, `ν ~ N(0, R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDynamics<T = f64> {
    pub spectrum: Spectrum<T>,
    pub basis: EigenBasis<T>,
    pub q: Mat<T>,
    pub alpha: Vec<T>,
    pub b: Mat<T>,
    /// `true` marks a row of `B` that is free; `false` rows are pinned to zero.
    pub b_mask: Vec<bool>,
    pub r: Mat<T>,
}

impl<T: Real> SpectralDynamics<T> {
    pub fn dim(&self) -> usize {
        self.spectrum.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.r.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let dims_ok = self.basis.dim() == n
            && self.q.rows() == n
            && self.q.cols() == n
            && self.alpha.len() == n
            && self.b.rows() == n
            && self.b_mask.len() == n
            && self.r.is_square()
            && self.r.rows() <= n;
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "inconsistent spectral dynamics for n = {n}"
            )));
        }
        for (i, &free) in self.b_mask.iter().enumerate() {
            if !free && (0..self.b.cols()).any(|j| self.b[(i, j)].val() != 0.0) {
                return Err(Error::Config(format!("masked row {i} of B is not zero")));
            }
        }
        for pair in &self.spectrum.pairs {
            if !(pair.1.val() > 0.0) {
                return Err(Error::Config("complex pair with non-positive imaginary part".into()));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> SpectralDynamics<f64> {
        SpectralDynamics {
            spectrum: self.spectrum.values(),
            basis: EigenBasis::new(self.basis.v.values()),
            q: self.q.values(),
            alpha: self.alpha.iter().map(|x| x.val()).collect(),
            b: self.b.values(),
            b_mask: self.b_mask.clone(),
            r: self.r.values(),
        }
    }
}

impl SpectralDynamics<f64> {
    /// Build from a dense dynamics matrix.
    pub fn from_matrix(
        a: &Mat<f64>,
        q: Mat<f64>,
        alpha: Vec<f64>,
        b: Mat<f64>,
        b_mask: Vec<bool>,
        r: Mat<f64>,
    ) -> Result<Self> {
        let (spectrum, basis) = decompose(a)?;
        let out = SpectralDynamics {
            spectrum,
            basis,
            q,
            alpha,
            b,
            b_mask,
            r,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn dynamics_matrix(&self) -> Result<Mat<f64>> {
        dynamics_matrix(&self.spectrum, &self.basis, DEFAULT_DET_FLOOR)
    }
}

/// `E(t)`: block-diagonal exponential of the real canonical form.
/// The flag reports whether any exponent was clamped.
pub fn modal_exp<T: Real>(spectrum: &Spectrum<T>, t: f64) -> (Mat<T>, bool) {
    let n = spectrum.dim();
    let mut e = Mat::zeros(n, n);
    let mut saturated = false;
    for (i, &lam) in spectrum.real.iter().enumerate() {
        let (x, sat) = (lam * t).exp_clamped();
        saturated |= sat;
        e[(i, i)] = x;
    }
    let off = spectrum.real.len();
    for (p, &(a, b)) in spectrum.pairs.iter().enumerate() {
        let k = off + 2 * p;
        let (g, sat) = (a * t).exp_clamped();
        saturated |= sat;
        let c = (b * t).cos() * g;
        let s = (b * t).sin() * g;
        e[(k, k)] = c;
        e[(k, k + 1)] = s;
        e[(k + 1, k)] = -s;
        e[(k + 1, k + 1)] = c;
    }
    (e, saturated)
}

#[derive(Clone, Debug)]
pub struct Eigenfunction<T = f64> {
    pub matrix: Mat<T>,
    pub saturated: bool,
}

/// `Φ(t) = V·E(t)`.
pub fn eigenfunction_at<T: Real>(spectrum: &Spectrum<T>, basis: &EigenBasis<T>, t: f64) -> Eigenfunction<T> {
    let (e, saturated) = modal_exp(spectrum, t);
    Eigenfunction {
        matrix: basis.v.matmul(&e),
        saturated,
    }
}

/// `Φ(t)⁻¹ = E(−t)·V⁻¹`, never formed by inverting `Φ(t)` itself.
pub fn eigenfunction_inverse_at<T: Real>(
    spectrum: &Spectrum<T>,
    basis: &EigenBasis<T>,
    t: f64,
    det_floor: f64,
) -> Result<Mat<T>> {
    let vinv = basis.inverse(det_floor)?;
    let (e, _) = modal_exp(spectrum, -t);
    Ok(e.matmul(&vinv))
}

/// Block-diagonal real canonical form `M` (so that `A = V·M·V⁻¹`).
pub fn canonical_form<T: Real>(spectrum: &Spectrum<T>) -> Mat<T> {
    let n = spectrum.dim();
    let mut m = Mat::zeros(n, n);
    for (i, &lam) in spectrum.real.iter().enumerate() {
        m[(i, i)] = lam;
    }
    let off = spectrum.real.len();
    for (p, &(a, b)) in spectrum.pairs.iter().enumerate() {
        let k = off + 2 * p;
        m[(k, k)] = a;
        m[(k, k + 1)] = b;
        m[(k + 1, k)] = -b;
        m[(k + 1, k + 1)] = a;
    }
    m
}

pub fn dynamics_matrix<T: Real>(spectrum: &Spectrum<T>, basis: &EigenBasis<T>, det_floor: f64) -> Result<Mat<T>> {
    let vinv = basis.inverse(det_floor)?;
    Ok(basis.v.matmul(&canonical_form(spectrum)).matmul(&vinv))
}

/// Normalize basis columns: real columns to unit norm with a positive first
/// nonzero entry; each pair rotated so the first nonzero entry of the complex
/// eigenvector is real positive, then scaled to `‖v_real‖² + ‖v_im‖² = 2`.
pub fn normalize_basis<T: Real>(spectrum_layout: (usize, usize), v: &Mat<T>) -> Mat<T> {
    let (n_real, n_pairs) = spectrum_layout;
    let n = v.rows();
    let mut out = v.clone();
    for j in 0..n_real {
        let mut norm_sq = T::zero();
        for i in 0..n {
            norm_sq = norm_sq + v[(i, j)] * v[(i, j)];
        }
        let norm = norm_sq.sqrt();
        let lead = (0..n).map(|i| v[(i, j)].val()).find(|x| x.abs() > 1e-12 * norm.val());
        let sign = if lead.unwrap_or(1.0) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[(i, j)] = v[(i, j)] / norm * sign;
        }
    }
    for p in 0..n_pairs {
        let k = n_real + 2 * p;
        let mut norm_sq = T::zero();
        for i in 0..n {
            norm_sq = norm_sq + v[(i, k)] * v[(i, k)] + v[(i, k + 1)] * v[(i, k + 1)];
        }
        let scale = norm_sq.val().sqrt();
        let lead = (0..n).find(|&i| {
            let (re, im) = (v[(i, k)].val(), v[(i, k + 1)].val());
            (re * re + im * im).sqrt() > 1e-12 * scale
        });
        // multiply v by conj(v_lead)/|v_lead| · √2/‖v‖
        let (cr, ci) = match lead {
            Some(i) => {
                let (re, im) = (v[(i, k)], v[(i, k + 1)]);
                let m = (re * re + im * im).sqrt();
                (re / m, -im / m)
            }
            None => (T::one(), T::zero()),
        };
        let s = T::cst(core::f64::consts::SQRT_2) / norm_sq.sqrt();
        for i in 0..n {
            let (re, im) = (v[(i, k)], v[(i, k + 1)]);
            out[(i, k)] = (re * cr - im * ci) * s;
            out[(i, k + 1)] = (re * ci + im * cr) * s;
        }
    }
    out
}

/// Eigendecomposition of a real diagonalizable matrix into the layout above.
pub fn decompose(a: &Mat<f64>) -> Result<(Spectrum<f64>, EigenBasis<f64>)> {
    if !a.is_square() {
        return Err(Error::Dimension("decompose needs a square matrix".into()));
    }
    let n = a.rows();
    let na = a.to_nalgebra();
    let scale = a.max_abs().max(1.0);
    let tol = 1e-9 * scale;
    let eigs = na.clone().complex_eigenvalues();

    let mut reals: Vec<f64> = Vec::new();
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for z in eigs.iter() {
        if z.im.abs() <= tol {
            reals.push(z.re);
        } else if z.im > 0.0 {
            pairs.push((z.re, z.im));
        }
    }
    reals.sort_by(|x, y| x.total_cmp(y));
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    if reals.len() + 2 * pairs.len() != n {
        return Err(Error::Defective { cond: f64::INFINITY });
    }

    let mut v = Mat::zeros(n, n);
    // real eigenvectors, grouping repeated eigenvalues
    let mut j = 0;
    while j < reals.len() {
        let mut k = j + 1;
        while k < reals.len() && (reals[k] - reals[j]).abs() <= 1e-7 * scale {
            k += 1;
        }
        let shifted = &na - DMatrix::identity(n, n) * reals[j];
        let null = null_vectors(&shifted, k - j);
        for (c, vec) in null.iter().enumerate() {
            for i in 0..n {
                v[(i, j + c)] = vec[i];
            }
        }
        j = k;
    }
    // complex eigenvectors from the real 2n×2n system
    // [A − aI, bI; −bI, A − aI]·(v_re; v_im) = 0
    let off = reals.len();
    let mut p = 0;
    while p < pairs.len() {
        let mut q = p + 1;
        while q < pairs.len()
            && (pairs[q].0 - pairs[p].0).abs() <= 1e-7 * scale
            && (pairs[q].1 - pairs[p].1).abs() <= 1e-7 * scale
        {
            q += 1;
        }
        let (re, im) = pairs[p];
        let mut k2 = DMatrix::zeros(2 * n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                let x = na[(r, c)] - if r == c { re } else { 0.0 };
                k2[(r, c)] = x;
                k2[(n + r, n + c)] = x;
            }
            k2[(r, n + r)] = im;
            k2[(n + r, r)] = -im;
        }
        let mult = q - p;
        let candidates = null_vectors(&k2, 2 * mult);
        let accepted = complex_independent(&candidates, n, mult);
        for (c, w) in accepted.iter().enumerate() {
            let col = off + 2 * (p + c);
            for i in 0..n {
                v[(i, col)] = w[i];
                v[(i, col + 1)] = w[n + i];
            }
        }
        p = q;
    }

    let v = normalize_basis((reals.len(), pairs.len()), &v);
    let cond = v.condition_number();
    if !(cond <= DEFECTIVE_COND) {
        return Err(Error::Defective { cond });
    }
    let spectrum = Spectrum::new(reals, pairs);
    // a missing eigendirection shows up as a column outside the invariant subspace
    let residual = a.matmul(&v).max_abs_diff(&v.matmul(&canonical_form(&spectrum)));
    if !(residual <= 1e-6 * scale) {
        return Err(Error::Defective { cond: f64::INFINITY });
    }
    Ok((spectrum, EigenBasis::new(v)))
}

/// Right singular vectors for the `k` smallest singular values.
fn null_vectors(m: &DMatrix<f64>, k: usize) -> Vec<Vec<f64>> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
    idx.into_iter()
        .take(k)
        .map(|r| vt.row(r).iter().copied().collect())
        .collect()
}

/// From null vectors of the realified system pick `k` whose complex spans are
/// independent; `(x, y)` and `(−y, x)` represent the same complex direction.
fn complex_independent(cands: &[Vec<f64>], n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    for c in cands {
        let mut w = c.clone();
        for b in &basis {
            let d: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in w.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        let mut rot = vec_rot(&w, n);
        for b in &basis {
            let d: f64 = rot.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in rot.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let rn = rot.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(w.clone());
        basis.push(w);
        if rn > 1e-9 {
            basis.push(rot.iter().map(|x| x / rn).collect());
        }
        if out.len() == k {
            break;
        }
    }
    out
}

fn vec_rot(w: &[f64], n: usize) -> Vec<f64> {
    let mut r = alloc::vec![0.0; 2 * n];
    for i in 0..n {
        r[i] = -w[n + i];
        r[n + i] = w[i];
    }
    r
}

/// Serialized form of [`SpectralDynamics`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDynamicsRecord {
    pub format_version: u32,
    pub n: usize,
    pub real_eigs: Vec<f64>,
    pub complex_pairs: Vec<[f64; 2]>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "B_mask")]
    pub b_mask: Vec<bool>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

impl From<&SpectralDynamics<f64>> for SpectralDynamicsRecord {
    fn from(d: &SpectralDynamics<f64>) -> Self {
        SpectralDynamicsRecord {
            format_version: 1,
            n: d.dim(),
            real_eigs: d.spectrum.real.clone(),
            complex_pairs: d.spectrum.pairs.iter().map(|&(a, b)| [a, b]).collect(),
            v: d.basis.v.to_rows(),
            q: d.q.to_rows(),
            alpha: d.alpha.clone(),
            b: d.b.to_rows(),
            b_mask: d.b_mask.clone(),
            r: d.r.to_rows(),
        }
    }
}

impl TryFrom<SpectralDynamicsRecord> for SpectralDynamics<f64> {
    type Error = Error;
    fn try_from(r: SpectralDynamicsRecord) -> Result<Self> {
        if r.format_version != 1 {
            return Err(Error::Config(format!(
                "unsupported dynamics format_version {}",
                r.format_version
            )));
        }
        let d = SpectralDynamics {
            spectrum: Spectrum::new(r.real_eigs, r.complex_pairs.iter().map(|p| (p[0], p[1])).collect()),
            basis: EigenBasis::new(Mat::try_from_rows(&r.v)?),
            q: Mat::try_from_rows(&r.q)?,
            alpha: r.alpha,
            b: if r.b.is_empty() { Mat::zeros(0, 0) } else { Mat::try_from_rows(&r.b)? },
            b_mask: r.b_mask,
            r: Mat::try_from_rows(&r.r)?,
        };
        if d.dim() != r.n {
            return Err(Error::Dimension(format!("n = {} but spectrum has {}", r.n, d.dim())));
        }
        d.validate()?;
        Ok(d)
    }
}
