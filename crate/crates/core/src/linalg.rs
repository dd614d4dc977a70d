//! Small dense matrices and complex scalars over any [`Real`].
//!
//! Dimensions in this crate are tiny (latent sizes up to ~8), so everything is
//! a row-major `Vec` with straightforward loops. Routines whose result feeds
//! gradients are generic; diagnostics that only need values (eigenvalues of
//! symmetric matrices, condition numbers) go through `nalgebra` on `f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn values(&self) -> Mat<f64> {
        self.map(|x| x.val())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = self[(i, 0)] * other[(0, j)];
                for k in 1..self.cols {
                    acc = acc + self[(i, k)] * other[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut acc = row[0] * x[0];
                for k in 1..self.cols {
                    acc = acc + row[k] * x[k];
                }
                acc
            })
            .collect()
    }

    /// `self · other · selfᵀ`
    pub fn congruence(&self, other: &Self) -> Self {
        self.matmul(other).matmul(&self.transpose())
    }

    /// `(A + Aᵀ)/2`
    pub fn symmetrize(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            if i == j {
                self[(i, i)]
            } else {
                (self[(i, j)] + self[(j, i)]) * 0.5
            }
        })
    }

    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(rows[i], cols[j])])
    }

    pub fn frobenius_sq(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc = acc + x * x;
        }
        acc
    }

    /// LU with partial pivoting; pivot choice uses values only.
    fn lu(&self) -> Option<(Mat<T>, Vec<usize>, f64)> {
        assert!(self.is_square(), "LU of non-square matrix");
        let n = self.rows;
        let mut a = self.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].val().abs();
            for i in k + 1..n {
                let v = a[(i, k)].val().abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / pivot;
                a[(i, k)] = f;
                for j in k + 1..n {
                    a[(i, j)] = a[(i, j)] - f * a[(k, j)];
                }
            }
        }
        Some((a, perm, sign))
    }

    pub fn determinant(&self) -> T {
        match self.lu() {
            None => T::zero(),
            Some((lu, _, sign)) => {
                let mut d = T::cst(sign);
                for i in 0..self.rows {
                    d = d * lu[(i, i)];
                }
                d
            }
        }
    }

    /// Solve `self · X = B`.
    pub fn solve(&self, b: &Self) -> Result<Self> {
        let n = self.rows;
        assert_eq!(b.rows, n, "solve shape mismatch");
        let (lu, perm, _) = self.lu().ok_or(Error::Singular("LU pivot vanished"))?;
        let mut x = Mat::zeros(n, b.cols);
        for c in 0..b.cols {
            let mut y: Vec<T> = (0..n).map(|i| b[(perm[i], c)]).collect();
            for i in 0..n {
                for k in 0..i {
                    y[i] = y[i] - lu[(i, k)] * y[k];
                }
            }
            for i in (0..n).rev() {
                for k in i + 1..n {
                    y[i] = y[i] - lu[(i, k)] * y[k];
                }
                y[i] = y[i] / lu[(i, i)];
            }
            for i in 0..n {
                x[(i, c)] = y[i];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.solve(&Self::identity(self.rows))
    }

    /// Lower Cholesky factor; fails unless every pivot is strictly positive.
    pub fn cholesky(&self) -> Result<Self> {
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d = d - l[(j, k)] * l[(j, k)];
            }
            if !(d.val() > 0.0) {
                return Err(Error::NotPositiveDefinite);
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(l)
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> Add for &Mat<T> {
    type Output = Mat<T>;
    fn add(self, rhs: Self) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for &Mat<T> {
    type Output = Mat<T>;
    fn sub(self, rhs: Self) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: Real> Mul for &Mat<T> {
    type Output = Mat<T>;
    fn mul(self, rhs: Self) -> Mat<T> {
        self.matmul(rhs)
    }
}

impl Mat<f64> {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Like [`Mat::from_rows`] but reports ragged input as an error.
    pub fn try_from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Ok(Self::from_rows(rows))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        let s = self.symmetrize().to_nalgebra();
        let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_sym_eigenvalue(&self) -> f64 {
        self.sym_eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Symmetric square root factor `L` with `L·Lᵀ = self`, tolerant of
    /// semidefinite input (negative rounding eigenvalues are clipped to zero).
    pub fn psd_sqrt(&self) -> Self {
        let eig = nalgebra::SymmetricEigen::new(self.symmetrize().to_nalgebra());
        let n = self.rows;
        Self::from_fn(n, n, |i, j| {
            eig.eigenvectors[(i, j)] * libm::sqrt(eig.eigenvalues[j].max(0.0))
        })
    }

    /// 2-norm condition number.
    pub fn condition_number(&self) -> f64 {
        let sv = self.to_nalgebra().singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Complex scalar over a [`Real`].
#[derive(Clone, Copy, Debug)]
pub struct Cplx<T> {
    pub re: T,
    pub im: T,
}

impl<T: Real> Cplx<T> {
    pub fn new(re: T, im: T) -> Self {
        Cplx { re, im }
    }

    pub fn real(re: T) -> Self {
        Cplx { re, im: T::zero() }
    }

    pub fn zero() -> Self {
        Self::real(T::zero())
    }

    pub fn conj(self) -> Self {
        Cplx {
            re: self.re,
            im: -self.im,
        }
    }

    pub fn scale(self, s: T) -> Self {
        Cplx {
            re: self.re * s,
            im: self.im * s,
        }
    }

    pub fn norm_sq(self) -> T {
        self.re * self.re + self.im * self.im
    }

    /// `e^{self}` with the real part clamped.
    pub fn exp_clamped(self) -> (Self, bool) {
        let (r, sat) = self.re.exp_clamped();
        (
            Cplx {
                re: r * self.im.cos(),
                im: r * self.im.sin(),
            },
            sat,
        )
    }

    pub fn div(self, rhs: Self) -> Self {
        let d = rhs.norm_sq();
        Cplx {
            re: (self.re * rhs.re + self.im * rhs.im) / d,
            im: (self.im * rhs.re - self.re * rhs.im) / d,
        }
    }
}

impl<T: Real> Add for Cplx<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Cplx {
            re: self.re + rhs.re,
            im: self.im + rhs.im,
        }
    }
}

impl<T: Real> Sub for Cplx<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Cplx {
            re: self.re - rhs.re,
            im: self.im - rhs.im,
        }
    }
}

impl<T: Real> Mul for Cplx<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Cplx {
            re: self.re * rhs.re - self.im * rhs.im,
            im: self.re * rhs.im + self.im * rhs.re,
        }
    }
}

impl<T: Real> Neg for Cplx<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Cplx {
            re: -self.re,
            im: -self.im,
        }
    }
}
