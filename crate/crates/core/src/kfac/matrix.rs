//! Small dense row-major `f64` matrices and Cholesky-based inversion.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dense matrix (in entries) the oracles will materialize.
pub const DENSE_LIMIT: usize = 1 << 24;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Panics on ragged rows; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn column(v: &[f64]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn diag(v: &[f64]) -> Self {
        Mat::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 })
    }

    /// Entries drawn from N(0, 1).
    pub fn random<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    /// `X X^T / n + shift*I` for a Gaussian `n x n` X: symmetric positive definite.
    pub fn random_spd<R: Rng>(n: usize, shift: f64, rng: &mut R) -> Self {
        let x = Mat::random(n, n, rng);
        let mut m = x.matmul(&x.t()).scale(1.0 / n as f64);
        m.add_diag(shift);
        m.symmetrize();
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn t(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = rhs.row(k);
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn try_matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(self.matmul(rhs))
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        self.zip(rhs, |a, b| a - b)
    }

    fn zip(&self, rhs: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, x: &Mat) {
        assert_eq!(self.shape(), x.shape(), "axpy shape mismatch");
        for (y, &v) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * v;
        }
    }

    pub fn add_diag(&mut self, lambda: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += lambda;
        }
    }

    /// Replaces the matrix with `(M + M^T) / 2`.
    pub fn symmetrize(&mut self) {
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `a b^T`.
    pub fn outer(a: &[f64], b: &[f64]) -> Mat {
        Mat::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    /// Column-major vectorization.
    pub fn vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                v.push(self[(i, j)]);
            }
        }
        v
    }

    /// Inverse of [`Mat::vec`].
    pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Mat> {
        if v.len() != rows * cols {
            return Err(Error::Shape(format!("{} values cannot unvec to {rows}x{cols}", v.len())));
        }
        Ok(Mat::from_fn(rows, cols, |i, j| v[j * rows + i]))
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Largest `|M - M^T|` entry.
    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols.min(self.rows) {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn guard(entries: usize) -> Result<()> {
    if entries > DENSE_LIMIT {
        Err(Error::TooLarge {
            requested: entries,
            limit: DENSE_LIMIT,
        })
    } else {
        Ok(())
    }
}

pub(crate) fn check_dense(rows: usize, cols: usize) -> Result<()> {
    guard(rows.saturating_mul(cols))
}

/// Block Kronecker product, `(p*r) x (q*s)` for `p x q` and `r x s` inputs.
pub fn kron(a: &Mat, b: &Mat) -> Result<Mat> {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    check_dense(p * r, q * s)?;
    Ok(Mat::from_fn(p * r, q * s, |i, j| a[(i / r, j / s)] * b[(i % r, j % s)]))
}

/// Lower-triangular `L` with `L L^T = M`.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape(format!("cholesky needs a square matrix, got {}x{}", n, m.cols())));
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// `(M + lambda*I)^-1` through a Cholesky factorization.
pub fn cholesky_spd_inverse(m: &Mat, lambda: f64) -> Result<Mat> {
    let mut damped = m.clone();
    damped.add_diag(lambda);
    let l = cholesky(&damped)?;
    let n = l.rows();
    // L^-1 by forward substitution, then (L^-1)^T L^-1.
    let mut linv = Mat::zeros(n, n);
    for c in 0..n {
        for i in c..n {
            let mut v = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                v -= l[(i, k)] * linv[(k, c)];
            }
            linv[(i, c)] = v / l[(i, i)];
        }
    }
    let mut inv = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut v = 0.0;
            for k in i..n {
                v += linv[(k, i)] * linv[(k, j)];
            }
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_and_identity_inverses() {
        let inv = cholesky_spd_inverse(&Mat::diag(&[4.0, 9.0]), 0.0).unwrap();
        assert_eq!(inv, Mat::diag(&[0.25, 1.0 / 9.0]));
        assert_eq!(cholesky_spd_inverse(&Mat::identity(3), 0.0).unwrap(), Mat::identity(3));
    }

    #[test]
    fn random_spd_inverse_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Mat::random_spd(8, 0.5, &mut rng);
        let inv = cholesky_spd_inverse(&m, 0.0).unwrap();
        let r = m.matmul(&inv).sub(&Mat::identity(8)).max_abs();
        assert!(r < 1e-10, "{r}");
    }

    #[test]
    fn indefinite_input_is_rejected() {
        let m = Mat::diag(&[1.0, -1.0]);
        assert!(matches!(cholesky_spd_inverse(&m, 0.0), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
        assert!(cholesky_spd_inverse(&m, 2.0).is_ok());
    }

    #[test]
    fn kron_block_definition() {
        assert_eq!(kron(&Mat::identity(2), &Mat::identity(2)).unwrap(), Mat::identity(4));
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let want = Mat::from_rows(&[
            &[0.0, 1.0, 0.0, 2.0],
            &[1.0, 0.0, 2.0, 0.0],
            &[0.0, 3.0, 0.0, 4.0],
            &[3.0, 0.0, 4.0, 0.0],
        ]);
        assert_eq!(kron(&a, &b).unwrap(), want);
    }

    #[test]
    fn kron_size_guard() {
        let col = Mat::zeros(4100, 1);
        assert!(matches!(kron(&col, &col.t()), Err(Error::TooLarge { .. })));
        let col = Mat::zeros(64, 1);
        assert_eq!(kron(&col, &col.t()).unwrap().shape(), (64, 64));
    }

    #[test]
    fn vec_is_column_major() {
        let x = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(x.vec(), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(Mat::unvec(&x.vec(), 2, 2).unwrap(), x);
    }
}
