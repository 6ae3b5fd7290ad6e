//! Dense linear algebra and small statistics kernels.
//!
//! Everything here works on [`Matrix`], a row-major `f64` matrix. The sizes
//! involved (tens of channels, tens of hidden units) are small enough that
//! straightforward loops beat pulling in a BLAS.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::TimeSeriesSet;

/// Relative pivot threshold below which a matrix is treated as singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul row counts");
        let n = rhs.cols;
        let mut out = Matrix::zeros(self.cols, n);
        for k in 0..self.rows {
            let rhs_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t column counts");
        Matrix::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_assign(rhs);
        out
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(rhs, -1.0);
        out
    }

    pub fn add_assign(&mut self, rhs: &Matrix) {
        self.add_scaled(rhs, 1.0);
    }

    /// `self += s · rhs`.
    pub fn add_scaled(&mut self, rhs: &Matrix, s: f64) {
        assert_eq!(self.shape(), rhs.shape(), "elementwise shapes");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "elementwise shapes");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rows `indices` of `self`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &r in indices {
            data.extend_from_slice(self.row(r));
        }
        Matrix::from_vec_unchecked(indices.len(), self.cols, data)
    }

    /// Symmetric permutation `M[perm, perm]`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Matrix {
        assert!(self.is_square() && perm.len() == self.rows);
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(perm[i], perm[j])])
    }

    /// Removes row `r` and column `c`.
    pub fn minor(&self, r: usize, c: usize) -> Matrix {
        let mut data = Vec::with_capacity((self.rows - 1) * (self.cols - 1));
        for i in (0..self.rows).filter(|&i| i != r) {
            for j in (0..self.cols).filter(|&j| j != c) {
                data.push(self[(i, j)]);
            }
        }
        Matrix::from_vec_unchecked(self.rows - 1, self.cols - 1, data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// LU factorization with partial pivoting, `P·M = L·U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
    max_entry: f64,
}

impl Lu {
    pub fn factor(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!(
                "LU needs a square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let max_entry = m.max_abs();
        for col in 0..n {
            let (pivot_row, pivot_abs) = (col..n)
                .map(|r| (r, lu[(r, col)].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_row != col {
                for c in 0..n {
                    lu.data.swap(col * n + c, pivot_row * n + c);
                }
                perm.swap(col, pivot_row);
                sign = -sign;
            }
            if pivot_abs == 0.0 {
                continue;
            }
            let pivot = lu[(col, col)];
            for r in col + 1..n {
                let factor = lu[(r, col)] / pivot;
                lu[(r, col)] = factor;
                if factor != 0.0 {
                    for c in col + 1..n {
                        let u = lu[(col, c)];
                        lu[(r, c)] -= factor * u;
                    }
                }
            }
        }
        Ok(Self {
            lu,
            perm,
            sign,
            max_entry,
        })
    }

    pub fn determinant(&self) -> f64 {
        let n = self.lu.rows;
        (0..n).fold(self.sign, |acc, i| acc * self.lu[(i, i)])
    }

    /// First column whose pivot falls under the singularity threshold.
    pub fn singular_pivot(&self) -> Option<(usize, f64)> {
        let tol = SINGULAR_PIVOT_RTOL * self.max_entry;
        (0..self.lu.rows)
            .map(|i| (i, self.lu[(i, i)]))
            .find(|(_, p)| p.abs() <= tol)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.lu.rows;
        if b.len() != n {
            return Err(Error::Shape(format!(
                "right-hand side has length {}, expected {n}",
                b.len()
            )));
        }
        if let Some((column, pivot)) = self.singular_pivot() {
            return Err(Error::SingularMatrix { column, pivot });
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu.row(i)[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu.row(i)[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.lu.rows;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e)?;
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        Ok(inv)
    }
}

/// Unbiased covariance of the columns of a samples×vars matrix.
pub fn covariance(x: &Matrix) -> Result<Matrix> {
    let cols: Vec<Vec<f64>> = (0..x.cols)
        .map(|c| (0..x.rows).map(|r| x[(r, c)]).collect())
        .collect();
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    covariance_of(&refs)
}

/// Unbiased covariance of a set of equally long series.
pub fn covariance_of(series: &[&[f64]]) -> Result<Matrix> {
    let n = series.len();
    let len = series.first().map_or(0, |s| s.len());
    if len < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 samples, got {len}"
        )));
    }
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("series of unequal length".into()));
    }
    let centered: Vec<Vec<f64>> = series.iter().map(|s| centered(s)).collect();
    let denom = (len - 1) as f64;
    let mut cov = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(&centered[i], &centered[j]) / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

pub(crate) fn centered(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    xs.iter().map(|x| x - m).collect()
}

pub fn determinant(m: &Matrix) -> Result<f64> {
    Ok(Lu::factor(m)?.determinant())
}

/// Solves `M·a = b`.
pub fn solve_linear(m: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    Lu::factor(m)?.solve(b)
}

/// First-order differences of every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSeries {
    pub values: Vec<Vec<f64>>,
    /// Seconds per sample of the source series.
    pub dt: f64,
    pub step: usize,
}

/// `Ẋ_t = (X_{t+step} − X_t) / (step·dt)` per channel.
pub fn first_difference(x: &TimeSeriesSet, step: usize) -> Result<DifferenceSeries> {
    let step = step.max(1);
    let len = x.len();
    if len < step + 1 {
        return Err(Error::InsufficientData(format!(
            "difference with step {step} needs at least {} samples, got {len}",
            step + 1
        )));
    }
    let dt = x.dt();
    let scale = 1.0 / (step as f64 * dt);
    let values = x
        .channels()
        .iter()
        .map(|ch| ch.windows(step + 1).map(|w| (w[step] - w[0]) * scale).collect())
        .collect();
    Ok(DifferenceSeries { values, dt, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn covariance_of_constant_columns_is_zero() {
        let x = Matrix::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(covariance(&x).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn covariance_single_column_uses_n_minus_one() {
        let x = Matrix::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(covariance(&x).unwrap()[(0, 0)], 5.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_identical_columns_is_rank_one() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![4.0, 4.0]]).unwrap();
        let c = covariance(&x).unwrap();
        let corr = c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt();
        assert_relative_eq!(corr, 1.0, epsilon = 1e-15);
        assert!(determinant(&c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn covariance_rejects_single_sample() {
        let x = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(covariance(&x), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn covariance_is_symmetric_and_psd() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 30, 6);
            let c = covariance(&x).unwrap();
            assert_eq!(c, c.transpose());
            let na = nalgebra::DMatrix::from_row_slice(6, 6, c.data());
            let min_eig = na.symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-10, "min eigenvalue {min_eig}");
        }
    }

    #[test]
    fn determinant_examples() {
        assert_relative_eq!(determinant(&Matrix::identity(5)).unwrap(), 1.0);
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert_relative_eq!(determinant(&m).unwrap(), 3.0, epsilon = 1e-14);
        let dup = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.5],
            vec![1.0, 2.0, 3.0],
        ])
        .unwrap();
        assert_eq!(determinant(&dup).unwrap(), 0.0);
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(determinant(&rect), Err(Error::Shape(_))));
    }

    #[test]
    fn solve_examples() {
        let b = vec![0.3, -2.0, 7.0];
        assert_eq!(solve_linear(&Matrix::identity(3), &b).unwrap(), b);
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(solve_linear(&m, &[2.0, 8.0]).unwrap(), vec![1.0, 2.0]);
        let singular = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(
            solve_linear(&singular, &[1.0, 1.0]),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let m = random_matrix(&mut rng, 7, 7).add(&Matrix::identity(7).scale(3.0));
        let inv = Lu::factor(&m).unwrap().inverse().unwrap();
        let prod = m.matmul(&inv);
        assert!(prod.sub(&Matrix::identity(7)).max_abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 4, 5);
        let c = random_matrix(&mut rng, 3, 6);
        assert!(a.t_matmul(&b).sub(&a.transpose().matmul(&b)).max_abs() < 1e-14);
        assert!(a.matmul_t(&c).sub(&a.matmul(&c.transpose())).max_abs() < 1e-14);
    }

    #[test]
    fn first_difference_examples() {
        let x = TimeSeriesSet::new(vec!["a".into()], 1.0, vec![vec![0.0, 1.0, 2.0, 3.0]]).unwrap();
        let d = first_difference(&x, 1).unwrap();
        assert_eq!(d.values[0], vec![1.0, 1.0, 1.0]);
        assert_eq!(d.values[0].len(), x.len() - 1);

        let c = TimeSeriesSet::new(vec!["a".into()], 1.0, vec![vec![2.5; 6]]).unwrap();
        assert!(first_difference(&c, 2).unwrap().values[0].iter().all(|&v| v == 0.0));

        let half = TimeSeriesSet::new(vec!["a".into()], 2.0, vec![vec![0.0, 1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(first_difference(&half, 1).unwrap().values[0], vec![2.0, 2.0, 2.0]);

        let short = TimeSeriesSet::new(vec!["a".into()], 1.0, vec![vec![1.0, 2.0]]).unwrap();
        assert!(matches!(first_difference(&short, 2), Err(Error::InsufficientData(_))));
    }

    proptest! {
        #[test]
        fn determinant_sign_flips_under_row_swaps(seed in 0u64..1000, i in 0usize..5, j in 0usize..5) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 5, 5);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.swap(i, j);
            let swapped = m.select_rows(&perm);
            let d = determinant(&m).unwrap();
            let ds = determinant(&swapped).unwrap();
            let expected = if i == j { d } else { -d };
            prop_assert!((ds - expected).abs() <= 1e-12 * d.abs().max(1.0));
        }

        #[test]
        fn solve_reproduces_rhs(seed in 0u64..1000) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            // Diagonal shift keeps the condition number modest.
            let m = random_matrix(&mut rng, 6, 6).add(&Matrix::identity(6).scale(4.0));
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let x = solve_linear(&m, &b).unwrap();
            let back = m.matvec(&x);
            let resid: f64 = back.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(resid <= 1e-8 * norm);
        }
    }
}
