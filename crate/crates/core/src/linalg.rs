//! Dense matrices, linear operators and the norms consumed by the bounds.
//!
//! The spectral norm is estimated by power iteration on `AᵀA` through the
//! [`LinearOperator`] trait, so large convolution operators never need to be
//! materialized. Rayleigh quotients of the iterates are lower estimates of
//! `σ_max²`; the best of several random restarts is returned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix",
                index,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Wraps kernel output without the finiteness scan; the shape must match.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
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

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| T::lit(v)).collect())
            .collect();
        Self::from_rows(&rows)
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{:?} minus {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a - *b).collect(),
        })
    }

    pub fn scaled(&self, factor: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "{:?} times {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            T::one(),
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            T::zero(),
            &mut out.data,
            other.cols as isize,
            1,
        );
        Ok(out)
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn convert<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub(crate) fn l1<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).sum()
}

/// Frobenius, transposed `L^{2,1}` and max-row norms of one matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBundle<T> {
    pub frobenius: T,
    /// `‖Aᵀ‖_{2,1}`: the sum of the row L2 norms of `A`.
    pub l21_of_transpose: T,
    pub max_row_l2: T,
}

pub fn matrix_norms<T: Scalar>(a: &Matrix<T>) -> Result<NormBundle<T>> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::invalid("matrix", "empty matrix"));
    }
    if let Some(index) = a.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "matrix_norms",
            index,
        });
    }
    let mut sq = T::zero();
    let mut l21 = T::zero();
    let mut max_row = T::zero();
    for i in 0..a.rows {
        let r2: T = a.row(i).iter().map(|&x| x * x).sum();
        sq += r2;
        let r = r2.sqrt();
        l21 += r;
        max_row = max_row.max(r);
    }
    Ok(NormBundle {
        frobenius: sq.sqrt(),
        l21_of_transpose: l21,
        max_row_l2: max_row,
    })
}

/// A linear map `ℝ^cols → ℝ^rows` together with its adjoint.
pub trait LinearOperator<T: Scalar>: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `y = A x`; `y` has length `rows()` and is overwritten.
    fn apply(&self, x: &[T], y: &mut [T]);
    /// `x = Aᵀ y`; `x` has length `cols()` and is overwritten.
    fn apply_transpose(&self, y: &[T], x: &mut [T]);
}

impl<T: Scalar> LinearOperator<T> for Matrix<T> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
    }

    fn apply_transpose(&self, y: &[T], x: &mut [T]) {
        x.iter_mut().for_each(|v| *v = T::zero());
        for (i, &yi) in y.iter().enumerate() {
            if yi.is_zero() {
                continue;
            }
            for (xj, &a) in x.iter_mut().zip(self.row(i)) {
                *xj += a * yi;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpectralOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            rel_tol: 1e-6,
            max_iter: 10_000,
            restarts: 3,
            seed: 0x5eed_0f5b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate<T> {
    pub value: T,
    /// False when some restart hit `max_iter` before meeting `rel_tol`.
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value of `op` by restarted power iteration.
pub fn spectral_norm<T: Scalar, O: LinearOperator<T> + ?Sized>(
    op: &O,
    opts: &SpectralOptions,
) -> Result<SpectralEstimate<T>> {
    if !(opts.rel_tol > 0.0) {
        return Err(Error::invalid("rel_tol", "must be positive"));
    }
    if opts.restarts == 0 {
        return Err(Error::invalid("restarts", "at least one restart is required"));
    }
    if op.rows() == 0 || op.cols() == 0 {
        return Ok(SpectralEstimate {
            value: T::zero(),
            converged: true,
            iterations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best = T::zero();
    let mut converged = true;
    let mut iterations = 0;
    for _ in 0..opts.restarts {
        let start: Vec<T> = (0..op.cols())
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        let run = power_iterate(op, start, opts.max_iter, opts.rel_tol, false);
        iterations += run.iterations;
        converged &= run.converged;
        let sigma = run.lambda.sqrt();
        if sigma > best {
            best = sigma;
        }
        if run.lambda.is_zero() && run.iterations <= 1 {
            // A v = 0 for a random v: the operator is zero almost surely.
            break;
        }
    }
    Ok(SpectralEstimate {
        value: best,
        converged,
        iterations,
    })
}

#[derive(Clone, Debug)]
pub struct PowerRun<T> {
    /// Final Rayleigh quotient `vᵀAᵀAv`, a lower estimate of `σ_max²`.
    pub lambda: T,
    pub iterations: usize,
    pub converged: bool,
    /// Rayleigh quotient after each iteration, when recording was requested.
    pub history: Vec<T>,
}

/// Power iteration on `AᵀA` from `start`.
///
/// Convergence is judged on the geometrically extrapolated remaining error
/// of the Rayleigh quotient, which stays honest when the top two singular
/// values are close and successive changes are tiny.
pub fn power_iterate<T: Scalar, O: LinearOperator<T> + ?Sized>(
    op: &O,
    start: Vec<T>,
    max_iter: usize,
    rel_tol: f64,
    record: bool,
) -> PowerRun<T> {
    let mut v = start;
    let mut u = vec![T::zero(); op.rows()];
    let mut w = vec![T::zero(); op.cols()];
    let mut history = Vec::new();
    let norm = l2(&v);
    if norm.is_zero() {
        return PowerRun {
            lambda: T::zero(),
            iterations: 0,
            converged: true,
            history,
        };
    }
    v.iter_mut().for_each(|x| *x = *x / norm);

    let tol = T::lit(rel_tol);
    let tiny = T::lit(1e-15);
    let mut lambda = T::zero();
    let mut prev_delta: Option<T> = None;
    for it in 1..=max_iter {
        op.apply(&v, &mut u);
        let next: T = u.iter().map(|&x| x * x).sum();
        if record {
            history.push(next);
        }
        if next.is_zero() {
            return PowerRun {
                lambda: next,
                iterations: it,
                converged: true,
                history,
            };
        }
        let delta = next - lambda;
        lambda = lambda.max(next);
        op.apply_transpose(&u, &mut w);
        let wn = l2(&w);
        if wn.is_zero() {
            return PowerRun {
                lambda,
                iterations: it,
                converged: true,
                history,
            };
        }
        for (vi, &wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
        // The Rayleigh quotient of the new iterate is at most ‖w‖ and the
        // gap ‖w‖ − λ bounds how far it can still rise in one step.
        if it >= 3 {
            if delta.abs() <= tiny * lambda {
                return PowerRun {
                    lambda,
                    iterations: it,
                    converged: true,
                    history,
                };
            }
            if let Some(pd) = prev_delta {
                if pd > T::zero() && delta >= T::zero() {
                    let q = delta / pd;
                    if q < T::one() {
                        let remaining = delta * q / (T::one() - q);
                        if remaining <= tol * T::lit(0.1) * lambda {
                            return PowerRun {
                                lambda,
                                iterations: it,
                                converged: true,
                                history,
                            };
                        }
                    }
                }
            }
        }
        prev_delta = Some(delta);
    }
    PowerRun {
        lambda,
        iterations: max_iter,
        converged: false,
        history,
    }
}
