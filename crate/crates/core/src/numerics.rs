//! Small dense linear-algebra kernels: row-major matrices, a Jacobi
//! symmetric eigensolver, power iteration, truncated SVD and Kronecker
//! matrix-vector products.
//!
//! Vectors are column-major flattened when reshaped into matrices, so that
//! `(A ⊗ B) vec(V) = vec(B V Aᵀ)`.

use std::ops::{Index, IndexMut};

use rand::Rng;

use crate::error::{dim_err, invalid};
use crate::{Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    /// Builds a matrix from row-major entries; rejects wrong lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite matrix entry at {i}"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![T::one(); n])
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Rebuilds from row-major entries produced by trusted code (no checks
    /// beyond the length).
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    /// Row-major entries.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> T {
        self.diag().into_iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return dim_err(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += s * other`, same shape required.
    pub fn add_scaled_assign(&mut self, s: T, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return dim_err("add_scaled_assign shape mismatch");
        }
        axpy(s, &other.data, &mut self.data);
        Ok(())
    }

    /// Adds `w · x xᵀ` to a square matrix.
    pub fn rank_one_update(&mut self, w: T, x: &[T]) {
        debug_assert!(self.is_square() && x.len() == self.rows);
        let n = self.cols;
        for (i, &xi) in x.iter().enumerate() {
            let wi = w * xi;
            if wi == T::zero() {
                continue;
            }
            let row = &mut self.data[i * n..(i + 1) * n];
            for (r, &xj) in row.iter_mut().zip(x) {
                *r += wi * xj;
            }
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return dim_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in self.row(i).iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                axpy(aik, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return dim_err(format!("matvec {}x{} by {}", self.rows, self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `out += self · x` without allocating.
    pub fn matvec_acc(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(i), x);
        }
    }

    /// `Aᵀ x`.
    pub fn matvec_transpose(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return dim_err(format!(
                "transposed matvec {}x{} by {}",
                self.rows, self.cols, x.len()
            ));
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != T::zero() {
                axpy(xi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = T::one().max(self.max_abs());
        (0..self.rows)
            .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let half = T::of(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| half * (self[(i, j)] + self[(j, i)]))
    }

    /// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
    /// Eigenvalues come back in descending order; eigenvectors are the
    /// columns of the returned matrix.
    pub fn symmetric_eigen(&self) -> Result<SymmetricEigen<T>> {
        if !self.is_square() {
            return dim_err("eigendecomposition of a non-square matrix");
        }
        Ok(jacobi_eigen(self))
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: DenseMatrix<T>,
}

const JACOBI_MAX_SWEEPS: usize = 100;

fn jacobi_eigen<T: Scalar>(m: &DenseMatrix<T>) -> SymmetricEigen<T> {
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut v = DenseMatrix::<T>::identity(n);
    let eps = T::epsilon();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = T::zero();
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                let x = a[(i, j)] * a[(i, j)];
                total += x;
                if i != j {
                    off += x;
                }
            }
        }
        if off <= eps * eps * total || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Skip rotations that cannot change the diagonal at working precision.
                if apq.abs() <= eps * T::of(0.01) * (app.abs() + aqq.abs()).min(T::one()) * eps {
                    a[(p, q)] = T::zero();
                    a[(q, p)] = T::zero();
                    continue;
                }
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    SymmetricEigen { values, vectors }
}

/// Result of [`power_iteration_max_eig`].
#[derive(Debug, Clone)]
pub struct PowerIteration<T> {
    pub eigenvalue: T,
    pub eigenvector: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric PSD operator given only through its
/// action `apply(x, out)` (which must overwrite `out`).
///
/// Starts from the normalised all-ones vector and stops once the residual
/// `‖Av − ρv‖` drops below `tol·(ρ + 1)`; for a symmetric operator that
/// bounds the distance from `ρ` to the spectrum. If the start vector is
/// annihilated by the operator, one restart from a fixed pseudo-random
/// vector is made before concluding the eigenvalue is zero.
pub fn power_iteration_max_eig<T, F>(
    apply: F,
    dim: usize,
    tol: T,
    max_iters: usize,
) -> Result<PowerIteration<T>>
where
    T: Scalar,
    F: Fn(&[T], &mut [T]),
{
    if dim == 0 {
        return invalid("power iteration on a zero-dimensional operator");
    }
    if !(tol > T::zero()) {
        return invalid("power iteration tolerance must be positive");
    }

    let start = vec![T::one() / T::of(dim as f64).sqrt(); dim];
    let first = run_power(&apply, start, tol, max_iters);
    if !first.stagnated {
        return Ok(first.result);
    }
    let mut rng = crate::rng::rng_from_seed(0x5eed_0f_f15e);
    let mut restart: Vec<T> = (0..dim).map(|_| T::of(rng.random::<f64>() - 0.5)).collect();
    normalize(&mut restart);
    let remaining = max_iters.saturating_sub(first.result.iterations).max(1);
    let mut second = run_power(&apply, restart, tol, remaining);
    second.result.iterations += first.result.iterations;
    Ok(second.result)
}

struct PowerRun<T> {
    result: PowerIteration<T>,
    stagnated: bool,
}

fn run_power<T: Scalar, F: Fn(&[T], &mut [T])>(
    apply: &F,
    mut v: Vec<T>,
    tol: T,
    max_iters: usize,
) -> PowerRun<T> {
    let dim = v.len();
    let mut av = vec![T::zero(); dim];
    let mut rho = T::zero();
    for it in 1..=max_iters.max(1) {
        apply(&v, &mut av);
        rho = dot(&v, &av);
        let av_norm = norm2(&av);
        let residual = av
            .iter()
            .zip(&v)
            .map(|(&a, &x)| (a - rho * x) * (a - rho * x))
            .sum::<T>()
            .sqrt();
        if av_norm <= T::epsilon() * T::of(1e3) {
            // The iterate sits in the null space.
            return PowerRun {
                result: PowerIteration {
                    eigenvalue: T::zero(),
                    eigenvector: v,
                    converged: true,
                    iterations: it,
                },
                stagnated: true,
            };
        }
        if residual <= tol * (rho.abs() + T::one()) {
            return PowerRun {
                result: PowerIteration {
                    eigenvalue: rho,
                    eigenvector: v,
                    converged: true,
                    iterations: it,
                },
                stagnated: false,
            };
        }
        for (x, &a) in v.iter_mut().zip(&av) {
            *x = a / av_norm;
        }
    }
    PowerRun {
        result: PowerIteration {
            eigenvalue: rho,
            eigenvector: v,
            converged: false,
            iterations: max_iters,
        },
        stagnated: false,
    }
}

/// Truncated SVD `a ≈ U Σ Vᵀ` keeping `l` singular triples.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors<T> {
    pub u: DenseMatrix<T>,
    pub sigma: Vec<T>,
    pub v: DenseMatrix<T>,
}

impl<T: Scalar> LowRankFactors<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = DenseMatrix::zeros(m, n);
        for (k, &s) in self.sigma.iter().enumerate() {
            for i in 0..m {
                let us = self.u[(i, k)] * s;
                if us == T::zero() {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += us * self.v[(j, k)];
                }
            }
        }
        out
    }
}

/// Best rank-`k` approximation of `a` in Frobenius norm.
///
/// Computed from the eigendecomposition of the smaller Gram matrix; left
/// (or right) vectors belonging to vanishing singular values are completed
/// to an orthonormal set so every returned column is unit-norm.
pub fn top_k_svd<T: Scalar>(a: &DenseMatrix<T>, k: usize) -> Result<LowRankFactors<T>> {
    let (m, n) = (a.rows(), a.cols());
    if k > m.min(n) {
        return invalid(format!("rank {k} exceeds min({m}, {n})"));
    }
    if k == 0 {
        return Ok(LowRankFactors {
            u: DenseMatrix::zeros(m, 0),
            sigma: Vec::new(),
            v: DenseMatrix::zeros(n, 0),
        });
    }
    if m < n {
        let t = top_k_svd(&a.transpose(), k)?;
        return Ok(LowRankFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    // m >= n: eigen-decompose AᵀA (n × n).
    let gram = a.transpose().matmul(a)?;
    let eig = gram.symmetric_eigen()?;
    let sigma_max = eig.values.first().copied().unwrap_or(T::zero()).max(T::zero()).sqrt();
    let cutoff = sigma_max * T::epsilon().sqrt() * T::of(n as f64);

    let mut sigma = Vec::with_capacity(k);
    let mut v_cols: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(k);
    for j in 0..k {
        let vj = eig.vectors.column(j);
        let mut uj = a.matvec(&vj)?;
        let s = norm2(&uj);
        if s > cutoff && s > T::zero() {
            for x in uj.iter_mut() {
                *x /= s;
            }
            // Re-orthogonalise against earlier columns.
            gram_schmidt_step(&mut uj, &u_cols);
            sigma.push(s);
        } else {
            uj = orthonormal_completion(m, &u_cols);
            sigma.push(T::zero());
        }
        u_cols.push(uj);
        v_cols.push(vj);
    }
    Ok(LowRankFactors {
        u: columns_to_matrix(m, &u_cols),
        sigma,
        v: columns_to_matrix(n, &v_cols),
    })
}

fn gram_schmidt_step<T: Scalar>(x: &mut [T], basis: &[Vec<T>]) {
    for b in basis {
        let c = dot(x, b);
        axpy(-c, b, x);
    }
    normalize(x);
}

/// A unit vector orthogonal to every vector in `basis`.
fn orthonormal_completion<T: Scalar>(dim: usize, basis: &[Vec<T>]) -> Vec<T> {
    let mut best = vec![T::zero(); dim];
    let mut best_norm = T::zero();
    for e in 0..dim {
        let mut cand = vec![T::zero(); dim];
        cand[e] = T::one();
        for b in basis {
            let c = dot(&cand, b);
            axpy(-c, b, &mut cand);
        }
        let nrm = norm2(&cand);
        if nrm > best_norm {
            best_norm = nrm;
            best = cand;
        }
        if best_norm > T::of(0.5) {
            break;
        }
    }
    gram_schmidt_step(&mut best, basis);
    best
}

fn columns_to_matrix<T: Scalar>(rows: usize, cols: &[Vec<T>]) -> DenseMatrix<T> {
    DenseMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// `(A ⊗ B) x` computed as `vec(B · mat(x) · Aᵀ)` with column-major `vec`.
/// `a` is p×p, `b` is q×q and `x` has length p·q.
pub fn kron_matvec<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, x: &[T]) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); x.len()];
    kron_matvec_acc(a, b, x, &mut out)?;
    Ok(out)
}

/// Accumulating form of [`kron_matvec`]: `out += (A ⊗ B) x`.
pub fn kron_matvec_acc<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    x: &[T],
    out: &mut [T],
) -> Result<()> {
    if !a.is_square() || !b.is_square() {
        return dim_err("Kronecker factors must be square");
    }
    let (p, q) = (a.rows(), b.rows());
    if x.len() != p * q || out.len() != p * q {
        return dim_err(format!(
            "Kronecker product of {p}x{p} and {q}x{q} applied to length {}",
            x.len()
        ));
    }
    // Column l of mat(x) is x[l*q..(l+1)*q]; z = B · mat(x), stored column-major.
    let mut z = vec![T::zero(); p * q];
    for l in 0..p {
        let xl = &x[l * q..(l + 1) * q];
        let zl = &mut z[l * q..(l + 1) * q];
        for (i, zi) in zl.iter_mut().enumerate() {
            *zi = dot(b.row(i), xl);
        }
    }
    // Column j of z · Aᵀ is Σ_l A[j, l] · z_l.
    for j in 0..p {
        let oj = &mut out[j * q..(j + 1) * q];
        for (l, &ajl) in a.row(j).iter().enumerate() {
            if ajl != T::zero() {
                axpy(ajl, &z[l * q..(l + 1) * q], oj);
            }
        }
    }
    Ok(())
}

/// Materialises `A ⊗ B` (for tests and small oracles).
pub fn kron_dense<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (p, q) = (a.rows(), b.rows());
    let (pc, qc) = (a.cols(), b.cols());
    DenseMatrix::from_fn(p * q, pc * qc, |r, c| a[(r / q, c / qc)] * b[(r % q, c % qc)])
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn normalize<T: Scalar>(x: &mut [T]) {
    let n = norm2(x);
    if n > T::zero() {
        for v in x.iter_mut() {
            *v /= n;
        }
    }
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}
