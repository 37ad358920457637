//! Dense linear algebra for moment-tensor recovery.
//!
//! Everything in this module is deliberately small and explicit: a row-major
//! [`Matrix`] over `f64`, a one-sided Jacobi [`svd`], the left pseudo-inverse
//! [`pinv_left`] built on it, Kronecker products with an allocation guard,
//! and the probability-flavored containers ([`ProbVec`], [`MomentTensor`])
//! that the recovery pipeline passes around.
//!
//! # Conventions
//!
//! * Matrices are row-major; `a.get(i, j)` is entry `(i, j)`.
//! * Order-`t` tensors over side `K` are vectorized with the **last index
//!   varying fastest**: the flat position of `(z₁, …, z_t)` is
//!   `z₁·K^{t−1} + … + z_t`. Under this layout the Kronecker identity
//!   `vec(A W Aᵀ) = (A ⊗ A) vec(W)` holds with [`kron`] as defined here,
//!   which is what makes `t`-word posteriors recoverable by
//!   `A† ⊗ … ⊗ A†`.
//! * Pseudo-inverse rank decisions use a *relative* threshold: a singular
//!   value counts as zero when it is below `tol · σ_max`.

use std::fmt;

use thiserror::Error;

/// Default relative singular-value tolerance for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Default entry limit for [`kron`] outputs (half a gigabyte of `f64`).
pub const DEFAULT_KRON_LIMIT: usize = 1 << 26;

/// Errors from dense linear algebra operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    /// A NaN or infinity showed up where finite data is required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    /// The requested Kronecker product exceeds the configured size limit.
    #[error("kronecker product would hold {requested} entries, above the limit of {limit}")]
    KronTooLarge { requested: u128, limit: usize },
    /// A pseudo-inverse was requested for a rank-deficient matrix.
    #[error(
        "matrix is rank-deficient: smallest singular value {smallest:.3e} is below \
         {threshold:.3e} (relative tolerance {tol:.1e})"
    )]
    RankDeficient { smallest: f64, threshold: f64, tol: f64 },
    /// The Jacobi sweep limit was reached before convergence.
    #[error("one-sided Jacobi SVD failed to converge after {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },
    /// Cholesky hit a non-positive pivot; the system is singular or indefinite.
    #[error(
        "matrix is not symmetric positive definite (pivot {pivot:.3e} at index {index}); \
         consider adding a ridge term"
    )]
    NotPositiveDefinite { pivot: f64, index: usize },
    /// A probability vector failed validation.
    #[error("invalid probability vector: {reason}")]
    InvalidProbability { reason: String },
    /// Tensor order/side/length are inconsistent.
    #[error("tensor of order {order} with side {side} cannot hold {len} entries")]
    TensorShape { order: usize, side: usize, len: usize },
}

fn dim_err(context: impl Into<String>) -> LinalgError {
    LinalgError::DimensionMismatch { context: context.into() }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major `data` of length `rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { context: "matrix construction".into() });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix entry by entry from `f(i, j)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err("rows have unequal lengths"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a contiguous slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column `j` copied into a fresh vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Underlying row-major storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the matrix, returning its row-major storage.
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(dim_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            [self.cols as isize, 1],
            &other.data,
            [other.cols as isize, 1],
            &mut out.data,
        );
        Ok(out)
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.cols {
            return Err(dim_err(format!(
                "matmul_nt {}x{} by {}x{} transposed",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            [self.cols as isize, 1],
            &other.data,
            [1, other.cols as isize],
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows {
            return Err(dim_err(format!(
                "matmul_tn {}x{} transposed by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            [1, self.cols as isize],
            &other.data,
            [other.cols as isize, 1],
            &mut out.data,
        );
        Ok(out)
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(dim_err(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// `selfᵀ * v` for a column vector `v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.rows {
            return Err(dim_err(format!(
                "matvec_t {}x{} transposed by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(row) {
                *o += vi * a;
            }
        }
        Ok(out)
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Entry-wise `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(dim_err("add_scaled on unequal shapes"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + alpha * b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    /// Entry-wise scaling by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Matrix {
        let data = self.data.iter().map(|v| alpha * v).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}x{}]", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:>12.6}")).collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Thin GEMM wrapper over `matrixmultiply` with explicit strides, so the
/// normal/transposed variants share one code path. `c` must be zeroed,
/// row-major, and sized `m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: [isize; 2],
    b: &[f64],
    b_strides: [isize; 2],
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides[0],
            a_strides[1],
            b.as_ptr(),
            b_strides[0],
            b_strides[1],
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Kronecker product `a ⊗ b` with the default size limit.
///
/// With row-major vectorization this satisfies
/// `vec(A W Bᵀ) = (A ⊗ B) vec(W)`, which is the identity the posterior
/// recovery map relies on for `t = 2`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    kron_with_limit(a, b, DEFAULT_KRON_LIMIT)
}

/// Kronecker product with an explicit entry limit; errors instead of
/// attempting an allocation larger than `limit` entries.
pub fn kron_with_limit(a: &Matrix, b: &Matrix, limit: usize) -> Result<Matrix, LinalgError> {
    let rows = a.rows as u128 * b.rows as u128;
    let cols = a.cols as u128 * b.cols as u128;
    let requested = rows * cols;
    if requested > limit as u128 {
        return Err(LinalgError::KronTooLarge { requested, limit });
    }
    let (br, bc) = (b.rows, b.cols);
    let mut out = Matrix::zeros(a.rows * br, a.cols * bc);
    let out_cols = out.cols;
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for p in 0..br {
                let dst_row = i * br + p;
                let dst = &mut out.data[dst_row * out_cols + j * bc..dst_row * out_cols + (j + 1) * bc];
                for (d, s) in dst.iter_mut().zip(b.row(p)) {
                    *d = aij * s;
                }
            }
        }
    }
    Ok(out)
}

/// Singular value decomposition `A = U diag(σ) Vᵀ`.
///
/// For an `m x n` input with `m ≥ n`, `u` is `m x n`, `sigma` has length `n`
/// in descending order, and `v` is `n x n`. When the input is rank-deficient
/// the trailing columns of `u` corresponding to zero singular values are
/// zero rather than completed to an orthonormal basis.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Number of singular values at or above `tol * σ_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let smax = self.sigma.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s >= tol * smax).count()
    }
}

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_TOL: f64 = 1e-14;

/// One-sided Jacobi SVD.
///
/// Works on the transposed matrix internally so every rotation touches two
/// contiguous rows; converges when all column pairs are numerically
/// orthogonal. Inputs with `rows < cols` are handled by decomposing the
/// transpose and swapping the factors.
///
/// # Errors
///
/// [`LinalgError::SvdNoConvergence`] if the sweep cap is reached, which for
/// the matrix sizes in this crate indicates NaN contamination upstream.
pub fn svd(a: &Matrix) -> Result<Svd, LinalgError> {
    if a.rows < a.cols {
        let Svd { u, sigma, v } = svd(&a.transpose())?;
        return Ok(Svd { u: v, sigma, v: u });
    }
    let m = a.rows;
    let n = a.cols;
    if n == 0 {
        return Ok(Svd { u: Matrix::zeros(m, 0), sigma: Vec::new(), v: Matrix::zeros(0, 0) });
    }

    // `work` holds Aᵀ: row i is the i-th column of A, contiguous in memory.
    let mut work = a.transpose();
    let mut vt = Matrix::identity(n);
    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (app, aqq, apq) = {
                    let rp = work.row(p);
                    let rq = work.row(q);
                    let mut app = 0.0;
                    let mut aqq = 0.0;
                    let mut apq = 0.0;
                    for i in 0..m {
                        app += rp[i] * rp[i];
                        aqq += rq[i] * rq[i];
                        apq += rp[i] * rq[i];
                    }
                    (app, aqq, apq)
                };
                if !(app.is_finite() && aqq.is_finite() && apq.is_finite()) {
                    return Err(LinalgError::NonFinite { context: "svd input".into() });
                }
                if app == 0.0 || aqq == 0.0 || apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut work, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence { sweeps: JACOBI_MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> =
        (0..n).map(|i| work.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma[dst] = s;
        if s > 0.0 {
            let inv = 1.0 / s;
            for i in 0..m {
                u.data[i * n + dst] = work.row(src)[i] * inv;
            }
        }
        for i in 0..n {
            v.data[i * n + dst] = vt.row(src)[i];
        }
    }
    Ok(Svd { u, sigma, v })
}

/// Applies the rotation `[c -s; s c]` to rows `p` and `q` in place.
fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (head, tail) = m.data.split_at_mut(hi * cols);
    let row_lo = &mut head[lo * cols..(lo + 1) * cols];
    let row_hi = &mut tail[..cols];
    let (rp, rq) = if p < q { (row_lo, row_hi) } else { (row_hi, row_lo) };
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Left pseudo-inverse `A† = (AᵀA)⁻¹Aᵀ` of a full-column-rank `m x n` matrix
/// with `m ≥ n`, computed via the SVD as `V diag(1/σ) Uᵀ`.
///
/// `tol` is the relative rank threshold: the call fails if any singular
/// value drops below `tol · σ_max`, reporting the offending value. Use
/// [`DEFAULT_RANK_TOL`] unless there is a reason not to.
pub fn pinv_left(a: &Matrix, tol: f64) -> Result<Matrix, LinalgError> {
    if a.rows < a.cols {
        return Err(dim_err(format!(
            "pinv_left requires rows >= cols, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.cols == 0 {
        return Ok(Matrix::zeros(0, a.rows));
    }
    let Svd { u, sigma, v } = svd(a)?;
    let smax = sigma[0];
    let threshold = tol * smax;
    let smallest = *sigma.last().expect("nonempty sigma");
    if smax == 0.0 || smallest < threshold {
        return Err(LinalgError::RankDeficient { smallest, threshold, tol });
    }
    // V diag(1/σ) Uᵀ, built as (V with scaled columns) * Uᵀ.
    let mut v_scaled = v;
    for i in 0..v_scaled.rows() {
        for j in 0..v_scaled.cols() {
            v_scaled.data[i * v_scaled.cols + j] /= sigma[j];
        }
    }
    v_scaled.matmul_nt(&u)
}

/// ℓ1 condition number `κ(B) = max_j ‖B e_j‖₁`, the largest column ℓ1 norm.
///
/// This is the quantity that multiplies the excess-risk term in the
/// robustness bound: posterior recovery applies `B = A†` (or its Kronecker
/// powers, whence the `κ^t` scaling) to a perturbed probability vector, and
/// a TV perturbation of the input moves the output by at most `κ(B)` times
/// its ℓ1 size. One reference printing states this with `min` in one place
/// and `max` in another; the bound requires the `max`, which is what this
/// computes.
pub fn l1_cond_number(b: &Matrix) -> f64 {
    let mut best = 0.0_f64;
    for j in 0..b.cols() {
        let mut sum = 0.0;
        for i in 0..b.rows() {
            sum += b.get(i, j).abs();
        }
        best = best.max(sum);
    }
    best
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
///
/// # Errors
///
/// [`LinalgError::NotPositiveDefinite`] when a pivot is not strictly
/// positive; callers that can tolerate semidefiniteness should add a ridge.
pub fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows != a.cols {
        return Err(dim_err(format!("cholesky of non-square {}x{}", a.rows, a.cols)));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { pivot: sum, index: i });
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves the symmetric positive-definite system `A x = b` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != a.rows() {
        return Err(dim_err(format!(
            "solve_spd {}x{} with rhs of length {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let l = cholesky(a)?;
    let n = a.rows();
    // Forward solve L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    // Back solve Lᵀ x = y.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    Ok(x)
}

/// A probability vector: nonnegative entries summing to one within `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    const SUM_TOL: f64 = 1e-9;

    /// Validates and wraps `values`.
    pub fn new(values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.is_empty() {
            return Err(LinalgError::InvalidProbability { reason: "empty vector".into() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::InvalidProbability { reason: "non-finite entry".into() });
        }
        if let Some(&v) = values.iter().find(|&&v| v < 0.0) {
            return Err(LinalgError::InvalidProbability {
                reason: format!("negative entry {v:.3e}"),
            });
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(LinalgError::InvalidProbability {
                reason: format!("entries sum to {sum:.12}, expected 1"),
            });
        }
        Ok(Self(values))
    }

    /// Clips negatives to zero and renormalizes. Intended for Monte-Carlo
    /// estimates and recovered posteriors that carry small numerical noise.
    ///
    /// # Errors
    ///
    /// Fails when the clipped sum is not strictly positive.
    pub fn from_normalizing(mut values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::InvalidProbability { reason: "non-finite entry".into() });
        }
        for v in &mut values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return Err(LinalgError::InvalidProbability {
                reason: "all entries clipped to zero".into(),
            });
        }
        for v in &mut values {
            *v /= sum;
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

/// Total variation distance `½ ‖p − q‖₁` between two probability vectors.
pub fn tv_distance(p: &ProbVec, q: &ProbVec) -> Result<f64, LinalgError> {
    if p.len() != q.len() {
        return Err(dim_err(format!(
            "tv_distance between lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(tv_from_slices(p.as_slice(), q.as_slice()))
}

/// TV distance on raw slices; callers are responsible for normalization.
pub fn tv_from_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Order-`t` moment tensor over `{0, …, K−1}^t`, stored flat with the last
/// index varying fastest.
///
/// The flat layout *is* the vectorization used throughout the recovery
/// pipeline: for `t = 2`, `vec(W)[z₁·K + z₂] = W[z₁, z₂]` and
/// `vec(A W Aᵀ) = (A ⊗ A) vec(W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    order: usize,
    side: usize,
    data: Vec<f64>,
}

impl MomentTensor {
    /// Wraps a flat vector of length `side^order`.
    pub fn from_vec(order: usize, side: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        let expected = side.checked_pow(order as u32);
        if expected != Some(data.len()) || order == 0 || side == 0 {
            return Err(LinalgError::TensorShape { order, side, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { context: "tensor construction".into() });
        }
        Ok(Self { order, side, data })
    }

    pub fn zeros(order: usize, side: usize) -> Result<Self, LinalgError> {
        let len = side
            .checked_pow(order as u32)
            .ok_or(LinalgError::TensorShape { order, side, len: usize::MAX })?;
        Self::from_vec(order, side, vec![0.0; len])
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Flat view in vectorized (last index fastest) order.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Flat position of the multi-index `idx`.
    pub fn flat_index(&self, idx: &[usize]) -> Result<usize, LinalgError> {
        if idx.len() != self.order || idx.iter().any(|&z| z >= self.side) {
            return Err(dim_err(format!(
                "multi-index {idx:?} out of range for order {} side {}",
                self.order, self.side
            )));
        }
        Ok(idx.iter().fold(0, |acc, &z| acc * self.side + z))
    }

    /// Entry at the multi-index `idx`.
    pub fn value(&self, idx: &[usize]) -> Result<f64, LinalgError> {
        Ok(self.data[self.flat_index(idx)?])
    }

    /// Sum of all entries.
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Marginal over `axis`: sums out every other index, returning a
    /// `side`-length vector. For a posterior moment tensor of a topic vector
    /// every axis marginal equals `E[w | x]`.
    pub fn marginal(&self, axis: usize) -> Result<Vec<f64>, LinalgError> {
        if axis >= self.order {
            return Err(dim_err(format!(
                "axis {axis} out of range for order {}",
                self.order
            )));
        }
        let mut out = vec![0.0; self.side];
        // Stride of `axis` in the last-fastest layout.
        let stride = self.side.pow((self.order - 1 - axis) as u32);
        for (flat, v) in self.data.iter().enumerate() {
            out[(flat / stride) % self.side] += v;
        }
        Ok(out)
    }

    /// Averages the tensor over all permutations of its indices. For order 2
    /// this is `(W + Wᵀ)/2`; for order 1 it is the identity. Posterior moment
    /// tensors are symmetric in the population, so symmetrizing a recovered
    /// estimate only removes estimation noise.
    pub fn symmetrize(&self) -> MomentTensor {
        match self.order {
            1 => self.clone(),
            2 => {
                let k = self.side;
                let mut data = vec![0.0; self.data.len()];
                for i in 0..k {
                    for j in 0..k {
                        data[i * k + j] = 0.5 * (self.data[i * k + j] + self.data[j * k + i]);
                    }
                }
                Self { order: self.order, side: self.side, data }
            }
            _ => {
                let perms = permutations(self.order);
                let inv_count = 1.0 / perms.len() as f64;
                let mut data = vec![0.0; self.data.len()];
                let mut idx = vec![0usize; self.order];
                let mut permuted = vec![0usize; self.order];
                for (flat, out) in data.iter_mut().enumerate() {
                    unflatten(flat, self.side, &mut idx);
                    let mut acc = 0.0;
                    for perm in &perms {
                        for (slot, &src) in permuted.iter_mut().zip(perm) {
                            *slot = idx[src];
                        }
                        let f = permuted.iter().fold(0, |acc, &z| acc * self.side + z);
                        acc += self.data[f];
                    }
                    *out = acc * inv_count;
                }
                Self { order: self.order, side: self.side, data }
            }
        }
    }

    /// Interprets an order-2 tensor as a `side x side` matrix.
    pub fn to_matrix(&self) -> Result<Matrix, LinalgError> {
        if self.order != 2 {
            return Err(dim_err(format!(
                "to_matrix on tensor of order {}",
                self.order
            )));
        }
        Matrix::new(self.side, self.side, self.data.clone())
    }
}

/// Writes the multi-index of `flat` (last index fastest) into `out`.
pub(crate) fn unflatten(flat: usize, side: usize, out: &mut [usize]) {
    let mut rem = flat;
    for slot in out.iter_mut().rev() {
        *slot = rem % side;
        rem /= side;
    }
}

/// All permutations of `0..n` (Heap's algorithm); `n` is a tensor order, so
/// this is only ever called with tiny `n`.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    fn heap(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, items, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut items, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
        let c_nt = a.matmul_nt(&b.transpose()).unwrap();
        assert_eq!(c.as_slice(), c_nt.as_slice());
        let c_tn = a.transpose().matmul_tn(&b).unwrap();
        assert_eq!(c.as_slice(), c_tn.as_slice());
    }

    #[test]
    fn matvec_agrees_with_matmul() {
        let a = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.25 - 1.0);
        let v = vec![0.5, -1.5, 2.0];
        let got = a.matvec(&v).unwrap();
        let expected = a.matmul(&Matrix::new(3, 1, v.clone()).unwrap()).unwrap();
        assert_eq!(got, expected.as_slice());
        let got_t = a.matvec_t(&[1.0, 0.0, -2.0, 0.5]).unwrap();
        let expected_t = a
            .transpose()
            .matmul(&Matrix::new(4, 1, vec![1.0, 0.0, -2.0, 0.5]).unwrap())
            .unwrap();
        for (g, e) in got_t.iter().zip(expected_t.as_slice()) {
            assert_close(*g, *e, 1e-12);
        }
    }

    /// Independent brute-force Kronecker product for cross-checking.
    fn kron_reference(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows() * b.rows(), a.cols() * b.cols(), |i, j| {
            a.get(i / b.rows(), j / b.cols()) * b.get(i % b.rows(), j % b.cols())
        })
    }

    #[test]
    fn kron_2x2_example() {
        // Worked 2x2 example: entries of a scale copies of b.
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let k = kron(&a, &b).unwrap();
        let expected = [
            0.0, 1.0, 0.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            0.0, 3.0, 0.0, 0.0, //
            3.0, 3.0, 0.0, 0.0,
        ];
        assert_eq!(k.as_slice(), &expected);
        assert_eq!(k.as_slice(), kron_reference(&a, &b).as_slice());
    }

    #[test]
    fn kron_respects_size_limit() {
        let a = Matrix::zeros(100, 100);
        let b = Matrix::zeros(100, 100);
        let err = kron_with_limit(&a, &b, 1_000_000).unwrap_err();
        match err {
            LinalgError::KronTooLarge { requested, limit } => {
                assert_eq!(requested, 100_000_000);
                assert_eq!(limit, 1_000_000);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn kron_vec_identity_row_major() {
        // vec(A W Bᵀ) = (A ⊗ B) vec(W) under row-major vectorization.
        let a = Matrix::from_fn(4, 3, |i, j| ((i + 1) * (j + 2)) as f64 * 0.1);
        let b = Matrix::from_fn(5, 3, |i, j| (i as f64 - j as f64) * 0.3 + 0.05);
        let w = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.01 + 0.2);
        let lhs = a.matmul(&w).unwrap().matmul_nt(&b).unwrap();
        let rhs = kron(&a, &b).unwrap().matvec(w.as_slice()).unwrap();
        for (l, r) in lhs.as_slice().iter().zip(&rhs) {
            assert_close(*l, *r, 1e-12);
        }
    }

    #[test]
    fn svd_recovers_diagonal_singular_values() {
        // 3x2 matrix with known singular values 5 and 3.
        let a = Matrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let Svd { u, sigma, v } = svd(&a).unwrap();
        assert_close(sigma[0], 5.0, 1e-12);
        assert_close(sigma[1], 3.0, 1e-12);
        // Reconstruct.
        let mut us = u.clone();
        for i in 0..us.rows() {
            for j in 0..us.cols() {
                let val = us.get(i, j) * sigma[j];
                us.set(i, j, val);
            }
        }
        let back = us.matmul_nt(&v).unwrap();
        for (x, y) in back.as_slice().iter().zip(a.as_slice()) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn svd_reconstructs_random_rectangular() {
        let a = Matrix::from_fn(8, 5, |i, j| ((i * 31 + j * 17) % 13) as f64 * 0.37 - 2.0);
        let Svd { u, sigma, v } = svd(&a).unwrap();
        // σ descending and nonnegative.
        for pair in sigma.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
        // UᵀU = I and VᵀV = I.
        let utu = u.matmul_tn(&u).unwrap();
        let vtv = v.matmul_tn(&v).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_close(utu.get(i, j), expect, 1e-12);
                assert_close(vtv.get(i, j), expect, 1e-12);
            }
        }
        // A = U Σ Vᵀ.
        let mut us = u;
        for i in 0..us.rows() {
            for j in 0..us.cols() {
                let val = us.get(i, j) * sigma[j];
                us.set(i, j, val);
            }
        }
        let back = us.matmul_nt(&v).unwrap();
        for (x, y) in back.as_slice().iter().zip(a.as_slice()) {
            assert_close(*x, *y, 1e-10);
        }
    }

    #[test]
    fn svd_handles_wide_matrix() {
        let a = Matrix::from_fn(3, 6, |i, j| (i + j) as f64 * 0.5 + if i == j { 1.0 } else { 0.0 });
        let Svd { u, sigma, v } = svd(&a).unwrap();
        let mut us = u;
        for i in 0..us.rows() {
            for j in 0..us.cols() {
                let val = us.get(i, j) * sigma[j];
                us.set(i, j, val);
            }
        }
        let back = us.matmul_nt(&v).unwrap();
        for (x, y) in back.as_slice().iter().zip(a.as_slice()) {
            assert_close(*x, *y, 1e-10);
        }
    }

    #[test]
    fn pinv_left_inverts_full_rank() {
        let a = Matrix::from_fn(7, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.21 + 0.1);
        let pinv = pinv_left(&a, DEFAULT_RANK_TOL).unwrap();
        let prod = pinv.matmul(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_close(prod.get(i, j), expect, 1e-8);
            }
        }
    }

    #[test]
    fn pinv_left_reports_rank_deficiency() {
        // Third column is the sum of the first two.
        let a = Matrix::from_fn(6, 3, |i, j| match j {
            0 => (i as f64).sin() + 1.5,
            1 => (i as f64).cos() + 1.5,
            _ => (i as f64).sin() + (i as f64).cos() + 3.0,
        });
        match pinv_left(&a, DEFAULT_RANK_TOL) {
            Err(LinalgError::RankDeficient { smallest, threshold, .. }) => {
                assert!(smallest < threshold);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn pinv_left_rejects_wide_input() {
        let a = Matrix::zeros(2, 5);
        assert!(matches!(pinv_left(&a, 1e-10), Err(LinalgError::DimensionMismatch { .. })));
    }

    #[test]
    fn l1_cond_number_max_column_norm() {
        let b = Matrix::from_rows(&[vec![0.5, -2.0], vec![-0.25, 1.0]]).unwrap();
        // Column norms: 0.75 and 3.0.
        assert_close(l1_cond_number(&b), 3.0, 1e-15);
        // Identity has κ = 1.
        assert_close(l1_cond_number(&Matrix::identity(4)), 1.0, 0.0);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_rows(&[
            vec![4.0, 2.0, 0.6],
            vec![2.0, 5.0, 1.0],
            vec![0.6, 1.0, 3.0],
        ])
        .unwrap();
        let x_true = vec![1.0, -2.0, 0.5];
        let b = a.matvec(&x_true).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        for (got, want) in x.iter().zip(&x_true) {
            assert_close(*got, *want, 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(LinalgError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn probvec_validates() {
        assert!(ProbVec::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVec::new(vec![0.6, 0.5]).is_err());
        assert!(ProbVec::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVec::new(vec![f64::NAN, 1.0]).is_err());
        let clipped = ProbVec::from_normalizing(vec![-1e-12, 2.0, 2.0]).unwrap();
        assert_close(clipped.get(0), 0.0, 0.0);
        assert_close(clipped.get(1), 0.5, 1e-15);
    }

    #[test]
    fn tv_distance_hand_example() {
        let p = ProbVec::new(vec![0.7, 0.2, 0.1]).unwrap();
        let q = ProbVec::new(vec![0.1, 0.2, 0.7]).unwrap();
        assert_close(tv_distance(&p, &q).unwrap(), 0.6, 1e-15);
        assert_close(tv_distance(&p, &p).unwrap(), 0.0, 0.0);
    }

    #[test]
    fn tensor_layout_last_index_fastest() {
        let t = MomentTensor::from_vec(2, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        // Entry (1, 2) sits at flat position 1*3 + 2 = 5.
        assert_eq!(t.flat_index(&[1, 2]).unwrap(), 5);
        assert_close(t.value(&[1, 2]).unwrap(), 5.0, 0.0);
        let t3 = MomentTensor::zeros(3, 4).unwrap();
        assert_eq!(t3.flat_index(&[1, 2, 3]).unwrap(), 1 * 16 + 2 * 4 + 3);
    }

    #[test]
    fn tensor_marginals_sum_axes() {
        let t = MomentTensor::from_vec(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        // Axis 0 marginal: row sums. Axis 1 marginal: column sums.
        assert_eq!(t.marginal(0).unwrap(), vec![0.5, 0.5]);
        let m1 = t.marginal(1).unwrap();
        assert_close(m1[0], 0.6, 1e-15);
        assert_close(m1[1], 0.4, 1e-15);
    }

    #[test]
    fn symmetrize_order2_averages_transpose() {
        let t = MomentTensor::from_vec(2, 2, vec![1.0, 0.0, 4.0, 3.0]).unwrap();
        let s = t.symmetrize();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 2.0, 3.0]);
        // Symmetric input is a fixed point.
        assert_eq!(s.symmetrize().as_slice(), s.as_slice());
    }

    #[test]
    fn symmetrize_order3_matches_permutation_average() {
        let data: Vec<f64> = (0..8).map(|v| (v * v) as f64 * 0.125).collect();
        let t = MomentTensor::from_vec(3, 2, data).unwrap();
        let s = t.symmetrize();
        // Check one entry by hand: average over permutations of (0,0,1).
        let want = (t.value(&[0, 0, 1]).unwrap()
            + t.value(&[0, 1, 0]).unwrap()
            + t.value(&[1, 0, 0]).unwrap())
            / 3.0;
        // Each permutation class appears t!/(multiplicities) times, but the
        // average over all 6 permutations of indices with a repeat collapses
        // to the 3 distinct arrangements.
        assert_close(s.value(&[0, 0, 1]).unwrap(), want, 1e-15);
        assert_close(s.value(&[0, 1, 0]).unwrap(), want, 1e-15);
        assert_close(s.value(&[1, 0, 0]).unwrap(), want, 1e-15);
    }

    #[test]
    fn tensor_shape_errors() {
        assert!(MomentTensor::from_vec(2, 3, vec![0.0; 8]).is_err());
        assert!(MomentTensor::from_vec(0, 3, vec![]).is_err());
        let t = MomentTensor::zeros(2, 3).unwrap();
        assert!(t.flat_index(&[0, 3]).is_err());
        assert!(t.flat_index(&[0]).is_err());
    }
}
