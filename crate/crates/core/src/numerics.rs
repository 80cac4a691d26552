//! Dense linear algebra needed by the sparse GP: jittered Cholesky,
//! triangular solves and log-determinants.
//!
//! Matrices are `ndarray::Array2<f64>` in standard (row-major) layout.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

/// Number of decades tried on the jitter ladder (`base * 10^k`, `k = 0..=6`).
pub const JITTER_LADDER_STEPS: i32 = 7;

/// Default jitter relative to the mean diagonal magnitude.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;

const SYMMETRY_RTOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (largest jitter tried: {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("matrix is not symmetric (|a[{row},{col}] - a[{col},{row}]| too large)")]
    NotSymmetric { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Lower-triangular Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Wraps an existing lower-triangular matrix. Fails unless it is square,
    /// has a strictly positive diagonal and a zero upper triangle.
    pub fn from_lower(lower: Array2<f64>, jitter_used: f64) -> Result<Self, LinalgError> {
        let n = lower.nrows();
        if lower.ncols() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: "square matrix".into(),
                actual: format!("{}x{}", n, lower.ncols()),
            });
        }
        for i in 0..n {
            if !(lower[[i, i]] > 0.0) {
                return Err(LinalgError::NotPositiveDefinite { max_jitter: jitter_used });
            }
            for j in (i + 1)..n {
                if lower[[i, j]] != 0.0 {
                    return Err(LinalgError::DimensionMismatch {
                        expected: "lower-triangular matrix".into(),
                        actual: format!("nonzero entry at ({i},{j})"),
                    });
                }
            }
        }
        Ok(Self { lower, jitter_used })
    }
}

fn check_symmetric(a: ArrayView2<f64>) -> Result<(), LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: "square matrix".into(),
            actual: format!("{}x{}", n, a.ncols()),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_RTOL * scale {
                return Err(LinalgError::NotSymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Plain Cholesky–Banachiewicz on `a + jitter * I`; `None` when a pivot is not positive.
fn try_cholesky(a: ArrayView2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Factorizes `a + jitter * I`, walking the ladder `base_jitter * 10^k` for
/// `k = 0..=6`. Jitter is added on the first attempt too, so the result is a
/// deterministic function of the input.
pub fn cholesky_with_jitter(a: ArrayView2<f64>, base_jitter: f64) -> Result<CholeskyFactor, LinalgError> {
    check_symmetric(a)?;
    let mut jitter = base_jitter;
    for _ in 0..JITTER_LADDER_STEPS {
        if let Some(lower) = try_cholesky(a, jitter) {
            return Ok(CholeskyFactor { lower, jitter_used: jitter });
        }
        jitter *= 10.0;
    }
    Err(LinalgError::NotPositiveDefinite { max_jitter: jitter / 10.0 })
}

fn check_rows(l: &CholeskyFactor, b: ArrayView2<f64>) -> Result<(), LinalgError> {
    if b.nrows() != l.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: format!("{} rows", l.dim()),
            actual: format!("{} rows", b.nrows()),
        });
    }
    Ok(())
}

/// Solves `L X = B` by forward substitution.
pub fn solve_lower_triangular(l: &CholeskyFactor, b: ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    check_rows(l, b)?;
    let lower = &l.lower;
    let n = l.dim();
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= lower[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / lower[[i, i]];
        }
    }
    Ok(x)
}

/// Solves `Lᵀ X = B` by back substitution.
pub fn solve_upper_transposed(l: &CholeskyFactor, b: ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    check_rows(l, b)?;
    let lower = &l.lower;
    let n = l.dim();
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in (i + 1)..n {
                s -= lower[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / lower[[i, i]];
        }
    }
    Ok(x)
}

/// `log det(L Lᵀ) = 2 Σ log L_ii`.
pub fn log_det_from_cholesky(l: &CholeskyFactor) -> f64 {
    2.0 * l.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Keeps the lower triangle (including the diagonal), zeroing the rest.
pub fn lower_triangle(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for i in 0..out.nrows() {
        for j in (i + 1)..out.ncols() {
            out[[i, j]] = 0.0;
        }
    }
    out
}

/// Reverse-mode step through a Cholesky factorization.
///
/// Given the factor `L` of `Σ` and the gradient `L̄` of a scalar objective
/// with respect to the lower triangle of `L`, returns the symmetric `Σ̄`
/// satisfying `dE = Σ_ij Σ̄_ij dΣ_ij` for symmetric perturbations.
pub fn cholesky_backward(l: &CholeskyFactor, lower_grad: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = l.dim();
    let mut phi = l.lower.t().dot(&lower_triangle(lower_grad));
    for i in 0..n {
        phi[[i, i]] *= 0.5;
        for j in (i + 1)..n {
            phi[[i, j]] = 0.0;
        }
    }
    // L⁻ᵀ Φ L⁻¹ = (L⁻ᵀ (L⁻ᵀ Φᵀ)ᵀ)
    let left = solve_upper_transposed(l, phi.view())?;
    let full = solve_upper_transposed(l, left.t())?.reversed_axes();
    Ok((&full + &full.t()) * 0.5)
}
