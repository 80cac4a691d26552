//! ARD radial-basis-function covariance.
//!
//! `k(x, y) = σ² exp(-½ Σ_d (x_d - y_d)² / ℓ_d²)`, with `σ²` and every `ℓ_d`
//! stored in log space so the optimizer works on unconstrained values.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::LinalgError;

/// Size of the subsample used by the median-distance lengthscale heuristic.
pub const MEDIAN_SUBSAMPLE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

/// Gradient of a scalar with respect to [`KernelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelGrad {
    pub fn zeros(dim: usize) -> Self {
        Self { log_variance: 0.0, log_lengthscales: vec![0.0; dim] }
    }
}

impl KernelParams {
    pub fn new(log_variance: f64, log_lengthscales: Vec<f64>) -> Self {
        Self { log_variance, log_lengthscales }
    }

    /// Unit variance and one shared lengthscale for all `dim` dimensions.
    pub fn isotropic(dim: usize, lengthscale: f64) -> Self {
        Self { log_variance: 0.0, log_lengthscales: vec![lengthscale.ln(); dim] }
    }

    /// Unit variance; every lengthscale set to the median pairwise Euclidean
    /// distance of a seeded subsample of at most [`MEDIAN_SUBSAMPLE`] rows.
    pub fn median_heuristic(features: ArrayView2<f64>, seed: u64) -> Self {
        let n = features.nrows();
        let dim = features.ncols();
        let rows: Vec<usize> = if n > MEDIAN_SUBSAMPLE {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, MEDIAN_SUBSAMPLE).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };
        let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                let d2: f64 = features.row(i).iter().zip(features.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                dists.push(d2.sqrt());
            }
        }
        let median = if dists.is_empty() {
            1.0
        } else {
            dists.sort_by(|a, b| a.total_cmp(b));
            let mid = dists.len() / 2;
            if dists.len() % 2 == 0 {
                0.5 * (dists[mid - 1] + dists[mid])
            } else {
                dists[mid]
            }
        };
        // Identical points give a zero median; fall back to unit scale.
        let median = if median > 0.0 && median.is_finite() { median } else { 1.0 };
        Self::isotropic(dim, median)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.log_variance.is_finite() && self.log_lengthscales.iter().all(|l| l.is_finite())
    }
}

fn dim_error(expected: usize, actual: usize) -> LinalgError {
    LinalgError::DimensionMismatch { expected: format!("feature dimension {expected}"), actual: format!("{actual}") }
}

#[inline]
fn scaled_sq_dist(x: ArrayView1<f64>, y: ArrayView1<f64>, inv_sq: &[f64]) -> f64 {
    x.iter()
        .zip(y.iter())
        .zip(inv_sq)
        .map(|((a, b), w)| {
            let d = a - b;
            d * d * w
        })
        .sum()
}

pub fn rbf_ard(x: ArrayView1<f64>, y: ArrayView1<f64>, p: &KernelParams) -> Result<f64, LinalgError> {
    if x.len() != p.dim() {
        return Err(dim_error(p.dim(), x.len()));
    }
    if y.len() != p.dim() {
        return Err(dim_error(p.dim(), y.len()));
    }
    Ok(p.variance() * (-0.5 * scaled_sq_dist(x, y, &p.inv_sq_lengthscales())).exp())
}

/// Gram matrix with rows indexed by `xs` and columns by `ys`.
pub fn kernel_matrix(xs: ArrayView2<f64>, ys: ArrayView2<f64>, p: &KernelParams) -> Result<Array2<f64>, LinalgError> {
    if xs.ncols() != p.dim() {
        return Err(dim_error(p.dim(), xs.ncols()));
    }
    if ys.ncols() != p.dim() {
        return Err(dim_error(p.dim(), ys.ncols()));
    }
    let inv_sq = p.inv_sq_lengthscales();
    let var = p.variance();
    Ok(Array2::from_shape_fn((xs.nrows(), ys.nrows()), |(i, j)| {
        var * (-0.5 * scaled_sq_dist(xs.row(i), ys.row(j), &inv_sq)).exp()
    }))
}

/// `k(x, x)` for each row; always `σ²` for a stationary kernel.
pub fn kernel_diag(xs: ArrayView2<f64>, p: &KernelParams) -> Array1<f64> {
    Array1::from_elem(xs.nrows(), p.variance())
}

/// Gradient of `rbf_ard(x, y, p)` with respect to the log parameters.
pub fn rbf_ard_param_grad(x: ArrayView1<f64>, y: ArrayView1<f64>, p: &KernelParams) -> Result<KernelGrad, LinalgError> {
    let k = rbf_ard(x, y, p)?;
    let inv_sq = p.inv_sq_lengthscales();
    let log_lengthscales = x.iter().zip(y.iter()).zip(&inv_sq).map(|((a, b), w)| k * (a - b) * (a - b) * w).collect();
    Ok(KernelGrad { log_variance: k, log_lengthscales })
}

/// Adds `Σ_ij k_bar[i,j] ∂K[i,j]/∂θ` to `grad`, where `k = K(xs, ys)`.
pub fn accumulate_param_grad(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    k: &Array2<f64>,
    k_bar: &Array2<f64>,
    p: &KernelParams,
    grad: &mut KernelGrad,
) {
    let inv_sq = p.inv_sq_lengthscales();
    let dim = p.dim();
    let mut weighted = vec![0.0; dim];
    for i in 0..xs.nrows() {
        let xi = xs.row(i);
        for j in 0..ys.nrows() {
            let w = k_bar[[i, j]] * k[[i, j]];
            if w == 0.0 {
                continue;
            }
            grad.log_variance += w;
            let yj = ys.row(j);
            for d in 0..dim {
                let diff = xi[d] - yj[d];
                weighted[d] += w * diff * diff;
            }
        }
    }
    for d in 0..dim {
        grad.log_lengthscales[d] += weighted[d] * inv_sq[d];
    }
}

/// Gradient of `Σ_ij k_bar[i,j] K(xs, ys)[i,j]` with respect to the rows of `xs`.
pub fn input_grad(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    k: &Array2<f64>,
    k_bar: &Array2<f64>,
    p: &KernelParams,
) -> Array2<f64> {
    let inv_sq = p.inv_sq_lengthscales();
    let mut out = Array2::zeros(xs.raw_dim());
    for i in 0..xs.nrows() {
        for j in 0..ys.nrows() {
            let w = k_bar[[i, j]] * k[[i, j]];
            if w == 0.0 {
                continue;
            }
            for d in 0..xs.ncols() {
                out[[i, d]] += w * (ys[[j, d]] - xs[[i, d]]) * inv_sq[d];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng;

    use crate::numerics::cholesky_with_jitter;

    #[test]
    fn zero_distance_gives_variance() {
        let p = KernelParams::new(0.7, vec![0.1, -0.3]);
        let x = array![0.5, 2.0];
        assert_eq!(rbf_ard(x.view(), x.view(), &p).unwrap(), 0.7f64.exp());
    }

    #[test]
    fn unit_distance_scalar() {
        let p = KernelParams::new(0.0, vec![0.0]);
        let k = rbf_ard(array![0.0].view(), array![1.0].view(), &p).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn doubling_lengthscale_matches_halved_distance() {
        let wide = KernelParams::new(0.0, vec![2f64.ln()]);
        let narrow = KernelParams::new(0.0, vec![0.0]);
        let a = rbf_ard(array![0.0].view(), array![2.0].view(), &wide).unwrap();
        let b = rbf_ard(array![0.0].view(), array![1.0].view(), &narrow).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let p = KernelParams::new(0.0, vec![0.0, 0.0]);
        assert!(rbf_ard(array![0.0].view(), array![1.0, 2.0].view(), &p).is_err());
        assert!(kernel_matrix(Array2::zeros((2, 3)).view(), Array2::zeros((1, 2)).view(), &p).is_err());
    }

    #[test]
    fn gram_matrix_entries_and_symmetry() {
        let p = KernelParams::new(0.3, vec![0.2, -0.5]);
        let xs = array![[0.0, 1.0], [2.0, -1.0]];
        let single = kernel_matrix(xs.slice(ndarray::s![0..1, ..]), xs.slice(ndarray::s![0..1, ..]), &p).unwrap();
        assert_eq!(single, array![[0.3f64.exp()]]);
        let k = kernel_matrix(xs.view(), xs.view(), &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(k[[i, j]], rbf_ard(xs.row(i), xs.row(j), &p).unwrap());
                assert_eq!(k[[i, j]], k[[j, i]]);
            }
        }
    }

    #[test]
    fn diag_matches_full_matrix() {
        let p = KernelParams::new(2f64.ln(), vec![0.0; 3]);
        let xs = array![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [-1.0, 0.5, 0.25]];
        let d = kernel_diag(xs.view(), &p);
        assert_eq!(d, Array1::from_elem(3, 2f64.ln().exp()));
        let k = kernel_matrix(xs.view(), xs.view(), &p).unwrap();
        assert_eq!(d, k.diag().to_owned());
        let unit = KernelParams::new(0.0, vec![0.0; 3]);
        assert_eq!(kernel_diag(xs.view(), &unit), Array1::from_elem(3, 1.0));
    }

    #[test]
    fn random_gram_needs_at_most_one_jitter_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2, 8, 16, 32] {
            let xs = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
            let p = KernelParams::new(0.0, vec![0.0; 3]);
            let k = kernel_matrix(xs.view(), xs.view(), &p).unwrap();
            let f = cholesky_with_jitter(k.view(), 1e-6).unwrap();
            assert!(f.jitter_used() <= 1e-5, "n={n} jitter={}", f.jitter_used());
        }
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let p = KernelParams::new(0.4, vec![0.3, -0.2, 0.1]);
        let x = array![0.5, -1.0, 0.2];
        let y = array![-0.3, 0.4, 1.0];
        let g = rbf_ard_param_grad(x.view(), y.view(), &p).unwrap();
        let h = 1e-5;
        let eval = |q: &KernelParams| rbf_ard(x.view(), y.view(), q).unwrap();
        let mut up = p.clone();
        let mut dn = p.clone();
        up.log_variance += h;
        dn.log_variance -= h;
        let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
        assert!((fd - g.log_variance).abs() <= 1e-4 * fd.abs());
        for d in 0..3 {
            let mut up = p.clone();
            let mut dn = p.clone();
            up.log_lengthscales[d] += h;
            dn.log_lengthscales[d] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert!((fd - g.log_lengthscales[d]).abs() <= 1e-4 * fd.abs(), "d={d}");
        }
    }

    #[test]
    fn median_heuristic_on_known_points() {
        // Pairwise distances 1, 2, 3 -> median 2.
        let xs = array![[0.0], [1.0], [3.0]];
        let p = KernelParams::median_heuristic(xs.view(), 0);
        assert_eq!(p.log_variance, 0.0);
        assert!((p.log_lengthscales[0] - 2f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn shifting_log_variance_scales_kernel(
            c in -3.0f64..3.0,
            x in prop::collection::vec(-5.0f64..5.0, 3),
            y in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let p = KernelParams::new(0.1, vec![0.2, -0.4, 0.0]);
            let mut q = p.clone();
            q.log_variance += c;
            let x = Array1::from(x);
            let y = Array1::from(y);
            let a = rbf_ard(x.view(), y.view(), &p).unwrap();
            let b = rbf_ard(x.view(), y.view(), &q).unwrap();
            prop_assert!((b - a * c.exp()).abs() <= 1e-12 * b.abs().max(1e-300));
            prop_assert!(a >= 0.0);
            prop_assert!(a <= p.variance());
            prop_assert_eq!(a, rbf_ard(y.view(), x.view(), &p).unwrap());
        }
    }
}
