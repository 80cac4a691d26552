//! Minibatch ELBO and its reverse-mode gradient.

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};

use super::{kl_divergence, latent_from_projection, push_lower, sigmoid, softmax_into, SvgpModel, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::kernel::{accumulate_param_grad, input_grad, KernelGrad};
use crate::numerics::{cholesky_backward, lower_triangle, solve_upper_transposed};

/// Gradient of the ELBO, laid out like [`SvgpModel`].
#[derive(Debug, Clone)]
pub struct SvgpGrad {
    pub kernel: KernelGrad,
    /// Present only when requested.
    pub inducing_inputs: Option<Array2<f64>>,
    pub means: Vec<Array1<f64>>,
    pub scale_raw: Vec<Array2<f64>>,
}

impl SvgpGrad {
    /// Same ordering as [`SvgpModel::params_flat`].
    pub fn flatten(&self, include_inducing: bool) -> Vec<f64> {
        let mut out = vec![self.kernel.log_variance];
        out.extend_from_slice(&self.kernel.log_lengthscales);
        if include_inducing {
            let z = self.inducing_inputs.as_ref().expect("inducing gradient was not computed");
            out.extend(z.iter().copied());
        }
        for m in &self.means {
            out.extend(m.iter().copied());
        }
        for s in &self.scale_raw {
            push_lower(&mut out, s);
        }
        out
    }
}

struct Likelihood {
    /// `(N/B)(1/S) Σ_n Σ_s log softmax_{y_n}(f)`
    value: f64,
    /// ∂/∂ mean, `B × C`
    mean_grad: Array2<f64>,
    /// ∂/∂ variance, `B × C`
    var_grad: Array2<f64>,
}

fn check_batch(model: &SvgpModel, xs: ArrayView2<f64>, labels: &[usize], noise: ArrayView3<f64>) -> Result<()> {
    let b = xs.nrows();
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    if labels.len() != b {
        return Err(Error::LengthMismatch { left: b, right: labels.len() });
    }
    let c = model.num_classes();
    if let Some(bad) = labels.iter().find(|y| **y >= c) {
        return Err(Error::InvalidConfig(format!("label index {bad} out of range")));
    }
    let (nb, nc, ns) = noise.dim();
    if nb != b || nc != c || ns == 0 {
        return Err(Error::dims(format!("noise shape ({b}, {c}, S>=1)"), format!("({nb}, {nc}, {ns})")));
    }
    Ok(())
}

fn expected_log_lik(
    mean: &Array2<f64>,
    variance: &Array2<f64>,
    labels: &[usize],
    noise: ArrayView3<f64>,
    n_total: usize,
) -> Likelihood {
    let (b, c, s) = noise.dim();
    let scale = n_total as f64 / (b as f64 * s as f64);
    let mut mean_grad = Array2::zeros((b, c));
    let mut var_grad = Array2::zeros((b, c));
    let mut terms = Vec::with_capacity(b);
    let mut f = vec![0.0; c];
    let mut p = vec![0.0; c];
    for n in 0..b {
        let y = labels[n];
        let sd: Vec<f64> = (0..c).map(|j| variance[[n, j]].sqrt()).collect();
        let mut ll = 0.0;
        for k in 0..s {
            for j in 0..c {
                f[j] = mean[[n, j]] + sd[j] * noise[[n, j, k]];
            }
            let lse = softmax_into(&f, &mut p);
            ll += f[y] - lse;
            for j in 0..c {
                let r = if j == y { 1.0 - p[j] } else { -p[j] };
                mean_grad[[n, j]] += r;
                var_grad[[n, j]] += r * noise[[n, j, k]];
            }
        }
        terms.push(ll);
        for j in 0..c {
            mean_grad[[n, j]] *= scale;
            // The floor is flat, so clamped variances receive no gradient.
            var_grad[[n, j]] =
                if variance[[n, j]] > VARIANCE_FLOOR { var_grad[[n, j]] * scale / (2.0 * sd[j]) } else { 0.0 };
        }
    }
    // Summed in sorted order so the value is invariant to batch order.
    terms.sort_by(|a, b| a.total_cmp(b));
    Likelihood { value: scale * terms.iter().sum::<f64>(), mean_grad, var_grad }
}

/// Reparameterised Monte-Carlo ELBO for one minibatch:
/// `(N/B) Σ_n (1/S) Σ_s log softmax_{y_n}(m_n + √v_n ⊙ ε_{n,s}) − KL`.
///
/// `noise` has shape `(B, classes, S)`.
pub fn elbo_minibatch(
    model: &SvgpModel,
    xs: ArrayView2<f64>,
    labels: &[usize],
    n_total: usize,
    noise: ArrayView3<f64>,
) -> Result<f64> {
    check_batch(model, xs, labels, noise)?;
    let proj = model.project(xs)?;
    let lat = latent_from_projection(model, &proj);
    let lik = expected_log_lik(&lat.mean, &lat.variance, labels, noise, n_total);
    Ok(lik.value - kl_divergence(model))
}

/// ELBO value together with its exact gradient for the given noise.
pub fn elbo_and_grad(
    model: &SvgpModel,
    xs: ArrayView2<f64>,
    labels: &[usize],
    n_total: usize,
    noise: ArrayView3<f64>,
    with_inducing: bool,
) -> Result<(f64, SvgpGrad)> {
    check_batch(model, xs, labels, noise)?;
    let proj = model.project(xs)?;
    let lat = latent_from_projection(model, &proj);
    let lik = expected_log_lik(&lat.mean, &lat.variance, labels, noise, n_total);
    let value = lik.value - kl_divergence(model);

    let a = &proj.a;
    let m = model.num_inducing();
    let c = model.num_classes();
    let mut a_bar = Array2::<f64>::zeros(a.raw_dim());
    let mut means = Vec::with_capacity(c);
    let mut scale_raw = Vec::with_capacity(c);

    for class in 0..c {
        let g = lik.mean_grad.column(class);
        let h = lik.var_grad.column(class);
        let mean = &model.means[class];
        // mean_n = a_nᵀ m_c
        means.push(a.dot(&g) - mean);

        // var_n ∋ ‖S_cᵀ a_n‖²; T̄ = 2 T diag(h)
        let s = model.scale(class);
        let t = s.t().dot(a);
        let two_h = h.mapv(|v| 2.0 * v);
        let t_bar = &t * &two_h.view().insert_axis(Axis(0));
        let mut s_bar = lower_triangle(&a.dot(&t_bar.t()));
        // KL: ∂/∂S = S − diag(1/S_ii)
        s_bar -= &s;
        let mut raw_bar = s_bar;
        for i in 0..m {
            raw_bar[[i, i]] += 1.0 / s[[i, i]];
            raw_bar[[i, i]] *= sigmoid(model.scale_raw[class][[i, i]]);
        }
        scale_raw.push(raw_bar);

        // Ā += m g_cᵀ − 2 A diag(h) + S T̄
        let mean_col = mean.view().insert_axis(Axis(1));
        let g_row = g.insert_axis(Axis(0));
        a_bar += &mean_col.dot(&g_row);
        a_bar -= &(a * &two_h.view().insert_axis(Axis(0)));
        a_bar += &s.dot(&t_bar);
    }

    let mut kernel = KernelGrad::zeros(model.dim());
    // k(x_n, x_n) = σ² enters every class variance.
    kernel.log_variance += model.kernel.variance() * lik.var_grad.sum();

    // A = L⁻¹ K_mn
    let kmn_bar = solve_upper_transposed(&proj.chol, a_bar.view())?;
    let l_bar = -lower_triangle(&kmn_bar.dot(&a.t()));
    let kmm_bar = cholesky_backward(&proj.chol, &l_bar)?;

    let z = model.inducing_inputs.view();
    accumulate_param_grad(z, xs, &proj.kmn, &kmn_bar, &model.kernel, &mut kernel);
    accumulate_param_grad(z, z, &proj.kmm, &kmm_bar, &model.kernel, &mut kernel);
    let inducing_inputs = with_inducing.then(|| {
        input_grad(z, xs, &proj.kmn, &kmn_bar, &model.kernel)
            + input_grad(z, z, &proj.kmm, &kmm_bar, &model.kernel) * 2.0
    });

    Ok((value, SvgpGrad { kernel, inducing_inputs, means, scale_raw }))
}
