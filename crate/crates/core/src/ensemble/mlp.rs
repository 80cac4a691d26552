//! ReLU MLP with batch normalisation and hand-written backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight on the previous running statistic when folding in a batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub hidden: Vec<HiddenLayer>,
    /// `width × classes`
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with the running statistics.
    Eval,
}

/// Per-layer normalisation statistics of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Array1<f64>>,
    pub var: Vec<Array1<f64>>,
}

/// Where the normalisation statistics come from.
#[derive(Debug, Clone, Copy)]
pub enum Norm<'a> {
    Batch,
    Running,
    Frozen(&'a BatchStats),
}

pub(crate) struct LayerCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// Post-affine, pre-ReLU.
    pre_act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    last_hidden: Array2<f64>,
    pub logits: Array2<f64>,
    pub stats: BatchStats,
    through_stats: bool,
}

/// Gradient with the same layout as [`MlpParams`] (running statistics excluded).
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub hidden: Vec<LayerGrad>,
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl MlpParams {
    /// He-uniform weights `U(±√(6 / fan_in))`, zero biases, unit BN scale.
    pub fn he_uniform<R: Rng>(dim: usize, width: usize, depth: usize, classes: usize, rng: &mut R) -> Self {
        let mut he = |fan_in: usize, fan_out: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
        };
        let mut hidden = Vec::with_capacity(depth);
        let mut fan_in = dim;
        for _ in 0..depth {
            hidden.push(HiddenLayer {
                weight: he(fan_in, width),
                bias: Array1::zeros(width),
                gamma: Array1::ones(width),
                beta: Array1::zeros(width),
                running_mean: Array1::zeros(width),
                running_var: Array1::ones(width),
            });
            fan_in = width;
        }
        let out_weight = he(fan_in, classes);
        Self { hidden, out_weight, out_bias: Array1::zeros(classes) }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.out_weight.nrows(), |l| l.weight.nrows())
    }

    pub fn num_classes(&self) -> usize {
        self.out_bias.len()
    }

    /// Trainable parameters in a fixed order: per layer `W, b, γ, β`, then the output layer.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(l.weight.iter().chain(&l.bias).chain(&l.gamma).chain(&l.beta).copied());
        }
        out.extend(self.out_weight.iter().chain(&self.out_bias).copied());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.params_flat().len();
        if flat.len() != expected {
            return Err(Error::dims(expected, flat.len()));
        }
        let mut it = flat.iter().copied();
        for l in self.hidden.iter_mut() {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()).chain(l.gamma.iter_mut()).chain(l.beta.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        for v in self.out_weight.iter_mut().chain(self.out_bias.iter_mut()) {
            *v = it.next().unwrap();
        }
        Ok(())
    }

    pub fn running_stats(&self) -> BatchStats {
        BatchStats {
            mean: self.hidden.iter().map(|l| l.running_mean.clone()).collect(),
            var: self.hidden.iter().map(|l| l.running_var.clone()).collect(),
        }
    }

    /// Folds batch statistics into the running ones (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &BatchStats, batch_size: usize) {
        let unbias = batch_size as f64 / (batch_size as f64 - 1.0).max(1.0);
        for (l, (m, v)) in self.hidden.iter_mut().zip(stats.mean.iter().zip(&stats.var)) {
            l.running_mean = &l.running_mean * BN_MOMENTUM + m * (1.0 - BN_MOMENTUM);
            l.running_var = &l.running_var * BN_MOMENTUM + &(v * (unbias * (1.0 - BN_MOMENTUM)));
        }
    }
}

impl MlpGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(l.weight.iter().chain(&l.bias).chain(&l.gamma).chain(&l.beta).copied());
        }
        out.extend(self.out_weight.iter().chain(&self.out_bias).copied());
        out
    }
}

pub(crate) fn forward(p: &MlpParams, xs: ArrayView2<f64>, norm: Norm<'_>) -> Result<ForwardCache> {
    if xs.ncols() != p.input_dim() {
        return Err(Error::dims(format!("feature dimension {}", p.input_dim()), xs.ncols()));
    }
    let b = xs.nrows();
    if matches!(norm, Norm::Batch) && b < 2 {
        return Err(Error::BatchTooSmall { size: b });
    }
    let mut layers = Vec::with_capacity(p.hidden.len());
    let mut stats = BatchStats { mean: Vec::new(), var: Vec::new() };
    let mut h = xs.to_owned();
    for (k, l) in p.hidden.iter().enumerate() {
        let mut z = h.dot(&l.weight);
        z += &l.bias;
        let (mean, var) = match norm {
            Norm::Batch => {
                let mean = z.mean_axis(Axis(0)).unwrap();
                let var = z.var_axis(Axis(0), 0.0);
                (mean, var)
            }
            Norm::Running => (l.running_mean.clone(), l.running_var.clone()),
            Norm::Frozen(s) => (s.mean[k].clone(), s.var[k].clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
        let mut xhat = z;
        xhat -= &mean;
        xhat *= &inv_std;
        let mut pre_act = &xhat * &l.gamma;
        pre_act += &l.beta;
        let next = pre_act.mapv(|v| v.max(0.0));
        stats.mean.push(mean);
        stats.var.push(var);
        layers.push(LayerCache { input: h, xhat, inv_std, pre_act });
        h = next;
    }
    let mut logits = h.dot(&p.out_weight);
    logits += &p.out_bias;
    Ok(ForwardCache { layers, last_hidden: h, logits, stats, through_stats: matches!(norm, Norm::Batch) })
}

/// Logits for a batch. Train mode uses batch statistics; eval mode is a pure
/// per-row function of the running statistics.
pub fn mlp_forward(p: &MlpParams, xs: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
    let norm = match mode {
        Mode::Train => Norm::Batch,
        Mode::Eval => Norm::Running,
    };
    Ok(forward(p, xs, norm)?.logits)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        loss -= grad[[n, y]].max(f64::MIN_POSITIVE).ln();
        grad[[n, y]] -= 1.0;
    }
    grad /= b;
    (loss / b, grad)
}

/// Backpropagates `d_logits`. Returns parameter gradients (when asked) and
/// the gradient with respect to the inputs. When the forward pass used batch
/// statistics, `frozen_stats` treats them as constants instead of
/// differentiating through them.
pub(crate) fn backward(
    p: &MlpParams,
    cache: &ForwardCache,
    d_logits: &Array2<f64>,
    want_params: bool,
    frozen_stats: bool,
) -> (Option<MlpGrad>, Array2<f64>) {
    let through_stats = cache.through_stats && !frozen_stats;
    let b = d_logits.nrows() as f64;
    let out_weight = want_params.then(|| cache.last_hidden.t().dot(d_logits));
    let out_bias = want_params.then(|| d_logits.sum_axis(Axis(0)));
    let mut da = d_logits.dot(&p.out_weight.t());
    let mut grads = Vec::with_capacity(p.hidden.len());
    for (l, c) in p.hidden.iter().zip(&cache.layers).rev() {
        let mut dy = da;
        Zip::from(&mut dy).and(&c.pre_act).for_each(|d, &y| {
            if y <= 0.0 {
                *d = 0.0;
            }
        });
        let dxhat = &dy * &l.gamma;
        let dz = if through_stats {
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
            let mut dz = &dxhat * b;
            dz -= &sum_dxhat;
            dz -= &(&c.xhat * &sum_dxhat_xhat);
            dz *= &(&c.inv_std / b);
            dz
        } else {
            &dxhat * &c.inv_std
        };
        if want_params {
            grads.push(LayerGrad {
                weight: c.input.t().dot(&dz),
                bias: dz.sum_axis(Axis(0)),
                gamma: (&dy * &c.xhat).sum_axis(Axis(0)),
                beta: dy.sum_axis(Axis(0)),
            });
        }
        da = dz.dot(&l.weight.t());
    }
    grads.reverse();
    let grad =
        want_params.then(|| MlpGrad { hidden: grads, out_weight: out_weight.unwrap(), out_bias: out_bias.unwrap() });
    (grad, da)
}

/// Mean cross-entropy and its parameter gradient for one batch.
pub fn loss_and_grad(p: &MlpParams, xs: ArrayView2<f64>, labels: &[usize], norm: Norm<'_>) -> Result<(f64, MlpGrad)> {
    check_labels(p, xs, labels)?;
    let cache = forward(p, xs, norm)?;
    let (loss, d_logits) = cross_entropy(&cache.logits, labels);
    let (grad, _) = backward(p, &cache, &d_logits, true, false);
    Ok((loss, grad.unwrap()))
}

pub(crate) fn check_labels(p: &MlpParams, xs: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != xs.nrows() {
        return Err(Error::LengthMismatch { left: xs.nrows(), right: labels.len() });
    }
    if let Some(y) = labels.iter().find(|y| **y >= p.num_classes()) {
        return Err(Error::InvalidConfig(format!("label index {y} out of range")));
    }
    Ok(())
}

/// Fast-gradient-sign perturbation of each row:
/// `x + eps · scale ⊙ sign(∇ₓ CE)`, with the normalisation statistics held
/// fixed so every row's gradient depends on that row alone. Coordinates with
/// an exactly zero gradient are left alone.
pub fn fgsm_perturb(
    p: &MlpParams,
    xs: ArrayView2<f64>,
    labels: &[usize],
    eps: f64,
    feature_scale: &[f64],
    stats: Option<&BatchStats>,
) -> Result<Array2<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidConfig("FGSM epsilon must be >= 0".into()));
    }
    if feature_scale.len() != xs.ncols() {
        return Err(Error::dims(xs.ncols(), feature_scale.len()));
    }
    check_labels(p, xs, labels)?;
    let norm = stats.map_or(Norm::Running, Norm::Frozen);
    let cache = forward(p, xs, norm)?;
    let (_, d_logits) = cross_entropy(&cache.logits, labels);
    let (_, dx) = backward(p, &cache, &d_logits, false, true);
    Ok(apply_sign_step(xs, &dx, eps, feature_scale))
}

pub(crate) fn apply_sign_step(xs: ArrayView2<f64>, dx: &Array2<f64>, eps: f64, scale: &[f64]) -> Array2<f64> {
    let mut out = xs.to_owned();
    for (mut row, grow) in out.outer_iter_mut().zip(dx.outer_iter()) {
        for ((v, g), s) in row.iter_mut().zip(grow.iter()).zip(scale) {
            if *g > 0.0 {
                *v += eps * s;
            } else if *g < 0.0 {
                *v -= eps * s;
            }
        }
    }
    out
}
