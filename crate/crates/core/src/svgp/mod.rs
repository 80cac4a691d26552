//! Sparse variational GP multiclass classifier.
//!
//! Each class has an independent latent function sharing one ARD-RBF kernel
//! and one set of inducing inputs `Z`. The variational posterior is held in
//! whitened form: inducing outputs are `u_c = L v_c` with `L L^T = K(Z, Z)`
//! and `q(v_c) = N(m_c, S_c S_c^T)`, so the prior on `v_c` is standard normal.
//! The likelihood is a softmax over the class latents.

mod elbo;
pub mod noise;
mod train;

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, KernelParams};
use crate::labels::ClassProbs;
use crate::numerics::{cholesky_with_jitter, solve_lower_triangular, CholeskyFactor, DEFAULT_RELATIVE_JITTER};
use crate::NUM_CLASSES;

pub use elbo::{elbo_and_grad, elbo_minibatch, SvgpGrad};
pub use train::{fit, TraceEntry, TrainTrace};

/// Floor applied to predictive latent variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Default number of inducing points.
pub const DEFAULT_NUM_INDUCING: usize = 300;

pub const MODEL_FORMAT: &str = "gpuq-svgp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mc_train_samples: usize,
    pub mc_predict_samples: usize,
    pub seed: u64,
    pub optimize_inducing: bool,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            epochs: 2,
            batch_size: 500,
            mc_train_samples: 8,
            mc_predict_samples: 64,
            seed: 0,
            optimize_inducing: false,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.mc_train_samples == 0 || self.mc_predict_samples == 0 {
            return Err(Error::InvalidConfig("Monte-Carlo sample counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::InvalidConfig("rmsprop_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-example, per-class Gaussian marginals of the latent functions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    /// `n × classes`
    pub mean: Array2<f64>,
    /// `n × classes`, floored at [`VARIANCE_FLOOR`].
    pub variance: Array2<f64>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `softplus⁻¹(1)`, the raw diagonal that yields a unit scale.
pub(crate) fn unit_raw_diag() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgpModel {
    pub kernel: KernelParams,
    /// `M × D`
    pub inducing_inputs: Array2<f64>,
    /// Whitened variational means, one length-`M` vector per class.
    pub means: Vec<Array1<f64>>,
    /// Lower-triangular scales with the diagonal stored pre-softplus.
    pub scale_raw: Vec<Array2<f64>>,
    pub jitter: f64,
}

/// Intermediate quantities shared by prediction and the ELBO.
pub(crate) struct Projection {
    pub chol: CholeskyFactor,
    pub kmm: Array2<f64>,
    pub kmn: Array2<f64>,
    /// `L⁻¹ K(Z, X)`, `M × n`
    pub a: Array2<f64>,
}

impl SvgpModel {
    /// Prior state (`m_c = 0`, `S_c = I`) around the given inducing inputs.
    pub fn new(kernel: KernelParams, inducing_inputs: Array2<f64>, num_classes: usize) -> Result<Self> {
        let m = inducing_inputs.nrows();
        if m == 0 {
            return Err(Error::TooFewPoints { needed: 1, available: 0 });
        }
        if inducing_inputs.ncols() != kernel.dim() {
            return Err(Error::dims(format!("inducing dimension {}", kernel.dim()), inducing_inputs.ncols()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        let jitter = DEFAULT_RELATIVE_JITTER * kernel.variance();
        let mut scale = Array2::zeros((m, m));
        scale.diag_mut().fill(unit_raw_diag());
        Ok(Self {
            kernel,
            inducing_inputs,
            means: vec![Array1::zeros(m); num_classes],
            scale_raw: vec![scale; num_classes],
            jitter,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inducing_inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// The lower-triangular scale `S_c` with its diagonal transformed.
    pub fn scale(&self, class: usize) -> Array2<f64> {
        let mut s = self.scale_raw[class].clone();
        for i in 0..s.nrows() {
            s[[i, i]] = softplus(s[[i, i]]);
        }
        s
    }

    /// Sets `S_c` from a lower-triangular matrix with positive diagonal.
    pub fn set_scale(&mut self, class: usize, scale: &Array2<f64>) -> Result<()> {
        let m = self.num_inducing();
        if scale.dim() != (m, m) {
            return Err(Error::dims(format!("{m}x{m}"), format!("{:?}", scale.dim())));
        }
        let mut raw = crate::numerics::lower_triangle(scale);
        for i in 0..m {
            let d = scale[[i, i]];
            if !(d > 0.0) {
                return Err(Error::InvalidConfig("scale diagonal must be positive".into()));
            }
            // softplus⁻¹(d) = d + ln(1 - e^{-d})
            raw[[i, i]] = d + (-(-d).exp()).ln_1p();
        }
        self.scale_raw[class] = raw;
        Ok(())
    }

    pub(crate) fn check_inputs(&self, xs: ArrayView2<f64>) -> Result<()> {
        if xs.ncols() != self.dim() {
            return Err(Error::dims(format!("feature dimension {}", self.dim()), xs.ncols()));
        }
        Ok(())
    }

    pub(crate) fn project(&self, xs: ArrayView2<f64>) -> Result<Projection> {
        self.check_inputs(xs)?;
        let z = self.inducing_inputs.view();
        let kmm = kernel_matrix(z, z, &self.kernel)?;
        let chol = cholesky_with_jitter(kmm.view(), self.jitter)?;
        let kmn = kernel_matrix(z, xs, &self.kernel)?;
        let a = solve_lower_triangular(&chol, kmn.view())?;
        Ok(Projection { chol, kmm, kmn, a })
    }

    /// Number of scalar parameters exposed to the optimizer.
    pub fn num_params(&self, include_inducing: bool) -> usize {
        let m = self.num_inducing();
        let c = self.num_classes();
        1 + self.dim() + if include_inducing { m * self.dim() } else { 0 } + c * m + c * m * (m + 1) / 2
    }

    /// Flattens parameters as `[log σ², log ℓ, (Z), m_0.., S_0 lower rows..]`.
    pub fn params_flat(&self, include_inducing: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params(include_inducing));
        out.push(self.kernel.log_variance);
        out.extend_from_slice(&self.kernel.log_lengthscales);
        if include_inducing {
            out.extend(self.inducing_inputs.iter().copied());
        }
        for m in &self.means {
            out.extend(m.iter().copied());
        }
        for s in &self.scale_raw {
            push_lower(&mut out, s);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64], include_inducing: bool) -> Result<()> {
        if flat.len() != self.num_params(include_inducing) {
            return Err(Error::dims(self.num_params(include_inducing), flat.len()));
        }
        let mut it = flat.iter().copied();
        self.kernel.log_variance = it.next().unwrap();
        for v in self.kernel.log_lengthscales.iter_mut() {
            *v = it.next().unwrap();
        }
        if include_inducing {
            for v in self.inducing_inputs.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for m in self.means.iter_mut() {
            for v in m.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for s in self.scale_raw.iter_mut() {
            let n = s.nrows();
            for i in 0..n {
                for j in 0..=i {
                    s[[i, j]] = it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, &SvgpFile::from(self))?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        let file: SvgpFile = serde_json::from_reader(reader)?;
        file.try_into()
    }
}

pub(crate) fn push_lower(out: &mut Vec<f64>, s: &Array2<f64>) {
    for i in 0..s.nrows() {
        for j in 0..=i {
            out.push(s[[i, j]]);
        }
    }
}

/// Picks `m` distinct training rows as inducing inputs, initialises the
/// kernel with the median-distance heuristic and the variational state at
/// the prior.
pub fn init_model(train_features: ArrayView2<f64>, m: usize, seed: u64) -> Result<SvgpModel> {
    let n = train_features.nrows();
    if m == 0 || n < m {
        return Err(Error::TooFewPoints { needed: m.max(1), available: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = sample(&mut rng, n, m).into_vec();
    let inducing = train_features.select(Axis(0), &rows);
    let kernel = KernelParams::median_heuristic(train_features, seed);
    SvgpModel::new(kernel, inducing, NUM_CLASSES)
}

/// Latent marginals `q(f_c(x))` for every row of `xs`.
pub fn predictive_latent(model: &SvgpModel, xs: ArrayView2<f64>) -> Result<LatentGaussian> {
    let proj = model.project(xs)?;
    Ok(latent_from_projection(model, &proj))
}

pub(crate) fn latent_from_projection(model: &SvgpModel, proj: &Projection) -> LatentGaussian {
    let n = proj.a.ncols();
    let c = model.num_classes();
    let prior_var = model.kernel.variance();
    let explained = proj.a.mapv(|v| v * v).sum_axis(Axis(0));
    let mut mean = Array2::zeros((n, c));
    let mut variance = Array2::zeros((n, c));
    for class in 0..c {
        let mu = proj.a.t().dot(&model.means[class]);
        let t = model.scale(class).t().dot(&proj.a);
        let extra = t.mapv(|v| v * v).sum_axis(Axis(0));
        for i in 0..n {
            mean[[i, class]] = mu[i];
            variance[[i, class]] = (prior_var - explained[i] + extra[i]).max(VARIANCE_FLOOR);
        }
    }
    LatentGaussian { mean, variance }
}

/// Whitened KL: `Σ_c ½ (tr(S_c S_cᵀ) + m_cᵀ m_c − M − 2 Σ_i log S_c[i,i])`.
pub fn kl_divergence(model: &SvgpModel) -> f64 {
    let m = model.num_inducing() as f64;
    (0..model.num_classes())
        .map(|c| {
            let s = model.scale(c);
            let trace: f64 = s.iter().map(|v| v * v).sum();
            let mean_sq: f64 = model.means[c].iter().map(|v| v * v).sum();
            let log_diag: f64 = s.diag().iter().map(|d| d.ln()).sum();
            0.5 * (trace + mean_sq - m - 2.0 * log_diag)
        })
        .sum()
}

/// Softmax of `f` written into `out`, with max subtraction. Returns the log-sum-exp.
pub(crate) fn softmax_into(f: &[f64], out: &mut [f64]) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(f) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

/// Monte-Carlo predictive class probabilities, `s` reparameterised draws per row.
pub fn predict_proba(model: &SvgpModel, xs: ArrayView2<f64>, s: usize, seed: u64) -> Result<Vec<ClassProbs>> {
    if s == 0 {
        return Err(Error::InvalidConfig("need at least one predictive sample".into()));
    }
    if model.num_classes() != NUM_CLASSES {
        return Err(Error::dims(format!("{NUM_CLASSES} classes"), model.num_classes()));
    }
    let latent = predictive_latent(model, xs)?;
    Ok(mc_class_probs(&latent, s, seed))
}

pub(crate) fn mc_class_probs(latent: &LatentGaussian, s: usize, seed: u64) -> Vec<ClassProbs> {
    let c = latent.mean.ncols();
    let mut block = Array2::zeros((c, s));
    let mut f = vec![0.0; c];
    let mut p = vec![0.0; c];
    (0..latent.mean.nrows())
        .map(|n| {
            noise::fill_example(block.view_mut(), seed, noise::PREDICT_STREAM, n as u64);
            let mut acc = [0.0; NUM_CLASSES];
            for k in 0..s {
                for j in 0..c {
                    f[j] = latent.mean[[n, j]] + latent.variance[[n, j]].sqrt() * block[[j, k]];
                }
                softmax_into(&f, &mut p);
                for j in 0..c {
                    acc[j] += p[j];
                }
            }
            for v in acc.iter_mut() {
                *v /= s as f64;
            }
            ClassProbs(acc)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ClassBlock {
    mean: Vec<f64>,
    scale_raw: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SvgpFile {
    format: String,
    version: u32,
    dim: usize,
    num_inducing: usize,
    jitter: f64,
    kernel: KernelParams,
    inducing_inputs: Vec<Vec<f64>>,
    classes: Vec<ClassBlock>,
}

pub(crate) fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel(format!("ragged matrix, expected {ncols} columns")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| Error::InvalidModel(e.to_string()))
}

impl From<&SvgpModel> for SvgpFile {
    fn from(m: &SvgpModel) -> Self {
        SvgpFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dim: m.dim(),
            num_inducing: m.num_inducing(),
            jitter: m.jitter,
            kernel: m.kernel.clone(),
            inducing_inputs: rows_of(&m.inducing_inputs),
            classes: m
                .means
                .iter()
                .zip(&m.scale_raw)
                .map(|(mean, s)| ClassBlock { mean: mean.to_vec(), scale_raw: rows_of(s) })
                .collect(),
        }
    }
}

impl TryFrom<SvgpFile> for SvgpModel {
    type Error = Error;

    fn try_from(f: SvgpFile) -> Result<Self> {
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::InvalidModel(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                f.format, f.version
            )));
        }
        if f.kernel.dim() != f.dim {
            return Err(Error::InvalidModel("kernel dimension disagrees with header".into()));
        }
        let inducing = matrix_from_rows(&f.inducing_inputs, f.dim)?;
        if inducing.nrows() != f.num_inducing || f.num_inducing == 0 {
            return Err(Error::InvalidModel("inducing count disagrees with header".into()));
        }
        let m = f.num_inducing;
        let mut means = Vec::new();
        let mut scale_raw = Vec::new();
        for block in f.classes {
            if block.mean.len() != m {
                return Err(Error::InvalidModel("variational mean has wrong length".into()));
            }
            let s = matrix_from_rows(&block.scale_raw, m)?;
            if s.nrows() != m {
                return Err(Error::InvalidModel("variational scale has wrong shape".into()));
            }
            means.push(Array1::from(block.mean));
            scale_raw.push(s);
        }
        if means.len() < 2 {
            return Err(Error::InvalidModel("need at least two classes".into()));
        }
        Ok(SvgpModel { kernel: f.kernel, inducing_inputs: inducing, means, scale_raw, jitter: f.jitter })
    }
}
