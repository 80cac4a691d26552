//! Deep-ensemble baseline: independently initialised batch-normalised MLPs
//! trained with Adam on a half-clean, half-FGSM objective; predictions are the
//! mean of the member softmax outputs.

mod mlp;

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ClassProbs, NUM_CLASSES};

pub use mlp::{
    cross_entropy, fgsm_perturb, loss_and_grad, mlp_forward, softmax_rows, BatchStats, HiddenLayer, LayerGrad, MlpGrad,
    MlpParams, Mode, Norm, BN_EPSILON, BN_MOMENTUM,
};

pub const MODEL_FORMAT: &str = "gpuq-ensemble";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub width: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// In units of the per-feature standard deviation.
    pub fgsm_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 5,
            width: 200,
            depth: 3,
            learning_rate: 3e-3,
            epochs: 10,
            batch_size: 500,
            fgsm_epsilon: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig("members, width and depth must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2 for batch normalisation".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.fgsm_epsilon >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate and fgsm_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<MlpParams>,
    pub fgsm_epsilon: f64,
    pub feature_scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberStep {
    pub member: usize,
    pub step: usize,
    pub loss: f64,
}

/// Population standard deviation of each column.
pub fn feature_scale(xs: ArrayView2<f64>) -> Vec<f64> {
    if xs.nrows() == 0 {
        return vec![1.0; xs.ncols()];
    }
    xs.std_axis(Axis(0), 0.0).to_vec()
}

/// Splits a shuffled order into batches, folding a trailing singleton into
/// the previous batch so batch statistics are always defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &EnsembleConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Trains one member. Each minibatch minimises
/// `½ CE(x) + ½ CE(x_fgsm)`, where the perturbation uses the clean batch's
/// normalisation statistics held fixed.
pub fn fit_member(
    xs: ArrayView2<f64>,
    labels: &[usize],
    scale: &[f64],
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<(MlpParams, Vec<f64>)> {
    cfg.validate()?;
    let n = xs.nrows();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, available: n });
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::he_uniform(xs.ncols(), cfg.width, cfg.depth, NUM_CLASSES, &mut rng);
    mlp::check_labels(&params, xs, labels)?;
    let mut flat = params.params_flat();
    let mut adam = Adam::new(flat.len());
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, cfg.batch_size) {
            let step = losses.len();
            let bx = xs.select(Axis(0), batch);
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let clean = mlp::forward(&params, bx.view(), Norm::Batch)?;
            let (clean_loss, d_clean) = cross_entropy(&clean.logits, &by);
            let (_, dx) = mlp::backward(&params, &clean, &d_clean, false, true);
            let adv_x = mlp::apply_sign_step(bx.view(), &dx, cfg.fgsm_epsilon, scale);
            let (g_clean, _) = mlp::backward(&params, &clean, &d_clean, true, false);

            let adv = mlp::forward(&params, adv_x.view(), Norm::Batch)?;
            let (adv_loss, d_adv) = cross_entropy(&adv.logits, &by);
            let (g_adv, _) = mlp::backward(&params, &adv, &d_adv, true, false);

            let loss = 0.5 * (clean_loss + adv_loss);
            let grad: Vec<f64> =
                g_clean.unwrap().flatten().iter().zip(g_adv.unwrap().flatten()).map(|(a, b)| 0.5 * (a + b)).collect();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            losses.push(loss);

            params.update_running_stats(&clean.stats, batch.len());
            adam.step(&mut flat, &grad, cfg);
            params.set_params_flat(&flat)?;
        }
    }
    Ok((params, losses))
}

/// Trains `cfg.members` members; member `i` is seeded with `cfg.seed + i`.
pub fn fit_ensemble(
    xs: ArrayView2<f64>,
    labels: &[usize],
    cfg: &EnsembleConfig,
) -> Result<(EnsembleModel, Vec<MemberStep>)> {
    cfg.validate()?;
    let scale = feature_scale(xs);
    let mut members = Vec::with_capacity(cfg.members);
    let mut trace = Vec::new();
    for i in 0..cfg.members {
        let (p, losses) = fit_member(xs, labels, &scale, cfg, cfg.seed.wrapping_add(i as u64))?;
        log::info!("member {i}: final loss {:?}", losses.last());
        trace.extend(losses.into_iter().enumerate().map(|(step, loss)| MemberStep { member: i, step, loss }));
        members.push(p);
    }
    Ok((EnsembleModel { members, fgsm_epsilon: cfg.fgsm_epsilon, feature_scale: scale }, trace))
}

impl EnsembleModel {
    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// Eval-mode softmax of each member.
    pub fn member_probs(&self, xs: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.members.iter().map(|m| Ok(softmax_rows(&mlp_forward(m, xs, Mode::Eval)?))).collect()
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, &EnsembleFile::from(self))?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        let file: EnsembleFile = serde_json::from_reader(reader)?;
        file.try_into()
    }
}

/// Mean of the member softmax outputs.
pub fn ensemble_predict(model: &EnsembleModel, xs: ArrayView2<f64>) -> Result<Vec<ClassProbs>> {
    if model.members.is_empty() {
        return Err(Error::InvalidModel("ensemble has no members".into()));
    }
    let dim = model.input_dim();
    if model.members.iter().any(|m| m.input_dim() != dim || m.num_classes() != NUM_CLASSES) {
        return Err(Error::InvalidModel("members disagree on shape".into()));
    }
    let per_member = model.member_probs(xs)?;
    let k = per_member.len() as f64;
    Ok((0..xs.nrows())
        .map(|n| {
            let mut p = [0.0; NUM_CLASSES];
            for m in &per_member {
                for (j, v) in p.iter_mut().enumerate() {
                    *v += m[[n, j]];
                }
            }
            ClassProbs(p.map(|v| v / k))
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct LayerBlock {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MemberBlock {
    hidden: Vec<LayerBlock>,
    out_weight: Vec<Vec<f64>>,
    out_bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    format: String,
    version: u32,
    dim: usize,
    fgsm_epsilon: f64,
    feature_scale: Vec<f64>,
    members: Vec<MemberBlock>,
}

impl From<&EnsembleModel> for EnsembleFile {
    fn from(m: &EnsembleModel) -> Self {
        use crate::svgp::rows_of;
        EnsembleFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dim: m.members.first().map_or(0, |p| p.input_dim()),
            fgsm_epsilon: m.fgsm_epsilon,
            feature_scale: m.feature_scale.clone(),
            members: m
                .members
                .iter()
                .map(|p| MemberBlock {
                    hidden: p
                        .hidden
                        .iter()
                        .map(|l| LayerBlock {
                            weight: rows_of(&l.weight),
                            bias: l.bias.to_vec(),
                            gamma: l.gamma.to_vec(),
                            beta: l.beta.to_vec(),
                            running_mean: l.running_mean.to_vec(),
                            running_var: l.running_var.to_vec(),
                        })
                        .collect(),
                    out_weight: rows_of(&p.out_weight),
                    out_bias: p.out_bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<EnsembleFile> for EnsembleModel {
    type Error = Error;

    fn try_from(f: EnsembleFile) -> Result<Self> {
        use crate::svgp::matrix_from_rows;
        use ndarray::Array1;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::InvalidModel(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                f.format, f.version
            )));
        }
        if f.members.is_empty() {
            return Err(Error::InvalidModel("ensemble has no members".into()));
        }
        if f.feature_scale.len() != f.dim {
            return Err(Error::InvalidModel("feature_scale length disagrees with dim".into()));
        }
        let mut members = Vec::with_capacity(f.members.len());
        for block in f.members {
            let mut fan_in = f.dim;
            let mut hidden = Vec::new();
            for l in block.hidden {
                let weight = matrix_from_rows(&l.weight, l.bias.len())?;
                let width = weight.ncols();
                if weight.nrows() != fan_in
                    || [l.gamma.len(), l.beta.len(), l.running_mean.len(), l.running_var.len()]
                        .iter()
                        .any(|&n| n != width)
                {
                    return Err(Error::InvalidModel("hidden layer shapes do not chain".into()));
                }
                if l.running_var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidModel("running variance must be positive".into()));
                }
                hidden.push(HiddenLayer {
                    weight,
                    bias: Array1::from(l.bias),
                    gamma: Array1::from(l.gamma),
                    beta: Array1::from(l.beta),
                    running_mean: Array1::from(l.running_mean),
                    running_var: Array1::from(l.running_var),
                });
                fan_in = width;
            }
            let out_weight = matrix_from_rows(&block.out_weight, block.out_bias.len())?;
            if out_weight.nrows() != fan_in {
                return Err(Error::InvalidModel("output layer does not chain".into()));
            }
            members.push(MlpParams { hidden, out_weight, out_bias: Array1::from(block.out_bias) });
        }
        Ok(EnsembleModel { members, fgsm_epsilon: f.fgsm_epsilon, feature_scale: f.feature_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[-2.0, 0.0], [2.0, 0.0], [0.0, 3.0]];
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let xs = Array2::from_shape_fn((n, 2), |(i, j)| centres[labels[i]][j] + rng.random_range(-0.7..0.7));
        (xs, labels)
    }

    fn small_cfg() -> EnsembleConfig {
        EnsembleConfig { members: 2, width: 16, depth: 2, epochs: 20, batch_size: 50, ..EnsembleConfig::default() }
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..11).collect();
        let b = batches(&order, 5);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![5, 6]);
        assert_eq!(batches(&order[..10], 5).len(), 2);
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let (xs, ys) = blobs(60, 0);
        let cfg = EnsembleConfig { learning_rate: 0.0, ..small_cfg() };
        let scale = feature_scale(xs.view());
        let (p, _) = fit_member(xs.view(), &ys, &scale, &cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init = MlpParams::he_uniform(2, 16, 2, 3, &mut rng);
        assert_eq!(p.params_flat(), init.params_flat());
        assert_ne!(p.running_stats(), init.running_stats());
    }

    #[test]
    fn member_training_is_deterministic_and_fits_blobs() {
        let (xs, ys) = blobs(300, 1);
        let cfg = small_cfg();
        let scale = feature_scale(xs.view());
        let (a, _) = fit_member(xs.view(), &ys, &scale, &cfg, 3).unwrap();
        let (b, _) = fit_member(xs.view(), &ys, &scale, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let logits = mlp_forward(&a, xs.view(), Mode::Eval).unwrap();
        let hits = logits
            .outer_iter()
            .zip(&ys)
            .filter(|(row, y)| {
                let best = (0..3).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == **y
            })
            .count();
        assert!(hits as f64 / 300.0 >= 0.95, "accuracy {}", hits as f64 / 300.0);
    }

    #[test]
    fn single_and_identical_members() {
        let (xs, ys) = blobs(90, 2);
        let cfg = EnsembleConfig { members: 1, epochs: 2, ..small_cfg() };
        let (one, _) = fit_ensemble(xs.view(), &ys, &cfg).unwrap();
        let p1 = ensemble_predict(&one, xs.view()).unwrap();
        let member = softmax_rows(&mlp_forward(&one.members[0], xs.view(), Mode::Eval).unwrap());
        for (n, p) in p1.iter().enumerate() {
            for j in 0..3 {
                assert_eq!(p.0[j], member[[n, j]]);
            }
        }
        let five = EnsembleModel { members: vec![one.members[0].clone(); 5], ..one.clone() };
        let p5 = ensemble_predict(&five, xs.view()).unwrap();
        for (a, b) in p1.iter().zip(&p5) {
            for j in 0..3 {
                assert!((a.0[j] - b.0[j]).abs() < 1e-15);
            }
            assert!((b.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let (xs, ys) = blobs(60, 3);
        let cfg = EnsembleConfig { epochs: 1, ..small_cfg() };
        let (model, _) = fit_ensemble(xs.view(), &ys, &cfg).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        assert_eq!(EnsembleModel::load(buf.as_slice()).unwrap(), model);
    }
}
