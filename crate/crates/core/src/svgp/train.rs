use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::elbo::elbo_and_grad;
use super::{noise, SvgpModel, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub epoch: usize,
    pub elbo: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub entries: Vec<TraceEntry>,
}

impl TrainTrace {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,epoch,objective")?;
        for e in &self.entries {
            writeln!(w, "{},{},{:.17e}", e.step, e.epoch, e.elbo)?;
        }
        Ok(())
    }
}

/// Shuffles rows for one epoch; the order depends only on `(seed, epoch)`.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise::key(seed, 0x5348_5546, epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Stochastic ELBO ascent with RMSProp over `epochs × ⌈N / batch_size⌉`
/// minibatches. Monte-Carlo noise for an example is keyed by
/// `(seed, epoch, example index)`.
pub fn fit(
    model: &SvgpModel,
    xs: ArrayView2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(SvgpModel, TrainTrace)> {
    cfg.validate()?;
    let n = xs.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    model.check_inputs(xs)?;

    let mut model = model.clone();
    let with_z = cfg.optimize_inducing;
    let mut params = model.params_flat(with_z);
    let mut mean_sq = vec![0.0; params.len()];
    let mut trace = TrainTrace::default();
    let classes = model.num_classes();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let bx = xs.select(Axis(0), batch);
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let eps = noise::draw(cfg.seed, epoch as u64, batch, classes, cfg.mc_train_samples);
            let (elbo, grad) = elbo_and_grad(&model, bx.view(), &by, n, eps.view(), with_z)?;
            let grad = grad.flatten(with_z);
            if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            trace.entries.push(TraceEntry { step, epoch, elbo });

            let rho = cfg.rmsprop_decay;
            for ((p, ms), g) in params.iter_mut().zip(mean_sq.iter_mut()).zip(&grad) {
                *ms = rho * *ms + (1.0 - rho) * g * g;
                // Ascent: the ELBO is maximised.
                *p += cfg.learning_rate * g / (ms.sqrt() + cfg.rmsprop_epsilon);
            }
            model.set_params_flat(&params, with_z)?;
            step += 1;
        }
        log::debug!("epoch {epoch} done after {step} steps");
    }
    Ok((model, trace))
}
