//! Synthetic end-to-end run: generate a corpus, train both models, and print
//! accuracy, NLPP and MMPCL on the three evaluation views.
//!
//! `cargo run --release -p gpuq --example rehearsal -- [seed] [members]`

use std::time::Instant;

use gpuq::corpus::{
    embed_corpus, make_test_views, stratified_split, synth_generate, synthetic_embeddings, to_arrays, SplitSpec,
    SynthConfig, TestViews,
};
use gpuq::ensemble::{ensemble_predict, fit_ensemble, EnsembleConfig};
use gpuq::metrics::{accuracy, mmpcl, nlpp};
use gpuq::svgp::{fit, init_model, predict_proba, TrainConfig};
use gpuq::ClassProbs;
use ndarray::Array2;

fn main() -> gpuq::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let members: usize = args.next().map_or(5, |s| s.parse().expect("members must be an integer"));

    let cfg = SynthConfig::default();
    let raw = synth_generate(&cfg, seed)?;
    let table = synthetic_embeddings(cfg.dim, seed)?;
    let (examples, _) = embed_corpus(&raw, &table);
    let split = stratified_split(&examples, &SplitSpec { seed, ..Default::default() })?;
    let views = make_test_views(&split.test, seed)?;
    let (xs, ys) = to_arrays(&split.train)?;
    println!("train {} | each view {} examples", xs.nrows(), views.cons.len());

    let t = Instant::now();
    let gp_cfg = TrainConfig { seed, ..Default::default() };
    let (model, trace) = fit(&init_model(xs.view(), 64, seed)?, xs.view(), &ys, &gp_cfg)?;
    println!("gp: {} steps in {:.1?}", trace.entries.len(), t.elapsed());
    report("gp", &views, |x| predict_proba(&model, x.view(), gp_cfg.mc_predict_samples, seed))?;

    let t = Instant::now();
    let (ens, _) = fit_ensemble(xs.view(), &ys, &EnsembleConfig { seed, members, ..Default::default() })?;
    println!("ens: {members} members in {:.1?}", t.elapsed());
    report("ens", &views, |x| ensemble_predict(&ens, x.view()))?;
    Ok(())
}

fn report(
    name: &str,
    views: &TestViews,
    predict: impl Fn(&Array2<f64>) -> gpuq::Result<Vec<ClassProbs>>,
) -> gpuq::Result<()> {
    for v in views.all() {
        let probs = predict(&v.feature_matrix())?;
        let ys = v.label_indices();
        println!(
            "{name:4} {:15} acc {:.3}  nlpp {:.3}  mmpcl {:.3}",
            v.name,
            accuracy(&probs, &ys)?,
            nlpp(&probs, &ys)?,
            mmpcl(&probs)?
        );
    }
    Ok(())
}
