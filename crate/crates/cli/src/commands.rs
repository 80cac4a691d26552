use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use gpuq::calibration::{ClassCalibrator, ReliabilityBins};
use gpuq::corpus::{
    embed_corpus, load_embeddings, make_test_views, read_corpus_csv, read_features_csv, stratified_split,
    synth_generate, synthetic_embeddings, to_arrays, write_corpus_csv, write_features_csv, Agreement, LabelledExample,
    SplitSpec, SynthConfig, CONS_TEST,
};
use gpuq::ensemble::{ensemble_predict, fit_ensemble, EnsembleConfig, EnsembleModel};
use gpuq::metrics::{build_report, NamedPredictions, ReportOptions};
use gpuq::svgp::{fit, init_model, predict_proba, SvgpModel, TrainConfig, DEFAULT_NUM_INDUCING};
use gpuq::{ClassProbs, Label};

use crate::{config, plot, CliError, ConfigArgs, ModelKind};

/// Writes every file or none: on failure, files already written are removed.
fn write_all(files: Vec<(PathBuf, Vec<u8>)>) -> Result<(), CliError> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        for (path, bytes) in &files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
            written.push(path.clone());
        }
        Ok(())
    })();
    if result.is_err() {
        for p in written {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn read_features(path: &Path) -> Result<Vec<LabelledExample>, CliError> {
    read_features_csv(open(path)?).map_err(|e| e.in_file(path).into())
}

fn features_bytes(examples: &[LabelledExample]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_features_csv(&mut buf, examples)?;
    Ok(buf)
}

pub fn synth(out_dir: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let mut table = config::load(args.config.as_deref(), &args.overrides)?;
    let seed = config::seed(args.seed, &mut table)?;
    let cfg: SynthConfig = config::finish(table, "synth")?;
    let corpus = synth_generate(&cfg, seed)?;
    let embeddings = synthetic_embeddings(cfg.dim, seed)?;

    let mut corpus_csv = Vec::new();
    write_corpus_csv(&mut corpus_csv, &corpus)?;
    let mut emb = Vec::new();
    embeddings.write(&mut emb).map_err(gpuq::Error::from)?;
    write_all(vec![(out_dir.join("corpus.csv"), corpus_csv), (out_dir.join("embeddings.txt"), emb)])?;

    let disagree = corpus.iter().filter(|e| Some(e.primary_label) != e.secondary_label).count();
    println!(
        "wrote {} reports ({} with labeller disagreement) and {} embeddings to {}",
        corpus.len(),
        disagree,
        embeddings.len(),
        out_dir.display()
    );
    Ok(())
}

fn print_counts(examples: &[LabelledExample]) {
    let mut counts: BTreeMap<(usize, Agreement), usize> = BTreeMap::new();
    for e in examples {
        *counts.entry((e.primary_label.index(), e.agreement())).or_default() += 1;
    }
    println!("{:<10} {:>10} {:>12} {:>8}", "class", "consistent", "inconsistent", "unknown");
    for label in Label::ALL {
        let get = |a| counts.get(&(label.index(), a)).copied().unwrap_or(0);
        println!(
            "{:<10} {:>10} {:>12} {:>8}",
            label.as_str(),
            get(Agreement::Consistent),
            get(Agreement::Inconsistent),
            get(Agreement::Unknown)
        );
    }
}

pub fn prepare(
    corpus: &Path,
    embeddings: &Path,
    out: &Path,
    split_dir: Option<&Path>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let mut table = config::load(args.config.as_deref(), &args.overrides)?;
    let seed = config::seed(args.seed, &mut table)?;
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    let spec: SplitSpec = config::finish(table, "prepare")?;
    let spec = SplitSpec { seed, ..spec };

    let table = load_embeddings(embeddings)?;
    let raw = read_corpus_csv(open(corpus)?).map_err(|e| e.in_file(corpus))?;
    let (examples, flagged) = embed_corpus(&raw, &table);
    if !flagged.is_empty() {
        log::warn!("{} reports have no in-vocabulary token and were embedded as zeros", flagged.len());
    }

    let mut files = vec![(out.to_path_buf(), features_bytes(&examples)?)];
    if let Some(dir) = split_dir {
        let split = stratified_split(&examples, &spec)?;
        for (name, part) in [("train.csv", &split.train), ("val.csv", &split.val), ("test.csv", &split.test)] {
            files.push((dir.join(name), features_bytes(part)?));
        }
        println!("split: train {} / val {} / test {}", split.train.len(), split.val.len(), split.test.len());
    }
    write_all(files)?;
    println!("{} examples, dimension {}", examples.len(), table.dim());
    print_counts(&examples);
    Ok(())
}

pub fn train(kind: Option<ModelKind>, train: &Path, out_dir: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let mut table = config::load(args.config.as_deref(), &args.overrides)?;
    let seed = config::seed(args.seed, &mut table)?;
    let from_file: Option<String> = config::take(&mut table, "model")?;
    let kind = match (kind, from_file.as_deref()) {
        (Some(k), _) => k,
        (None, Some("gp")) => ModelKind::Gp,
        (None, Some("ens")) => ModelKind::Ens,
        (None, Some(other)) => return Err(CliError::Usage(format!("unknown model {other:?}; use gp or ens"))),
        (None, None) => return Err(CliError::Usage("choose a model with --model gp|ens".into())),
    };
    let examples = read_features(train)?;
    let (xs, ys) = to_arrays(&examples)?;

    let mut model_json = Vec::new();
    let mut trace_csv = Vec::new();
    match kind {
        ModelKind::Gp => {
            let m: usize = config::take(&mut table, "num_inducing")?.unwrap_or(DEFAULT_NUM_INDUCING);
            let cfg = TrainConfig { seed, ..config::finish(table, "gp")? };
            let init = init_model(xs.view(), m.min(xs.nrows()), seed)?;
            let (model, trace) = fit(&init, xs.view(), &ys, &cfg)?;
            model.save(&mut model_json)?;
            trace.write_csv(&mut trace_csv).map_err(gpuq::Error::from)?;
            if let (Some(first), Some(last)) = (trace.entries.first(), trace.entries.last()) {
                println!("gp: {} steps, minibatch ELBO {:.3} -> {:.3}", trace.entries.len(), first.elbo, last.elbo);
            }
        }
        ModelKind::Ens => {
            let cfg = EnsembleConfig { seed, ..config::finish(table, "ens")? };
            let (model, trace) = fit_ensemble(xs.view(), &ys, &cfg)?;
            model.save(&mut model_json)?;
            trace_csv.extend_from_slice(b"member,step,objective\n");
            for s in &trace {
                trace_csv.extend_from_slice(format!("{},{},{:.17e}\n", s.member, s.step, s.loss).as_bytes());
            }
            println!("ens: {} members, {} steps", cfg.members, trace.len());
        }
    }
    write_all(vec![(out_dir.join("model.json"), model_json), (out_dir.join("trace.csv"), trace_csv)])
}

enum LoadedModel {
    Gp(SvgpModel),
    Ens(EnsembleModel),
}

impl LoadedModel {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let header: serde_json::Value = serde_json::from_str(&text).map_err(|e| gpuq::Error::from(e).in_file(path))?;
        let wrap = |e: gpuq::Error| CliError::from(e.in_file(path));
        match header.get("format").and_then(|f| f.as_str()) {
            Some(gpuq::svgp::MODEL_FORMAT) => Ok(LoadedModel::Gp(SvgpModel::load(text.as_bytes()).map_err(wrap)?)),
            Some(gpuq::ensemble::MODEL_FORMAT) => {
                Ok(LoadedModel::Ens(EnsembleModel::load(text.as_bytes()).map_err(wrap)?))
            }
            other => Err(CliError::Usage(format!("{}: unrecognised model format {other:?}", path.display()))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LoadedModel::Gp(_) => "gp",
            LoadedModel::Ens(_) => "ens",
        }
    }

    fn predict(&self, rows: &[Vec<f64>], samples: usize, seed: u64) -> Result<Vec<ClassProbs>, CliError> {
        let xs = gpuq::corpus::feature_matrix(rows)?;
        Ok(match self {
            LoadedModel::Gp(m) => predict_proba(m, xs.view(), samples, seed)?,
            LoadedModel::Ens(m) => ensemble_predict(m, xs.view())?,
        })
    }
}

pub struct EvalOptions {
    pub calibrate: bool,
    pub zero_empty_groups: bool,
    pub mc_samples: Option<usize>,
}

pub fn evaluate(
    model_file: &Path,
    test: &Path,
    val: Option<&Path>,
    out_dir: &Path,
    opts: &EvalOptions,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let mut table = config::load(args.config.as_deref(), &args.overrides)?;
    let seed = config::seed(args.seed, &mut table)?;
    let samples_key: Option<usize> = config::take(&mut table, "mc_predict_samples")?;
    if let Some(key) = table.keys().next() {
        return Err(CliError::Usage(format!("evaluate config: unknown key `{key}`")));
    }
    let samples = opts.mc_samples.or(samples_key).unwrap_or(TrainConfig::default().mc_predict_samples);

    let model = LoadedModel::load(model_file)?;
    let test_examples = read_features(test)?;
    let views = make_test_views(&test_examples, seed)?;

    let calibrator = if opts.calibrate {
        let path = val.ok_or_else(|| CliError::Usage("--calibrate needs --val".into()))?;
        let val_examples = read_features(path)?;
        let rows: Vec<Vec<f64>> = val_examples.iter().map(|e| e.features.clone()).collect();
        let labels: Vec<usize> = val_examples.iter().map(|e| e.primary_label.index()).collect();
        let probs = model.predict(&rows, samples, seed)?;
        Some(ClassCalibrator::fit(&probs, &labels)?)
    } else {
        None
    };

    let mut sets = Vec::new();
    for v in views.all() {
        let mut probs = model.predict(&v.features, samples, seed)?;
        if let Some(cal) = &calibrator {
            probs = probs.iter().map(|p| cal.apply(p)).collect();
        }
        sets.push(NamedPredictions { name: v.name.clone(), probs, labels: v.label_indices() });
    }
    let report_opts = ReportOptions {
        model: model.name().into(),
        calibrated: calibrator.is_some(),
        reliability_for: vec![CONS_TEST.into()],
        ..Default::default()
    };
    let report = build_report(&sets, &report_opts)?;

    let mut csv = Vec::new();
    report.write_csv(&mut csv, opts.zero_empty_groups).map_err(gpuq::Error::from)?;
    let mut reliability = Vec::new();
    report
        .set(CONS_TEST)
        .and_then(|s| s.reliability.as_ref())
        .expect("requested above")
        .write_csv(&mut reliability)
        .map_err(gpuq::Error::from)?;
    let mut json = report.to_json()?.into_bytes();
    json.push(b'\n');
    write_all(vec![
        (out_dir.join("report.json"), json),
        (out_dir.join("report.csv"), csv),
        (out_dir.join("reliability_constest.csv"), reliability),
    ])?;

    println!("{:<15} {:>6} {:>8} {:>8} {:>8}", "test set", "n", "acc", "nlpp", "mmpcl");
    for s in &report.test_sets {
        println!("{:<15} {:>6} {:>8.4} {:>8.4} {:>8.4}", s.name, s.size, s.accuracy, s.nlpp, s.mmpcl);
    }
    Ok(())
}

pub fn report(reliability: &Path, out: &Path, title: &str) -> Result<(), CliError> {
    let bins = ReliabilityBins::read_csv(open(reliability)?).map_err(|e| e.in_file(reliability))?;
    write_all(vec![(out.to_path_buf(), plot::reliability_svg(&bins, title).into_bytes())])?;
    println!("wrote {}", out.display());
    Ok(())
}
