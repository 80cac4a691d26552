use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gpuq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpuq")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gpuq(args);
    assert!(out.status.success(), "gpuq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = gpuq(args);
    assert_eq!(out.status.code(), Some(1), "gpuq {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path, rate: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--out-dir",
        s(&data),
        "--seed",
        "3",
        "--set",
        "num_examples=600",
        "--set",
        &format!("disagreement_rate={rate}"),
        "--set",
        "dim=12",
    ]);
    data
}

#[test]
fn prepare_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.csv");
    let emb = dir.path().join("emb.txt");
    std::fs::write(
        &corpus,
        "id,text,primary_label,secondary_label\n\
         a,No edema.,negative,negative\n\
         b,Edema!,positive,positive\n\
         c,possible edema,uncertain,negative\n\
         d,\"no, possible\",uncertain,uncertain\n\
         e,unrelated words,negative,\n\
         f,EDEMA edema,positive,uncertain\n",
    )
    .unwrap();
    std::fs::write(&emb, "3 2\nno 1 0\nedema 0 1\npossible 0.5 0.5\n").unwrap();
    let out = dir.path().join("features.csv");
    let stdout = ok(&["prepare", "--corpus", s(&corpus), "--embeddings", s(&emb), "--out", s(&out), "--seed", "0"]);
    assert!(stdout.contains("6 examples, dimension 2"), "{stdout}");
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,label,secondary_label,f0,f1");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("a,negative,negative,5.0000000000000000e-1,5.0000000000000000e-1"));
    assert!(lines[5].starts_with("e,negative,,0"));
}

#[test]
fn missing_embedding_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.csv");
    std::fs::write(&corpus, "id,text,primary_label,secondary_label\na,x,negative,negative\n").unwrap();
    let missing = dir.path().join("nope.txt");
    let out = dir.path().join("f.csv");
    let err = fails(&["prepare", "--corpus", s(&corpus), "--embeddings", s(&missing), "--out", s(&out), "--seed", "0"]);
    assert!(err.contains("nope.txt"), "{err}");
    assert!(!out.exists());
}

#[test]
fn bad_corpus_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.csv");
    let emb = dir.path().join("emb.txt");
    std::fs::write(&corpus, "id,text,primary_label,secondary_label\na,x,negative,negative\nb,y,sideways,\n").unwrap();
    std::fs::write(&emb, "1 1\nx 1\n").unwrap();
    let out = dir.path().join("f.csv");
    let split = dir.path().join("split");
    let err = fails(&[
        "prepare",
        "--corpus",
        s(&corpus),
        "--embeddings",
        s(&emb),
        "--out",
        s(&out),
        "--split-dir",
        s(&split),
        "--seed",
        "0",
    ]);
    assert!(err.contains("line 3"), "{err}");
    assert!(!out.exists() && !split.exists());
}

#[test]
fn seed_and_config_keys_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["synth", "--out-dir", s(dir.path())]);
    assert!(err.contains("seed"), "{err}");
    let err = fails(&["synth", "--out-dir", s(dir.path()), "--seed", "1", "--set", "num_exampels=5"]);
    assert!(err.contains("num_exampels"), "{err}");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 2\nnum_examples = 50\n").unwrap();
    ok(&["synth", "--out-dir", s(dir.path()), "--config", s(&cfg)]);
    assert!(dir.path().join("corpus.csv").exists());
}

#[test]
fn synth_round_trips_through_prepare() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out-dir", s(&data), "--seed", "5", "--set", "num_examples=1000", "--set", "dim=8"]);
    let out = dir.path().join("features.csv");
    let stdout = ok(&[
        "prepare",
        "--corpus",
        s(&data.join("corpus.csv")),
        "--embeddings",
        s(&data.join("embeddings.txt")),
        "--out",
        s(&out),
        "--seed",
        "5",
    ]);
    assert!(stdout.contains("1000 examples, dimension 8"), "{stdout}");
}

#[test]
fn single_member_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path(), "0.1");
    let split = dir.path().join("split");
    ok(&[
        "prepare",
        "--corpus",
        s(&data.join("corpus.csv")),
        "--embeddings",
        s(&data.join("embeddings.txt")),
        "--out",
        s(&dir.path().join("all.csv")),
        "--split-dir",
        s(&split),
        "--seed",
        "1",
    ]);
    let model = dir.path().join("ens");
    ok(&[
        "train",
        "--model",
        "ens",
        "--train",
        s(&split.join("train.csv")),
        "--out-dir",
        s(&model),
        "--seed",
        "1",
        "--set",
        "members=1",
        "--set",
        "width=8",
        "--set",
        "epochs=1",
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("model.json")).unwrap()).unwrap();
    assert_eq!(json["members"].as_array().unwrap().len(), 1);
    assert!(std::fs::read_to_string(model.join("trace.csv")).unwrap().starts_with("member,step,objective\n"));
}

#[test]
fn evaluate_refuses_without_inconsistent_examples() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path(), "0");
    let split = dir.path().join("split");
    ok(&[
        "prepare",
        "--corpus",
        s(&data.join("corpus.csv")),
        "--embeddings",
        s(&data.join("embeddings.txt")),
        "--out",
        s(&dir.path().join("all.csv")),
        "--split-dir",
        s(&split),
        "--seed",
        "1",
    ]);
    let model = dir.path().join("gp");
    ok(&[
        "train",
        "--model",
        "gp",
        "--train",
        s(&split.join("train.csv")),
        "--out-dir",
        s(&model),
        "--seed",
        "1",
        "--set",
        "num_inducing=8",
    ]);
    let err = fails(&[
        "evaluate",
        "--model-file",
        s(&model.join("model.json")),
        "--test",
        s(&split.join("test.csv")),
        "--out-dir",
        s(&dir.path().join("eval")),
        "--seed",
        "1",
    ]);
    assert!(err.contains("inconsistent test set is empty"), "{err}");
}

#[test]
fn missing_model_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let test = dir.path().join("test.csv");
    std::fs::write(&test, "id,label,secondary_label,f0\n").unwrap();
    let err = fails(&[
        "evaluate",
        "--model-file",
        s(&dir.path().join("absent.json")),
        "--test",
        s(&test),
        "--out-dir",
        s(dir.path()),
        "--seed",
        "0",
    ]);
    assert!(err.contains("absent.json"), "{err}");
}

#[test]
fn default_gp_run_and_report_layout() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path(), "0.1");
    let split = dir.path().join("split");
    ok(&[
        "prepare",
        "--corpus",
        s(&data.join("corpus.csv")),
        "--embeddings",
        s(&data.join("embeddings.txt")),
        "--out",
        s(&dir.path().join("all.csv")),
        "--split-dir",
        s(&split),
        "--seed",
        "2",
    ]);
    let model = dir.path().join("gp");
    ok(&["train", "--model", "gp", "--train", s(&split.join("train.csv")), "--out-dir", s(&model), "--seed", "2"]);
    let trace = std::fs::read_to_string(model.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,epoch,objective\n"));
    // 480 training rows, batch 500, 2 epochs.
    assert_eq!(trace.lines().count(), 1 + 2);

    let eval = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--model-file",
        s(&model.join("model.json")),
        "--test",
        s(&split.join("test.csv")),
        "--out-dir",
        s(&eval),
        "--seed",
        "2",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let names: Vec<&str> =
        report["test_sets"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["NegINCONSTest", "CheXINCONSTest", "CONSTest"]);
    for set in report["test_sets"].as_array().unwrap() {
        assert!(set["accuracy"].is_f64() && set["nlpp"].is_f64());
        let mut cells: Vec<(String, String)> = set["groups"]
            .as_array()
            .unwrap()
            .iter()
            .map(|g| (g["group"].as_str().unwrap().to_string(), g["class"].as_str().unwrap().to_string()))
            .collect();
        cells.sort();
        assert_eq!(
            cells,
            [("FN", "positive"), ("FN", "uncertain"), ("TP", "positive"), ("TP", "uncertain")]
                .map(|(a, b)| (a.to_string(), b.to_string()))
        );
    }
    let rel = std::fs::read_to_string(eval.join("reliability_constest.csv")).unwrap();
    assert!(rel.starts_with("bin_low,bin_high,mean_predicted,fraction_positive,count\n"));
}
