use std::path::Path;
use std::process::{Command, Output};

use flowgnn_cli::config::RunConfig;

fn flowgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowgnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn causal_on_var_pair_marks_the_planted_edge() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("var");
    assert_eq!(code(&flowgnn(&["synth", "--kind", "var", "--length", "20000", "--seed", "2", "--out", p(&data)])), 0);
    let out = dir.path().join("c");
    let o = flowgnn(&["causal", p(&data.join("var.bin")), "--surrogates", "200", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = flowgnn::graphs::import_graph(&out.join("graph.json")).unwrap();
    assert!(g.adjacency[(0, 1)] > 0.0);
    assert_eq!(g.adjacency[(1, 0)], 0.0);
    let flow = std::fs::read_to_string(out.join("flow.csv")).unwrap();
    assert_eq!(flow.lines().count(), 3);
    assert!(std::fs::read_to_string(out.join("graph.dot")).unwrap().contains("n0 -> n1"));

    let dense = dir.path().join("d");
    assert_eq!(code(&flowgnn(&["causal", p(&data.join("var.bin")), "--alpha", "1.0", "--out", p(&dense)])), 0);
    let g = flowgnn::graphs::import_graph(&dense.join("graph.json")).unwrap();
    assert_eq!(g.edge_count(), 2);
}

#[test]
fn csv_input_needs_a_rate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("var");
    flowgnn(&["synth", "--kind", "var", "--length", "3000", "--csv", "--out", p(&data)]);
    let csv = data.join("var.csv");
    assert_eq!(code(&flowgnn(&["causal", p(&csv), "--out", p(dir.path())])), 2);
    let o = flowgnn(&["causal", p(&csv), "--rate", "100", "--alpha", "1", "--out", p(&dir.path().join("c"))]);
    assert_eq!(code(&o), 0);
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    assert_eq!(code(&flowgnn(&["causal", p(&missing), "--out", p(dir.path())])), 2);
    assert_eq!(code(&flowgnn(&["preprocess", p(&dir.path().join("nope.json")), "--out", p(dir.path())])), 2);
    assert_eq!(code(&flowgnn(&["compare", p(&dir.path().join("nope.json")), "--topk", "0"])), 2);
    assert_eq!(code(&flowgnn(&["causal", p(&missing), "--alpha", "1.5"])), 2);
    assert_eq!(code(&flowgnn(&["frobnicate"])), 2);
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a trial").unwrap();
    assert_eq!(code(&flowgnn(&["causal", p(&garbage), "--out", p(dir.path())])), 2);
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&flowgnn(&["train", "--report-params", "--config", p(&bad_cfg)])), 2);
}

#[test]
fn report_params_prints_the_count() {
    let o = flowgnn(&["train", "--report-params"]);
    assert_eq!(code(&o), 0);
    let n: usize = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert_eq!(n, flowgnn::model::ModelConfig::default_32().param_count());
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[causality]\nalpha = 0.05\nsurrogates = 300\n[compare]\ntopk = 4\n").unwrap();
    let o = flowgnn(&["config", "--config", p(&cfg), "--alpha", "0.02"]);
    assert_eq!(code(&o), 0);
    let echoed = RunConfig::parse(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(echoed.causality.alpha, 0.02);
    assert_eq!(echoed.causality.surrogates, 300);
    assert_eq!(echoed.compare.topk, 4);
}

#[test]
fn preprocess_train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = flowgnn(&["synth", "--trials", "8", "--seconds", "12", "--out", p(&data)]);
    assert_eq!(code(&o), 0);
    let pp = dir.path().join("pp");
    let manifest = data.join("manifest.json");
    let o = flowgnn(&["preprocess", p(&manifest), "--surrogates", "100", "--out", p(&pp)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pp.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["windows"], 24);
    assert_eq!(summary["local_block_diagonal"], true);
    let echo = RunConfig::load(&pp.join("run_config.toml")).unwrap();
    assert_eq!(echo.paths.dataset.as_deref(), Some(manifest.as_path()));

    let cfg = dir.path().join("short.toml");
    std::fs::write(&cfg, "[train]\nouter_folds = 2\ninner_folds = 2\nstage1_epochs = 3\nstage2_epochs = 1\n").unwrap();
    let tr = dir.path().join("tr");
    let samples = pp.join("samples.json");
    let o = flowgnn(&["train", p(&samples), "--config", p(&cfg), "--out", p(&tr)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tr.join("metrics.json")).unwrap()).unwrap();
    for key in ["mean_accuracy", "std_accuracy", "mean_f1", "std_f1"] {
        assert!(metrics[key].is_f64(), "{key}");
    }
    assert_eq!(metrics["folds"].as_array().unwrap().len(), 2);
    assert!(tr.join("weights/fold_00.bin").exists() && tr.join("weights/fold_01.bin").exists());
    let attention = std::fs::read_to_string(tr.join("attention.csv")).unwrap();
    assert_eq!(attention.lines().count(), 33);
    assert_eq!(std::fs::read_to_string(tr.join("curves.csv")).unwrap().lines().count(), 1 + 2 * 4);

    let ev = dir.path().join("ev");
    let o = flowgnn(&["eval", p(&samples), "--weights", p(&tr.join("weights/fold_00.bin")), "--out", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ev.join("eval.json").exists());
}

#[test]
fn failed_training_leaves_no_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    flowgnn(&["synth", "--trials", "4", "--seconds", "8", "--out", p(&data)]);
    let pp = dir.path().join("pp");
    flowgnn(&["preprocess", p(&data.join("manifest.json")), "--alpha", "1", "--out", p(&pp)]);
    // Two trials per class cannot fill five outer folds.
    let o = flowgnn(&["train", p(&pp.join("samples.json")), "--out", p(&pp)]);
    assert_eq!(code(&o), 3);
    assert!(!pp.join("metrics.json").exists());
    let leftovers = std::fs::read_dir(&pp)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".partial"))
        .count();
    assert_eq!(leftovers, 0);
}
