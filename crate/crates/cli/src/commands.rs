//! Subcommand implementations. Every output file is written atomically
//! and contains no timestamps, so a fixed seed gives identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowgnn::causality::analyze;
use flowgnn::data::{
    decode_trial, generate_emotion_synthetic, generate_var, read_trial_csv, save_trial, save_trial_csv, write_atomic,
    DatasetManifest, EmotionSynthConfig, VarSystemSpec,
};
use flowgnn::graphs::{build_global_adjacency, graph_to_dot, graph_to_json, is_block_diagonal, RegionMap};
use flowgnn::model::{attention_csv, export_attention, mean_attention, ModelState};
use flowgnn::pipeline::{preprocess_dataset, preprocess_for_comparison, GraphMethod, SampleSet};
use flowgnn::train::{evaluate, holdout, nested_cv, wilcoxon_signed_rank, Comparison, MetricsReport, NestedCvOutcome};
use flowgnn::{Error, TimeSeriesSet};
use log::info;
use serde::Serialize;

use crate::config::{RunConfig, ECHO_FILE};
use crate::{input, CliResult};

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    write_atomic(&dir.join(name), text.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write(dir, name, &(text + "\n"))
}

/// Writes the resolved config, with the inputs actually used, to `dir`.
fn echo(dir: &Path, cfg: &RunConfig, dataset: Option<&Path>, samples: Option<&Path>) -> CliResult<()> {
    let mut cfg = cfg.clone();
    if let Some(d) = dataset {
        cfg.paths.dataset = Some(d.to_path_buf());
    }
    if let Some(s) = samples {
        cfg.paths.samples = Some(s.to_path_buf());
    }
    write(dir, ECHO_FILE, &cfg.to_toml()?)
}

fn dataset_path(cfg: &RunConfig, given: Option<PathBuf>) -> CliResult<PathBuf> {
    given
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset manifest given (argument or paths.dataset)".into()).into())
}

fn read_series(path: &Path, rate_hz: Option<f64>) -> flowgnn::Result<TimeSeriesSet> {
    if path.extension().is_some_and(|e| e == "csv") {
        let rate = rate_hz.ok_or_else(|| Error::Config("CSV input needs --rate".into()))?;
        read_trial_csv(path, rate)
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_trial(&bytes, path)
    }
}

/// Flow of one recording: `graph.json`, `graph.dot` and `flow.csv`.
pub fn causal(cfg: &RunConfig, path: &Path, rate_hz: Option<f64>) -> CliResult<()> {
    let x = input(read_series(path, rate_hz))?;
    let sig = cfg.significance();
    info!("{} channels x {} samples, alpha {}", x.n_channels(), x.len(), sig.alpha);
    let f = analyze(&x, &sig)?;
    let mut g = build_global_adjacency(&f, sig.alpha, x.labels())?;
    if let Ok(map) = cfg.region_map() {
        let names = map.region_names();
        for (label, region) in g.labels.iter().zip(g.regions.iter_mut()) {
            if let Some(c) = map.labels().iter().position(|l| l == label) {
                *region = names[map.region_of(c)].clone();
            }
        }
    }
    let tau = f.tau.as_ref().expect("analyze normalizes");
    let mut flow = String::from("src,dst,src_label,dst_label,T,tau,p\n");
    for i in 0..f.n() {
        for j in (0..f.n()).filter(|&j| j != i) {
            let p = f.p_values.as_ref().map(|p| p[(i, j)].to_string()).unwrap_or_default();
            let _ = writeln!(
                flow,
                "{i},{j},{},{},{},{},{p}",
                x.labels()[i],
                x.labels()[j],
                f.flow[(i, j)],
                tau[(i, j)]
            );
        }
    }
    let dir = out_dir(cfg)?;
    write(&dir, "graph.json", &(graph_to_json(&g)? + "\n"))?;
    write(&dir, "graph.dot", &graph_to_dot(&g))?;
    write(&dir, "flow.csv", &flow)?;
    echo(&dir, cfg, None, None)?;
    println!("{} edges, density {:.4}", g.edge_count(), g.density());
    Ok(())
}

#[derive(Debug, Serialize)]
struct PreprocessSummary {
    trials: usize,
    windows: usize,
    channels: usize,
    bands: usize,
    mean_global_density: f64,
    mean_local_density: f64,
    floored_entries: usize,
    local_block_diagonal: bool,
}

fn density(a: &flowgnn::Matrix, possible: usize) -> f64 {
    a.data().iter().filter(|&&v| v != 0.0).count() as f64 / possible.max(1) as f64
}

/// Windows, features and both graphs of every trial: `samples.json` and
/// `summary.json`.
pub fn preprocess(cfg: &RunConfig, manifest: Option<PathBuf>) -> CliResult<()> {
    let path = dataset_path(cfg, manifest)?;
    let manifest = input(DatasetManifest::load(&path))?;
    let regions = input(cfg.region_map())?;
    let root = path.parent().unwrap_or(Path::new("."));
    info!("{} trials from {}", manifest.trials.len(), path.display());
    let samples = preprocess_dataset(&manifest, root, &regions, &cfg.preprocess_config())?;
    let blocks = regions.blocks();
    let n = regions.n_channels();
    let local_possible: usize = blocks.iter().map(|b| b.len() * (b.len() - 1)).sum();
    let block_ok = samples.iter().all(|s| is_block_diagonal(&s.local_adjacency, &blocks));
    if !block_ok {
        return Err(Error::Data("a local adjacency is not block-diagonal under the region ordering".into()).into());
    }
    let w = samples.len().max(1) as f64;
    let summary = PreprocessSummary {
        trials: manifest.trials.len(),
        windows: samples.len(),
        channels: n,
        bands: cfg.signal.bands.len(),
        mean_global_density: samples.iter().map(|s| density(&s.global_adjacency, n * (n - 1))).sum::<f64>() / w,
        mean_local_density: samples.iter().map(|s| density(&s.local_adjacency, local_possible)).sum::<f64>() / w,
        floored_entries: samples.iter().map(|s| s.floored).sum(),
        local_block_diagonal: block_ok,
    };
    let set = SampleSet::new(&regions, &cfg.signal.bands, samples);
    let dir = out_dir(cfg)?;
    write(&dir, "samples.json", &set.to_json()?)?;
    write_json(&dir, "summary.json", &summary)?;
    echo(&dir, cfg, Some(&path), None)?;
    println!(
        "{} windows from {} trials; global density {:.4}, local density {:.4}",
        summary.windows, summary.trials, summary.mean_global_density, summary.mean_local_density
    );
    Ok(())
}

fn samples_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.or_else(|| cfg.paths.samples.clone()).unwrap_or_else(|| {
        cfg.paths
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
            .join("samples.json")
    })
}

/// Parameter count of the configured model for the configured region map.
pub fn report_params(cfg: &RunConfig) -> CliResult<usize> {
    let regions = input(cfg.region_map())?;
    let model = ModelState::build(&cfg.model_config(&regions, cfg.signal.bands.len()))?;
    Ok(model.param_count())
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    protocol: &'a str,
    param_count: usize,
    model_fingerprint: String,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

fn curves_csv(out: &NestedCvOutcome) -> String {
    let mut s = String::from("fold,stage,epoch,loss,val_accuracy\n");
    for (f, c) in out.curves.iter().enumerate() {
        for (e, (l, v)) in c.stage1_loss.iter().zip(&c.stage1_val_accuracy).enumerate() {
            let _ = writeln!(s, "{f},1,{},{l},{v}", e + 1);
        }
        for (e, l) in c.stage2_loss.iter().enumerate() {
            let _ = writeln!(s, "{f},2,{},{l},", e + 1);
        }
    }
    s
}

/// Nested cross-validation (or one outer split) on preprocessed samples:
/// `metrics.json`, `curves.csv`, `weights/fold_XX.bin`, `attention.csv`.
pub fn train(cfg: &RunConfig, samples: Option<PathBuf>, single_split: bool) -> CliResult<()> {
    let path = samples_path(cfg, samples);
    let set = input(SampleSet::load(&path))?;
    let regions = input(set.region_map())?;
    let model_cfg = cfg.model_config(&regions, set.bands.len());
    let train_cfg = cfg.train_config();
    info!(
        "{} samples, {} outer x {} inner folds, {} + {} epochs",
        set.samples.len(),
        train_cfg.outer_folds,
        train_cfg.inner_folds,
        train_cfg.stage1_epochs,
        train_cfg.stage2_epochs
    );
    let out = if single_split {
        holdout(&set.samples, &model_cfg, &train_cfg)?
    } else {
        nested_cv(&set.samples, &model_cfg, &train_cfg)?
    };
    let dir = out_dir(cfg)?;
    let weights = dir.join("weights");
    std::fs::create_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
    let mut tables = Vec::new();
    for (f, (model, test)) in out.models.iter().zip(&out.test_folds).enumerate() {
        model.save_weights(&weights.join(format!("fold_{f:02}.bin")))?;
        let test_samples: Vec<_> = test.iter().map(|&i| set.samples[i].clone()).collect();
        tables.push(export_attention(model, &test_samples)?);
    }
    let protocol = match (single_split, cfg.train.paper_protocol) {
        (true, _) => "holdout",
        (false, true) => "paper",
        (false, false) => "desk",
    };
    let report = TrainReport {
        protocol,
        param_count: out.models[0].param_count(),
        model_fingerprint: out.models[0].fingerprint(),
        metrics: &out.report,
    };
    write(&dir, "curves.csv", &curves_csv(&out))?;
    write(&dir, "attention.csv", &attention_csv(&mean_attention(&tables)?)?)?;
    echo(&dir, cfg, None, Some(&path))?;
    write_json(&dir, "metrics.json", &report)?;
    println!(
        "accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4} over {} fold(s)",
        out.report.mean_accuracy,
        out.report.std_accuracy,
        out.report.mean_f1,
        out.report.std_f1,
        out.report.folds.len()
    );
    Ok(())
}

/// Scores saved weights on a sample set: `eval.json`.
pub fn eval(cfg: &RunConfig, samples: Option<PathBuf>, weights: &Path) -> CliResult<()> {
    let path = samples_path(cfg, samples);
    let set = input(SampleSet::load(&path))?;
    let model = input(ModelState::load_weights(weights))?;
    if model.config.channel_labels != set.channels {
        return Err(Error::Data("weights and samples use different channel orders".into()).into());
    }
    let e = evaluate(&model, &set.samples, cfg.train.target)?;
    let dir = out_dir(cfg)?;
    write_json(&dir, "eval.json", &e)?;
    echo(&dir, cfg, None, Some(&path))?;
    println!("accuracy {:.4}, macro-F1 {:.4} on {} samples", e.accuracy, e.f1, set.samples.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Condition {
    name: String,
    method: GraphMethod,
    metrics: MetricsReport,
}

#[derive(Debug, Serialize)]
struct SignedRank {
    metric: &'static str,
    /// Scores of the first condition minus the second.
    order: [String; 2],
    n: usize,
    w_plus: f64,
    p_value: f64,
    exact: bool,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    topk: usize,
    windows: usize,
    /// Test trials of each outer fold, shared by both conditions.
    fold_trials: Vec<Vec<String>>,
    conditions: Vec<Condition>,
    wilcoxon: Option<SignedRank>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wilcoxon_note: Option<String>,
}

/// Top-k Liang-Kleeman graphs against Top-k Granger graphs with the same
/// features, model and folds: `compare.json`.
pub fn compare(cfg: &RunConfig, manifest: Option<PathBuf>) -> CliResult<()> {
    let path = dataset_path(cfg, manifest)?;
    let manifest = input(DatasetManifest::load(&path))?;
    let regions = input(cfg.region_map())?;
    let root = path.parent().unwrap_or(Path::new("."));
    let methods = [
        GraphMethod::LiangKleeman,
        GraphMethod::Granger {
            order: cfg.compare.granger_order,
        },
    ];
    let per_method = preprocess_for_comparison(
        &manifest,
        root,
        &regions,
        &cfg.preprocess_config(),
        &methods,
        cfg.compare.topk,
    )?;
    let model_cfg = cfg.model_config(&regions, cfg.signal.bands.len());
    let train_cfg = flowgnn::train::TrainConfig {
        outer_folds: cfg.compare.outer_folds,
        ..cfg.train_config()
    };
    let mut outcomes = Vec::new();
    for (m, samples) in methods.iter().zip(&per_method) {
        info!("{}: {} windows", m.name(), samples.len());
        outcomes.push(nested_cv(samples, &model_cfg, &train_cfg)?);
    }
    if outcomes[0].test_folds != outcomes[1].test_folds {
        return Err(Error::Data("conditions ended up with different fold splits".into()).into());
    }
    let acc = |o: &NestedCvOutcome| o.report.folds.iter().map(|f| f.accuracy).collect::<Vec<_>>();
    let (wilcoxon, wilcoxon_note) = match wilcoxon_signed_rank(&acc(&outcomes[0]), &acc(&outcomes[1])) {
        Ok(w) => (
            Some(SignedRank {
                metric: "accuracy",
                order: [methods[0].name().into(), methods[1].name().into()],
                n: w.n,
                w_plus: w.w_plus,
                p_value: w.p_value,
                exact: w.exact,
            }),
            None,
        ),
        Err(Error::DegenerateTest(msg)) => (None, Some(msg)),
        Err(e) => return Err(e.into()),
    };
    let fold_trials = outcomes[0].report.folds.iter().map(|f| f.test_trials.clone()).collect();
    let conditions = methods
        .iter()
        .zip(outcomes)
        .enumerate()
        .map(|(k, (m, o))| {
            let mut metrics = o.report;
            if k == 0 {
                metrics.comparison = wilcoxon.as_ref().map(|w| Comparison {
                    baseline: methods[1].name().into(),
                    wilcoxon_p: w.p_value,
                });
            }
            Condition {
                name: m.name().into(),
                method: *m,
                metrics,
            }
        })
        .collect::<Vec<_>>();
    let report = CompareReport {
        topk: cfg.compare.topk,
        windows: per_method[0].len(),
        fold_trials,
        conditions,
        wilcoxon,
        wilcoxon_note,
    };
    let dir = out_dir(cfg)?;
    echo(&dir, cfg, Some(&path), None)?;
    write_json(&dir, "compare.json", &report)?;
    for c in &report.conditions {
        println!(
            "{:>14}: accuracy {:.4} ± {:.4}, macro-F1 {:.4}",
            c.name, c.metrics.mean_accuracy, c.metrics.std_accuracy, c.metrics.mean_f1
        );
    }
    match &report.wilcoxon {
        Some(w) => println!("signed-rank p = {:.6} (n = {}, exact = {})", w.p_value, w.n, w.exact),
        None => println!("signed-rank test not run: {}", report.wilcoxon_note.as_deref().unwrap_or("")),
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum SynthKind {
    Emotion(EmotionSynthConfig),
    /// Two channels, channel 0 driving channel 1.
    Var { coupling: f64, length: usize, seed: u64, csv: bool },
}

/// Writes a synthetic dataset into `dir`.
pub fn synth(kind: &SynthKind, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match kind {
        SynthKind::Emotion(c) => {
            let m = generate_emotion_synthetic(c, &RegionMap::default_32(), dir)?;
            write_json(dir, "synth.json", c)?;
            println!("{} trials written to {}", m.trials.len(), dir.display());
        }
        SynthKind::Var {
            coupling,
            length,
            seed,
            csv,
        } => {
            let spec = VarSystemSpec::driven_pair(*coupling, *length, *seed);
            let r = generate_var(&spec)?;
            if *csv {
                save_trial_csv(&dir.join("var.csv"), &r.series)?;
            } else {
                save_trial(&dir.join("var.bin"), &r.series)?;
            }
            write_json(dir, "synth.json", &spec)?;
            println!("{} samples, true edges {:?}", length, r.true_edges);
        }
    }
    Ok(())
}
