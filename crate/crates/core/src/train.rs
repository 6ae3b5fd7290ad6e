//! Optimization, two-stage training, nested cross-validation and metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Target};
use crate::nn::ParamSet;
use crate::pipeline::FeatureGraphSample;
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let shapes = params.shapes();
    if grads.shapes() != shapes || state.m.shapes() != shapes || state.v.shapes() != shapes {
        return Err(Error::Shape("parameters, gradients and moments differ in shape".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params.tensors_mut().iter_mut().zip(grads.tensors());
    let moments = state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut());
    for ((p, g), (m, v)) in tensors.zip(moments) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *p -= step;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub stage1_lr: f64,
    pub stage1_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub target: Target,
    /// Largest allowed drop in validation accuracy caused by fine-tuning.
    pub stage2_tolerance: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Reduced folds and epochs for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            outer_folds: 5,
            inner_folds: 2,
            stage1_lr: 1e-3,
            stage1_epochs: 40,
            stage2_lr: 1e-4,
            stage2_epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
            target: Target::Arousal,
            stage2_tolerance: 0.05,
            seed: 0,
        }
    }

    /// 10 outer folds, 3 inner folds, 200 + 20 epochs.
    pub fn paper_protocol() -> Self {
        Self {
            outer_folds: 10,
            inner_folds: 3,
            stage1_epochs: 200,
            stage2_epochs: 20,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_folds < 2 || self.inner_folds < 2 {
            return Err(Error::Config("fold counts must be >= 2".into()));
        }
        if !(self.stage1_lr >= 0.0 && self.stage2_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `confusion[true][predicted]`.
pub type Confusion = [[usize; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Macro average over the two classes; a class never predicted and
    /// never present counts as F1 = 0.
    pub f1: f64,
    pub confusion: Confusion,
}

impl Evaluation {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct = confusion[0][0] + confusion[1][1];
        let f1_of = |c: usize| {
            let tp = confusion[c][c] as f64;
            let fp = confusion[1 - c][c] as f64;
            let fn_ = confusion[c][1 - c] as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        };
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            f1: (f1_of(0) + f1_of(1)) / 2.0,
            confusion,
        }
    }
}

pub fn evaluate(model: &ModelState, samples: &[FeatureGraphSample], target: Target) -> Result<Evaluation> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    evaluate_subset(model, samples, &idx, target)
}

fn evaluate_subset(model: &ModelState, samples: &[FeatureGraphSample], idx: &[usize], target: Target) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let predictions: Vec<usize> = idx
        .par_iter()
        .map(|&i| model.predict(&samples[i]))
        .collect::<Result<_>>()?;
    let mut confusion = [[0; 2]; 2];
    for (&i, &p) in idx.iter().zip(&predictions) {
        confusion[target.of(&samples[i].labels)][p] += 1;
    }
    Ok(Evaluation::from_confusion(confusion))
}

/// One pass over `idx` in a seeded order. Returns the mean training loss.
fn train_epoch(
    model: &mut ModelState,
    adam: &mut AdamState,
    samples: &[FeatureGraphSample],
    idx: &[usize],
    lr: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut order = idx.to_vec();
    order.shuffle(&mut rng_for(seed, &[]));
    let mut total = 0.0;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let results: Vec<(f64, ParamSet)> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let dropout_seed = derive_seed(seed, &[b as u64, k as u64]);
                model
                    .forward_backward(&samples[i], cfg.target, true, dropout_seed)
                    .map(|(loss, g, _)| (loss, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = model.params.zeros_like();
        for (loss, g) in &results {
            total += loss;
            grads.add_assign(g);
        }
        grads.scale_mut(1.0 / batch.len() as f64);
        adam_step(&mut model.params, &grads, adam, lr, &cfg.adam)?;
    }
    Ok(total / idx.len() as f64)
}

/// Per-epoch records of a two-stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub stage1_loss: Vec<f64>,
    pub stage1_val_accuracy: Vec<f64>,
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub stage2_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOne {
    pub model: ModelState,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

/// Trains on `train` at the stage-1 rate and keeps the checkpoint with the
/// highest validation accuracy; the earliest epoch wins ties.
pub fn train_stage_one(
    model: &ModelState,
    samples: &[FeatureGraphSample],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageOne> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut current = model.clone();
    let mut adam = AdamState::new(&current.params);
    let mut best = (f64::NEG_INFINITY, 0, current.clone());
    let mut loss = Vec::with_capacity(cfg.stage1_epochs);
    let mut val_accuracy = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        let l = train_epoch(
            &mut current,
            &mut adam,
            samples,
            train,
            cfg.stage1_lr,
            cfg,
            derive_seed(seed, &[1, epoch as u64]),
        )?;
        let acc = evaluate_subset(&current, samples, val, cfg.target)?.accuracy;
        loss.push(l);
        val_accuracy.push(acc);
        if acc > best.0 {
            best = (acc, epoch + 1, current.clone());
        }
    }
    if cfg.stage1_epochs == 0 {
        best.0 = evaluate_subset(&current, samples, val, cfg.target)?.accuracy;
    }
    Ok(StageOne {
        model: best.2,
        best_val_accuracy: best.0,
        best_epoch: best.1,
        loss,
        val_accuracy,
    })
}

/// Fine-tunes at the stage-2 rate on `train` with fresh optimizer state.
pub fn train_stage_two(
    model: &ModelState,
    samples: &[FeatureGraphSample],
    train: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Data("fine-tuning split is empty".into()));
    }
    let mut current = model.clone();
    let mut adam = AdamState::new(&current.params);
    let mut loss = Vec::with_capacity(cfg.stage2_epochs);
    for epoch in 0..cfg.stage2_epochs {
        loss.push(train_epoch(
            &mut current,
            &mut adam,
            samples,
            train,
            cfg.stage2_lr,
            cfg,
            derive_seed(seed, &[2, epoch as u64]),
        )?);
    }
    Ok((current, loss))
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub model: ModelState,
    pub curves: TrainingCurves,
    pub selected_val_accuracy: f64,
    /// Validation accuracy after fine-tuning.
    pub final_val_accuracy: f64,
}

/// Stage 1 on `train` with checkpoint selection on `val`, then stage 2 on
/// `train ∪ val`.
pub fn train_two_stage(
    model: &ModelState,
    samples: &[FeatureGraphSample],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TwoStageOutcome> {
    let one = train_stage_one(model, samples, train, val, cfg, seed)?;
    let full: Vec<usize> = train.iter().chain(val).copied().collect();
    let (tuned, stage2_loss) = train_stage_two(&one.model, samples, &full, cfg, seed)?;
    let final_val_accuracy = evaluate_subset(&tuned, samples, val, cfg.target)?.accuracy;
    Ok(TwoStageOutcome {
        model: tuned,
        curves: TrainingCurves {
            stage1_loss: one.loss,
            stage1_val_accuracy: one.val_accuracy,
            best_epoch: one.best_epoch,
            stage2_loss,
        },
        selected_val_accuracy: one.best_val_accuracy,
        final_val_accuracy,
    })
}

/// Trial-grouped, label-stratified folds. Each entry of the result lists
/// the sample indices of one fold. Trials of each class are shuffled and
/// dealt round-robin, continuing across classes, so fold sizes differ by
/// at most one trial.
pub fn grouped_folds(
    samples: &[FeatureGraphSample],
    subset: &[usize],
    k: usize,
    target: Target,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut trials: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for &i in subset {
        let s = &samples[i];
        let label = target.of(&s.labels);
        let entry = trials.entry(s.trial.as_str()).or_insert((label, Vec::new()));
        if entry.0 != label {
            return Err(Error::Data(format!("trial {} mixes labels", s.trial)));
        }
        entry.1.push(i);
    }
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (name, (label, _)) in &trials {
        by_class[*label].push(name);
    }
    for (c, names) in by_class.iter().enumerate() {
        if names.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} trial(s), fewer than {k} folds",
                names.len()
            )));
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (c, names) in by_class.iter_mut().enumerate() {
        names.shuffle(&mut rng_for(seed, &[c as u64]));
        for name in names.iter() {
            folds[next % k].extend(&trials[name].1);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn complement(all: &[usize], remove: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = all.iter().copied().filter(|i| remove.binary_search(i).is_err()).collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub test_trials: Vec<String>,
    pub test_samples: usize,
    /// Inner fold whose checkpoint was fine-tuned.
    pub selected_inner_fold: usize,
    pub best_epoch: usize,
    pub inner_val_accuracy: f64,
    /// Accuracy on the selecting validation split after fine-tuning.
    pub post_finetune_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub wilcoxon_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: Target,
    pub f1_averaging: String,
    pub folds: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_folds(target: Target, folds: Vec<FoldMetrics>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_f1, std_f1) = mean_std(&f1);
        Self {
            target,
            f1_averaging: "macro".into(),
            folds,
            mean_accuracy,
            std_accuracy,
            mean_f1,
            std_f1,
            comparison: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NestedCvOutcome {
    pub report: MetricsReport,
    /// Final model of each outer fold.
    pub models: Vec<ModelState>,
    pub curves: Vec<TrainingCurves>,
    /// Sample indices of each outer test fold.
    pub test_folds: Vec<Vec<usize>>,
}

/// Outer folds estimate accuracy; inside each, inner folds run stage 1 and
/// the checkpoint with the best inner validation accuracy (earliest inner
/// fold on ties) is fine-tuned on the whole outer training split.
pub fn nested_cv(samples: &[FeatureGraphSample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<NestedCvOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let all: Vec<usize> = (0..samples.len()).collect();
    let outer = grouped_folds(samples, &all, cfg.outer_folds, cfg.target, derive_seed(cfg.seed, &[0]))?;
    let per_fold: Vec<(FoldMetrics, ModelState, TrainingCurves)> = outer
        .par_iter()
        .enumerate()
        .map(|(f, test)| run_outer_fold(samples, model_cfg, cfg, &all, f, test))
        .collect::<Result<_>>()?;
    let mut folds = Vec::new();
    let mut models = Vec::new();
    let mut curves = Vec::new();
    for (m, model, c) in per_fold {
        folds.push(m);
        models.push(model);
        curves.push(c);
    }
    Ok(NestedCvOutcome {
        report: MetricsReport::from_folds(cfg.target, folds),
        models,
        curves,
        test_folds: outer,
    })
}

/// Only the first outer fold of [`nested_cv`]: one test split, same
/// inner selection and fine-tuning.
pub fn holdout(samples: &[FeatureGraphSample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<NestedCvOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let all: Vec<usize> = (0..samples.len()).collect();
    let outer = grouped_folds(samples, &all, cfg.outer_folds, cfg.target, derive_seed(cfg.seed, &[0]))?;
    let test = outer.into_iter().next().expect("at least two outer folds");
    let (metrics, model, curves) = run_outer_fold(samples, model_cfg, cfg, &all, 0, &test)?;
    Ok(NestedCvOutcome {
        report: MetricsReport::from_folds(cfg.target, vec![metrics]),
        models: vec![model],
        curves: vec![curves],
        test_folds: vec![test],
    })
}

fn run_outer_fold(
    samples: &[FeatureGraphSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    all: &[usize],
    fold: usize,
    test: &[usize],
) -> Result<(FoldMetrics, ModelState, TrainingCurves)> {
    let fold_seed = derive_seed(cfg.seed, &[1, fold as u64]);
    let train = complement(all, test);
    let inner = grouped_folds(samples, &train, cfg.inner_folds, cfg.target, fold_seed)?;
    let init = ModelState::build(&ModelConfig {
        seed: derive_seed(fold_seed, &[2]),
        ..model_cfg.clone()
    })?;
    let mut best: Option<(usize, StageOne, Vec<usize>)> = None;
    for (k, val) in inner.iter().enumerate() {
        let inner_train = complement(&train, val);
        let one = train_stage_one(&init, samples, &inner_train, val, cfg, derive_seed(fold_seed, &[3, k as u64]))?;
        if best.as_ref().is_none_or(|b| one.best_val_accuracy > b.1.best_val_accuracy) {
            best = Some((k, one, val.clone()));
        }
    }
    let (k, one, val) = best.expect("at least two inner folds");
    let (model, stage2_loss) = train_stage_two(&one.model, samples, &train, cfg, derive_seed(fold_seed, &[4]))?;
    let eval = evaluate_subset(&model, samples, test, cfg.target)?;
    let post = evaluate_subset(&model, samples, &val, cfg.target)?.accuracy;
    let mut test_trials: Vec<String> = test.iter().map(|&i| samples[i].trial.clone()).collect();
    test_trials.dedup();
    let metrics = FoldMetrics {
        fold,
        accuracy: eval.accuracy,
        f1: eval.f1,
        confusion: eval.confusion,
        test_trials,
        test_samples: test.len(),
        selected_inner_fold: k,
        best_epoch: one.best_epoch,
        inner_val_accuracy: one.best_val_accuracy,
        post_finetune_val_accuracy: post,
    };
    let curves = TrainingCurves {
        stage1_loss: one.loss,
        stage1_val_accuracy: one.val_accuracy,
        best_epoch: one.best_epoch,
        stage2_loss,
    };
    Ok((metrics, model, curves))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs with a nonzero difference.
    pub n: usize,
    /// Sum of ranks of positive differences `a − b`.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

pub const WILCOXON_MIN_PAIRS: usize = 6;
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Average ranks of `|d|` (1-based, ties share the mean rank).
fn abs_ranks(d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired signed-rank test. Zero differences are dropped; up to
/// 20 remaining pairs the null distribution is enumerated exactly.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    if a.len() < WILCOXON_MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "signed-rank test needs at least {WILCOXON_MIN_PAIRS} pairs, got {}",
            a.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    let n = d.len();
    let ranks = abs_ranks(&d);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w_plus).round() as usize;
        let all = (1u64 << n) as f64;
        let lower: u64 = counts[..=w2].iter().sum();
        let upper: u64 = counts[w2..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / all).min(1.0);
        return Ok(WilcoxonResult {
            n,
            w_plus,
            p_value: p,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean).abs() / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value: (2.0 * normal.sf(z)).min(1.0),
        exact: false,
    })
}
