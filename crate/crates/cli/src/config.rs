//! Run configuration.
//!
//! One TOML file with the sections `paths`, `causality`, `signal`, `model`,
//! `train` and `compare`. Every key is optional; missing keys take the
//! defaults below. Command-line flags are applied on top, and the resolved
//! result is written to `run_config.toml` in each output directory.

use std::path::{Path, PathBuf};

use flowgnn::causality::SignificanceConfig;
use flowgnn::graphs::RegionMap;
use flowgnn::model::{ModelConfig, Target};
use flowgnn::pipeline::PreprocessConfig;
use flowgnn::signal::{default_bands, BandSpec, DEFAULT_DE_FLOOR, DEFAULT_FILTER_ORDER};
use flowgnn::train::{AdamConfig, TrainConfig, WILCOXON_MIN_PAIRS};
use flowgnn::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ECHO_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub causality: Causality,
    pub signal: Signal,
    pub model: ModelSection,
    pub train: TrainSection,
    pub compare: CompareSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Manifest for `preprocess` and `compare`.
    pub dataset: Option<PathBuf>,
    /// `samples.json` for `train` and `eval`.
    pub samples: Option<PathBuf>,
    /// `channel,region` CSV; the bundled 32-channel map when absent.
    pub region_map: Option<PathBuf>,
    /// Not echoed: the echo lives inside the output directory.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Causality {
    pub alpha: f64,
    pub surrogates: usize,
    /// Mean bootstrap block length in samples; half a second when absent.
    pub block_length: Option<usize>,
    pub seed: u64,
}

impl Default for Causality {
    fn default() -> Self {
        let s = SignificanceConfig::default();
        Self {
            alpha: s.alpha,
            surrogates: s.surrogate_count,
            block_length: s.block_length,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Signal {
    pub target_hz: f64,
    pub window_seconds: f64,
    pub overlap: f64,
    pub filter_order: usize,
    pub de_floor: f64,
    pub bands: Vec<BandSpec>,
}

impl Default for Signal {
    fn default() -> Self {
        Self {
            target_hz: 200.0,
            window_seconds: 4.0,
            overlap: 0.0,
            filter_order: DEFAULT_FILTER_ORDER,
            de_floor: DEFAULT_DE_FLOOR,
            bands: default_bands(),
        }
    }
}

/// Architecture widths; channels and regions come from the region map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub global_hidden: usize,
    pub local_hidden: usize,
    pub global_order: usize,
    pub local_order: usize,
    pub assign_order: usize,
    pub gate_hidden: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub assignment_entropy: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default_32();
        Self {
            global_hidden: m.global_hidden,
            local_hidden: m.local_hidden,
            global_order: m.global_order,
            local_order: m.local_order,
            assign_order: m.assign_order,
            gate_hidden: m.gate_hidden,
            hidden_dim: m.hidden_dim,
            dropout: m.dropout,
            assignment_entropy: m.assignment_entropy,
            seed: m.seed,
        }
    }
}

/// Fold and epoch counts left unset follow `paper_protocol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub paper_protocol: bool,
    pub target: Target,
    pub outer_folds: Option<usize>,
    pub inner_folds: Option<usize>,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub stage2_tolerance: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            paper_protocol: false,
            target: t.target,
            outer_folds: None,
            inner_folds: None,
            stage1_epochs: None,
            stage2_epochs: None,
            stage1_lr: t.stage1_lr,
            stage2_lr: t.stage2_lr,
            batch_size: t.batch_size,
            stage2_tolerance: t.stage2_tolerance,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Incoming edges kept per node in both graph families.
    pub topk: usize,
    pub granger_order: usize,
    /// Outer folds of the comparison; each gives one paired score.
    pub outer_folds: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            topk: 8,
            granger_order: 5,
            outer_folds: 8,
        }
    }
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub surrogates: Option<usize>,
    pub seed: Option<u64>,
    pub topk: Option<usize>,
    pub granger_order: Option<usize>,
    pub paper_protocol: bool,
    pub target: Option<Target>,
    pub region_map: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies flags, then pins every protocol-dependent value so the
    /// echo alone reproduces the run.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(a) = o.alpha {
            self.causality.alpha = a;
        }
        if let Some(s) = o.surrogates {
            self.causality.surrogates = s;
        }
        if let Some(seed) = o.seed {
            self.causality.seed = seed;
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if let Some(k) = o.topk {
            self.compare.topk = k;
        }
        if let Some(g) = o.granger_order {
            self.compare.granger_order = g;
        }
        if o.paper_protocol {
            self.train.paper_protocol = true;
        }
        if let Some(t) = o.target {
            self.train.target = t;
        }
        if o.region_map.is_some() {
            self.paths.region_map = o.region_map.clone();
        }
        if o.output_dir.is_some() {
            self.paths.output_dir = o.output_dir.clone();
        }
        let base = self.protocol_base();
        let t = &mut self.train;
        t.outer_folds.get_or_insert(base.outer_folds);
        t.inner_folds.get_or_insert(base.inner_folds);
        t.stage1_epochs.get_or_insert(base.stage1_epochs);
        t.stage2_epochs.get_or_insert(base.stage2_epochs);
        self.validate()?;
        Ok(self)
    }

    fn protocol_base(&self) -> TrainConfig {
        if self.train.paper_protocol {
            TrainConfig::paper_protocol()
        } else {
            TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.significance().validate()?;
        let s = &self.signal;
        if !(s.target_hz > 0.0 && s.window_seconds > 0.0 && (0.0..1.0).contains(&s.overlap)) {
            return Err(Error::Config(
                "signal: target_hz and window_seconds must be positive and overlap in [0, 1)".into(),
            ));
        }
        if s.bands.is_empty() {
            return Err(Error::Config("signal: at least one band is required".into()));
        }
        for b in &s.bands {
            b.validate(s.target_hz)?;
        }
        if s.filter_order == 0 || s.filter_order % 2 != 0 {
            return Err(Error::Config("signal: filter_order must be a positive even number".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config("model: dropout must lie in [0, 1)".into()));
        }
        self.train_config().validate()?;
        if self.compare.topk == 0 {
            return Err(Error::Config("compare: topk must be at least 1".into()));
        }
        if self.compare.granger_order == 0 {
            return Err(Error::InvalidOrder(0));
        }
        if self.compare.outer_folds < WILCOXON_MIN_PAIRS {
            return Err(Error::Config(format!(
                "compare: outer_folds must be at least {WILCOXON_MIN_PAIRS} for the signed-rank test"
            )));
        }
        Ok(())
    }

    pub fn significance(&self) -> SignificanceConfig {
        SignificanceConfig {
            alpha: self.causality.alpha,
            surrogate_count: self.causality.surrogates,
            block_length: self.causality.block_length,
            seed: self.causality.seed,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        let s = &self.signal;
        PreprocessConfig {
            target_hz: s.target_hz,
            window_seconds: s.window_seconds,
            overlap: s.overlap,
            bands: s.bands.clone(),
            filter_order: s.filter_order,
            de_floor: s.de_floor,
            significance: self.significance(),
        }
    }

    pub fn region_map(&self) -> Result<RegionMap> {
        match &self.paths.region_map {
            Some(p) => RegionMap::from_file(p),
            None => Ok(RegionMap::default_32()),
        }
    }

    pub fn model_config(&self, regions: &RegionMap, feature_dim: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            feature_dim,
            global_hidden: m.global_hidden,
            local_hidden: m.local_hidden,
            global_order: m.global_order,
            local_order: m.local_order,
            assign_order: m.assign_order,
            gate_hidden: m.gate_hidden,
            hidden_dim: m.hidden_dim,
            dropout: m.dropout,
            assignment_entropy: m.assignment_entropy,
            seed: m.seed,
            ..ModelConfig::for_regions(regions)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let base = self.protocol_base();
        TrainConfig {
            outer_folds: t.outer_folds.unwrap_or(base.outer_folds),
            inner_folds: t.inner_folds.unwrap_or(base.inner_folds),
            stage1_lr: t.stage1_lr,
            stage1_epochs: t.stage1_epochs.unwrap_or(base.stage1_epochs),
            stage2_lr: t.stage2_lr,
            stage2_epochs: t.stage2_epochs.unwrap_or(base.stage2_epochs),
            batch_size: t.batch_size,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            target: t.target,
            stage2_tolerance: t.stage2_tolerance,
            seed: t.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("run config: {e}")))
    }
}
