//! From raw trials to per-window feature graphs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causality::{granger_causality, SignificanceConfig};
use crate::data::{load_trial, DatasetManifest};
use crate::error::{Error, Result};
use crate::graphs::{build_local_adjacency, global_causal_graph, topk_sparsify, RegionMap};
use crate::numerics::Matrix;
use crate::rng::derive_seed;
use crate::signal::{
    de_features, default_bands, resample, segment_windows_with_overlap, BandSpec, LabelPair, DEFAULT_DE_FLOOR,
    DEFAULT_FILTER_ORDER,
};
use crate::timeseries::TimeSeriesSet;

/// One window: node features plus its two causal graphs, all in canonical
/// region order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGraphSample {
    /// Channels × bands differential entropy.
    pub features: Matrix,
    pub global_adjacency: Matrix,
    /// Block-diagonal under the region blocks.
    pub local_adjacency: Matrix,
    pub labels: LabelPair,
    pub trial: String,
    pub window: usize,
    /// Feature entries replaced by the entropy floor.
    #[serde(default)]
    pub floored: usize,
}

impl FeatureGraphSample {
    pub fn n_channels(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_hz: f64,
    pub window_seconds: f64,
    pub overlap: f64,
    pub bands: Vec<BandSpec>,
    pub filter_order: usize,
    pub de_floor: f64,
    pub significance: SignificanceConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_hz: 200.0,
            window_seconds: 4.0,
            overlap: 0.0,
            bands: default_bands(),
            filter_order: DEFAULT_FILTER_ORDER,
            de_floor: DEFAULT_DE_FLOOR,
            significance: SignificanceConfig::default(),
        }
    }
}

/// Features and graphs of one window already in canonical channel order.
/// Both graphs use only this window's samples.
pub fn preprocess_window(
    window: &TimeSeriesSet,
    regions: &RegionMap,
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<(Matrix, Matrix, Matrix, usize)> {
    let (features, floored) = de_features(window, &cfg.bands, cfg.filter_order, cfg.de_floor)?;
    let sig = cfg.significance.with_seed(seed);
    let global = global_causal_graph(window, &sig)?;
    let local = build_local_adjacency(window, regions, &sig.with_seed(derive_seed(seed, &[1])))?;
    Ok((features, global.adjacency, local.adjacency, floored))
}

/// Reorders, resamples and windows one trial, then builds every window's
/// sample. Seeds depend only on `(cfg seed, trial_index, window)`.
pub fn preprocess_trial(
    x: &TimeSeriesSet,
    regions: &RegionMap,
    labels: LabelPair,
    trial: &str,
    trial_index: usize,
    cfg: &PreprocessConfig,
) -> Result<Vec<FeatureGraphSample>> {
    let x = regions.reorder(x)?;
    let x = resample(&x, cfg.target_hz)?;
    let windows = segment_windows_with_overlap(&x, cfg.window_seconds, cfg.overlap)?;
    windows
        .windows
        .par_iter()
        .enumerate()
        .map(|(w, window)| {
            let seed = derive_seed(cfg.significance.seed, &[trial_index as u64, w as u64]);
            let (features, global_adjacency, local_adjacency, floored) = preprocess_window(window, regions, cfg, seed)?;
            Ok(FeatureGraphSample {
                features,
                global_adjacency,
                local_adjacency,
                labels,
                trial: trial.to_string(),
                window: w,
                floored,
            })
        })
        .collect()
}

/// All windows of all trials in manifest order.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    root: &Path,
    regions: &RegionMap,
    cfg: &PreprocessConfig,
) -> Result<Vec<FeatureGraphSample>> {
    let mut out = Vec::new();
    for (k, entry) in manifest.trials.iter().enumerate() {
        let x = load_trial(&root.join(&entry.file), manifest)?;
        let labels = LabelPair {
            arousal: entry.arousal,
            valence: entry.valence,
        };
        out.extend(preprocess_trial(&x, regions, labels, &entry.file, k, cfg)?);
    }
    Ok(out)
}

/// Edge-weight source for the graph-construction comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum GraphMethod {
    /// `|τ|` without a significance test.
    LiangKleeman,
    /// Pairwise F statistic.
    Granger { order: usize },
}

impl GraphMethod {
    pub fn name(&self) -> &'static str {
        match self {
            GraphMethod::LiangKleeman => "liang-kleeman",
            GraphMethod::Granger { .. } => "granger",
        }
    }

    /// Dense `[(source, target)]` weights with a zero diagonal.
    pub fn weights(&self, x: &TimeSeriesSet) -> Result<Matrix> {
        let a = match self {
            GraphMethod::LiangKleeman => {
                let cfg = SignificanceConfig {
                    alpha: 1.0,
                    ..SignificanceConfig::default()
                };
                global_causal_graph(x, &cfg)?.adjacency
            }
            GraphMethod::Granger { order } => granger_causality(x, *order)?.f_stat,
        };
        Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| if i == j { 0.0 } else { a[(i, j)] }))
    }
}

/// Global and block-diagonal local graphs of one canonical-order window,
/// each keeping the `k` strongest incoming edges per node.
pub fn topk_graphs(window: &TimeSeriesSet, regions: &RegionMap, method: GraphMethod, k: usize) -> Result<(Matrix, Matrix)> {
    let global = topk_sparsify(&method.weights(window)?, k)?;
    let n = window.n_channels();
    let mut local = Matrix::zeros(n, n);
    for block in regions.blocks() {
        if block.len() < 2 {
            continue;
        }
        let idx: Vec<usize> = block.collect();
        let sub = topk_sparsify(&method.weights(&window.select(&idx))?, k)?;
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                local[(ia, ib)] = sub[(a, b)];
            }
        }
    }
    Ok((global, local))
}

/// Samples for several graph methods that share windows and features.
/// The result holds one sample list per method, in `methods` order.
pub fn preprocess_for_comparison(
    manifest: &DatasetManifest,
    root: &Path,
    regions: &RegionMap,
    cfg: &PreprocessConfig,
    methods: &[GraphMethod],
    k: usize,
) -> Result<Vec<Vec<FeatureGraphSample>>> {
    let mut out = vec![Vec::new(); methods.len()];
    for entry in &manifest.trials {
        let x = load_trial(&root.join(&entry.file), manifest)?;
        let x = resample(&regions.reorder(&x)?, cfg.target_hz)?;
        let labels = LabelPair {
            arousal: entry.arousal,
            valence: entry.valence,
        };
        let windows = segment_windows_with_overlap(&x, cfg.window_seconds, cfg.overlap)?;
        let per_window: Vec<Vec<FeatureGraphSample>> = windows
            .windows
            .par_iter()
            .enumerate()
            .map(|(w, window)| {
                let (features, floored) = de_features(window, &cfg.bands, cfg.filter_order, cfg.de_floor)?;
                methods
                    .iter()
                    .map(|&m| {
                        let (global_adjacency, local_adjacency) = topk_graphs(window, regions, m, k)?;
                        Ok(FeatureGraphSample {
                            features: features.clone(),
                            global_adjacency,
                            local_adjacency,
                            labels,
                            trial: entry.file.clone(),
                            window: w,
                            floored,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for window in per_window {
            for (slot, s) in out.iter_mut().zip(window) {
                slot.push(s);
            }
        }
    }
    Ok(out)
}

/// Serialized sample collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    /// Canonical channel order.
    pub channels: Vec<String>,
    /// Region name of each channel.
    pub regions: Vec<String>,
    pub bands: Vec<BandSpec>,
    pub samples: Vec<FeatureGraphSample>,
}

impl SampleSet {
    pub fn new(regions: &RegionMap, bands: &[BandSpec], samples: Vec<FeatureGraphSample>) -> Self {
        Self {
            channels: regions.labels().to_vec(),
            regions: regions.node_regions(),
            bands: bands.to_vec(),
            samples,
        }
    }

    /// The region map the samples were built with.
    pub fn region_map(&self) -> Result<RegionMap> {
        if self.channels.len() != self.regions.len() {
            return Err(Error::Data("sample set lists channels and regions of different lengths".into()));
        }
        let text: String = self.channels.iter().zip(&self.regions).map(|(c, r)| format!("{c},{r}\n")).collect();
        let map = RegionMap::parse(&text)?;
        if map.labels() != self.channels.as_slice() {
            return Err(Error::Data("sample set channels are not grouped by region".into()));
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_trial, EmotionSynthConfig};
    use crate::graphs::is_block_diagonal;

    #[test]
    fn trial_windows_carry_block_diagonal_local_graphs() {
        let regions = RegionMap::default_32();
        let synth = EmotionSynthConfig {
            trial_seconds: 8.5,
            ..EmotionSynthConfig::default()
        };
        let x = synth_trial(&synth, &regions, 1, 0).unwrap();
        let cfg = PreprocessConfig {
            significance: SignificanceConfig {
                surrogate_count: 100,
                ..SignificanceConfig::default()
            },
            ..PreprocessConfig::default()
        };
        let labels = LabelPair { arousal: 1, valence: 1 };
        let samples = preprocess_trial(&x, &regions, labels, "t0", 0, &cfg).unwrap();
        assert_eq!(samples.len(), 2);
        for s in &samples {
            assert_eq!(s.features.shape(), (32, 5));
            assert!(is_block_diagonal(&s.local_adjacency, &regions.blocks()));
            assert!(s.global_adjacency.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let again = preprocess_trial(&x, &regions, labels, "t0", 0, &cfg).unwrap();
        assert_eq!(samples, again);
    }

    #[test]
    fn topk_graphs_keep_k_incoming_edges() {
        let regions = RegionMap::default_32();
        let synth = EmotionSynthConfig {
            trial_seconds: 4.0,
            ..EmotionSynthConfig::default()
        };
        let x = synth_trial(&synth, &regions, 1, 0).unwrap();
        for method in [GraphMethod::LiangKleeman, GraphMethod::Granger { order: 5 }] {
            let (global, local) = topk_graphs(&x, &regions, method, 4).unwrap();
            for j in 0..32 {
                let incoming = (0..32).filter(|&i| global[(i, j)] != 0.0).count();
                assert!(incoming <= 4, "{method:?}");
                assert_eq!(global[(j, j)], 0.0);
            }
            assert!(is_block_diagonal(&local, &regions.blocks()));
            assert!(global.data().iter().any(|&v| v > 0.0));
        }
        assert!(topk_graphs(&x, &regions, GraphMethod::LiangKleeman, 0).is_err());
    }

    #[test]
    fn sample_set_recovers_region_map() {
        let regions = RegionMap::default_32();
        let set = SampleSet::new(&regions, &default_bands(), Vec::new());
        assert_eq!(set.region_map().unwrap(), regions);
        let back: SampleSet = serde_json::from_str(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
