//! The dual-branch network.
//!
//! Global branch: two diffusion convolutions over the whole-scalp graph,
//! then soft pooling into one node per region. Local branch: two diffusion
//! convolutions over the block-diagonal regional graph, then per-region
//! channel attention. A gate computed from the mean input features mixes
//! the two branches node by node before the classifier.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::graphs::RegionMap;
use crate::nn::{
    cross_entropy, grad_check, Activation, AttentionPool, AttentionTape, Classifier, ClassifierTape, DConv, DConvTape,
    DiffPool, DiffPoolTape, FusionTape, GatedFusion, GradCheckReport, ParamSet, Transitions,
};
use crate::numerics::Matrix;
use crate::pipeline::FeatureGraphSample;
use crate::rng::{derive_seed, rng_for, SplitMix64};
use crate::signal::LabelPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channel_labels: Vec<String>,
    pub region_names: Vec<String>,
    /// Channel indices of each region, in feature-row numbering.
    pub regions: Vec<Vec<usize>>,
    pub feature_dim: usize,
    pub global_hidden: usize,
    pub local_hidden: usize,
    pub global_order: usize,
    pub local_order: usize,
    /// Diffusion order of the network producing the pooling assignment.
    pub assign_order: usize,
    pub pooled_nodes: usize,
    pub gate_hidden: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Weight of the assignment-entropy penalty; 0 disables it.
    #[serde(default)]
    pub assignment_entropy: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture for the channels and regions of `map`.
    pub fn for_regions(map: &RegionMap) -> Self {
        let regions = map.blocks().into_iter().map(|b| b.collect()).collect();
        Self {
            channel_labels: map.labels().to_vec(),
            region_names: map.region_names().to_vec(),
            regions,
            feature_dim: 5,
            global_hidden: 16,
            local_hidden: 16,
            global_order: 4,
            local_order: 2,
            assign_order: 1,
            pooled_nodes: map.n_regions(),
            gate_hidden: 16,
            hidden_dim: 32,
            dropout: 0.2,
            assignment_entropy: 0.0,
            seed: 0,
        }
    }

    pub fn default_32() -> Self {
        Self::for_regions(&RegionMap::default_32())
    }

    pub fn n_channels(&self) -> usize {
        self.channel_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_channels();
        if self.pooled_nodes != self.regions.len() || self.region_names.len() != self.regions.len() {
            return Err(Error::Config(format!(
                "{} pooled nodes, {} regions, {} region names",
                self.pooled_nodes,
                self.regions.len(),
                self.region_names.len()
            )));
        }
        if self.pooled_nodes >= n {
            return Err(Error::Config(format!("{} regions for {n} channels", self.pooled_nodes)));
        }
        let mut seen = vec![false; n];
        for &c in self.regions.iter().flatten() {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!("channel index {c} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("every channel must belong to a region".into()));
        }
        if self.regions.iter().any(Vec::is_empty) {
            return Err(Error::Config("regions must be non-empty".into()));
        }
        Ok(())
    }

    /// Parameter count from shape arithmetic alone.
    pub fn param_count(&self) -> usize {
        let (d, gh, lh) = (self.feature_dim, self.global_hidden, self.local_hidden);
        let dconv = |k: usize, i: usize, o: usize| 2 * k * i * o;
        let global = dconv(self.global_order, d, gh)
            + dconv(self.global_order, gh, gh)
            + dconv(self.assign_order, gh, self.pooled_nodes)
            + dconv(self.global_order, gh, gh);
        let local = dconv(self.local_order, d, lh)
            + dconv(self.local_order, lh, lh)
            + self.regions.iter().map(|r| 2 * (r.len() * r.len() + r.len())).sum::<usize>();
        let m = self.pooled_nodes;
        let node_dim = gh;
        let fusion = d * self.gate_hidden
            + self.gate_hidden
            + self.gate_hidden * m
            + m
            + m * node_dim * self.hidden_dim
            + self.hidden_dim;
        let classifier = self.hidden_dim * self.hidden_dim + self.hidden_dim + self.hidden_dim * 2 + 2;
        global + local + fusion + classifier
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    global1: DConv,
    global2: DConv,
    pool: DiffPool,
    local1: DConv,
    local2: DConv,
    attention: AttentionPool,
    fusion: GatedFusion,
    classifier: Classifier,
}

impl Layers {
    fn build(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<Self> {
        if cfg.global_hidden != cfg.local_hidden {
            return Err(Error::Config(format!(
                "branch widths must match for fusion: global {} vs local {}",
                cfg.global_hidden, cfg.local_hidden
            )));
        }
        let (d, gh, lh) = (cfg.feature_dim, cfg.global_hidden, cfg.local_hidden);
        let global1 = DConv::new(params, "global.conv1", d, gh, cfg.global_order, Activation::Relu, rng)?;
        let global2 = DConv::new(params, "global.conv2", gh, gh, cfg.global_order, Activation::Relu, rng)?;
        let mut pool = DiffPool::new(
            params,
            "global.pool",
            gh,
            gh,
            cfg.pooled_nodes,
            cfg.assign_order,
            cfg.global_order,
            rng,
        )?;
        pool.entropy_weight = cfg.assignment_entropy;
        let local1 = DConv::new(params, "local.conv1", d, lh, cfg.local_order, Activation::Relu, rng)?;
        let local2 = DConv::new(params, "local.conv2", lh, lh, cfg.local_order, Activation::Relu, rng)?;
        let attention = AttentionPool::new(params, "local.attention", cfg.regions.clone(), rng)?;
        let fusion = GatedFusion::new(
            params,
            "fusion",
            d,
            cfg.gate_hidden,
            cfg.pooled_nodes,
            gh,
            cfg.hidden_dim,
            rng,
        )?;
        let classifier = Classifier::new(params, "classifier", cfg.hidden_dim, cfg.hidden_dim, 2, cfg.dropout, rng)?;
        Ok(Self {
            global1,
            global2,
            pool,
            local1,
            local2,
            attention,
            fusion,
            classifier,
        })
    }
}

/// Learnable tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    layers: Layers,
}

/// Everything one forward pass reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Attention weights per region, in region channel order.
    pub attention: Vec<Vec<f64>>,
    /// Gate value per pooled node; weight of the global branch.
    pub gate: Vec<f64>,
    pub assignment: Matrix,
    pub pooled_adjacency: Matrix,
    /// Abstract nodes of the global branch (after pooling).
    pub global_nodes: Matrix,
    /// Abstract nodes of the local branch (after attention pooling).
    pub local_nodes: Matrix,
}

struct Tape {
    global_t: Transitions,
    local_t: Transitions,
    g1: DConvTape,
    g2: DConvTape,
    pool: DiffPoolTape,
    l1: DConvTape,
    l2: DConvTape,
    attention: AttentionTape,
    fusion: FusionTape,
    classifier: ClassifierTape,
}

/// Which binary label a model learns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Arousal,
    Valence,
}

impl Target {
    pub fn of(self, labels: &LabelPair) -> usize {
        match self {
            Target::Arousal => labels.arousal as usize,
            Target::Valence => labels.valence as usize,
        }
    }
}

impl ModelState {
    /// Fresh model with parameters drawn from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::seed_from_u64(derive_seed(cfg.seed, &[0x4d4f_4445_4c]));
        let mut params = ParamSet::new();
        let layers = Layers::build(cfg, &mut params, &mut rng)?;
        Ok(Self {
            config: cfg.clone(),
            params,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// SHA-256 over tensor names and shapes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, (r, c)) in self.params.names().iter().zip(self.params.shapes()) {
            h.update(format!("{name}:{r}x{c};").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if params.shapes() != self.params.shapes() {
            return Err(Error::Shape("parameter shapes do not match the architecture".into()));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    fn check_sample(&self, features: &Matrix, global: &Matrix, local: &Matrix) -> Result<()> {
        let n = self.config.n_channels();
        let ok = features.shape() == (n, self.config.feature_dim) && global.shape() == (n, n) && local.shape() == (n, n);
        if !ok {
            return Err(Error::Shape(format!(
                "sample with features {:?} and graphs {:?}/{:?} does not fit a {n}-channel model",
                features.shape(),
                global.shape(),
                local.shape()
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        p: &ParamSet,
        features: &Matrix,
        global: &Matrix,
        local: &Matrix,
        train: bool,
        seed: u64,
    ) -> Result<(ForwardOutput, Tape)> {
        self.check_sample(features, global, local)?;
        let l = &self.layers;
        let global_t = Transitions::from_adjacency(global)?;
        let local_t = Transitions::from_adjacency(local)?;

        let (h, g1) = l.global1.forward(p, features, &global_t)?;
        let (h, g2) = l.global2.forward(p, &h, &global_t)?;
        let (pooled, pool) = l.pool.forward(p, &h, global, &global_t)?;

        let (h, l1) = l.local1.forward(p, features, &local_t)?;
        let (h, l2) = l.local2.forward(p, &h, &local_t)?;
        let (local_nodes, attention) = l.attention.forward(p, &h)?;

        let summary = column_means(features);
        let (z, fusion) = l.fusion.forward(p, &pooled.features, &local_nodes, &summary)?;
        let (logits, classifier) = l.classifier.forward(p, &z, train, seed)?;
        let out = ForwardOutput {
            logits,
            attention: attention.weights(),
            gate: fusion.gate().to_vec(),
            assignment: pooled.assignment,
            pooled_adjacency: pooled.adjacency,
            global_nodes: pooled.features,
            local_nodes,
        };
        let tape = Tape {
            global_t,
            local_t,
            g1,
            g2,
            pool,
            l1,
            l2,
            attention,
            fusion,
            classifier,
        };
        Ok((out, tape))
    }

    /// Parameter gradients and the gradient with respect to the features.
    fn backprop(&self, p: &ParamSet, tape: &Tape, grad_logits: &[f64]) -> (ParamSet, Matrix) {
        let l = &self.layers;
        let mut grads = p.zeros_like();
        let dz = l.classifier.backward(p, &tape.classifier, grad_logits, &mut grads);
        let fused = l.fusion.backward(p, &tape.fusion, &dz, &mut grads);

        let dh = l.attention.backward(p, &tape.attention, &fused.local, &mut grads);
        let dh = l.local2.backward(p, &tape.local_t, &tape.l2, &dh, &mut grads);
        let mut dx = l.local1.backward(p, &tape.local_t, &tape.l1, &dh, &mut grads);

        let dh = l.pool.backward(p, &tape.global_t, &tape.pool, &fused.global, &mut grads);
        let dh = l.global2.backward(p, &tape.global_t, &tape.g2, &dh, &mut grads);
        dx.add_assign(&l.global1.backward(p, &tape.global_t, &tape.g1, &dh, &mut grads));

        let n = dx.rows() as f64;
        for r in 0..dx.rows() {
            for (o, s) in dx.row_mut(r).iter_mut().zip(&fused.summary) {
                *o += s / n;
            }
        }
        (grads, dx)
    }

    pub fn forward(&self, sample: &FeatureGraphSample, train: bool, seed: u64) -> Result<ForwardOutput> {
        self.run(
            &self.params,
            &sample.features,
            &sample.global_adjacency,
            &sample.local_adjacency,
            train,
            seed,
        )
        .map(|(out, _)| out)
    }

    /// Loss (cross-entropy plus any assignment penalty) and its parameter
    /// gradient for one sample.
    pub fn forward_backward(
        &self,
        sample: &FeatureGraphSample,
        target: Target,
        train: bool,
        seed: u64,
    ) -> Result<(f64, ParamSet, ForwardOutput)> {
        let (out, tape) = self.run(
            &self.params,
            &sample.features,
            &sample.global_adjacency,
            &sample.local_adjacency,
            train,
            seed,
        )?;
        let (loss, dl) = cross_entropy(&out.logits, target.of(&sample.labels));
        let penalty = self.layers.pool.entropy_penalty(&tape.pool);
        let (grads, _) = self.backprop(&self.params, &tape, &dl);
        Ok((loss + penalty, grads, out))
    }

    pub fn predict(&self, sample: &FeatureGraphSample) -> Result<usize> {
        let out = self.forward(sample, false, 0)?;
        Ok(if out.logits[1] > out.logits[0] { 1 } else { 0 })
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode_weights(self)?)
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_weights(&bytes, path)
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    (0..m.cols()).map(|c| (0..m.rows()).map(|r| m[(r, c)]).sum::<f64>() / n).collect()
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"FGWEIGHT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    param_count: usize,
    fingerprint: String,
}

/// Magic, version, 4 reserved bytes, header length (u64), JSON header,
/// then every tensor as little-endian f64 in declaration order.
pub fn encode_weights(m: &ModelState) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&WeightsHeader {
        config: m.config.clone(),
        names: m.params.names().to_vec(),
        shapes: m.params.shapes(),
        param_count: m.param_count(),
        fingerprint: m.fingerprint(),
    })?;
    let mut out = Vec::with_capacity(24 + header.len() + 8 * m.param_count());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in m.params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 24 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "not a weight file".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported weight file version {version}"),
        });
    }
    let header_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = bytes
        .get(24..24 + header_len)
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: WeightsHeader = serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?;
    let payload = &bytes[24 + header_len..];
    if payload.len() != 8 * header.param_count {
        return Err(corrupt(format!(
            "payload holds {} bytes, header promises {} values",
            payload.len(),
            header.param_count
        )));
    }
    let model = ModelState::build(&header.config)?;
    if model.params.shapes() != header.shapes || model.fingerprint() != header.fingerprint {
        return Err(corrupt("tensor shapes disagree with the stored architecture".into()));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = model.params.clone();
    params.assign_flat(&flat)?;
    model.with_params(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub region: String,
    pub channel: String,
    pub mean_weight: f64,
}

/// Channel attention averaged over `samples`.
pub fn export_attention(model: &ModelState, samples: &[FeatureGraphSample]) -> Result<Vec<AttentionRow>> {
    if samples.is_empty() {
        return Err(Error::Data("attention export needs at least one sample".into()));
    }
    let cfg = &model.config;
    let mut sums: Vec<Vec<f64>> = cfg.regions.iter().map(|r| vec![0.0; r.len()]).collect();
    for s in samples {
        let out = model.forward(s, false, 0)?;
        for (acc, w) in sums.iter_mut().zip(&out.attention) {
            acc.iter_mut().zip(w).for_each(|(a, v)| *a += v);
        }
    }
    Ok(average_attention(cfg, &sums, samples.len()))
}

fn average_attention(cfg: &ModelConfig, sums: &[Vec<f64>], count: usize) -> Vec<AttentionRow> {
    let mut rows = Vec::new();
    for ((name, idx), w) in cfg.region_names.iter().zip(&cfg.regions).zip(sums) {
        for (&c, v) in idx.iter().zip(w) {
            rows.push(AttentionRow {
                region: name.clone(),
                channel: cfg.channel_labels[c].clone(),
                mean_weight: v / count as f64,
            });
        }
    }
    rows
}

/// Row-wise mean of several attention tables with identical layout.
pub fn mean_attention(tables: &[Vec<AttentionRow>]) -> Result<Vec<AttentionRow>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Data("no attention tables to average".into()))?;
    let mut out = first.clone();
    for row in &mut out {
        row.mean_weight = 0.0;
    }
    for t in tables {
        if t.len() != out.len() {
            return Err(Error::Shape("attention tables differ in length".into()));
        }
        for (o, r) in out.iter_mut().zip(t) {
            o.mean_weight += r.mean_weight / tables.len() as f64;
        }
    }
    Ok(out)
}

pub fn attention_csv(rows: &[AttentionRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Small architecture used by the whole-model gradient check.
pub fn reduced_config(seed: u64) -> ModelConfig {
    let map = RegionMap::contiguous(&[3, 2, 3]);
    ModelConfig {
        global_hidden: 4,
        local_hidden: 4,
        gate_hidden: 5,
        hidden_dim: 6,
        dropout: 0.25,
        seed,
        ..ModelConfig::for_regions(&map)
    }
}

/// Random features and graphs for a model configuration.
pub fn random_sample(cfg: &ModelConfig, seed: u64) -> FeatureGraphSample {
    use rand::Rng;
    let mut rng = rng_for(seed, &[0x5341_4d50]);
    let n = cfg.n_channels();
    let mut region_of = vec![0; n];
    for (k, r) in cfg.regions.iter().enumerate() {
        for &c in r {
            region_of[c] = k;
        }
    }
    let mut graph = |same_region_only: bool| {
        Matrix::from_fn(n, n, |i, j| {
            let allowed = i != j && (!same_region_only || region_of[i] == region_of[j]);
            if allowed && rng.random::<f64>() < 0.7 {
                rng.random_range(0.05..1.0)
            } else {
                0.0
            }
        })
    };
    let global_adjacency = graph(false);
    let local_adjacency = graph(true);
    let features = Matrix::from_fn(n, cfg.feature_dim, |_, _| rng.random_range(-2.0..2.0));
    let label = rng.random_range(0..2u8);
    FeatureGraphSample {
        features,
        global_adjacency,
        local_adjacency,
        labels: LabelPair {
            arousal: label,
            valence: label,
        },
        trial: "random".into(),
        window: 0,
        floored: 0,
    }
}

/// Central-difference check of the training loss gradient with respect to
/// every parameter and every input feature of a reduced model, in training
/// mode with a fixed dropout mask.
pub fn check_model(seed: u64, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut cfg = reduced_config(seed);
    cfg.assignment_entropy = if seed % 2 == 1 { 0.1 } else { 0.0 };
    let model = ModelState::build(&cfg)?;
    let sample = random_sample(&cfg, seed);
    let label = Target::Arousal.of(&sample.labels);
    let mask_seed = derive_seed(seed, &[7]);
    let n_params = model.params.element_count();
    let eval = |p: &ParamSet, features: &Matrix| -> Result<(f64, ParamSet, Matrix)> {
        let (out, tape) = model.run(
            p,
            features,
            &sample.global_adjacency,
            &sample.local_adjacency,
            true,
            mask_seed,
        )?;
        let (loss, dl) = cross_entropy(&out.logits, label);
        let (g, dx) = model.backprop(p, &tape, &dl);
        Ok((loss + model.layers.pool.entropy_penalty(&tape.pool), g, dx))
    };
    let (_, g, dx) = eval(&model.params, &sample.features)?;
    let mut analytic = g.flatten();
    analytic.extend_from_slice(dx.data());
    let mut x = model.params.flatten();
    x.extend_from_slice(sample.features.data());
    let shape = sample.features.shape();
    let f = |v: &[f64]| {
        let mut p = model.params.clone();
        p.assign_flat(&v[..n_params]).expect("parameter length");
        let features = Matrix::new(shape.0, shape.1, v[n_params..].to_vec()).expect("feature shape");
        eval(&p, &features).expect("model evaluation").0
    };
    Ok(grad_check(f, &x, &analytic, h, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_budget() {
        let cfg = ModelConfig::default_32();
        let m = ModelState::build(&cfg).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
        assert_eq!(m.param_count(), 11_621);
        assert!(m.param_count() <= 60_000);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::default_32();
        assert_eq!(ModelState::build(&cfg).unwrap(), ModelState::build(&cfg).unwrap());
        let other = ModelState::build(&ModelConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(other.params, ModelState::build(&cfg).unwrap().params);
    }

    #[test]
    fn fingerprint_tracks_shapes_only() {
        let cfg = ModelConfig::default_32();
        let a = ModelState::build(&cfg).unwrap();
        let b = ModelState::build(&ModelConfig { seed: 9, ..cfg.clone() }).unwrap();
        let c = ModelState::build(&ModelConfig {
            hidden_dim: 33,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn rejects_inconsistent_regions() {
        let mut cfg = ModelConfig::default_32();
        cfg.pooled_nodes = 6;
        assert!(matches!(ModelState::build(&cfg), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default_32();
        cfg.regions[0].push(5);
        assert!(matches!(ModelState::build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shape_contract_on_32_channels() {
        let cfg = ModelConfig::default_32();
        let m = ModelState::build(&cfg).unwrap();
        let s = random_sample(&cfg, 3);
        let out = m.forward(&s, false, 0).unwrap();
        assert_eq!(out.logits.len(), 2);
        assert_eq!(out.assignment.shape(), (32, 7));
        assert_eq!(out.pooled_adjacency.shape(), (7, 7));
        assert_eq!(out.attention.len(), 7);
        assert_eq!(out.gate.len(), 7);
        for row in out.assignment.to_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let bad = FeatureGraphSample {
            features: Matrix::zeros(31, 5),
            ..s
        };
        assert!(matches!(m.forward(&bad, false, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_features_reach_only_biases() {
        let cfg = ModelConfig::default_32();
        let mut m = ModelState::build(&cfg).unwrap();
        let mut s = random_sample(&cfg, 4);
        s.features = Matrix::zeros(32, 5);
        let a = m.forward(&s, false, 0).unwrap();
        // With no input signal the branches emit zeros, so the graphs are
        // irrelevant.
        s.global_adjacency = Matrix::zeros(32, 32);
        s.local_adjacency = Matrix::zeros(32, 32);
        assert_eq!(a.logits, m.forward(&s, false, 0).unwrap().logits);
        // Changing a first-layer weight has no effect either.
        m.params.get_mut(0).data_mut()[0] += 1.0;
        assert_eq!(a.logits, m.forward(&s, false, 0).unwrap().logits);
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let cfg = ModelConfig::default_32();
        let m = ModelState::build(&cfg).unwrap();
        let s = random_sample(&cfg, 5);
        assert_eq!(m.forward(&s, false, 1).unwrap(), m.forward(&s, false, 2).unwrap());
    }

    #[test]
    fn doubling_global_weights_changes_nothing() {
        let cfg = ModelConfig::default_32();
        let m = ModelState::build(&cfg).unwrap();
        let mut s = random_sample(&cfg, 6);
        let a = m.forward(&s, false, 0).unwrap();
        s.global_adjacency = s.global_adjacency.scale(2.0);
        let b = m.forward(&s, false, 0).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_permutation_leaves_logits_unchanged() {
        let cfg = ModelConfig::default_32();
        let m = ModelState::build(&cfg).unwrap();
        let s = random_sample(&cfg, 7);
        let n = 32;
        // perm[new] = old
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut pcfg = cfg.clone();
        pcfg.regions = cfg.regions.iter().map(|r| r.iter().map(|&c| inv[c]).collect()).collect();
        pcfg.channel_labels = perm.iter().map(|&o| cfg.channel_labels[o].clone()).collect();
        let pm = ModelState::build(&pcfg).unwrap().with_params(m.params.clone()).unwrap();
        let ps = FeatureGraphSample {
            features: s.features.select_rows(&perm),
            global_adjacency: s.global_adjacency.permute_symmetric(&perm),
            local_adjacency: s.local_adjacency.permute_symmetric(&perm),
            ..s.clone()
        };
        let a = m.forward(&s, false, 0).unwrap();
        let b = pm.forward(&ps, false, 0).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn full_model_gradient() {
        for seed in 0..20 {
            let r = check_model(seed, 1e-5, 1e-4).unwrap();
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let cfg = ModelConfig::default_32();
        let m = ModelState::build(&ModelConfig { seed: 3, ..cfg }).unwrap();
        let bytes = encode_weights(&m).unwrap();
        let back = decode_weights(&bytes, Path::new("w.bin")).unwrap();
        assert_eq!(back, m);
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 8], Path::new("w.bin")),
            Err(Error::CorruptFile { .. })
        ));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_weights(&wrong, Path::new("w.bin")), Err(Error::Format { .. })));
    }

    #[test]
    fn attention_table_averages() {
        let cfg = ModelConfig::default_32();
        let m = ModelState::build(&cfg).unwrap();
        let s = random_sample(&cfg, 8);
        let single = export_attention(&m, std::slice::from_ref(&s)).unwrap();
        let out = m.forward(&s, false, 0).unwrap();
        let flat: Vec<f64> = out.attention.iter().flatten().copied().collect();
        assert_eq!(single.iter().map(|r| r.mean_weight).collect::<Vec<_>>(), flat);
        for w in &out.attention {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let triple = export_attention(&m, &[s.clone(), s.clone(), s.clone()]).unwrap();
        for (a, b) in single.iter().zip(&triple) {
            assert!((a.mean_weight - b.mean_weight).abs() < 1e-15);
        }
        assert_eq!(single.len(), 32);
        assert_eq!(single[0].region, "Prefrontal");
        assert_eq!(single[0].channel, "Fp1");
        assert!(attention_csv(&single).unwrap().starts_with("region,channel,mean_weight\n"));
        assert!(export_attention(&m, &[]).is_err());
    }
}
