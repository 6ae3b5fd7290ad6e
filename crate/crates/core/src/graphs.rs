//! Causal graphs built from flow decompositions.
//!
//! Adjacency convention: `A[(i, j)]` is the strength of the edge `i → j`.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::causality::{analyze, FlowDecomposition, SignificanceConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::derive_seed;
use crate::timeseries::TimeSeriesSet;

/// Default 7-region partition of a 32-electrode 10-20 montage.
pub const DEFAULT_REGION_MAP: &str = include_str!("../data/regions_32.csv");

const REGION_SEED_TAG: u64 = 0x5245_4749_4f4e; // "REGION"

/// Assignment of channels to brain regions.
///
/// The canonical ordering lists regions in order of first appearance and,
/// within a region, channels in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    regions: Vec<String>,
    /// Canonical channel order.
    labels: Vec<String>,
    /// Region index of each channel in canonical order.
    region_of: Vec<usize>,
}

impl RegionMap {
    /// Parses `channel_label,region_name` lines. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut regions: Vec<String> = Vec::new();
        let mut entries: Vec<(String, usize)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, region) = line.split_once(',').ok_or_else(|| {
                Error::Config(format!("region map line {}: expected `channel,region`", lineno + 1))
            })?;
            let (label, region) = (label.trim(), region.trim());
            if label.is_empty() || region.is_empty() {
                return Err(Error::Config(format!("region map line {}: empty field", lineno + 1)));
            }
            if entries.iter().any(|(l, _)| l == label) {
                return Err(Error::Config(format!("channel {label} assigned twice")));
            }
            let r = match regions.iter().position(|x| x == region) {
                Some(r) => r,
                None => {
                    regions.push(region.to_string());
                    regions.len() - 1
                }
            };
            entries.push((label.to_string(), r));
        }
        if entries.is_empty() {
            return Err(Error::Config("empty region map".into()));
        }
        let mut labels = Vec::with_capacity(entries.len());
        let mut region_of = Vec::with_capacity(entries.len());
        for r in 0..regions.len() {
            for (label, _) in entries.iter().filter(|(_, x)| *x == r) {
                labels.push(label.clone());
                region_of.push(r);
            }
        }
        Ok(Self {
            regions,
            labels,
            region_of,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_32() -> Self {
        Self::parse(DEFAULT_REGION_MAP).expect("bundled region map parses")
    }

    /// Contiguous regions of `sizes[k]` channels named `R0, R1, ...` with
    /// channels `ch0, ch1, ...`.
    pub fn contiguous(sizes: &[usize]) -> Self {
        let mut text = String::new();
        let mut c = 0;
        for (r, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                let _ = writeln!(text, "ch{c},R{r}");
                c += 1;
            }
        }
        Self::parse(&text).expect("generated region map parses")
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_channels(&self) -> usize {
        self.labels.len()
    }

    pub fn region_names(&self) -> &[String] {
        &self.regions
    }

    /// Channel labels in canonical order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn region_of(&self, canonical_index: usize) -> usize {
        self.region_of[canonical_index]
    }

    /// Canonical index ranges of each region.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.regions.len());
        let mut start = 0;
        for r in 0..self.regions.len() {
            let size = self.region_of.iter().filter(|&&x| x == r).count();
            out.push(start..start + size);
            start += size;
        }
        out
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.len()).collect()
    }

    /// Indices into `labels` that put them in canonical order.
    pub fn ordering_for(&self, labels: &[String]) -> Result<Vec<usize>> {
        if labels.len() != self.labels.len() {
            return Err(Error::Config(format!(
                "recording has {} channels, region map has {}",
                labels.len(),
                self.labels.len()
            )));
        }
        self.labels
            .iter()
            .map(|l| {
                labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::Config(format!("channel {l} missing from recording")))
            })
            .collect()
    }

    /// `x` with channels in canonical order.
    pub fn reorder(&self, x: &TimeSeriesSet) -> Result<TimeSeriesSet> {
        Ok(x.select(&self.ordering_for(x.labels())?))
    }

    /// Region name per canonical channel.
    pub fn node_regions(&self) -> Vec<String> {
        self.region_of.iter().map(|&r| self.regions[r].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub labels: Vec<String>,
    /// Region name per node; empty strings when unknown.
    pub regions: Vec<String>,
    /// `adjacency[(i, j)]`: strength of `i → j`.
    pub adjacency: Matrix,
    /// p-value per ordered pair, when a test was run.
    pub p_values: Option<Matrix>,
    pub kind: GraphKind,
}

impl CausalGraph {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn density(&self) -> f64 {
        let n = self.n();
        if n < 2 {
            return 0.0;
        }
        self.edge_count() as f64 / (n * (n - 1)) as f64
    }
}

/// `A_ij = |τ_{i→j}|` for pairs with `p_{i→j} < alpha`, zero elsewhere.
pub fn build_global_adjacency(
    f: &FlowDecomposition,
    alpha: f64,
    labels: &[String],
) -> Result<CausalGraph> {
    let n = f.n();
    let tau = f
        .tau
        .as_ref()
        .ok_or_else(|| Error::Data("flow decomposition is not normalized".into()))?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} nodes", labels.len())));
    }
    let keep_all = alpha >= 1.0;
    let p = match (&f.p_values, keep_all) {
        (Some(p), _) => Some(p),
        (None, true) => None,
        (None, false) => {
            return Err(Error::Data("flow decomposition has no p-values".into()));
        }
    };
    let adjacency = Matrix::from_fn(n, n, |i, j| {
        let significant = keep_all || p.is_some_and(|p| p[(i, j)] < alpha);
        if i != j && significant {
            tau[(i, j)].abs()
        } else {
            0.0
        }
    });
    Ok(CausalGraph {
        labels: labels.to_vec(),
        regions: vec![String::new(); n],
        adjacency,
        p_values: f.p_values.clone(),
        kind: GraphKind::Global,
    })
}

/// Estimates, tests and thresholds the flow of `x` into a global graph.
pub fn global_causal_graph(x: &TimeSeriesSet, cfg: &SignificanceConfig) -> Result<CausalGraph> {
    let f = analyze(x, cfg)?;
    build_global_adjacency(&f, cfg.alpha, x.labels())
}

/// Seed used for region `r` of the local graph.
pub fn region_seed(seed: u64, region: usize) -> u64 {
    derive_seed(seed, &[REGION_SEED_TAG, region as u64])
}

/// Block-diagonal graph with flow estimated inside each region only.
///
/// The result is in canonical region order regardless of the channel order
/// of `x`.
pub fn build_local_adjacency(
    x: &TimeSeriesSet,
    regions: &RegionMap,
    cfg: &SignificanceConfig,
) -> Result<CausalGraph> {
    let x = regions.reorder(x)?;
    let n = x.n_channels();
    let mut adjacency = Matrix::zeros(n, n);
    let mut p_values = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    for (r, block) in regions.blocks().into_iter().enumerate() {
        if block.len() < 2 {
            warn!(
                "region {} has {} channel(s); its local block is empty",
                regions.region_names()[r],
                block.len()
            );
            continue;
        }
        let idx: Vec<usize> = block.clone().collect();
        let sub = x.select(&idx);
        let g = global_causal_graph(&sub, &cfg.with_seed(region_seed(cfg.seed, r)))?;
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                adjacency[(ia, ib)] = g.adjacency[(a, b)];
                if let Some(p) = &g.p_values {
                    p_values[(ia, ib)] = p[(a, b)];
                }
            }
        }
    }
    Ok(CausalGraph {
        labels: x.labels().to_vec(),
        regions: regions.node_regions(),
        adjacency,
        p_values: Some(p_values),
        kind: GraphKind::Local,
    })
}

/// True when every nonzero entry of `a` lies inside one of `blocks`.
pub fn is_block_diagonal(a: &Matrix, blocks: &[Range<usize>]) -> bool {
    let block_of = |i: usize| blocks.iter().position(|b| b.contains(&i));
    (0..a.rows()).all(|i| {
        (0..a.cols()).all(|j| a[(i, j)] == 0.0 || (block_of(i).is_some() && block_of(i) == block_of(j)))
    })
}

/// Forward and backward random-walk transition matrices
/// `(D_O⁻¹ A, D_I⁻¹ Aᵀ)`. Rows with zero degree stay zero.
pub fn degree_transitions(a: &Matrix) -> (Matrix, Matrix) {
    (row_normalize(a), row_normalize(&a.transpose()))
}

fn row_normalize(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let deg: f64 = row.iter().sum();
        if deg != 0.0 {
            row.iter_mut().for_each(|v| *v /= deg);
        }
    }
    out
}

/// Keeps the `k` largest-magnitude incoming entries of every column.
/// Ties go to the smaller source index.
pub fn topk_sparsify(a: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for j in 0..a.cols() {
        let mut sources: Vec<usize> = (0..a.rows()).filter(|&i| a[(i, j)] != 0.0).collect();
        sources.sort_by(|&x, &y| {
            a[(y, j)]
                .abs()
                .total_cmp(&a[(x, j)].abs())
                .then(x.cmp(&y))
        });
        for &i in sources.iter().take(k) {
            out[(i, j)] = a[(i, j)];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    Dot,
    Csv,
}

impl GraphFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "json" => Some(Self::Json),
            "dot" | "gv" => Some(Self::Dot),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphNode {
    id: usize,
    label: String,
    region: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphEdge {
    src: usize,
    dst: usize,
    weight: f64,
    p: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphDocument {
    kind: GraphKind,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
}

fn edges(g: &CausalGraph) -> Vec<GraphEdge> {
    let n = g.n();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let w = g.adjacency[(i, j)];
            if w != 0.0 {
                out.push(GraphEdge {
                    src: i,
                    dst: j,
                    weight: w,
                    p: g.p_values.as_ref().map(|p| p[(i, j)]),
                });
            }
        }
    }
    out
}

pub fn graph_to_json(g: &CausalGraph) -> Result<String> {
    let doc = GraphDocument {
        kind: g.kind,
        nodes: (0..g.n())
            .map(|id| GraphNode {
                id,
                label: g.labels[id].clone(),
                region: g.regions[id].clone(),
            })
            .collect(),
        edges: edges(g),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Inverse of [`graph_to_json`]. p-values of absent edges come back as 1.
pub fn graph_from_json(text: &str) -> Result<CausalGraph> {
    let doc: GraphDocument = serde_json::from_str(text)?;
    let n = doc.nodes.len();
    if doc.nodes.iter().enumerate().any(|(i, node)| node.id != i) {
        return Err(Error::Data("graph node ids must be 0..n in order".into()));
    }
    let mut adjacency = Matrix::zeros(n, n);
    let has_p = doc.edges.iter().any(|e| e.p.is_some());
    let mut p = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    for e in &doc.edges {
        if e.src >= n || e.dst >= n {
            return Err(Error::Data(format!("edge {}->{} out of range", e.src, e.dst)));
        }
        adjacency[(e.src, e.dst)] = e.weight;
        if let Some(pv) = e.p {
            p[(e.src, e.dst)] = pv;
        }
    }
    Ok(CausalGraph {
        labels: doc.nodes.iter().map(|x| x.label.clone()).collect(),
        regions: doc.nodes.iter().map(|x| x.region.clone()).collect(),
        adjacency,
        p_values: has_p.then_some(p),
        kind: doc.kind,
    })
}

pub fn graph_to_dot(g: &CausalGraph) -> String {
    let mut s = String::from("digraph causal {\n");
    for (i, label) in g.labels.iter().enumerate() {
        let _ = writeln!(s, "  n{i} [label=\"{label}\"];");
    }
    for e in edges(g) {
        let _ = writeln!(s, "  n{} -> n{} [label=\"{:.4}\", weight={}];", e.src, e.dst, e.weight, e.weight);
    }
    s.push_str("}\n");
    s
}

pub fn graph_to_csv(g: &CausalGraph) -> String {
    let mut s = String::from("src,dst,src_label,dst_label,weight,p\n");
    for e in edges(g) {
        let p = e.p.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.src, e.dst, g.labels[e.src], g.labels[e.dst], e.weight, p
        );
    }
    s
}

pub fn export_graph(g: &CausalGraph, format: GraphFormat, path: &Path) -> Result<()> {
    let text = match format {
        GraphFormat::Json => graph_to_json(g)?,
        GraphFormat::Dot => graph_to_dot(g),
        GraphFormat::Csv => graph_to_csv(g),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_graph(path: &Path) -> Result<CausalGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    graph_from_json(&text)
}
