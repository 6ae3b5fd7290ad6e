//! Network layers with hand-written backward passes.
//!
//! Every learnable tensor lives in a flat [`ParamSet`]; layers only remember
//! where their tensors start. `forward` returns the output together with a
//! tape holding what `backward` needs, and `backward` adds parameter
//! gradients into a `ParamSet` of the same layout and returns the gradient
//! with respect to the layer input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::degree_transitions;
use crate::numerics::{dot, Matrix};
use crate::rng::{rng_for, SplitMix64};

pub type ParamId = usize;

/// Named tensors in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Matrix::shape).collect()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.rows() * t.cols()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale_mut(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// All entries concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.element_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.element_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Adds a `rows × cols` tensor drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn push_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut SplitMix64,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.push(name, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Identity => pre.clone(),
        }
    }

    fn backprop(self, pre: &Matrix, grad: &Matrix) -> Matrix {
        match self {
            Activation::Relu => Matrix::from_fn(grad.rows(), grad.cols(), |r, c| {
                if pre[(r, c)] > 0.0 {
                    grad[(r, c)]
                } else {
                    0.0
                }
            }),
            Activation::Identity => grad.clone(),
        }
    }
}

fn check_shape(what: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{what}: expected {rows}x{cols}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Forward `D_O⁻¹A` and backward `D_I⁻¹Aᵀ` random-walk matrices of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub forward: Matrix,
    pub backward: Matrix,
}

impl Transitions {
    pub fn from_adjacency(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!("adjacency is {}x{}", a.rows(), a.cols())));
        }
        let (forward, backward) = degree_transitions(a);
        Ok(Self { forward, backward })
    }

    pub fn n(&self) -> usize {
        self.forward.rows()
    }
}

/// Directed diffusion convolution
/// `σ[Σ_{k<K} (P_fᵏ X Θ_{k,1} + P_bᵏ X Θ_{k,2})]`, no bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DConv {
    pub input: usize,
    pub output: usize,
    pub order: usize,
    pub activation: Activation,
    first: ParamId,
}

#[derive(Debug, Clone)]
pub struct DConvTape {
    forward_powers: Vec<Matrix>,
    backward_powers: Vec<Matrix>,
    pre: Matrix,
}

impl DConv {
    /// Registers `2·order` tensors of `input × output`, ordered
    /// `Θ_{0,1}, Θ_{0,2}, Θ_{1,1}, …`.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        order: usize,
        activation: Activation,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if order == 0 || input == 0 || output == 0 {
            return Err(Error::Config(format!(
                "{name}: diffusion order and widths must be >= 1"
            )));
        }
        let fan_in = 2 * order * input;
        let mut first = None;
        for k in 0..order {
            let id = params.push_uniform(format!("{name}.theta{k}.fwd"), input, output, fan_in, rng);
            first.get_or_insert(id);
            params.push_uniform(format!("{name}.theta{k}.bwd"), input, output, fan_in, rng);
        }
        Ok(Self {
            input,
            output,
            order,
            activation,
            first: first.unwrap(),
        })
    }

    fn theta(&self, k: usize, backward: bool) -> ParamId {
        self.first + 2 * k + backward as usize
    }

    pub fn param_count(&self) -> usize {
        2 * self.order * self.input * self.output
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix, t: &Transitions) -> Result<(Matrix, DConvTape)> {
        check_shape("dconv input", x, t.n(), self.input)?;
        let mut forward_powers = Vec::with_capacity(self.order);
        let mut backward_powers = Vec::with_capacity(self.order);
        forward_powers.push(x.clone());
        backward_powers.push(x.clone());
        for k in 1..self.order {
            forward_powers.push(t.forward.matmul(&forward_powers[k - 1]));
            backward_powers.push(t.backward.matmul(&backward_powers[k - 1]));
        }
        let mut pre = Matrix::zeros(x.rows(), self.output);
        for k in 0..self.order {
            pre.add_assign(&forward_powers[k].matmul(p.get(self.theta(k, false))));
            pre.add_assign(&backward_powers[k].matmul(p.get(self.theta(k, true))));
        }
        let out = self.activation.apply(&pre);
        Ok((
            out,
            DConvTape {
                forward_powers,
                backward_powers,
                pre,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamSet,
        t: &Transitions,
        tape: &DConvTape,
        grad_out: &Matrix,
        grads: &mut ParamSet,
    ) -> Matrix {
        let g = self.activation.backprop(&tape.pre, grad_out);
        for k in 0..self.order {
            grads
                .get_mut(self.theta(k, false))
                .add_assign(&tape.forward_powers[k].t_matmul(&g));
            grads
                .get_mut(self.theta(k, true))
                .add_assign(&tape.backward_powers[k].t_matmul(&g));
        }
        // Σ_k (Pᵏ)ᵀ G Θ_kᵀ by Horner's rule.
        let horner = |transition: &Matrix, backward: bool| {
            let mut acc = g.matmul_t(p.get(self.theta(self.order - 1, backward)));
            for k in (0..self.order - 1).rev() {
                acc = transition.t_matmul(&acc);
                acc.add_assign(&g.matmul_t(p.get(self.theta(k, backward))));
            }
            acc
        };
        let mut dx = horner(&t.forward, false);
        dx.add_assign(&horner(&t.backward, true));
        dx
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward through `softmax`: `w ⊙ (g − ⟨g, w⟩)`.
fn softmax_backward(w: &[f64], g: &[f64]) -> Vec<f64> {
    let inner = dot(w, g);
    w.iter().zip(g).map(|(wi, gi)| wi * (gi - inner)).collect()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = softmax(m.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// Output of a differentiable pooling step.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    /// `Sᵀ Z`, clusters × features.
    pub features: Matrix,
    /// `Sᵀ A S`; reported only, no gradient flows through it.
    pub adjacency: Matrix,
    /// Row-stochastic assignment, nodes × clusters.
    pub assignment: Matrix,
}

/// Soft assignment of nodes to clusters followed by feature pooling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffPool {
    pub assign: DConv,
    pub embed: DConv,
    pub clusters: usize,
    /// Weight of the mean row entropy of `S` added to the loss.
    pub entropy_weight: f64,
}

#[derive(Debug, Clone)]
pub struct DiffPoolTape {
    assign: DConvTape,
    embed: DConvTape,
    z: Matrix,
    s: Matrix,
}

impl DiffPool {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        clusters: usize,
        assign_order: usize,
        embed_order: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let assign = DConv::new(
            params,
            &format!("{name}.assign"),
            input,
            clusters,
            assign_order,
            Activation::Identity,
            rng,
        )?;
        let embed = DConv::new(
            params,
            &format!("{name}.embed"),
            input,
            output,
            embed_order,
            Activation::Relu,
            rng,
        )?;
        Ok(Self {
            assign,
            embed,
            clusters,
            entropy_weight: 0.0,
        })
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix, a: &Matrix, t: &Transitions) -> Result<(Pooled, DiffPoolTape)> {
        if self.clusters >= t.n() {
            return Err(Error::Shape(format!(
                "pooling {} nodes into {} clusters",
                t.n(),
                self.clusters
            )));
        }
        check_shape("pool adjacency", a, t.n(), t.n())?;
        let (logits, assign) = self.assign.forward(p, x, t)?;
        let s = softmax_rows(&logits);
        let (z, embed) = self.embed.forward(p, x, t)?;
        let pooled = Pooled {
            features: s.t_matmul(&z),
            adjacency: s.t_matmul(&a.matmul(&s)),
            assignment: s.clone(),
        };
        Ok((pooled, DiffPoolTape { assign, embed, z, s }))
    }

    /// Mean row entropy of the assignment, scaled by `entropy_weight`.
    pub fn entropy_penalty(&self, tape: &DiffPoolTape) -> f64 {
        if self.entropy_weight == 0.0 {
            return 0.0;
        }
        let h: f64 = tape.s.data().iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
        self.entropy_weight * h / tape.s.rows() as f64
    }

    pub fn backward(
        &self,
        p: &ParamSet,
        t: &Transitions,
        tape: &DiffPoolTape,
        grad_features: &Matrix,
        grads: &mut ParamSet,
    ) -> Matrix {
        let dz = tape.s.matmul(grad_features);
        let mut ds = tape.z.matmul_t(grad_features);
        if self.entropy_weight != 0.0 {
            let scale = self.entropy_weight / tape.s.rows() as f64;
            for (d, &s) in ds.data_mut().iter_mut().zip(tape.s.data()) {
                *d -= scale * (s.max(f64::MIN_POSITIVE).ln() + 1.0);
            }
        }
        let mut dlogits = Matrix::zeros(ds.rows(), ds.cols());
        for r in 0..ds.rows() {
            let row = softmax_backward(tape.s.row(r), ds.row(r));
            dlogits.row_mut(r).copy_from_slice(&row);
        }
        let mut dx = self.embed.backward(p, t, &tape.embed, &dz, grads);
        dx.add_assign(&self.assign.backward(p, t, &tape.assign, &dlogits, grads));
        dx
    }
}

/// Pools with a given assignment: `Sᵀ Z`.
pub fn pool_with_assignment(s: &Matrix, z: &Matrix) -> Matrix {
    s.t_matmul(z)
}

/// Per-region channel attention: each region's channel-mean vector passes
/// through its own two-layer network and a softmax, and the weights mix the
/// region's rows into one output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPool {
    pub regions: Vec<Vec<usize>>,
    first: ParamId,
}

#[derive(Debug, Clone)]
struct RegionTape {
    summary: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionTape {
    x: Matrix,
    regions: Vec<RegionTape>,
}

impl AttentionTape {
    /// Softmax weights per region, in region channel order.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        self.regions.iter().map(|r| r.weights.clone()).collect()
    }
}

impl AttentionPool {
    /// Registers `w1 (C×C), b1 (1×C), w2 (C×C), b2 (1×C)` per region.
    pub fn new(params: &mut ParamSet, name: &str, regions: Vec<Vec<usize>>, rng: &mut SplitMix64) -> Result<Self> {
        if let Some(k) = regions.iter().position(Vec::is_empty) {
            return Err(Error::Shape(format!("{name}: region {k} has no channels")));
        }
        let mut first = None;
        for (k, r) in regions.iter().enumerate() {
            let c = r.len();
            let id = params.push_uniform(format!("{name}.r{k}.w1"), c, c, c, rng);
            first.get_or_insert(id);
            params.push_uniform(format!("{name}.r{k}.b1"), 1, c, c, rng);
            params.push_uniform(format!("{name}.r{k}.w2"), c, c, c, rng);
            params.push_uniform(format!("{name}.r{k}.b2"), 1, c, c, rng);
        }
        Ok(Self {
            regions,
            first: first.ok_or_else(|| Error::Shape(format!("{name}: no regions")))?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.regions.iter().map(|r| 2 * (r.len() * r.len() + r.len())).sum()
    }

    fn ids(&self, k: usize) -> [ParamId; 4] {
        let base = self.first + 4 * k;
        [base, base + 1, base + 2, base + 3]
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix) -> Result<(Matrix, AttentionTape)> {
        if let Some(&bad) = self.regions.iter().flatten().find(|&&i| i >= x.rows()) {
            return Err(Error::Shape(format!(
                "region channel {bad} outside a {}-row input",
                x.rows()
            )));
        }
        let d = x.cols();
        let mut out = Matrix::zeros(self.regions.len(), d);
        let mut tapes = Vec::with_capacity(self.regions.len());
        for (k, idx) in self.regions.iter().enumerate() {
            let [w1, b1, w2, b2] = self.ids(k);
            let summary: Vec<f64> = idx.iter().map(|&i| x.row(i).iter().sum::<f64>() / d as f64).collect();
            let hidden_pre = affine(&summary, p.get(w1), p.get(b1));
            let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
            let weights = softmax(&affine(&hidden, p.get(w2), p.get(b2)));
            let row = out.row_mut(k);
            for (&i, &w) in idx.iter().zip(&weights) {
                for (o, v) in row.iter_mut().zip(x.row(i)) {
                    *o += w * v;
                }
            }
            tapes.push(RegionTape {
                summary,
                hidden_pre,
                hidden,
                weights,
            });
        }
        Ok((
            out,
            AttentionTape {
                x: x.clone(),
                regions: tapes,
            },
        ))
    }

    pub fn backward(&self, p: &ParamSet, tape: &AttentionTape, grad_out: &Matrix, grads: &mut ParamSet) -> Matrix {
        let x = &tape.x;
        let d = x.cols();
        let mut dx = Matrix::zeros(x.rows(), d);
        for (k, (idx, rt)) in self.regions.iter().zip(&tape.regions).enumerate() {
            let [w1, b1, w2, b2] = self.ids(k);
            let gy = grad_out.row(k);
            let dw: Vec<f64> = idx.iter().map(|&i| dot(gy, x.row(i))).collect();
            for (&i, &w) in idx.iter().zip(&rt.weights) {
                for (o, g) in dx.row_mut(i).iter_mut().zip(gy) {
                    *o += w * g;
                }
            }
            let dlogit = softmax_backward(&rt.weights, &dw);
            let dhidden = affine_backward(&rt.hidden, &dlogit, p.get(w2), grads, w2, b2);
            let dpre: Vec<f64> = dhidden
                .iter()
                .zip(&rt.hidden_pre)
                .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
                .collect();
            let dsummary = affine_backward(&rt.summary, &dpre, p.get(w1), grads, w1, b1);
            for (&i, ds) in idx.iter().zip(&dsummary) {
                dx.row_mut(i).iter_mut().for_each(|o| *o += ds / d as f64);
            }
        }
        dx
    }
}

/// `v · W + b` for a row vector `v`.
fn affine(v: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = b.row(0).to_vec();
    for (r, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(w.row(r)) {
            *o += vi * wv;
        }
    }
    out
}

/// Accumulates `∂W = vᵀg`, `∂b = g` and returns `g Wᵀ`.
fn affine_backward(v: &[f64], g: &[f64], w: &Matrix, grads: &mut ParamSet, wid: ParamId, bid: ParamId) -> Vec<f64> {
    let gw = grads.get_mut(wid);
    for (r, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, gj) in gw.row_mut(r).iter_mut().zip(g) {
            *o += vi * gj;
        }
    }
    for (o, gj) in grads.get_mut(bid).row_mut(0).iter_mut().zip(g) {
        *o += gj;
    }
    (0..w.rows()).map(|r| dot(w.row(r), g)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-node gate from a feature summary, convex mix of the two branches,
/// then a linear map of the flattened mix to the joint representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatedFusion {
    pub summary_dim: usize,
    pub gate_hidden: usize,
    pub nodes: usize,
    pub node_dim: usize,
    pub output: usize,
    first: ParamId,
}

#[derive(Debug, Clone)]
pub struct FusionTape {
    summary: Option<Vec<f64>>,
    gate_pre: Vec<f64>,
    gate_hidden: Vec<f64>,
    gate: Vec<f64>,
    global: Matrix,
    local: Matrix,
    fused: Vec<f64>,
}

impl FusionTape {
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }
}

/// Gradients leaving the fusion layer.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub global: Matrix,
    pub local: Matrix,
    pub summary: Vec<f64>,
}

impl GatedFusion {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        summary_dim: usize,
        gate_hidden: usize,
        nodes: usize,
        node_dim: usize,
        output: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if [summary_dim, gate_hidden, nodes, node_dim, output].contains(&0) {
            return Err(Error::Config(format!("{name}: widths must be >= 1")));
        }
        let first = params.push_uniform(format!("{name}.gate.w1"), summary_dim, gate_hidden, summary_dim, rng);
        params.push_uniform(format!("{name}.gate.b1"), 1, gate_hidden, summary_dim, rng);
        params.push_uniform(format!("{name}.gate.w2"), gate_hidden, nodes, gate_hidden, rng);
        params.push_uniform(format!("{name}.gate.b2"), 1, nodes, gate_hidden, rng);
        let flat = nodes * node_dim;
        params.push_uniform(format!("{name}.proj.w"), flat, output, flat, rng);
        params.push_uniform(format!("{name}.proj.b"), 1, output, flat, rng);
        Ok(Self {
            summary_dim,
            gate_hidden,
            nodes,
            node_dim,
            output,
            first,
        })
    }

    pub fn param_count(&self) -> usize {
        let (f, h, m, flat) = (self.summary_dim, self.gate_hidden, self.nodes, self.nodes * self.node_dim);
        f * h + h + h * m + m + flat * self.output + self.output
    }

    fn ids(&self) -> [ParamId; 6] {
        std::array::from_fn(|i| self.first + i)
    }

    pub fn forward(&self, p: &ParamSet, global: &Matrix, local: &Matrix, summary: &[f64]) -> Result<(Vec<f64>, FusionTape)> {
        if summary.len() != self.summary_dim {
            return Err(Error::Shape(format!(
                "gate summary has {} entries, expected {}",
                summary.len(),
                self.summary_dim
            )));
        }
        let [w1, b1, w2, b2, ..] = self.ids();
        let gate_pre = affine(summary, p.get(w1), p.get(b1));
        let gate_hidden: Vec<f64> = gate_pre.iter().map(|v| v.max(0.0)).collect();
        let gate: Vec<f64> = affine(&gate_hidden, p.get(w2), p.get(b2)).into_iter().map(sigmoid).collect();
        let (out, mut tape) = self.forward_with_gate(p, global, local, &gate)?;
        tape.summary = Some(summary.to_vec());
        tape.gate_pre = gate_pre;
        tape.gate_hidden = gate_hidden;
        Ok((out, tape))
    }

    /// Fusion with an externally fixed gate; no gradient reaches the gate
    /// network.
    pub fn forward_with_gate(&self, p: &ParamSet, global: &Matrix, local: &Matrix, gate: &[f64]) -> Result<(Vec<f64>, FusionTape)> {
        check_shape("global branch", global, self.nodes, self.node_dim)?;
        check_shape("local branch", local, self.nodes, self.node_dim)?;
        if gate.len() != self.nodes {
            return Err(Error::Shape(format!("gate has {} entries, expected {}", gate.len(), self.nodes)));
        }
        let [.., pw, pb] = self.ids();
        let fused: Vec<f64> = (0..self.nodes)
            .flat_map(|i| {
                let g = gate[i];
                global.row(i).iter().zip(local.row(i)).map(move |(a, b)| g * a + (1.0 - g) * b)
            })
            .collect();
        let out = affine(&fused, p.get(pw), p.get(pb));
        Ok((
            out,
            FusionTape {
                summary: None,
                gate_pre: Vec::new(),
                gate_hidden: Vec::new(),
                gate: gate.to_vec(),
                global: global.clone(),
                local: local.clone(),
                fused,
            },
        ))
    }

    pub fn backward(&self, p: &ParamSet, tape: &FusionTape, grad_out: &[f64], grads: &mut ParamSet) -> FusionGrads {
        let [w1, b1, w2, b2, pw, pb] = self.ids();
        let dfused = affine_backward(&tape.fused, grad_out, p.get(pw), grads, pw, pb);
        let d = self.node_dim;
        let mut dglobal = Matrix::zeros(self.nodes, d);
        let mut dlocal = Matrix::zeros(self.nodes, d);
        let mut dgate = vec![0.0; self.nodes];
        for i in 0..self.nodes {
            let g = tape.gate[i];
            let df = &dfused[i * d..(i + 1) * d];
            for (j, &v) in df.iter().enumerate() {
                dglobal[(i, j)] = g * v;
                dlocal[(i, j)] = (1.0 - g) * v;
                dgate[i] += v * (tape.global[(i, j)] - tape.local[(i, j)]);
            }
        }
        let summary = match &tape.summary {
            Some(summary) => {
                let dlogit: Vec<f64> = dgate.iter().zip(&tape.gate).map(|(dg, g)| dg * g * (1.0 - g)).collect();
                let dhidden = affine_backward(&tape.gate_hidden, &dlogit, p.get(w2), grads, w2, b2);
                let dpre: Vec<f64> = dhidden
                    .iter()
                    .zip(&tape.gate_pre)
                    .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
                    .collect();
                affine_backward(summary, &dpre, p.get(w1), grads, w1, b1)
            }
            None => vec![0.0; self.summary_dim],
        };
        FusionGrads {
            global: dglobal,
            local: dlocal,
            summary,
        }
    }
}

/// Linear → ReLU → inverted dropout → linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    first: ParamId,
}

#[derive(Debug, Clone)]
pub struct ClassifierTape {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    /// Per-unit multiplier: 0 or 1/(1−p) in training, 1 otherwise.
    mask: Vec<f64>,
    hidden: Vec<f64>,
}

impl Classifier {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        if input == 0 || hidden == 0 || classes == 0 {
            return Err(Error::Config(format!("{name}: widths must be >= 1")));
        }
        let first = params.push_uniform(format!("{name}.fc1.w"), input, hidden, input, rng);
        params.push_uniform(format!("{name}.fc1.b"), 1, hidden, input, rng);
        params.push_uniform(format!("{name}.fc2.w"), hidden, classes, hidden, rng);
        params.push_uniform(format!("{name}.fc2.b"), 1, classes, hidden, rng);
        Ok(Self {
            input,
            hidden,
            classes,
            dropout,
            first,
        })
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.classes + self.classes
    }

    fn ids(&self) -> [ParamId; 4] {
        std::array::from_fn(|i| self.first + i)
    }

    /// Dropout multipliers for one forward pass.
    pub fn dropout_mask(&self, train: bool, seed: u64) -> Vec<f64> {
        if !train || self.dropout == 0.0 {
            return vec![1.0; self.hidden];
        }
        let mut rng = rng_for(seed, &[]);
        let keep = 1.0 - self.dropout;
        (0..self.hidden)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }

    pub fn forward(&self, p: &ParamSet, z: &[f64], train: bool, seed: u64) -> Result<(Vec<f64>, ClassifierTape)> {
        if z.len() != self.input {
            return Err(Error::Shape(format!(
                "classifier input has {} entries, expected {}",
                z.len(),
                self.input
            )));
        }
        let [w1, b1, w2, b2] = self.ids();
        let hidden_pre = affine(z, p.get(w1), p.get(b1));
        let mask = self.dropout_mask(train, seed);
        let hidden: Vec<f64> = hidden_pre.iter().zip(&mask).map(|(h, m)| h.max(0.0) * m).collect();
        let logits = affine(&hidden, p.get(w2), p.get(b2));
        Ok((
            logits,
            ClassifierTape {
                input: z.to_vec(),
                hidden_pre,
                mask,
                hidden,
            },
        ))
    }

    pub fn backward(&self, p: &ParamSet, tape: &ClassifierTape, grad_logits: &[f64], grads: &mut ParamSet) -> Vec<f64> {
        let [w1, b1, w2, b2] = self.ids();
        let dhidden = affine_backward(&tape.hidden, grad_logits, p.get(w2), grads, w2, b2);
        let dpre: Vec<f64> = dhidden
            .iter()
            .zip(&tape.hidden_pre)
            .zip(&tape.mask)
            .map(|((g, &h), m)| if h > 0.0 { g * m } else { 0.0 })
            .collect();
        affine_backward(&tape.input, &dpre, p.get(w1), grads, w1, b1)
    }
}

/// Softmax cross-entropy of `logits` against class `label`, with its
/// gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

/// Finite-difference comparison result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Entries whose gradients are both smaller than this are compared on an
/// absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares `analytic` against central differences of `f` at `x`.
/// Relative error per entry is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64, tolerance: f64) -> GradCheckReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    GradCheckReport {
        checked: x.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        tolerance,
        passed: worst.0 <= tolerance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    DConv,
    DiffPool,
    AttentionPool,
    GatedFusion,
    Classifier,
}

impl LayerKind {
    pub const ALL: [LayerKind; 5] = [
        LayerKind::DConv,
        LayerKind::DiffPool,
        LayerKind::AttentionPool,
        LayerKind::GatedFusion,
        LayerKind::Classifier,
    ];
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_adjacency(n: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(n, n, |i, j| {
        if i != j && rng.random::<f64>() < 0.6 {
            rng.random_range(0.05..1.0)
        } else {
            0.0
        }
    })
}

/// Builds a randomly shaped instance of `kind` from `seed`, contracts its
/// output with fixed random weights, and checks the gradient with respect
/// to every parameter and every input entry.
pub fn check_layer(kind: LayerKind, seed: u64, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, &[kind as u64]);
    let mut params = ParamSet::new();
    let n = rng.random_range(4..=9);
    let d = rng.random_range(2..=5);
    let q = rng.random_range(2..=5);
    let x = random_matrix(n, d, &mut rng);
    let t = Transitions::from_adjacency(&random_adjacency(n, &mut rng))?;

    // f(flat) where flat = [params..., inputs...]; returns the scalar and
    // its analytic gradient.
    type Eval<'a> = Box<dyn Fn(&ParamSet, &[f64]) -> Result<(f64, ParamSet, Vec<f64>)> + 'a>;
    let (eval, input): (Eval, Vec<f64>) = match kind {
        LayerKind::DConv => {
            let order = rng.random_range(1..=4);
            let layer = DConv::new(&mut params, "dconv", d, q, order, Activation::Relu, &mut rng)?;
            let r = random_matrix(n, q, &mut rng);
            let t = t.clone();
            (
                Box::new(move |p: &ParamSet, xin: &[f64]| {
                    let x = Matrix::new(n, d, xin.to_vec())?;
                    let (out, tape) = layer.forward(p, &x, &t)?;
                    let mut g = p.zeros_like();
                    let dx = layer.backward(p, &t, &tape, &r, &mut g);
                    Ok((dot(out.data(), r.data()), g, dx.into_data()))
                }),
                x.data().to_vec(),
            )
        }
        LayerKind::DiffPool => {
            let m = rng.random_range(2..n);
            let a = random_adjacency(n, &mut rng);
            let t = Transitions::from_adjacency(&a)?;
            let mut layer = DiffPool::new(&mut params, "pool", d, q, m, 1, rng.random_range(1..=3), &mut rng)?;
            layer.entropy_weight = if seed % 2 == 0 { 0.0 } else { 0.3 };
            let r = random_matrix(m, q, &mut rng);
            (
                Box::new(move |p: &ParamSet, xin: &[f64]| {
                    let x = Matrix::new(n, d, xin.to_vec())?;
                    let (out, tape) = layer.forward(p, &x, &a, &t)?;
                    let mut g = p.zeros_like();
                    let dx = layer.backward(p, &t, &tape, &r, &mut g);
                    let value = dot(out.features.data(), r.data()) + layer.entropy_penalty(&tape);
                    Ok((value, g, dx.into_data()))
                }),
                x.data().to_vec(),
            )
        }
        LayerKind::AttentionPool => {
            // Random partition of the rows into 1..=3 regions, shuffled order.
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let k = rng.random_range(1..=3.min(n));
            let mut regions = vec![Vec::new(); k];
            for (pos, &i) in order.iter().enumerate() {
                regions[if pos < k { pos } else { rng.random_range(0..k) }].push(i);
            }
            let layer = AttentionPool::new(&mut params, "attn", regions, &mut rng)?;
            let r = random_matrix(k, d, &mut rng);
            (
                Box::new(move |p: &ParamSet, xin: &[f64]| {
                    let x = Matrix::new(n, d, xin.to_vec())?;
                    let (out, tape) = layer.forward(p, &x)?;
                    let mut g = p.zeros_like();
                    let dx = layer.backward(p, &tape, &r, &mut g);
                    Ok((dot(out.data(), r.data()), g, dx.into_data()))
                }),
                x.data().to_vec(),
            )
        }
        LayerKind::GatedFusion => {
            let nodes = rng.random_range(2..=7);
            let f = rng.random_range(2..=5);
            let layer = GatedFusion::new(&mut params, "fusion", f, rng.random_range(2..=6), nodes, d, q, &mut rng)?;
            let zg = random_matrix(nodes, d, &mut rng);
            let zl = random_matrix(nodes, d, &mut rng);
            let s = random_matrix(1, f, &mut rng);
            let r = random_matrix(1, q, &mut rng);
            let input: Vec<f64> = zg.data().iter().chain(zl.data()).chain(s.data()).copied().collect();
            (
                Box::new(move |p: &ParamSet, xin: &[f64]| {
                    let zg = Matrix::new(nodes, d, xin[..nodes * d].to_vec())?;
                    let zl = Matrix::new(nodes, d, xin[nodes * d..2 * nodes * d].to_vec())?;
                    let (out, tape) = layer.forward(p, &zg, &zl, &xin[2 * nodes * d..])?;
                    let mut g = p.zeros_like();
                    let back = layer.backward(p, &tape, r.data(), &mut g);
                    let mut dx = back.global.into_data();
                    dx.extend(back.local.into_data());
                    dx.extend(back.summary);
                    Ok((dot(&out, r.data()), g, dx))
                }),
                input,
            )
        }
        LayerKind::Classifier => {
            let layer = Classifier::new(&mut params, "clf", d, q + 2, 2, 0.3, &mut rng)?;
            let label = rng.random_range(0..2);
            let mask_seed = rng.random::<u64>();
            let z = random_matrix(1, d, &mut rng);
            (
                Box::new(move |p: &ParamSet, xin: &[f64]| {
                    let (logits, tape) = layer.forward(p, xin, true, mask_seed)?;
                    let (loss, dl) = cross_entropy(&logits, label);
                    let mut g = p.zeros_like();
                    let dz = layer.backward(p, &tape, &dl, &mut g);
                    Ok((loss, g, dz))
                }),
                z.into_data(),
            )
        }
    };
    let n_params = params.element_count();
    let mut flat = params.flatten();
    flat.extend(&input);
    let (_, g, dx) = eval(&params, &input)?;
    let mut analytic = g.flatten();
    analytic.extend(dx);
    let template = params.clone();
    let f = |v: &[f64]| {
        let mut p = template.clone();
        p.assign_flat(&v[..n_params]).expect("flat parameter length");
        eval(&p, &v[n_params..]).expect("layer evaluation").0
    };
    Ok(grad_check(f, &flat, &analytic, h, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SplitMix64 {
        SplitMix64::seed_from_u64(seed)
    }

    #[test]
    fn dconv_order_one_ignores_graph() {
        let mut r = rng(1);
        let mut p = ParamSet::new();
        let layer = DConv::new(&mut p, "c", 3, 2, 1, Activation::Relu, &mut r).unwrap();
        let x = random_matrix(5, 3, &mut r);
        let sum = p.get(0).add(p.get(1));
        let expect = x.matmul(&sum).map(|v| v.max(0.0));
        for a in [random_adjacency(5, &mut r), Matrix::zeros(5, 5)] {
            let t = Transitions::from_adjacency(&a).unwrap();
            let (out, _) = layer.forward(&p, &x, &t).unwrap();
            assert!(out.sub(&expect).max_abs() < 1e-15);
        }
    }

    #[test]
    fn dconv_zero_graph_keeps_only_identity_terms() {
        let mut r = rng(2);
        let mut p = ParamSet::new();
        let layer = DConv::new(&mut p, "c", 3, 4, 4, Activation::Identity, &mut r).unwrap();
        let x = random_matrix(6, 3, &mut r);
        let t = Transitions::from_adjacency(&Matrix::zeros(6, 6)).unwrap();
        let (out, _) = layer.forward(&p, &x, &t).unwrap();
        let expect = x.matmul(&p.get(0).add(p.get(1)));
        assert!(out.sub(&expect).max_abs() < 1e-15);
    }

    #[test]
    fn dconv_rejects_bad_input() {
        let mut r = rng(3);
        let mut p = ParamSet::new();
        let layer = DConv::new(&mut p, "c", 3, 4, 2, Activation::Relu, &mut r).unwrap();
        let t = Transitions::from_adjacency(&Matrix::zeros(6, 6)).unwrap();
        assert!(matches!(layer.forward(&p, &Matrix::zeros(6, 2), &t), Err(Error::Shape(_))));
        assert!(matches!(layer.forward(&p, &Matrix::zeros(5, 3), &t), Err(Error::Shape(_))));
        assert!(DConv::new(&mut p, "c", 3, 4, 0, Activation::Relu, &mut r).is_err());
    }

    #[test]
    fn dconv_is_permutation_equivariant() {
        let mut r = rng(4);
        let mut p = ParamSet::new();
        let layer = DConv::new(&mut p, "c", 3, 4, 3, Activation::Relu, &mut r).unwrap();
        let n = 7;
        let x = random_matrix(n, 3, &mut r);
        let a = random_adjacency(n, &mut r);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let (out, _) = layer.forward(&p, &x, &Transitions::from_adjacency(&a).unwrap()).unwrap();
        let (pout, _) = layer
            .forward(
                &p,
                &x.select_rows(&perm),
                &Transitions::from_adjacency(&a.permute_symmetric(&perm)).unwrap(),
            )
            .unwrap();
        assert!(pout.sub(&out.select_rows(&perm)).max_abs() < 1e-12);
    }

    #[test]
    fn diffpool_assignment_rows_sum_to_one() {
        let mut r = rng(5);
        let mut p = ParamSet::new();
        let layer = DiffPool::new(&mut p, "pool", 16, 16, 7, 1, 4, &mut r).unwrap();
        let x = random_matrix(32, 16, &mut r).map(|v| 5.0 * v);
        let a = random_adjacency(32, &mut r);
        let t = Transitions::from_adjacency(&a).unwrap();
        let (out, _) = layer.forward(&p, &x, &a, &t).unwrap();
        assert_eq!(out.features.shape(), (7, 16));
        assert_eq!(out.adjacency.shape(), (7, 7));
        assert_eq!(out.assignment.shape(), (32, 7));
        for row in out.assignment.to_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let mut too_many = ParamSet::new();
        let bad = DiffPool::new(&mut too_many, "pool", 16, 16, 32, 1, 4, &mut r).unwrap();
        assert!(matches!(bad.forward(&too_many, &x, &a, &t), Err(Error::Shape(_))));
    }

    #[test]
    fn one_hot_assignment_sums_clusters() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pooled = pool_with_assignment(&s, &z);
        assert_eq!(pooled.to_rows(), vec![vec![6.0, 8.0], vec![10.0, 12.0]]);
    }

    #[test]
    fn attention_single_channel_region_passes_through() {
        let mut r = rng(6);
        let mut p = ParamSet::new();
        let layer = AttentionPool::new(&mut p, "attn", vec![vec![2], vec![0, 1, 3]], &mut r).unwrap();
        let x = random_matrix(4, 5, &mut r);
        let (out, tape) = layer.forward(&p, &x).unwrap();
        let w = tape.weights();
        assert_eq!(w[0], vec![1.0]);
        assert_eq!(out.row(0), x.row(2));
        assert!((w[1].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(AttentionPool::new(&mut p, "attn", vec![vec![0], vec![]], &mut r).is_err());
    }

    #[test]
    fn attention_invariant_to_joint_channel_relabeling() {
        let mut r = rng(7);
        let mut p = ParamSet::new();
        let regions = vec![vec![0, 1, 2], vec![3, 4]];
        let layer = AttentionPool::new(&mut p, "attn", regions, &mut r).unwrap();
        let x = random_matrix(5, 3, &mut r);
        let (out, _) = layer.forward(&p, &x).unwrap();
        // Move row i of x to position perm_inv[i]; the region lists follow.
        let perm = [4, 2, 0, 3, 1];
        let px = x.select_rows(&perm);
        let mut inv = [0; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let moved = AttentionPool {
            regions: layer.regions.iter().map(|r| r.iter().map(|&i| inv[i]).collect()).collect(),
            first: layer.first,
        };
        let (pout, _) = moved.forward(&p, &px).unwrap();
        assert!(pout.sub(&out).max_abs() < 1e-14);
    }

    #[test]
    fn fusion_gate_extremes() {
        let mut r = rng(8);
        let mut p = ParamSet::new();
        let layer = GatedFusion::new(&mut p, "f", 5, 16, 7, 4, 6, &mut r).unwrap();
        let zg = random_matrix(7, 4, &mut r);
        let zl = random_matrix(7, 4, &mut r);
        let (_, tape) = layer.forward_with_gate(&p, &zg, &zl, &[1.0; 7]).unwrap();
        let mut g = p.zeros_like();
        let back = layer.backward(&p, &tape, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0], &mut g);
        assert_eq!(back.local.max_abs(), 0.0);
        assert!(back.global.max_abs() > 0.0);

        let (half, _) = layer.forward_with_gate(&p, &zg, &zl, &[0.5; 7]).unwrap();
        let mean = zg.add(&zl).scale(0.5);
        let (direct, _) = layer.forward_with_gate(&p, &mean, &mean, &[0.3; 7]).unwrap();
        for (a, b) in half.iter().zip(&direct) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn classifier_modes() {
        let mut r = rng(9);
        let mut p = ParamSet::new();
        let clf = Classifier::new(&mut p, "clf", 6, 8, 2, 0.5, &mut r).unwrap();
        let z: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let (a, _) = clf.forward(&p, &z, false, 1).unwrap();
        let (b, _) = clf.forward(&p, &z, false, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(clf.dropout_mask(true, 11), clf.dropout_mask(true, 11));
        assert_ne!(clf.dropout_mask(true, 11), clf.dropout_mask(true, 12));
        assert!(clf.dropout_mask(true, 11).iter().all(|&m| m == 0.0 || m == 2.0));

        for id in [0, 2] {
            let m = p.get_mut(id);
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (logits, _) = clf.forward(&p, &z, true, 3).unwrap();
        assert_eq!(logits, p.get(3).row(0).to_vec());
        assert!(Classifier::new(&mut p, "clf", 6, 8, 2, 1.0, &mut r).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let (l0, _) = cross_entropy(&[0.0, 0.0], 0);
        let (l1, _) = cross_entropy(&[0.0, 0.0], 1);
        assert_relative_eq!(l0, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(l1, std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(cross_entropy(&[10.0, -10.0], 0).0 < 1e-4);
        let (big, _) = cross_entropy(&[800.0, -800.0], 1);
        assert_relative_eq!(big, 1600.0, epsilon = 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = [0.3, -1.2];
        for label in 0..2 {
            let (_, g) = cross_entropy(&logits, label);
            let report = grad_check(|l| cross_entropy(l, label).0, &logits, &g, 1e-5, 1e-8);
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn linear_map_gradient_is_exact() {
        let w = [0.7, -1.3, 2.1, 0.5];
        let x = [1.0, 2.0, -3.0, 0.5];
        let f = |v: &[f64]| dot(&w, v);
        let report = grad_check(f, &x, &w, 1e-5, 1e-9);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let x = [0.4, -0.9, 1.7];
        let f = |v: &[f64]| v.iter().map(|a| a * a * a).sum::<f64>();
        let mut g: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        assert!(grad_check(f, &x, &g, 1e-5, 1e-6).passed);
        g[1] *= 1.001;
        let report = grad_check(f, &x, &g, 1e-5, 1e-6);
        assert!(!report.passed);
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn every_layer_passes_gradient_check() {
        for kind in LayerKind::ALL {
            for seed in 0..20 {
                let report = check_layer(kind, seed, 1e-5, 1e-5).unwrap();
                assert!(report.passed, "{kind:?} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut r = rng(10);
        let mut p = ParamSet::new();
        DConv::new(&mut p, "c", 3, 2, 2, Activation::Relu, &mut r).unwrap();
        let flat = p.flatten();
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&flat[1..]).is_err());
        assert_eq!(p.element_count(), 2 * 2 * 3 * 2);
    }
}
