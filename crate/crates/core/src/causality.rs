//! Liang-Kleeman information flow under a linear stochastic model, its
//! normalization, a resampling significance test, and a pairwise Granger
//! baseline.
//!
//! Matrices in [`FlowDecomposition`] are indexed `[(source, target)]`, so
//! `flow[(j, i)]` is `T_{j→i}` in nats per second.
//!
//! The estimator for target `i` is
//!
//! ```text
//! T_{j→i} = (1/det C) · Σ_k Δ_jk · C_{k,di} · C_ij / C_ii
//! ```
//!
//! with `C` the covariance of the channels, `Δ` its cofactors and
//! `C_{k,di} = cov(X_k, Ẋ_i)`. Because `Δ_jk / det C = (C⁻¹)_jk`, the sum is the
//! `j`-th coefficient `a_ij` of the least-squares regression of `Ẋ_i` on all
//! channels, which is how [`estimate_information_flow`] computes it.
//! [`flow_by_cofactors`] evaluates the cofactor sum literally and exists as
//! an independent cross-check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::numerics::{self, centered, dot, first_difference, Lu, Matrix};
use crate::rng::{derive_seed, SplitMix64};
use crate::timeseries::TimeSeriesSet;
use rand::{Rng, SeedableRng};

/// Per-target entropy budget of a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDecomposition {
    /// `flow[(j, i)] = T_{j→i}`; zero diagonal.
    pub flow: Matrix,
    /// `dH_i*/dt`, the fitted self-coefficient `a_ii`.
    pub self_rate: Vec<f64>,
    /// `dH_i^noise/dt = g_ii / (2 C_ii)`.
    pub noise_rate: Vec<f64>,
    /// Normalized flow `τ_{j→i}`, filled by [`normalize_flow`].
    pub tau: Option<Matrix>,
    /// Filled by [`significance_test`].
    pub p_values: Option<Matrix>,
}

impl FlowDecomposition {
    pub fn n(&self) -> usize {
        self.self_rate.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceConfig {
    /// Edges with `p < alpha` are kept. `alpha >= 1` disables testing.
    pub alpha: f64,
    pub surrogate_count: usize,
    /// Mean block length in samples; `None` means half a second.
    pub block_length: Option<usize>,
    pub seed: u64,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            surrogate_count: 1000,
            block_length: None,
            seed: 0,
        }
    }
}

impl SignificanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.surrogate_count < 100 {
            return Err(Error::Config(format!(
                "at least 100 surrogates required, got {}",
                self.surrogate_count
            )));
        }
        if self.block_length == Some(0) {
            return Err(Error::Config("block length must be positive".into()));
        }
        Ok(())
    }

    pub fn testing_enabled(&self) -> bool {
        self.alpha < 1.0
    }

    pub fn block_length_for(&self, rate_hz: f64, n_samples: usize) -> usize {
        self.block_length
            .unwrap_or_else(|| (rate_hz / 2.0).round() as usize)
            .clamp(1, n_samples.max(1))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Least-squares fit of every `Ẋ_i` on all channels, shared by the estimator
/// and the significance test.
struct RegressionFit {
    n: usize,
    /// Aligned sample count (`T − 1`).
    samples: usize,
    dt: f64,
    cov: Matrix,
    cov_inv: Matrix,
    /// `coef[(i, k)]`: coefficient of `X_k` in the regression of `Ẋ_i`.
    coef: Matrix,
    /// Full-model residuals per target.
    residuals: Vec<Vec<f64>>,
}

impl RegressionFit {
    fn new(x: &TimeSeriesSet) -> Result<Self> {
        let n = x.n_channels();
        let len = x.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "information flow needs at least 2 channels, got {n}"
            )));
        }
        if len < 10 * n {
            return Err(Error::InsufficientData(format!(
                "information flow on {n} channels needs at least {} samples, got {len}",
                10 * n
            )));
        }
        let diff = first_difference(x, 1)?;
        let samples = len - 1;
        let xs: Vec<Vec<f64>> = x.channels().iter().map(|c| centered(&c[..samples])).collect();
        let dxs: Vec<Vec<f64>> = diff.values.iter().map(|d| centered(d)).collect();
        let denom = (samples - 1) as f64;

        let mut cov = Matrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let v = dot(&xs[a], &xs[b]) / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let lu = Lu::factor(&cov)?;
        if lu.singular_pivot().is_some() {
            let (a, b) = most_collinear_pair(&cov);
            return Err(Error::SingularCovariance(a, b));
        }
        let cov_inv = lu.inverse()?;

        let mut coef = Matrix::zeros(n, n);
        let mut residuals = Vec::with_capacity(n);
        for i in 0..n {
            let c_di: Vec<f64> = xs.iter().map(|xk| dot(xk, &dxs[i]) / denom).collect();
            let a = cov_inv.matvec(&c_di);
            let mut resid = dxs[i].clone();
            for (k, &ak) in a.iter().enumerate() {
                for (r, &v) in resid.iter_mut().zip(&xs[k]) {
                    *r -= ak * v;
                }
            }
            coef.row_mut(i).copy_from_slice(&a);
            residuals.push(resid);
        }
        Ok(Self {
            n,
            samples,
            dt: diff.dt,
            cov,
            cov_inv,
            coef,
            residuals,
        })
    }

    fn decomposition(&self) -> FlowDecomposition {
        let n = self.n;
        let mut flow = Matrix::zeros(n, n);
        let mut self_rate = vec![0.0; n];
        let mut noise_rate = vec![0.0; n];
        for i in 0..n {
            let cii = self.cov[(i, i)];
            for j in (0..n).filter(|&j| j != i) {
                flow[(j, i)] = self.coef[(i, j)] * self.cov[(i, j)] / cii;
            }
            self_rate[i] = self.coef[(i, i)];
            let mean_sq = self.residuals[i].iter().map(|r| r * r).sum::<f64>() / self.samples as f64;
            let g = self.dt * mean_sq;
            noise_rate[i] = g / (2.0 * cii);
        }
        FlowDecomposition {
            flow,
            self_rate,
            noise_rate,
            tau: None,
            p_values: None,
        }
    }
}

fn most_collinear_pair(cov: &Matrix) -> (usize, usize) {
    let n = cov.rows();
    if let Some(k) = (0..n).find(|&k| cov[(k, k)] <= f64::EPSILON * cov.max_abs()) {
        return (k, k);
    }
    let mut best = (0, 1, -1.0);
    for a in 0..n {
        for b in a + 1..n {
            let r = cov[(a, b)].abs() / (cov[(a, a)] * cov[(b, b)]).sqrt();
            if r > best.2 {
                best = (a, b, r);
            }
        }
    }
    (best.0, best.1)
}

/// Fits the linear model and fills `flow`, `self_rate` and `noise_rate`.
pub fn estimate_information_flow(x: &TimeSeriesSet) -> Result<FlowDecomposition> {
    Ok(RegressionFit::new(x)?.decomposition())
}

/// `T_{j→i}` evaluated through explicit cofactors and `det C`.
///
/// O(n⁵); meant for cross-checking the regression route on small systems.
pub fn flow_by_cofactors(x: &TimeSeriesSet) -> Result<Matrix> {
    let diff = first_difference(x, 1)?;
    let samples = x.len() - 1;
    let xs: Vec<&[f64]> = x.channels().iter().map(|c| &c[..samples]).collect();
    let cov = numerics::covariance_of(&xs)?;
    flow_from_covariances(&cov, &cross_covariance(&xs, &diff.values)?)
}

/// `cross[(k, i)] = cov(X_k, Ẋ_i)`.
fn cross_covariance(xs: &[&[f64]], dxs: &[Vec<f64>]) -> Result<Matrix> {
    let cx: Vec<Vec<f64>> = xs.iter().map(|s| centered(s)).collect();
    let cd: Vec<Vec<f64>> = dxs.iter().map(|s| centered(s)).collect();
    let denom = (cx[0].len() - 1) as f64;
    Ok(Matrix::from_fn(cx.len(), cd.len(), |k, i| dot(&cx[k], &cd[i]) / denom))
}

/// The cofactor form given `C` and `cross[(k, i)] = C_{k,di}`.
pub fn flow_from_covariances(cov: &Matrix, cross: &Matrix) -> Result<Matrix> {
    let n = cov.rows();
    let det = numerics::determinant(cov)?;
    if det == 0.0 {
        let (a, b) = most_collinear_pair(cov);
        return Err(Error::SingularCovariance(a, b));
    }
    let mut cofactor = Matrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let sign = if (j + k) % 2 == 0 { 1.0 } else { -1.0 };
            cofactor[(j, k)] = sign * numerics::determinant(&cov.minor(j, k))?;
        }
    }
    let mut flow = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let s: f64 = (0..n).map(|k| cofactor[(j, k)] * cross[(k, i)]).sum();
            flow[(j, i)] = s / det * cov[(i, j)] / cov[(i, i)];
        }
    }
    Ok(flow)
}

/// Fills `tau`: `τ_{j→i} = T_{j→i} / Z_i` with
/// `Z_i = |dH_i*/dt| + Σ_{j≠i} |T_{j→i}| + |dH_i^noise/dt|`.
pub fn normalize_flow(mut f: FlowDecomposition) -> FlowDecomposition {
    let n = f.n();
    let mut tau = Matrix::zeros(n, n);
    for i in 0..n {
        let incoming: f64 = (0..n).filter(|&j| j != i).map(|j| f.flow[(j, i)].abs()).sum();
        let z = f.self_rate[i].abs() + incoming + f.noise_rate[i].abs();
        if z > 0.0 {
            for j in (0..n).filter(|&j| j != i) {
                let t = f.flow[(j, i)] / z;
                assert!(t.abs() <= 1.0 + 1e-12, "|tau| = {} exceeds 1 for {j}->{i}", t.abs());
                tau[(j, i)] = t;
            }
        }
    }
    f.tau = Some(tau);
    f
}

const MAX_SURROGATE_RETRIES: usize = 10;

/// Fills `p_values` with a residual block-bootstrap test of `T_{j→i} = 0`.
///
/// For each ordered pair the null model regresses `Ẋ_i` on every channel
/// except `X_j`. Its residuals are resampled with a stationary block
/// bootstrap (geometric blocks, circular wrap), which keeps their
/// autocorrelation but severs any alignment with `X_j`; the regression
/// coefficient of `X_j` is then re-estimated against the fixed design, so
/// the correlation structure among channels stays intact. The p-value is
/// `(1 + #{|T*| ≥ |T|}) / (1 + B)`.
///
/// Pair `(j, i)` draws from its own stream seeded by `(cfg.seed, j, i)`, so
/// results do not depend on thread scheduling.
pub fn significance_test(
    x: &TimeSeriesSet,
    f: FlowDecomposition,
    cfg: &SignificanceConfig,
) -> Result<FlowDecomposition> {
    cfg.validate()?;
    let fit = RegressionFit::new(x)?;
    let n = fit.n;
    if f.n() != n {
        return Err(Error::Shape(format!(
            "flow decomposition has {} channels, recording has {n}",
            f.n()
        )));
    }
    if !cfg.testing_enabled() {
        let mut f = f;
        f.p_values = Some(Matrix::from_fn(n, n, |j, i| if i == j { 0.0 } else { 1.0 }));
        return Ok(f);
    }
    let samples = fit.samples;
    let block = cfg.block_length_for(x.rate_hz(), samples);
    let denom = (samples - 1) as f64;

    // w_j = Σ_k (C⁻¹)_jk X_k, so that a_ij = <w_j, Ẋ_i> / (N − 1).
    let xs: Vec<Vec<f64>> = x.channels().iter().map(|c| centered(&c[..samples])).collect();
    let w: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut wj = vec![0.0; samples];
            for (k, xk) in xs.iter().enumerate() {
                let c = fit.cov_inv[(j, k)];
                for (o, &v) in wj.iter_mut().zip(xk) {
                    *o += c * v;
                }
            }
            wj
        })
        .collect();

    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (j, i)))
        .collect();
    let results: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(j, i)| {
            let a_ij = fit.coef[(i, j)];
            let factor = fit.cov[(i, j)] / fit.cov[(i, i)];
            // Residual of the model without X_j: e_i + a_ij · r_j, r_j = w_j / (C⁻¹)_jj.
            let scale = a_ij / fit.cov_inv[(j, j)];
            let restricted: Vec<f64> = fit.residuals[i]
                .iter()
                .zip(&w[j])
                .map(|(e, wj)| e + scale * wj)
                .collect();
            let observed = (dot(&w[j], &restricted) / denom * factor).abs();
            let mut rng = SplitMix64::seed_from_u64(derive_seed(cfg.seed, &[j as u64, i as u64]));
            let mut exceed = 0usize;
            for _ in 0..cfg.surrogate_count {
                let mut stat = f64::NAN;
                for _ in 0..=MAX_SURROGATE_RETRIES {
                    let a_star = block_bootstrap_dot(&w[j], &restricted, block, &mut rng) / denom;
                    stat = (a_star * factor).abs();
                    if stat.is_finite() {
                        break;
                    }
                }
                if !stat.is_finite() {
                    return Err(Error::SurrogateFailure {
                        src: j,
                        dst: i,
                        retries: MAX_SURROGATE_RETRIES,
                    });
                }
                if stat >= observed {
                    exceed += 1;
                }
            }
            Ok((1 + exceed) as f64 / (1 + cfg.surrogate_count) as f64)
        })
        .collect();

    let mut p = Matrix::zeros(n, n);
    for (&(j, i), r) in pairs.iter().zip(results) {
        p[(j, i)] = r?;
    }
    let mut f = f;
    f.p_values = Some(p);
    Ok(f)
}

/// `<w, e*>` where `e*` is a stationary block-bootstrap resample of `e`.
fn block_bootstrap_dot(w: &[f64], e: &[f64], mean_block: usize, rng: &mut impl Rng) -> f64 {
    let len = e.len();
    let continue_p = 1.0 - 1.0 / mean_block as f64;
    let mut t = 0;
    let mut acc = 0.0;
    while t < len {
        let start = rng.random_range(0..len);
        let block = if continue_p <= 0.0 {
            1
        } else {
            // Geometric(1/L) on {1, 2, ...} by inversion.
            let u: f64 = 1.0 - rng.random::<f64>();
            ((u.ln() / continue_p.ln()).floor() as usize + 1).max(1)
        };
        let block = block.min(len - t);
        let first = block.min(len - start);
        acc += dot(&w[t..t + first], &e[start..start + first]);
        if first < block {
            acc += dot(&w[t + first..t + block], &e[..block - first]);
        }
        t += block;
    }
    acc
}

/// Estimate, normalize and test in one call.
pub fn analyze(x: &TimeSeriesSet, cfg: &SignificanceConfig) -> Result<FlowDecomposition> {
    let f = normalize_flow(estimate_information_flow(x)?);
    significance_test(x, f, cfg)
}

/// Pairwise Granger statistics, indexed `[(source, target)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrangerResult {
    pub order: usize,
    pub f_stat: Matrix,
    pub p_values: Matrix,
}

/// Pairwise Granger causality with `order` lags of target and source.
///
/// The restricted model regresses `X_i[t]` on an intercept and its own
/// `order` lags; the full model adds `order` lags of `X_j`. The F statistic
/// compares the two residual sums of squares.
pub fn granger_causality(x: &TimeSeriesSet, order: usize) -> Result<GrangerResult> {
    if order == 0 {
        return Err(Error::InvalidOrder(order));
    }
    let n = x.n_channels();
    let len = x.len();
    if len < 20 * order {
        return Err(Error::InsufficientData(format!(
            "Granger order {order} needs at least {} samples, got {len}",
            20 * order
        )));
    }
    let samples = len - order;
    let df_full = samples as isize - 2 * order as isize - 1;
    if df_full < 1 {
        return Err(Error::InsufficientData("too few samples for the full model".into()));
    }
    // Centered lag columns: lags[c][l] = X_c[t − l − 1], t = order..len.
    let lags: Vec<Vec<Vec<f64>>> = x
        .channels()
        .iter()
        .map(|ch| {
            (0..order)
                .map(|l| centered(&ch[order - l - 1..len - l - 1]))
                .collect()
        })
        .collect();
    let targets: Vec<Vec<f64>> = x.channels().iter().map(|ch| centered(&ch[order..])).collect();
    // gram[a][b][(l, m)] = <lag_l(a), lag_m(b)>
    let gram: Vec<Vec<Matrix>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| Matrix::from_fn(order, order, |l, m| dot(&lags[a][l], &lags[b][m])))
                .collect()
        })
        .collect();
    let lag_y: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|i| (0..order).map(|l| dot(&lags[a][l], &targets[i])).collect())
                .collect()
        })
        .collect();

    let fdist = FisherSnedecor::new(order as f64, df_full as f64)
        .map_err(|e| Error::Config(format!("F distribution: {e}")))?;
    let mut f_stat = Matrix::zeros(n, n);
    let mut p_values = Matrix::zeros(n, n);
    for i in 0..n {
        let yy = dot(&targets[i], &targets[i]);
        let rss_restricted = rss(&gram[i][i], &lag_y[i][i], yy).ok_or(Error::Rank { src: i, dst: i })?;
        for j in (0..n).filter(|&j| j != i) {
            let p2 = 2 * order;
            let g = Matrix::from_fn(p2, p2, |r, c| {
                let (a, l) = if r < order { (i, r) } else { (j, r - order) };
                let (b, m) = if c < order { (i, c) } else { (j, c - order) };
                gram[a][b][(l, m)]
            });
            let xy: Vec<f64> = lag_y[i][i].iter().chain(&lag_y[j][i]).copied().collect();
            let rss_full = rss(&g, &xy, yy).ok_or(Error::Rank { src: j, dst: i })?;
            let f = if rss_full > 0.0 {
                ((rss_restricted - rss_full).max(0.0) / order as f64) / (rss_full / df_full as f64)
            } else {
                f64::INFINITY
            };
            f_stat[(j, i)] = f;
            p_values[(j, i)] = if f.is_finite() { fdist.sf(f) } else { 0.0 };
        }
    }
    Ok(GrangerResult {
        order,
        f_stat,
        p_values,
    })
}

/// Residual sum of squares of the least-squares fit with normal equations
/// `G β = xy`; `None` when `G` is singular.
fn rss(g: &Matrix, xy: &[f64], yy: f64) -> Option<f64> {
    let beta = Lu::factor(g).ok()?.solve(xy).ok()?;
    Some((yy - dot(&beta, xy)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_var, VarSystemSpec};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn white_noise(n: usize, len: usize, seed: u64) -> TimeSeriesSet {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let channels = (0..n)
            .map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        TimeSeriesSet::unlabeled(100.0, channels).unwrap()
    }

    fn driven_pair(len: usize, seed: u64) -> TimeSeriesSet {
        let coupling = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.5]]).unwrap();
        generate_var(&VarSystemSpec::new(coupling, 1.0, len, seed))
            .unwrap()
            .series
    }

    #[test]
    fn cofactor_route_matches_regression_route() {
        let x = driven_pair(3000, 4);
        let reg = estimate_information_flow(&x).unwrap().flow;
        let cof = flow_by_cofactors(&x).unwrap();
        for (a, b) in reg.data().iter().zip(cof.data()) {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()).max(1e-300));
        }
    }

    #[test]
    fn covariance_convention_cancels() {
        // Rescaling C and C_{k,di} together (N vs N−1 denominators) leaves T unchanged.
        let x = white_noise(3, 500, 2);
        let diff = first_difference(&x, 1).unwrap();
        let xs: Vec<&[f64]> = x.channels().iter().map(|c| &c[..499]).collect();
        let cov = numerics::covariance_of(&xs).unwrap();
        let cross = cross_covariance(&xs, &diff.values).unwrap();
        let ratio = 498.0 / 499.0;
        let a = flow_from_covariances(&cov, &cross).unwrap();
        let b = flow_from_covariances(&cov.scale(ratio), &cross.scale(ratio)).unwrap();
        assert!(a.sub(&b).max_abs() <= 1e-12 * a.max_abs());
    }

    #[test]
    fn tau_is_scale_invariant_in_dt() {
        let x = driven_pair(2000, 9);
        let slow = TimeSeriesSet::unlabeled(1.0, x.channels().to_vec()).unwrap();
        let fast = TimeSeriesSet::unlabeled(250.0, x.channels().to_vec()).unwrap();
        let fs = normalize_flow(estimate_information_flow(&slow).unwrap());
        let ff = normalize_flow(estimate_information_flow(&fast).unwrap());
        assert_relative_eq!(ff.flow[(0, 1)], 250.0 * fs.flow[(0, 1)], max_relative = 1e-10);
        let (ts, tf) = (fs.tau.unwrap(), ff.tau.unwrap());
        assert!(ts.sub(&tf).max_abs() < 1e-12);
    }

    #[test]
    fn driven_pair_has_directional_flow() {
        let f = normalize_flow(estimate_information_flow(&driven_pair(20000, 1)).unwrap());
        assert!(f.flow[(0, 1)].abs() > 10.0 * f.flow[(1, 0)].abs());
        // Flows are estimated independently, not antisymmetric.
        assert!((f.flow[(0, 1)] + f.flow[(1, 0)]).abs() > 1e-3);
        assert_eq!(f.flow[(0, 0)], 0.0);
        assert!(f.tau.unwrap().max_abs() <= 1.0);
    }

    #[test]
    fn normalization_edge_cases() {
        let f = FlowDecomposition {
            flow: Matrix::from_rows(&[vec![0.0, -0.7], vec![0.0, 0.0]]).unwrap(),
            self_rate: vec![0.0, 0.0],
            noise_rate: vec![0.0, 0.0],
            tau: None,
            p_values: None,
        };
        let tau = normalize_flow(f).tau.unwrap();
        assert_eq!(tau[(0, 1)], -1.0);
        // Z = 0 for target 0.
        assert_eq!(tau[(1, 0)], 0.0);
    }

    #[test]
    fn singular_covariance_names_the_pair() {
        let mut x = white_noise(3, 200, 1).into_channels();
        x[2] = x[0].iter().map(|v| 2.0 * v).collect();
        let x = TimeSeriesSet::unlabeled(100.0, x).unwrap();
        assert!(matches!(
            estimate_information_flow(&x),
            Err(Error::SingularCovariance(0, 2))
        ));
    }

    #[test]
    fn too_few_samples_or_channels() {
        assert!(matches!(
            estimate_information_flow(&white_noise(1, 500, 0)),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            estimate_information_flow(&white_noise(4, 39, 0)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn significance_is_deterministic_and_detects_drive() {
        let x = driven_pair(5000, 3);
        let cfg = SignificanceConfig {
            surrogate_count: 200,
            seed: 17,
            ..Default::default()
        };
        let a = analyze(&x, &cfg).unwrap().p_values.unwrap();
        let b = analyze(&x, &cfg).unwrap().p_values.unwrap();
        assert_eq!(a, b);
        assert!(a[(0, 1)] <= 0.01);
        assert!(a.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn bootstrap_null_matches_refit_on_permuted_residuals() {
        // The fast surrogate statistic equals a full refit of Ẋ_i with the
        // restricted residual replaced by its resample.
        let x = white_noise(3, 400, 8);
        let fit = RegressionFit::new(&x).unwrap();
        let (j, i) = (2usize, 0usize);
        let samples = fit.samples;
        let xs: Vec<Vec<f64>> = x.channels().iter().map(|c| centered(&c[..samples])).collect();
        let w: Vec<f64> = (0..samples)
            .map(|t| (0..3).map(|k| fit.cov_inv[(j, k)] * xs[k][t]).sum())
            .collect();
        let restricted: Vec<f64> = fit.residuals[i]
            .iter()
            .zip(&w)
            .map(|(e, wj)| e + fit.coef[(i, j)] / fit.cov_inv[(j, j)] * wj)
            .collect();
        let mut rng = SplitMix64::seed_from_u64(1);
        let fast = block_bootstrap_dot(&w, &restricted, 1, &mut rng) / (samples - 1) as f64;
        // Reproduce the resample: block length 1 draws one start per sample.
        let mut rng = SplitMix64::seed_from_u64(1);
        let resampled: Vec<f64> = (0..samples)
            .map(|_| {
                let s = rng.random_range(0..samples);
                restricted[s]
            })
            .collect();
        // Null-model fitted values plus the resampled residual, regressed on all channels.
        let mut null_fit = vec![0.0; samples];
        let restricted_idx: Vec<usize> = (0..3).filter(|&k| k != j).collect();
        let sub: Vec<&[f64]> = restricted_idx.iter().map(|&k| xs[k].as_slice()).collect();
        let sub_cov = numerics::covariance_of(&sub).unwrap();
        let diff = first_difference(&x, 1).unwrap();
        let dx = centered(&diff.values[i]);
        let rhs: Vec<f64> = sub
            .iter()
            .map(|s| dot(s, &dx) / (samples - 1) as f64)
            .collect();
        let beta = numerics::solve_linear(&sub_cov, &rhs).unwrap();
        for (b, s) in beta.iter().zip(&sub) {
            for (o, v) in null_fit.iter_mut().zip(s.iter()) {
                *o += b * v;
            }
        }
        let y: Vec<f64> = null_fit.iter().zip(&resampled).map(|(a, b)| a + b).collect();
        let y = centered(&y);
        let c_dy: Vec<f64> = xs.iter().map(|s| dot(s, &y) / (samples - 1) as f64).collect();
        let full = numerics::solve_linear(&fit.cov, &c_dy).unwrap();
        assert!((full[j] - fast).abs() < 1e-10 * fast.abs().max(1e-6));
    }

    #[test]
    fn granger_detects_direction_and_rejects_zero_order() {
        let x = driven_pair(4000, 12);
        let g = granger_causality(&x, 5).unwrap();
        assert!(g.p_values[(0, 1)] < 1e-6);
        assert!(g.f_stat[(0, 1)] > g.f_stat[(1, 0)]);
        assert!(matches!(granger_causality(&x, 0), Err(Error::InvalidOrder(0))));
        assert!(matches!(
            granger_causality(&driven_pair(50, 1), 5),
            Err(Error::InsufficientData(_))
        ));
    }
}
