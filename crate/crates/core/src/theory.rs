//! Numerical verification of the consistency-regularization error bound on
//! Gaussian-mixture ground truth: the standard-normal toolbox, the
//! mixture expansion function and its gamma threshold, Bayes-optimal
//! weighted classifiers, stratified Monte-Carlo estimators for the weighted
//! error and weighted consistency, and the end-to-end bound check over a
//! searchable classifier family.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::MixtureModel;
use crate::error::{Error, Result};
use crate::metrics::WeightMatrix;
use crate::parallel::{run_sharded, worker_threads};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.5066282746310002;

/// Standard normal cumulative distribution function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal quantile: rational initial approximation refined with
/// Halley steps against the high-precision CDF.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::OutOfDomain(format!(
            "quantile argument {} must lie strictly inside (0, 1)",
            p
        )));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };
    for _ in 0..2 {
        let e = std_normal_cdf(x) - p;
        let u = e * SQRT_2PI * (0.5 * x * x).exp();
        x -= u / (1.0 + x * u / 2.0);
    }
    Ok(x)
}

/// `R_h(p) = Phi(Phi^-1(p) + h)`: measure of the `h`-enlargement of a
/// half-space with standard Gaussian mass `p`.
pub fn gaussian_enlargement(p: f64, h: f64) -> Result<f64> {
    Ok(std_normal_cdf(std_normal_quantile(p)? + h))
}

/// Expansion factor `c(p) = R_h(p) / p` of an isotropic Gaussian mixture.
pub fn expansion_c_gauss(p: f64, h: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::OutOfDomain(format!(
            "expansion argument {} must lie in (0, 1)",
            p
        )));
    }
    if h < 0.0 {
        return Err(Error::OutOfDomain(format!("h {} must be >= 0", h)));
    }
    Ok(gaussian_enlargement(p, h)? / p)
}

/// Solve `c(p) = target` for `p` by bisection; `c` is non-increasing on
/// `(0, 1)`.
pub fn expansion_root(h: f64, target: f64, tol: f64) -> Result<f64> {
    let mut lo = 1e-6;
    let mut hi = 1.0 - 1e-6;
    let f = |p: f64| -> Result<f64> { Ok(expansion_c_gauss(p, h)? - target) };
    if f(lo)? <= 0.0 || f(hi)? >= 0.0 {
        return Err(Error::OutOfDomain(format!(
            "c(p) = {} has no root in (0, 1) for h = {}",
            target, h
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// An expansion function `c`: either the closed Gaussian-mixture form or a
/// tabulated curve with linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExpansionFunction {
    GaussianMixture { h: f64 },
    Tabulated { points: Vec<(f64, f64)> },
}

impl ExpansionFunction {
    /// Gaussian-mixture expansion for perturbation radius `r` in dimension
    /// `d` under per-coordinate variance `1/d`: `h = 2 r sqrt(d)`.
    pub fn gaussian_for_radius(r: f64, dim: usize) -> Self {
        Self::GaussianMixture {
            h: 2.0 * r * (dim as f64).sqrt(),
        }
    }

    /// Validated tabulated curve: probabilities ascending, values >= 1 and
    /// non-increasing.
    pub fn tabulated(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidConfig(
                "tabulated expansion needs at least two points".to_string(),
            ));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidConfig(
                    "tabulated probabilities must be ascending".to_string(),
                ));
            }
            if w[1].1 > w[0].1 {
                return Err(Error::InvalidConfig(
                    "expansion values must be non-increasing".to_string(),
                ));
            }
        }
        if points.iter().any(|&(_, c)| c < 1.0) {
            return Err(Error::InvalidConfig(
                "expansion values must be >= 1".to_string(),
            ));
        }
        Ok(Self::Tabulated { points })
    }

    pub fn eval(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::OutOfDomain(format!(
                "expansion argument {} must lie in (0, 1]",
                p
            )));
        }
        match self {
            Self::GaussianMixture { h } => {
                if p >= 1.0 {
                    Ok(1.0)
                } else {
                    expansion_c_gauss(p, *h)
                }
            }
            Self::Tabulated { points } => {
                if p <= points[0].0 {
                    return Ok(points[0].1);
                }
                if p >= points[points.len() - 1].0 {
                    return Ok(points[points.len() - 1].1);
                }
                let idx = points.partition_point(|&(q, _)| q < p);
                let (p0, c0) = points[idx - 1];
                let (p1, c1) = points[idx];
                let t = (p - p0) / (p1 - p0);
                Ok(c0 + t * (c1 - c0))
            }
        }
    }
}

/// Evaluate `gamma = c(p_w)`.
pub fn gamma_of(p_w: f64, c: &ExpansionFunction) -> Result<f64> {
    c.eval(p_w)
}

/// Whether a gamma value satisfies the `gamma > 3` requirement.
pub fn gamma_satisfies_assumption(gamma: f64) -> bool {
    gamma > 3.0
}

/// A concrete classifier usable by the Monte-Carlo estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Always predicts one class.
    Constant { class: usize },
    /// 1-D threshold on the first coordinate.
    Threshold1D { t: f64, below: usize, above: usize },
    /// Binary linear rule: `normal . x < offset` picks `neg`, else `pos`.
    LinearBinary {
        normal: Vec<f64>,
        offset: f64,
        neg: usize,
        pos: usize,
    },
    /// `argmax_k w_k P_k(x)` for a diagonal weight over mixture components.
    WeightedBayes {
        log_w: Vec<f64>,
        means: Vec<Vec<f64>>,
        variance: f64,
    },
}

impl ClassifierKind {
    pub fn classify(&self, x: &[f64]) -> usize {
        match self {
            Self::Constant { class } => *class,
            Self::Threshold1D { t, below, above } => {
                if x[0] < *t {
                    *below
                } else {
                    *above
                }
            }
            Self::LinearBinary {
                normal,
                offset,
                neg,
                pos,
            } => {
                let dot: f64 = normal.iter().zip(x).map(|(n, v)| n * v).sum();
                if dot < *offset {
                    *neg
                } else {
                    *pos
                }
            }
            Self::WeightedBayes {
                log_w,
                means,
                variance,
            } => {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (k, mean) in means.iter().enumerate() {
                    let mut sq = 0.0;
                    for (xi, mi) in x.iter().zip(mean) {
                        let d = xi - mi;
                        sq += d * d;
                    }
                    let score = log_w[k] - sq / (2.0 * variance);
                    if score > best_score {
                        best_score = score;
                        best = k;
                    }
                }
                best
            }
        }
    }
}

/// Bayes-optimal classifier for a diagonal weight matrix:
/// `x -> argmax_k w_k P_k(x)`.
pub fn bayes_weighted_diag(w_diag: &[f64], m: &MixtureModel) -> Result<ClassifierKind> {
    if w_diag.len() != m.k() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} weights", m.k()),
            got: format!("{}", w_diag.len()),
        });
    }
    for (i, &w) in w_diag.iter().enumerate() {
        if w <= 0.0 {
            return Err(Error::NegativeWeight {
                i,
                j: i,
                value: w,
            });
        }
    }
    Ok(ClassifierKind::WeightedBayes {
        log_w: w_diag.iter().map(|w| w.ln()).collect(),
        means: m.means().to_vec(),
        variance: m.variance(),
    })
}

/// Density of the weighted probability measure
/// `P_w = sum_i (sum_j w_ij) P_i / |w|_1` at `x`.
pub fn weighted_measure_density(m: &MixtureModel, w: &WeightMatrix, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..m.k() {
        total += w.row_sum(i) * m.class_density(i, x);
    }
    total / w.l1()
}

fn class_rng(seed: u64, class: usize, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(
        seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

fn draw_from_class(m: &MixtureModel, class: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let sigma = m.sigma();
    m.mean(class)
        .iter()
        .map(|&mu| mu + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Per-class sample allocation proportional to the row weight.
fn stratified_allocation(w: &WeightMatrix, n: usize) -> Vec<usize> {
    let k = w.k();
    (0..k)
        .map(|i| {
            let share = w.row_sum(i) / w.l1();
            if share <= 0.0 {
                0
            } else {
                ((n as f64 * share).round() as usize).max(1)
            }
        })
        .collect()
}

/// Weighted-error estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Stratified Monte-Carlo estimate of the weighted error
/// `sum_ij w_ij P_i(F(x) != j)`.
pub fn mc_weighted_error(
    f: &ClassifierKind,
    m: &MixtureModel,
    w: &WeightMatrix,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if w.k() != m.k() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} classes", m.k()),
            got: format!("{}x{}", w.k(), w.k()),
        });
    }
    let alloc = stratified_allocation(w, n);
    let per_class = run_sharded(m.k(), worker_threads(), |class| {
        let n_i = alloc[class];
        if n_i == 0 {
            return (0.0, 0.0);
        }
        let mut rng = class_rng(seed, class, 1);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let row_sum = w.row_sum(class);
        for _ in 0..n_i {
            let x = draw_from_class(m, class, &mut rng);
            let pred = f.classify(&x);
            // sum_j w_ij 1(F(x) != j) = row mass minus the hit entry
            let g = row_sum - w.get(class, pred);
            sum += g;
            sum_sq += g * g;
        }
        let mean = sum / n_i as f64;
        let var = (sum_sq / n_i as f64 - mean * mean).max(0.0);
        (mean, var / n_i as f64)
    });
    let value: f64 = per_class.iter().map(|&(m, _)| m).sum();
    let variance: f64 = per_class.iter().map(|&(_, v)| v).sum();
    Ok(McEstimate {
        value,
        stderr: variance.sqrt(),
    })
}

/// Probe offsets for the disagreement search inside a radius-`r` ball:
/// the `2d` axis-aligned boundary points plus `probes` shared points drawn
/// uniformly from the ball.
fn probe_offsets(dim: usize, r: f64, probes: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    let mut offsets = Vec::with_capacity(2 * dim + probes);
    for j in 0..dim {
        let mut plus = vec![0.0; dim];
        plus[j] = r;
        offsets.push(plus);
        let mut minus = vec![0.0; dim];
        minus[j] = -r;
        offsets.push(minus);
    }
    for _ in 0..probes {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: f64 = rng.random_range(0.0..1.0);
        let radius = r * u.powf(1.0 / dim as f64);
        offsets.push(dir.iter().map(|&v| v * radius / norm.max(1e-300)).collect());
    }
    offsets
}

fn any_probe_disagrees(
    f: &ClassifierKind,
    x: &[f64],
    base: usize,
    offsets: &[Vec<f64>],
    buf: &mut Vec<f64>,
) -> bool {
    for off in offsets {
        buf.clear();
        buf.extend(x.iter().zip(off).map(|(a, b)| a + b));
        if f.classify(buf) != base {
            return true;
        }
    }
    false
}

/// Stratified Monte-Carlo estimate of the weighted consistency
/// `sum_ij w_ij P_i(exists x' in B(x): F(x') != F(x))`, probing each ball
/// with axis-aligned boundary points and uniform interior points. Finite
/// probing means the estimate is a lower bound of the true value; for 1-D
/// threshold classifiers the axis probes make it exact.
pub fn mc_weighted_consistency(
    f: &ClassifierKind,
    m: &MixtureModel,
    w: &WeightMatrix,
    radius: f64,
    probes: usize,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if radius < 0.0 {
        return Err(Error::OutOfDomain(format!("radius {} must be >= 0", radius)));
    }
    if radius == 0.0 {
        return Ok(McEstimate {
            value: 0.0,
            stderr: 0.0,
        });
    }
    let alloc = stratified_allocation(w, n);
    let per_class = run_sharded(m.k(), worker_threads(), |class| {
        let n_i = alloc[class];
        if n_i == 0 {
            return (0.0, 0.0);
        }
        let mut rng = class_rng(seed, class, 2);
        let offsets = probe_offsets(m.dim(), radius, probes, &mut rng);
        let mut hits = 0usize;
        let mut buf = Vec::with_capacity(m.dim());
        for _ in 0..n_i {
            let x = draw_from_class(m, class, &mut rng);
            let base = f.classify(&x);
            if any_probe_disagrees(f, &x, base, &offsets, &mut buf) {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n_i as f64;
        let row = w.row_sum(class);
        let var = (p_hat * (1.0 - p_hat)).max(0.0) / n_i as f64;
        (row * p_hat, row * row * var)
    });
    let value: f64 = per_class.iter().map(|&(m, _)| m).sum();
    let variance: f64 = per_class.iter().map(|&(_, v)| v).sum();
    Ok(McEstimate {
        value,
        stderr: variance.sqrt(),
    })
}

/// Weighted disagreement `L_w(F, G) = sum_ij w_ij P_i(F(x) != G(x))`.
pub fn mc_weighted_disagreement(
    f: &ClassifierKind,
    other: &ClassifierKind,
    m: &MixtureModel,
    w: &WeightMatrix,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    let alloc = stratified_allocation(w, n);
    let per_class = run_sharded(m.k(), worker_threads(), |class| {
        let n_i = alloc[class];
        if n_i == 0 {
            return (0.0, 0.0);
        }
        let mut rng = class_rng(seed, class, 3);
        let mut hits = 0usize;
        for _ in 0..n_i {
            let x = draw_from_class(m, class, &mut rng);
            if f.classify(&x) != other.classify(&x) {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n_i as f64;
        let row = w.row_sum(class);
        let var = (p_hat * (1.0 - p_hat)).max(0.0) / n_i as f64;
        (row * p_hat, row * row * var)
    });
    let value: f64 = per_class.iter().map(|&(m, _)| m).sum();
    let variance: f64 = per_class.iter().map(|&(_, v)| v).sum();
    Ok(McEstimate {
        value,
        stderr: variance.sqrt(),
    })
}

/// Error-bound value
/// `2/(g-1) err_pl + (g+1)/(g-1) err_star + 4g/(g-1) r_star`.
pub fn theorem1_bound(err_gpl: f64, err_gstar: f64, r_gstar: f64, gamma: f64) -> Result<f64> {
    if gamma <= 1.0 {
        return Err(Error::GammaTooSmall { gamma });
    }
    if err_gpl < 0.0 || err_gstar < 0.0 || r_gstar < 0.0 {
        return Err(Error::OutOfDomain(
            "bound inputs must be nonnegative".to_string(),
        ));
    }
    Ok(2.0 / (gamma - 1.0) * err_gpl
        + (gamma + 1.0) / (gamma - 1.0) * err_gstar
        + 4.0 * gamma / (gamma - 1.0) * r_gstar)
}

/// A bound-verification scenario: ground-truth mixture, weight matrix,
/// pseudo-labeler, reference solution, perturbation radius, and MC budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremScenario {
    pub mixture_means: Vec<Vec<f64>>,
    pub mixture_variance: f64,
    pub mixture_priors: Vec<f64>,
    pub weight_diag: Vec<f64>,
    pub gpl: ClassifierKind,
    pub gstar: ClassifierKind,
    pub radius: f64,
    pub n: usize,
    pub probes: usize,
    pub seed: u64,
}

impl TheoremScenario {
    pub fn mixture(&self) -> Result<MixtureModel> {
        MixtureModel::new(
            self.mixture_means.clone(),
            self.mixture_variance,
            self.mixture_priors.clone(),
        )
    }

    pub fn weight(&self) -> Result<WeightMatrix> {
        WeightMatrix::diagonal(&self.weight_diag)
    }

    /// Expansion argument `h = 2 r / sigma`, which is `2 r sqrt(d)` for the
    /// reference per-coordinate variance `1/d`.
    pub fn expansion_h(&self) -> f64 {
        2.0 * self.radius / self.mixture_variance.sqrt()
    }

    /// The canonical 1-D two-Gaussian scenario: unit variance, symmetric
    /// means, equal diagonal weights, radius 0.5 (so `h = 1`), reference
    /// solution at the Bayes threshold, and a pseudo-labeler threshold
    /// calibrated by bisection so its weighted error hits `err_target`.
    pub fn canonical(seed: u64) -> Result<Self> {
        let sep = 3.0;
        let err_target = 0.10;
        // closed-form weighted error of a right-shifted threshold
        let err_of = |t: f64| {
            0.5 * (1.0 - std_normal_cdf(t + sep)) + 0.5 * std_normal_cdf(t - sep)
        };
        let (mut lo, mut hi) = (0.0f64, sep + 6.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if err_of(mid) < err_target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_pl = 0.5 * (lo + hi);
        Ok(Self {
            mixture_means: vec![vec![-sep], vec![sep]],
            mixture_variance: 1.0,
            mixture_priors: vec![0.5, 0.5],
            weight_diag: vec![0.5, 0.5],
            gpl: ClassifierKind::Threshold1D {
                t: t_pl,
                below: 0,
                above: 1,
            },
            gstar: ClassifierKind::Threshold1D {
                t: 0.0,
                below: 0,
                above: 1,
            },
            radius: 0.5,
            n: 100_000,
            probes: 64,
            seed,
        })
    }
}

/// A grid of 1-D threshold classifiers.
pub fn threshold_family(lo: f64, hi: f64, steps: usize) -> Vec<ClassifierKind> {
    (0..=steps)
        .map(|i| ClassifierKind::Threshold1D {
            t: lo + (hi - lo) * i as f64 / steps as f64,
            below: 0,
            above: 1,
        })
        .collect()
}

/// The two Monte-Carlo terms of the self-training objective
/// `(g+1)/(g-1) L_w(F, gpl) + 2g/(g-1) R_w(F)` and their combination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CsstLossValue {
    pub agreement: McEstimate,
    pub consistency: McEstimate,
    pub gamma: f64,
    pub total: f64,
    pub total_stderr: f64,
}

/// Evaluate the theoretical self-training objective for one classifier.
pub fn theoretical_csst_loss(
    f: &ClassifierKind,
    scenario: &TheoremScenario,
    gamma: f64,
) -> Result<CsstLossValue> {
    if gamma <= 1.0 {
        return Err(Error::GammaTooSmall { gamma });
    }
    let m = scenario.mixture()?;
    let w = scenario.weight()?;
    let agreement =
        mc_weighted_disagreement(f, &scenario.gpl, &m, &w, scenario.n, scenario.seed)?;
    let consistency = mc_weighted_consistency(
        f,
        &m,
        &w,
        scenario.radius,
        scenario.probes,
        scenario.n,
        scenario.seed,
    )?;
    let ca = (gamma + 1.0) / (gamma - 1.0);
    let cr = 2.0 * gamma / (gamma - 1.0);
    Ok(CsstLossValue {
        agreement,
        consistency,
        gamma,
        total: ca * agreement.value + cr * consistency.value,
        total_stderr: (ca * ca * agreement.stderr * agreement.stderr
            + cr * cr * consistency.stderr * consistency.stderr)
            .sqrt(),
    })
}

/// Every quantity measured while checking the error bound on a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReport {
    pub err_gpl: McEstimate,
    pub err_gstar: McEstimate,
    pub r_gstar: McEstimate,
    pub p_w: f64,
    pub gamma: f64,
    /// `gamma > 3` as the analysis requires.
    pub gamma_ok: bool,
    pub bound_value: f64,
    pub bound_stderr: f64,
    pub err_fhat: McEstimate,
    pub fhat: ClassifierKind,
    pub fhat_loss: CsstLossValue,
    /// `err(fhat) <= bound + 3 * combined stderr`.
    pub inequality_ok: bool,
    /// `err(fhat) < err(gpl)`.
    pub improvement_ok: bool,
}

/// Pick the family member minimizing the self-training objective, then check
/// it against the error bound. Fails outright when `gamma <= 1`; a gamma at
/// or below 3 is reported as an assumption violation but still evaluated.
pub fn verify_theorem1(
    scenario: &TheoremScenario,
    family: &[ClassifierKind],
) -> Result<TheoremReport> {
    if family.is_empty() {
        return Err(Error::InvalidConfig("empty classifier family".to_string()));
    }
    let m = scenario.mixture()?;
    let w = scenario.weight()?;

    let err_gpl = mc_weighted_error(&scenario.gpl, &m, &w, scenario.n, scenario.seed)?;
    let err_gstar = mc_weighted_error(&scenario.gstar, &m, &w, scenario.n, scenario.seed)?;
    let r_gstar = mc_weighted_consistency(
        &scenario.gstar,
        &m,
        &w,
        scenario.radius,
        scenario.probes,
        scenario.n,
        scenario.seed,
    )?;

    let p_w = ((err_gpl.value + err_gstar.value) / w.l1()).clamp(f64::MIN_POSITIVE, 1.0);
    let c = ExpansionFunction::GaussianMixture {
        h: scenario.expansion_h(),
    };
    let gamma = gamma_of(p_w, &c)?;
    if gamma <= 1.0 {
        return Err(Error::GammaTooSmall { gamma });
    }

    let mut best: Option<(usize, CsstLossValue)> = None;
    for (idx, candidate) in family.iter().enumerate() {
        let loss = theoretical_csst_loss(candidate, scenario, gamma)?;
        let better = match &best {
            None => true,
            Some((_, current)) => loss.total < current.total,
        };
        if better {
            best = Some((idx, loss));
        }
    }
    let (fhat_idx, fhat_loss) = best.expect("family is nonempty");
    let fhat = family[fhat_idx].clone();

    // fresh stream for the selected classifier's error
    let err_fhat = mc_weighted_error(&fhat, &m, &w, scenario.n, scenario.seed.wrapping_add(0x51ab))?;

    let bound_value = theorem1_bound(err_gpl.value, err_gstar.value, r_gstar.value, gamma)?;
    let c_pl = 2.0 / (gamma - 1.0);
    let c_star = (gamma + 1.0) / (gamma - 1.0);
    let c_r = 4.0 * gamma / (gamma - 1.0);
    let bound_stderr = (c_pl * c_pl * err_gpl.stderr * err_gpl.stderr
        + c_star * c_star * err_gstar.stderr * err_gstar.stderr
        + c_r * c_r * r_gstar.stderr * r_gstar.stderr)
        .sqrt();
    let combined = (bound_stderr * bound_stderr + err_fhat.stderr * err_fhat.stderr).sqrt();

    Ok(TheoremReport {
        err_gpl,
        err_gstar,
        r_gstar,
        p_w,
        gamma,
        gamma_ok: gamma_satisfies_assumption(gamma),
        bound_value,
        bound_stderr,
        inequality_ok: err_fhat.value <= bound_value + 3.0 * combined,
        improvement_ok: err_fhat.value < err_gpl.value,
        err_fhat,
        fhat,
        fhat_loss,
    })
}

/// A measurable set used in the expansion spot-checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SetSpec {
    /// `normal . x < offset`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// `|x - center| < radius`.
    Ball { center: Vec<f64>, radius: f64 },
}

impl SetSpec {
    fn contains(&self, x: &[f64]) -> bool {
        match self {
            Self::HalfSpace { normal, offset } => {
                normal.iter().zip(x).map(|(n, v)| n * v).sum::<f64>() < *offset
            }
            Self::Ball { center, radius } => {
                let sq: f64 = center
                    .iter()
                    .zip(x)
                    .map(|(c, v)| (c - v) * (c - v))
                    .sum();
                sq.sqrt() < *radius
            }
        }
    }
}

/// One row of the expansion spot-check: measured set mass, probed
/// neighborhood mass (a lower bound), and the mass the expansion property
/// requires.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionCheckRow {
    pub set: SetSpec,
    pub q_set: McEstimate,
    pub q_neighborhood: McEstimate,
    pub required: f64,
    pub margin: f64,
    pub boundary_case: bool,
}

/// Monte-Carlo check of `Q(N(S)) >= c(Q(S)) Q(S)` under the weighted
/// measure, with `N(S)` membership probed inside a `2r` ball around each
/// sample.
pub fn mc_expansion_check(
    m: &MixtureModel,
    w: &WeightMatrix,
    radius: f64,
    sets: &[SetSpec],
    n: usize,
    probes: usize,
    seed: u64,
) -> Result<Vec<ExpansionCheckRow>> {
    let c = ExpansionFunction::GaussianMixture {
        h: 2.0 * radius / m.sigma(),
    };
    let k = m.k();
    let row_shares: Vec<f64> = (0..k).map(|i| w.row_sum(i) / w.l1()).collect();
    let mut cumulative = Vec::with_capacity(k);
    let mut acc = 0.0;
    for &s in &row_shares {
        acc += s;
        cumulative.push(acc);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let reach = 2.0 * radius;
    let offsets = probe_offsets(m.dim(), reach, probes, &mut rng);
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let mut in_set = 0usize;
        let mut in_hood = 0usize;
        let mut sample_rng = ChaCha20Rng::seed_from_u64(seed ^ 0xABCD_EF01);
        let mut buf = Vec::with_capacity(m.dim());
        for _ in 0..n {
            let u: f64 = sample_rng.random_range(0.0..1.0);
            let class = cumulative.iter().position(|&cv| u < cv).unwrap_or(k - 1);
            let x = draw_from_class(m, class, &mut sample_rng);
            if set.contains(&x) {
                in_set += 1;
                in_hood += 1;
                continue;
            }
            let mut member = false;
            for off in &offsets {
                buf.clear();
                buf.extend(x.iter().zip(off).map(|(a, b)| a + b));
                if set.contains(&buf) {
                    member = true;
                    break;
                }
            }
            if member {
                in_hood += 1;
            }
        }
        let q_set = in_set as f64 / n as f64;
        let q_hood = in_hood as f64 / n as f64;
        let se = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
        let boundary_case = q_set >= 1.0 - 1e-12 || q_set == 0.0;
        let required = if boundary_case {
            q_set
        } else {
            c.eval(q_set)? * q_set
        };
        rows.push(ExpansionCheckRow {
            set: set.clone(),
            q_set: McEstimate {
                value: q_set,
                stderr: se(q_set),
            },
            q_neighborhood: McEstimate {
                value: q_hood,
                stderr: se(q_hood),
            },
            required,
            margin: q_hood - required,
            boundary_case,
        });
    }
    Ok(rows)
}

/// Rows of the expansion-function sweep CSV (`p,h,c_of_p`).
pub fn expansion_sweep_csv(h_values: &[f64], grid: usize) -> Result<String> {
    let mut out = String::from("p,h,c_of_p\n");
    for &h in h_values {
        for i in 1..grid {
            let p = i as f64 / grid as f64;
            out.push_str(&format!("{},{},{}\n", p, h, expansion_c_gauss(p, h)?));
        }
    }
    Ok(out)
}
