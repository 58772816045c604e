//! Loss functions driven by a gain matrix: the hybrid supervised loss, the
//! weighted consistency loss and its logit-adjusted training form, the
//! gain-adjusted target distribution, KL divergence, and the KL-based
//! selection mask for unlabeled samples.

use crate::error::{Error, Result};
use crate::gain::GainMatrix;

/// Probabilities are floored at this value inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for &v in &values {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidProbability(format!("entry {}", v)));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {}, expected 1",
                sum
            )));
        }
        Ok(Self { values })
    }

    /// One-hot vector with mass on `class`.
    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::IndexOutOfRange { index: class, k });
        }
        let mut values = vec![0.0; k];
        values[class] = 1.0;
        Ok(Self { values })
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Self {
        Self {
            values: vec![1.0 / k as f64; k],
        }
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Index of the largest entry; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.values.len() {
            if self.values[i] > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Largest entry.
    pub fn max_value(&self) -> f64 {
        self.values[self.argmax()]
    }
}

/// Pre-softmax scores; all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit { index });
        }
        Ok(Self { values })
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Hybrid loss for label `y`, model probabilities `p`, and gain `G = M D`:
/// `-sum_i M_yi ln( (p_i / D_ii) / sum_j (p_j / D_jj) )`.
pub fn hybrid_loss(y: usize, p: &ProbVector, g: &GainMatrix) -> Result<f64> {
    let k = g.k();
    if p.k() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} probabilities", k),
            got: format!("{}", p.k()),
        });
    }
    if y >= k {
        return Err(Error::IndexOutOfRange { index: y, k });
    }
    let d = g.factor_d()?;
    let scaled: Vec<f64> = (0..k).map(|i| p.get(i).max(PROB_FLOOR) / d[i]).collect();
    let z: f64 = scaled.iter().sum();
    let m_row = g.m_row(y)?;
    let mut loss = 0.0;
    for i in 0..k {
        loss -= m_row[i] * (scaled[i] / z).ln();
    }
    Ok(loss)
}

/// Numerically stable log-softmax.
fn log_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_z = values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    values.iter().map(|&v| v - log_z).collect()
}

/// Logit-adjusted weighted consistency loss:
/// `-sum_i t_i ln softmax(z - ln D)_i` with target weights `t = M^T p_hat`.
pub fn la_weighted_consistency(
    target_weights: &[f64],
    z: &LogitVector,
    d_diag: &[f64],
) -> Result<f64> {
    let k = z.k();
    if target_weights.len() != k || d_diag.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets and diagonal entries", k),
            got: format!("{} and {}", target_weights.len(), d_diag.len()),
        });
    }
    for (i, &d) in d_diag.iter().enumerate() {
        if d <= 0.0 {
            return Err(Error::NonPositiveDiagonal { index: i, value: d });
        }
    }
    let adjusted: Vec<f64> = (0..k).map(|i| z.values()[i] - d_diag[i].ln()).collect();
    let logp = log_softmax(&adjusted);
    Ok(-(0..k).map(|i| target_weights[i] * logp[i]).sum::<f64>())
}

/// Gradient of [`la_weighted_consistency`] with respect to the logits:
/// `(sum_i t_i) softmax(z - ln D) - t`.
pub fn la_weighted_consistency_grad(
    target_weights: &[f64],
    z: &LogitVector,
    d_diag: &[f64],
) -> Result<Vec<f64>> {
    let k = z.k();
    if target_weights.len() != k || d_diag.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets and diagonal entries", k),
            got: format!("{} and {}", target_weights.len(), d_diag.len()),
        });
    }
    for (i, &d) in d_diag.iter().enumerate() {
        if d <= 0.0 {
            return Err(Error::NonPositiveDiagonal { index: i, value: d });
        }
    }
    let adjusted: Vec<f64> = (0..k).map(|i| z.values()[i] - d_diag[i].ln()).collect();
    let logp = log_softmax(&adjusted);
    let mass: f64 = target_weights.iter().sum();
    Ok((0..k)
        .map(|i| mass * logp[i].exp() - target_weights[i])
        .collect())
}

/// Weighted consistency loss `-sum_i (G^T p_hat)_i ln p_aug_i`.
pub fn weighted_consistency_loss(
    pseudo: &ProbVector,
    p_aug: &ProbVector,
    g: &GainMatrix,
) -> Result<f64> {
    let k = g.k();
    if pseudo.k() != k || p_aug.k() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} classes", k),
            got: format!("{} and {}", pseudo.k(), p_aug.k()),
        });
    }
    let target = g.transpose_apply(pseudo.values());
    Ok(-(0..k)
        .map(|i| target[i] * floored_ln(p_aug.get(i)))
        .sum::<f64>())
}

/// Gain-adjusted target distribution `norm(G^T p_hat)`.
pub fn normalize_gain_target(g: &GainMatrix, pseudo: &ProbVector) -> Result<ProbVector> {
    if pseudo.k() != g.k() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} classes", g.k()),
            got: format!("{}", pseudo.k()),
        });
    }
    let raw = g.transpose_apply(pseudo.values());
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateNormalizer { value: total });
    }
    ProbVector::new(raw.iter().map(|&v| v / total).collect())
}

/// Kullback-Leibler divergence `sum_i p_i ln(p_i / q_i)`; zero entries of `p`
/// contribute nothing and `q` is floored.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> f64 {
    let mut sum = 0.0;
    for (&pi, &qi) in p.values().iter().zip(q.values()) {
        if pi > 0.0 {
            sum += pi * (pi.ln() - floored_ln(qi));
        }
    }
    sum.max(0.0)
}

/// True when the gain-adjusted target of `pseudo` is within KL distance
/// `tau` of the model's weak-augmentation distribution.
pub fn kl_threshold_mask(
    pseudo: &ProbVector,
    p_weak: &ProbVector,
    g: &GainMatrix,
    tau: f64,
) -> Result<bool> {
    if tau < 0.0 {
        return Err(Error::OutOfDomain(format!("tau {} must be >= 0", tau)));
    }
    let target = normalize_gain_target(g, pseudo)?;
    Ok(kl_divergence(&target, p_weak) <= tau)
}

/// Mean hybrid loss over a labeled batch.
pub fn batch_supervised_loss(
    labels: &[usize],
    probs: &[ProbVector],
    g: &GainMatrix,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != probs.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: probs.len(),
        });
    }
    let mut sum = 0.0;
    for (&y, p) in labels.iter().zip(probs) {
        sum += hybrid_loss(y, p, g)?;
    }
    Ok(sum / labels.len() as f64)
}

/// One unlabeled sample inside a consistency batch: the pseudo-label target,
/// the model's distribution on the weak augmentation, and the logits on the
/// strong augmentation.
#[derive(Debug, Clone)]
pub struct ConsistencyItem {
    pub pseudo: ProbVector,
    pub p_weak: ProbVector,
    pub z_strong: LogitVector,
}

/// Masked mean of the logit-adjusted weighted consistency loss. Samples that
/// fail the KL threshold contribute zero but still count in the divisor.
pub fn batch_consistency_loss(
    items: &[ConsistencyItem],
    g: &GainMatrix,
    tau: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = g.factor_d()?.to_vec();
    let mut sum = 0.0;
    for item in items {
        if kl_threshold_mask(&item.pseudo, &item.p_weak, g, tau)? {
            let target = g.m_transpose_apply(item.pseudo.values())?;
            sum += la_weighted_consistency(&target, &item.z_strong, &d)?;
        }
    }
    Ok(sum / items.len() as f64)
}
