//! Gain matrices for the supported objectives, their `G = M D` factorization,
//! and the Lagrange-multiplier updates of the two outer loops
//! (exponentiated gradient on the simplex, projected gradient on the
//! nonnegative orthant).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest multiplier value used before dividing by a prior, so a class is
/// never permanently assigned a zero gain row.
pub const MULTIPLIER_FLOOR: f64 = 1e-8;

/// K x K reward matrix. Entry `(i, j)` is the reward for predicting class
/// `j` when the truth is class `i`.
///
/// Entries are nonnegative. When every diagonal entry is strictly positive
/// the factorization `G = M D` (with `D = diag(G_ii)` and `M = G D^-1`) is
/// cached at construction; operations that need it fail otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    k: usize,
    entries: Vec<f64>,
    factors: Option<Factors>,
}

#[derive(Debug, Clone, PartialEq)]
struct Factors {
    /// `M = G D^-1`, row-major; unit diagonal.
    m: Vec<f64>,
    /// Diagonal of `D`.
    d: Vec<f64>,
}

impl GainMatrix {
    /// Build from row-major entries. Negative entries are rejected.
    pub fn new(k: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", k, k),
                got: format!("{} entries", entries.len()),
            });
        }
        for (idx, &v) in entries.iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeGainEntry {
                    i: idx / k,
                    j: idx % k,
                    value: v,
                });
            }
        }
        let d: Vec<f64> = (0..k).map(|i| entries[i * k + i]).collect();
        let factors = if d.iter().all(|&v| v > 0.0) {
            let mut m = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    m[i * k + j] = entries[i * k + j] / d[j];
                }
            }
            Some(Factors { m, d })
        } else {
            None
        };
        Ok(Self { k, entries, factors })
    }

    /// Diagonal gain matrix; diagonal entries must be positive.
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let k = diag.len();
        for (i, &v) in diag.iter().enumerate() {
            if v <= 0.0 {
                return Err(Error::NonPositiveDiagonal { index: i, value: v });
            }
        }
        let mut entries = vec![0.0; k * k];
        for (i, &v) in diag.iter().enumerate() {
            entries[i * k + i] = v;
        }
        Self::new(k, entries)
    }

    /// Identity gain, under which the linear objective is plain accuracy.
    pub fn identity(k: usize) -> Self {
        Self::diagonal(&vec![1.0; k]).expect("unit diagonal is positive")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// True when all diagonal entries are strictly positive.
    pub fn is_factorable(&self) -> bool {
        self.factors.is_some()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.k).all(|i| (0..self.k).all(|j| i == j || self.get(i, j) == 0.0))
    }

    fn factors(&self) -> Result<&Factors> {
        self.factors.as_ref().ok_or_else(|| {
            let idx = (0..self.k)
                .find(|&i| self.get(i, i) <= 0.0)
                .unwrap_or(0);
            Error::NonPositiveDiagonal {
                index: idx,
                value: self.get(idx, idx),
            }
        })
    }

    /// Diagonal of `D` in `G = M D`.
    pub fn factor_d(&self) -> Result<&[f64]> {
        Ok(&self.factors()?.d)
    }

    /// Entry of `M` in `G = M D`.
    pub fn factor_m(&self, i: usize, j: usize) -> Result<f64> {
        Ok(self.factors()?.m[i * self.k + j])
    }

    /// Row `y` of `M`.
    pub fn m_row(&self, y: usize) -> Result<&[f64]> {
        let f = self.factors()?;
        Ok(&f.m[y * self.k..(y + 1) * self.k])
    }

    /// `(G^T v)_j = sum_i G_ij v_i`.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j) * v[i]).sum())
            .collect()
    }

    /// `(M^T v)_j = sum_i M_ij v_i`.
    pub fn m_transpose_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let f = self.factors()?;
        Ok((0..self.k)
            .map(|j| (0..self.k).map(|i| f.m[i * self.k + j] * v[i]).sum())
            .collect())
    }
}

/// Split a gain matrix into `(M, D)` with `M D = G` and `M` having a unit
/// diagonal. Fails on a nonpositive diagonal entry.
pub fn decompose(g: &GainMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = g.factors()?;
    Ok((f.m.clone(), f.d.clone()))
}

/// Gain for the worst-case-recall objective: `diag(lambda_i / pi_i)`.
///
/// Multipliers are floored at [`MULTIPLIER_FLOOR`] before the division so a
/// vanishing multiplier cannot zero out a class's gain row.
pub fn min_recall_gain(lambda: &[f64], priors: &[f64]) -> Result<GainMatrix> {
    let k = lambda.len();
    if priors.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} priors", k),
            got: format!("{}", priors.len()),
        });
    }
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || lambda.iter().any(|&l| l < 0.0) {
        return Err(Error::OffSimplex { sum });
    }
    for (i, &p) in priors.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroPrior { class: i, value: p });
        }
    }
    let diag: Vec<f64> = lambda
        .iter()
        .zip(priors)
        .map(|(&l, &p)| l.max(MULTIPLIER_FLOOR) / p)
        .collect();
    GainMatrix::diagonal(&diag)
}

/// Gain for the coverage-constrained mean-recall objective:
/// `G_ij = delta_ij / (K pi_i) + lambda_j`.
pub fn coverage_gain(lambda: &[f64], priors: &[f64], k: usize) -> Result<GainMatrix> {
    if lambda.len() != k || priors.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} multipliers and priors", k),
            got: format!("{} and {}", lambda.len(), priors.len()),
        });
    }
    for (i, &l) in lambda.iter().enumerate() {
        if l < 0.0 {
            return Err(Error::NegativeMultiplier { index: i, value: l });
        }
    }
    for (i, &p) in priors.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroPrior { class: i, value: p });
        }
    }
    let kf = k as f64;
    let mut entries = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            entries[i * k + j] = if i == j { 1.0 / (kf * priors[i]) } else { 0.0 } + lambda[j];
        }
    }
    GainMatrix::new(k, entries)
}

/// Which multiplier update a [`LagrangeState`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultiplierRule {
    /// Exponentiated gradient; multipliers live on the probability simplex.
    ExpGradientSimplex,
    /// Projected gradient; multipliers live on the nonnegative orthant.
    ProjGradientNonneg,
}

/// Lagrange multipliers plus their update rule and step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: Vec<f64>,
    pub rule: MultiplierRule,
    pub step: f64,
}

impl LagrangeState {
    /// Uniform simplex initialization for the exponentiated-gradient rule.
    pub fn uniform_simplex(k: usize, step: f64) -> Self {
        Self {
            lambda: vec![1.0 / k as f64; k],
            rule: MultiplierRule::ExpGradientSimplex,
            step,
        }
    }

    /// All-zeros initialization for the projected-gradient rule.
    pub fn zeros(k: usize, step: f64) -> Self {
        Self {
            lambda: vec![0.0; k],
            rule: MultiplierRule::ProjGradientNonneg,
            step,
        }
    }
}

/// Exponentiated-gradient step `lambda_i' ∝ lambda_i exp(-omega rec_i)`,
/// renormalized to the simplex.
pub fn exp_gradient_update(
    state: &LagrangeState,
    recalls: &[f64],
    omega: f64,
) -> Result<LagrangeState> {
    if state.rule != MultiplierRule::ExpGradientSimplex {
        return Err(Error::WrongMultiplierRule {
            expected: "exp-gradient-simplex".to_string(),
        });
    }
    if recalls.len() != state.lambda.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} recalls", state.lambda.len()),
            got: format!("{}", recalls.len()),
        });
    }
    for &r in recalls {
        if !(-1e-9..=1.0 + 1e-9).contains(&r) {
            return Err(Error::OutOfDomain(format!("recall {} outside [0, 1]", r)));
        }
    }
    let unnormalized: Vec<f64> = state
        .lambda
        .iter()
        .zip(recalls)
        .map(|(&l, &r)| l * (-omega * r).exp())
        .collect();
    let total: f64 = unnormalized.iter().sum();
    assert!(
        total > 0.0,
        "simplex multipliers cannot all vanish under a finite step"
    );
    Ok(LagrangeState {
        lambda: unnormalized.iter().map(|&v| v / total).collect(),
        rule: state.rule,
        step: state.step,
    })
}

/// Projected-gradient step `lambda_i' = max(0, lambda_i - omega (cov_i - target))`.
pub fn proj_gradient_update(
    state: &LagrangeState,
    coverages: &[f64],
    omega: f64,
    target: f64,
) -> Result<LagrangeState> {
    if state.rule != MultiplierRule::ProjGradientNonneg {
        return Err(Error::WrongMultiplierRule {
            expected: "projected-gradient-nonneg".to_string(),
        });
    }
    if coverages.len() != state.lambda.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} coverages", state.lambda.len()),
            got: format!("{}", coverages.len()),
        });
    }
    let lambda = state
        .lambda
        .iter()
        .zip(coverages)
        .map(|(&l, &c)| (l - omega * (c - target)).max(0.0))
        .collect();
    Ok(LagrangeState {
        lambda,
        rule: state.rule,
        step: state.step,
    })
}

/// Write a multiplier trajectory as CSV with header `round,i,lambda`.
pub fn write_lambda_trajectory_csv(path: &Path, trajectory: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("round,i,lambda\n");
    for (round, lambda) in trajectory.iter().enumerate() {
        for (i, &v) in lambda.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", round, i, v));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn min_recall_gain_examples() {
        let g = min_recall_gain(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 1.0);
        assert_abs_diff_eq!(g.get(1, 1), 1.0);

        let g = min_recall_gain(&[0.2, 0.8], &[0.8, 0.2]).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(1, 1), 4.0, epsilon = 1e-12);
        assert!(g.is_diagonal());
    }

    #[test]
    fn min_recall_gain_floors_zero_multiplier() {
        let g = min_recall_gain(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(g.get(1, 1) > 0.0);
        assert_abs_diff_eq!(g.get(1, 1), MULTIPLIER_FLOOR / 0.5, epsilon = 1e-20);
        assert!(g.is_factorable());
    }

    #[test]
    fn min_recall_gain_rejects_bad_input() {
        assert!(matches!(
            min_recall_gain(&[0.7, 0.7], &[0.5, 0.5]),
            Err(Error::OffSimplex { .. })
        ));
        assert!(matches!(
            min_recall_gain(&[0.5, 0.5], &[0.0, 1.0]),
            Err(Error::ZeroPrior { .. })
        ));
    }

    #[test]
    fn coverage_gain_examples() {
        let g = coverage_gain(&[0.0, 0.0], &[0.5, 0.5], 2).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 1.0);
        assert_abs_diff_eq!(g.get(1, 1), 1.0);
        assert_abs_diff_eq!(g.get(0, 1), 0.0);

        let g = coverage_gain(&[0.0, 1.0], &[0.5, 0.5], 2).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 1.0);
        assert_abs_diff_eq!(g.get(0, 1), 1.0);
        assert_abs_diff_eq!(g.get(1, 0), 0.0);
        assert_abs_diff_eq!(g.get(1, 1), 2.0);
    }

    #[test]
    fn coverage_gain_matches_elementwise_formula() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let k = 4;
        let lambda: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
        let mut priors: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= total);
        let g = coverage_gain(&lambda, &priors, k).unwrap();
        for i in 0..k {
            for j in 0..k {
                let expected =
                    if i == j { 1.0 / (k as f64 * priors[i]) } else { 0.0 } + lambda[j];
                assert_abs_diff_eq!(g.get(i, j), expected, epsilon = 1e-12);
            }
        }
        // Off-diagonal entries of column j are the constant lambda_j.
        for j in 0..k {
            for i in 0..k {
                if i != j {
                    assert_abs_diff_eq!(g.get(i, j), lambda[j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn coverage_gain_rejects_negative_multiplier() {
        assert!(matches!(
            coverage_gain(&[-0.1, 0.0], &[0.5, 0.5], 2),
            Err(Error::NegativeMultiplier { .. })
        ));
    }

    #[test]
    fn decompose_examples() {
        let g = GainMatrix::diagonal(&[2.0, 3.0]).unwrap();
        let (m, d) = decompose(&g).unwrap();
        assert_eq!(d, vec![2.0, 3.0]);
        assert_eq!(m, vec![1.0, 0.0, 0.0, 1.0]);

        let g = GainMatrix::new(2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let (m, d) = decompose(&g).unwrap();
        assert_eq!(d, vec![1.0, 2.0]);
        assert_abs_diff_eq!(m[0], 1.0);
        assert_abs_diff_eq!(m[1], 0.5);
        assert_abs_diff_eq!(m[2], 0.0);
        assert_abs_diff_eq!(m[3], 1.0);
    }

    #[test]
    fn decompose_rejects_zero_diagonal() {
        let g = GainMatrix::new(2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(!g.is_factorable());
        assert!(matches!(
            decompose(&g),
            Err(Error::NonPositiveDiagonal { index: 0, .. })
        ));
    }

    #[test]
    fn factorization_reproduces_gain() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.random_range(2..6);
            let entries: Vec<f64> = (0..k * k)
                .map(|idx| {
                    if idx / k == idx % k {
                        rng.random_range(0.1..3.0)
                    } else {
                        rng.random_range(0.0..2.0)
                    }
                })
                .collect();
            let g = GainMatrix::new(k, entries).unwrap();
            let (m, d) = decompose(&g).unwrap();
            for i in 0..k {
                assert_abs_diff_eq!(m[i * k + i], 1.0, epsilon = 1e-12);
                for j in 0..k {
                    assert_abs_diff_eq!(m[i * k + j] * d[j], g.get(i, j), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn exp_gradient_arithmetic() {
        let state = LagrangeState::uniform_simplex(2, 0.25);
        let next = exp_gradient_update(&state, &[1.0, 0.0], std::f64::consts::LN_2).unwrap();
        assert_abs_diff_eq!(next.lambda[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next.lambda[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_gradient_uniform_recalls_fixed_point() {
        let mut state = LagrangeState {
            lambda: vec![0.1, 0.6, 0.3],
            rule: MultiplierRule::ExpGradientSimplex,
            step: 0.25,
        };
        let original = state.lambda.clone();
        for _ in 0..5 {
            state = exp_gradient_update(&state, &[0.4, 0.4, 0.4], 1.3).unwrap();
        }
        for (a, b) in state.lambda.iter().zip(&original) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn exp_gradient_shift_invariance() {
        let state = LagrangeState {
            lambda: vec![0.2, 0.3, 0.5],
            rule: MultiplierRule::ExpGradientSimplex,
            step: 0.25,
        };
        let a = exp_gradient_update(&state, &[0.1, 0.5, 0.9], 0.8).unwrap();
        // recalls shifted by a constant stay in range here and cancel out
        let b = exp_gradient_update(&state, &[0.2, 0.6, 1.0], 0.8).unwrap();
        for (x, y) in a.lambda.iter().zip(&b.lambda) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn proj_gradient_arithmetic() {
        let state = LagrangeState::zeros(2, 1.0);
        let next = proj_gradient_update(&state, &[0.9, 0.1], 1.0, 0.475).unwrap();
        assert_abs_diff_eq!(next.lambda[0], 0.0);
        assert_abs_diff_eq!(next.lambda[1], 0.375, epsilon = 1e-12);
    }

    #[test]
    fn proj_gradient_stationary_at_target() {
        let state = LagrangeState {
            lambda: vec![0.3, 0.7],
            rule: MultiplierRule::ProjGradientNonneg,
            step: 0.25,
        };
        let next = proj_gradient_update(&state, &[0.4, 0.4], 2.0, 0.4).unwrap();
        assert_eq!(next.lambda, state.lambda);
    }

    #[test]
    fn proj_gradient_sign_behaviour() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..100 {
            let k = rng.random_range(2..6);
            let lambda: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let cov: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let target = rng.random_range(0.01..1.0 / k as f64);
            let omega = rng.random_range(0.5..20.0);
            let state = LagrangeState {
                lambda: lambda.clone(),
                rule: MultiplierRule::ProjGradientNonneg,
                step: omega,
            };
            let next = proj_gradient_update(&state, &cov, omega, target).unwrap();
            for i in 0..k {
                assert!(next.lambda[i] >= 0.0);
                if cov[i] < target {
                    // violated constraint drives the multiplier up
                    assert!(next.lambda[i] > lambda[i]);
                } else if cov[i] > target {
                    assert!(next.lambda[i] <= lambda[i]);
                }
            }
        }
    }

    #[test]
    fn proj_gradient_zero_stays_zero_with_slack() {
        let state = LagrangeState::zeros(3, 5.0);
        let next = proj_gradient_update(&state, &[0.5, 0.4, 0.6], 5.0, 0.2).unwrap();
        assert_eq!(next.lambda, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_rule_is_rejected() {
        let simplex = LagrangeState::uniform_simplex(2, 0.25);
        assert!(proj_gradient_update(&simplex, &[0.5, 0.5], 1.0, 0.4).is_err());
        let nonneg = LagrangeState::zeros(2, 0.25);
        assert!(exp_gradient_update(&nonneg, &[0.5, 0.5], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn exp_gradient_preserves_simplex(
            raw in proptest::collection::vec(1e-6f64..1.0, 2..6),
            recalls_raw in proptest::collection::vec(0.0f64..1.0, 2..6),
            omega in 0.01f64..5.0,
        ) {
            let k = raw.len().min(recalls_raw.len());
            let total: f64 = raw[..k].iter().sum();
            let lambda: Vec<f64> = raw[..k].iter().map(|v| v / total).collect();
            let state = LagrangeState {
                lambda,
                rule: MultiplierRule::ExpGradientSimplex,
                step: omega,
            };
            let next = exp_gradient_update(&state, &recalls_raw[..k], omega).unwrap();
            let sum: f64 = next.lambda.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(next.lambda.iter().all(|&l| l >= 0.0));
        }
    }
}
