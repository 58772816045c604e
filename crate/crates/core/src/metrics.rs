//! Confusion-matrix construction and the metrics defined on its entries:
//! per-class recall / coverage / precision, accuracy, mean and worst-case
//! recall, group-pooled variants, the linear cost-sensitive objective
//! `sum_ij G_ij C_ij`, and the equivalent weighted error.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gain::GainMatrix;

/// Empirical joint distribution of (true label, predicted label).
///
/// Entry `(i, j)` is the probability that a sample has true class `i` and
/// predicted class `j`; all entries sum to one. Row `i` sums to the
/// empirical prior of class `i`. Counts are kept only as the sample count
/// `n` used to build the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    entries: Vec<f64>,
    n: usize,
}

impl ConfusionMatrix {
    /// Build directly from joint probabilities (row-major, length `k*k`).
    pub fn from_joint(k: usize, entries: Vec<f64>, n: usize) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", k, k),
                got: format!("{} entries", entries.len()),
            });
        }
        for (idx, &v) in entries.iter().enumerate() {
            if !(v >= 0.0) {
                return Err(Error::InvalidProbability(format!(
                    "confusion entry ({},{}) = {}",
                    idx / k,
                    idx % k,
                    v
                )));
            }
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbability(format!(
                "confusion entries sum to {}, expected 1",
                total
            )));
        }
        Ok(Self { k, entries, n })
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Sample count the matrix was built from.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Joint probability of (true = `i`, predicted = `j`).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Empirical prior of class `i` (row sum).
    pub fn row_sum(&self, i: usize) -> f64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    /// Recall of class `i`: `C_ii / sum_j C_ij`.
    pub fn recall(&self, i: usize) -> Result<f64> {
        let row = self.row_sum(i);
        if row <= 0.0 {
            return Err(Error::UndefinedRecall { class: i });
        }
        Ok(self.get(i, i) / row)
    }

    /// Coverage of class `i`: the column sum `sum_j C_ji`.
    pub fn coverage(&self, i: usize) -> f64 {
        (0..self.k).map(|j| self.get(j, i)).sum()
    }

    /// Precision of class `i`: `C_ii / sum_k C_ki`.
    pub fn precision(&self, i: usize) -> Result<f64> {
        let col = self.coverage(i);
        if col <= 0.0 {
            return Err(Error::UndefinedPrecision { class: i });
        }
        Ok(self.get(i, i) / col)
    }

    /// Accuracy: trace of the joint.
    pub fn accuracy(&self) -> f64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Mean of the per-class recalls.
    pub fn mean_recall(&self) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.k {
            sum += self.recall(i)?;
        }
        Ok(sum / self.k as f64)
    }

    /// Minimum per-class recall.
    pub fn worst_case_recall(&self) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for i in 0..self.k {
            worst = worst.min(self.recall(i)?);
        }
        Ok(worst)
    }

    /// Minimum per-class coverage.
    pub fn min_coverage(&self) -> f64 {
        (0..self.k)
            .map(|i| self.coverage(i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Serialize as CSV with header `i,j,value`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("i,j,value\n");
        for i in 0..self.k {
            for j in 0..self.k {
                out.push_str(&format!("{},{},{}\n", i, j, self.get(i, j)));
            }
        }
        out
    }

    /// Write the CSV form to a file.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

/// Build a confusion matrix by counting (label, prediction) pairs.
pub fn confusion_from_predictions(
    labels: &[usize],
    preds: &[usize],
    k: usize,
) -> Result<ConfusionMatrix> {
    if labels.len() != preds.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = labels.len();
    let mut counts = vec![0usize; k * k];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= k {
            return Err(Error::IndexOutOfRange { index: y, k });
        }
        if p >= k {
            return Err(Error::IndexOutOfRange { index: p, k });
        }
        counts[y * k + p] += 1;
    }
    let entries = counts.iter().map(|&c| c as f64 / n as f64).collect();
    ConfusionMatrix::from_joint(k, entries, n)
}

/// Nonnegative weight matrix with its cached L1 mass.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    k: usize,
    entries: Vec<f64>,
    l1: f64,
}

impl WeightMatrix {
    /// Build from row-major entries; rejects negatives and all-zero weights.
    pub fn new(k: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", k, k),
                got: format!("{} entries", entries.len()),
            });
        }
        for (idx, &v) in entries.iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeWeight {
                    i: idx / k,
                    j: idx % k,
                    value: v,
                });
            }
        }
        let l1: f64 = entries.iter().sum();
        if l1 <= 0.0 {
            return Err(Error::InvalidProbability(
                "weight matrix must have positive total mass".to_string(),
            ));
        }
        Ok(Self { k, entries, l1 })
    }

    /// Diagonal weights, zero elsewhere.
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let k = diag.len();
        let mut entries = vec![0.0; k * k];
        for (i, &v) in diag.iter().enumerate() {
            entries[i * k + i] = v;
        }
        Self::new(k, entries)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    /// Total mass `|w|_1`.
    pub fn l1(&self) -> f64 {
        self.l1
    }

    /// Sum of row `i`.
    pub fn row_sum(&self, i: usize) -> f64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }
}

/// Assignment of each class to a group (e.g. head/tail pooling).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    assignment: Vec<usize>,
    n_groups: usize,
}

impl GroupPartition {
    /// `assignment[class] = group`. Group ids must cover `0..n_groups`
    /// with every group nonempty.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::InvalidPartition("no classes".to_string()));
        }
        let n_groups = assignment.iter().max().unwrap() + 1;
        let mut seen = vec![false; n_groups];
        for &g in &assignment {
            seen[g] = true;
        }
        if let Some(g) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!("group {} is empty", g)));
        }
        Ok(Self {
            assignment,
            n_groups,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.assignment[class]
    }

    /// Classes belonging to `group`, in ascending order.
    pub fn members(&self, group: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Pooled recall of a group: diagonal mass over total row mass of its classes.
pub fn group_recall(c: &ConfusionMatrix, g: &GroupPartition, group: usize) -> Result<f64> {
    let members = g.members(group);
    if members.is_empty() {
        return Err(Error::EmptyGroup { group });
    }
    let hit: f64 = members.iter().map(|&i| c.get(i, i)).sum();
    let mass: f64 = members.iter().map(|&i| c.row_sum(i)).sum();
    if mass <= 0.0 {
        return Err(Error::UndefinedRecall { class: members[0] });
    }
    Ok(hit / mass)
}

/// Pooled coverage of a group: sum of member coverages.
pub fn group_coverage(c: &ConfusionMatrix, g: &GroupPartition, group: usize) -> Result<f64> {
    let members = g.members(group);
    if members.is_empty() {
        return Err(Error::EmptyGroup { group });
    }
    Ok(members.iter().map(|&i| c.coverage(i)).sum())
}

/// Linear cost-sensitive objective `sum_ij G_ij C_ij`.
pub fn csl_objective(g: &GainMatrix, c: &ConfusionMatrix) -> Result<f64> {
    if g.k() != c.k() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", c.k(), c.k()),
            got: format!("{}x{}", g.k(), g.k()),
        });
    }
    let k = c.k();
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            sum += g.get(i, j) * c.get(i, j);
        }
    }
    Ok(sum)
}

/// Convert a gain matrix into the equivalent weight matrix `w_ij = G_ij pi_i`.
pub fn gain_to_weight(g: &GainMatrix, priors: &[f64]) -> Result<WeightMatrix> {
    let k = g.k();
    if priors.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} priors", k),
            got: format!("{}", priors.len()),
        });
    }
    for (i, &p) in priors.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroPrior { class: i, value: p });
        }
    }
    let mut entries = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            entries[i * k + j] = g.get(i, j) * priors[i];
        }
    }
    WeightMatrix::new(k, entries)
}

/// Weighted error read off a confusion matrix:
/// `sum_ij w_ij (1 - C_ij / pi_i)`.
pub fn weighted_error_from_confusion(
    w: &WeightMatrix,
    c: &ConfusionMatrix,
    priors: &[f64],
) -> Result<f64> {
    let k = c.k();
    if w.k() != k || priors.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} classes", k),
            got: format!("w {}x{}, {} priors", w.k(), w.k(), priors.len()),
        });
    }
    for (i, &p) in priors.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroPrior { class: i, value: p });
        }
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            sum += w.get(i, j) * (1.0 - c.get(i, j) / priors[i]);
        }
    }
    Ok(sum)
}
