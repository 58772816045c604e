//! Synthetic long-tailed Gaussian-mixture data: prior profiles, seeded
//! sampling, labeled/unlabeled splitting, weak and strong augmentation
//! operators, and a binary on-disk dataset format.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"CSSTDS01";

/// Mixture of isotropic Gaussian class-conditionals with class priors.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    k: usize,
    dim: usize,
    means: Vec<Vec<f64>>,
    /// Shared per-coordinate variance.
    variance: f64,
    priors: Vec<f64>,
}

impl MixtureModel {
    pub fn new(means: Vec<Vec<f64>>, variance: f64, priors: Vec<f64>) -> Result<Self> {
        let k = means.len();
        if k < 2 {
            return Err(Error::InvalidConfig("need at least two classes".to_string()));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidConfig(
                "class means must share one dimension".to_string(),
            ));
        }
        if variance <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "variance {} must be positive",
                variance
            )));
        }
        validate_simplex(&priors, k)?;
        Ok(Self {
            k,
            dim,
            means,
            variance,
            priors,
        })
    }

    /// Class means on scaled coordinate axes with pairwise distance exactly
    /// `delta`; the per-coordinate variance defaults to `1/dim`. Requires
    /// `k <= dim`.
    pub fn with_default_means(k: usize, dim: usize, priors: Vec<f64>, delta: f64) -> Result<Self> {
        if k > dim {
            return Err(Error::InvalidConfig(format!(
                "{} classes need axis placement in at least {} dimensions",
                k, k
            )));
        }
        if delta <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "separation {} must be positive",
                delta
            )));
        }
        let scale = delta / std::f64::consts::SQRT_2;
        let means = (0..k)
            .map(|i| {
                let mut m = vec![0.0; dim];
                m[i] = scale;
                m
            })
            .collect();
        Self::new(means, 1.0 / dim as f64, priors)
    }

    /// Default mean separation `2 sqrt(ln d) / sqrt(d)`.
    pub fn default_separation(dim: usize) -> f64 {
        2.0 * (dim as f64).ln().sqrt() / (dim as f64).sqrt()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Log density of the class-`i` conditional at `x`, up to the shared
    /// normalizing constant (identical across classes).
    pub fn class_log_density_unnormalized(&self, class: usize, x: &[f64]) -> f64 {
        let mut sq = 0.0;
        for (xi, mi) in x.iter().zip(&self.means[class]) {
            let d = xi - mi;
            sq += d * d;
        }
        -sq / (2.0 * self.variance)
    }

    /// Density of the class-`i` conditional at `x`.
    pub fn class_density(&self, class: usize, x: &[f64]) -> f64 {
        let norm = (2.0 * std::f64::consts::PI * self.variance).powf(self.dim as f64 / 2.0);
        self.class_log_density_unnormalized(class, x).exp() / norm
    }
}

fn validate_simplex(priors: &[f64], k: usize) -> Result<()> {
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
    let sum: f64 = priors.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::OffSimplex { sum });
    }
    Ok(())
}

/// Exponential long-tail profile `pi_i ∝ rho^(-i / (K-1))`, so the
/// head-to-tail ratio is exactly `rho`.
pub fn long_tail_priors(k: usize, rho: f64) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidConfig("need at least two classes".to_string()));
    }
    if !(rho >= 1.0) {
        return Err(Error::InvalidImbalance { rho });
    }
    let raw: Vec<f64> = (0..k)
        .map(|i| rho.powf(-(i as f64) / (k as f64 - 1.0)))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|&v| v / total).collect())
}

/// Draw `n` labeled samples: labels from the prior, features from the
/// class conditional. Deterministic per seed.
pub fn sample_mixture(m: &MixtureModel, n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sigma = m.sigma();
    let mut cumulative = Vec::with_capacity(m.k);
    let mut acc = 0.0;
    for &p in &m.priors {
        acc += p;
        cumulative.push(acc);
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            let label = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(m.k - 1);
            let mean = &m.means[label];
            let features = (0..m.dim)
                .map(|j| mean[j] + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (features, label)
        })
        .collect()
}

/// Dataset generation and split metadata carried alongside the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub k: usize,
    pub dim: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub seed: u64,
    pub rho: f64,
    pub mu: f64,
}

/// Labeled and unlabeled pools with empirical labeled priors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<(Vec<f64>, usize)>,
    pub unlabeled: Vec<Vec<f64>>,
    pub priors_empirical: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    fn empirical_priors(labeled: &[(Vec<f64>, usize)], k: usize) -> Vec<f64> {
        let mut counts = vec![0usize; k];
        for (_, y) in labeled {
            counts[*y] += 1;
        }
        counts
            .iter()
            .map(|&c| c as f64 / labeled.len() as f64)
            .collect()
    }
}

/// Split a labeled pool into `n_labeled` labeled samples plus
/// `floor(mu * n_labeled)` label-stripped unlabeled samples, disjoint by
/// construction. The stratified variant keeps per-class labeled counts
/// proportional to the pool's class frequencies (never below two samples,
/// so later validation carving keeps every class).
pub fn split_semi(
    pool: &[(Vec<f64>, usize)],
    k: usize,
    mu: f64,
    n_labeled: usize,
    seed: u64,
    stratified: bool,
    rho: f64,
) -> Result<Dataset> {
    if mu < 0.0 {
        return Err(Error::InvalidConfig(format!("mu {} must be >= 0", mu)));
    }
    if n_labeled == 0 {
        return Err(Error::InvalidConfig("need at least one labeled sample".to_string()));
    }
    let n_unlabeled = (mu * n_labeled as f64).floor() as usize;
    let needed = n_labeled + n_unlabeled;
    if pool.len() < needed {
        return Err(Error::InsufficientPool {
            needed,
            available: pool.len(),
        });
    }
    let dim = pool[0].0.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);

    let labeled_idx: Vec<usize> = if stratified {
        let mut counts = vec![0usize; k];
        for (_, y) in pool {
            counts[*y] += 1;
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingValidationClass { class });
        }
        // Per-class targets proportional to pool frequency, floored at 2,
        // trimmed from the largest classes to restore the exact total.
        let mut targets: Vec<usize> = counts
            .iter()
            .map(|&c| {
                let share = (n_labeled as f64 * c as f64 / pool.len() as f64).round() as usize;
                share.max(2).min(c)
            })
            .collect();
        let mut total: usize = targets.iter().sum();
        while total != n_labeled {
            if total > n_labeled {
                let i = (0..k)
                    .filter(|&i| targets[i] > 2)
                    .max_by_key(|&i| targets[i])
                    .ok_or_else(|| Error::InvalidConfig(
                        "labeled budget too small for stratified split".to_string(),
                    ))?;
                targets[i] -= 1;
                total -= 1;
            } else {
                let i = (0..k)
                    .filter(|&i| targets[i] < counts[i])
                    .max_by_key(|&i| counts[i] - targets[i])
                    .ok_or(Error::InsufficientPool {
                        needed,
                        available: pool.len(),
                    })?;
                targets[i] += 1;
                total += 1;
            }
        }
        let mut chosen = Vec::with_capacity(n_labeled);
        let mut taken = vec![0usize; k];
        for &idx in &order {
            let y = pool[idx].1;
            if taken[y] < targets[y] {
                taken[y] += 1;
                chosen.push(idx);
            }
        }
        chosen
    } else {
        order[..n_labeled].to_vec()
    };

    let mut is_labeled = vec![false; pool.len()];
    for &i in &labeled_idx {
        is_labeled[i] = true;
    }
    let unlabeled_idx: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| !is_labeled[i])
        .take(n_unlabeled)
        .collect();

    let labeled: Vec<(Vec<f64>, usize)> = labeled_idx
        .iter()
        .map(|&i| pool[i].clone())
        .collect();
    let unlabeled: Vec<Vec<f64>> = unlabeled_idx.iter().map(|&i| pool[i].0.clone()).collect();
    let priors_empirical = Dataset::empirical_priors(&labeled, k);
    Ok(Dataset {
        priors_empirical,
        meta: DatasetMeta {
            k,
            dim,
            n_labeled: labeled.len(),
            n_unlabeled: unlabeled.len(),
            seed,
            rho,
            mu,
        },
        labeled,
        unlabeled,
    })
}

/// Augmentation noise scales and the perturbation radius they stand in for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_mask_prob: f64,
    pub radius: f64,
}

impl AugmentConfig {
    pub fn new(weak_sigma: f64, strong_sigma: f64, strong_mask_prob: f64, radius: f64) -> Result<Self> {
        if weak_sigma < 0.0 || strong_sigma < weak_sigma {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= weak sigma ({}) <= strong sigma ({})",
                weak_sigma, strong_sigma
            )));
        }
        if !(0.0..1.0).contains(&strong_mask_prob) {
            return Err(Error::InvalidConfig(format!(
                "mask probability {} must lie in [0, 1)",
                strong_mask_prob
            )));
        }
        if radius <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "radius {} must be positive",
                radius
            )));
        }
        Ok(Self {
            weak_sigma,
            strong_sigma,
            strong_mask_prob,
            radius,
        })
    }

    /// Weak noise calibrated so a typical perturbation stays inside the
    /// radius-`r` ball: `sigma_w = r / sqrt(d)`.
    pub fn for_radius(radius: f64, dim: usize) -> Result<Self> {
        let weak = radius / (dim as f64).sqrt();
        Self::new(weak, 2.0 * weak, 0.1, radius)
    }
}

/// Additive Gaussian noise at the weak scale.
pub fn weak_augment(x: &[f64], cfg: &AugmentConfig, rng: &mut ChaCha20Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| v + cfg.weak_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Coordinate dropout followed by additive Gaussian noise at the strong scale.
pub fn strong_augment(x: &[f64], cfg: &AugmentConfig, rng: &mut ChaCha20Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let kept = if cfg.strong_mask_prob > 0.0 {
                let u: f64 = rng.random_range(0.0..1.0);
                if u < cfg.strong_mask_prob {
                    0.0
                } else {
                    v
                }
            } else {
                v
            };
            kept + cfg.strong_sigma * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Write the binary dataset format.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(DATASET_MAGIC)?;
    f.write_all(&(ds.meta.k as u64).to_le_bytes())?;
    f.write_all(&(ds.meta.dim as u64).to_le_bytes())?;
    f.write_all(&(ds.labeled.len() as u64).to_le_bytes())?;
    f.write_all(&(ds.unlabeled.len() as u64).to_le_bytes())?;
    f.write_all(&ds.meta.seed.to_le_bytes())?;
    f.write_all(&ds.meta.rho.to_le_bytes())?;
    f.write_all(&ds.meta.mu.to_le_bytes())?;
    for (x, _) in &ds.labeled {
        for &v in x {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    for (_, y) in &ds.labeled {
        f.write_all(&(*y as u32).to_le_bytes())?;
    }
    for x in &ds.unlabeled {
        for &v in x {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a dataset previously written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| Error::MalformedFile {
        path: display.clone(),
        reason: "file shorter than header".to_string(),
    })?;
    if &magic != DATASET_MAGIC {
        return Err(Error::VersionMismatch {
            path: display,
            expected: String::from_utf8_lossy(DATASET_MAGIC).to_string(),
        });
    }
    let k = read_u64(&mut f, &display)? as usize;
    let dim = read_u64(&mut f, &display)? as usize;
    let n_labeled = read_u64(&mut f, &display)? as usize;
    let n_unlabeled = read_u64(&mut f, &display)? as usize;
    let seed = read_u64(&mut f, &display)?;
    let rho = read_f64(&mut f, &display)?;
    let mu = read_f64(&mut f, &display)?;
    if k == 0 || dim == 0 || n_labeled == 0 {
        return Err(Error::MalformedFile {
            path: display,
            reason: format!("implausible header (k={}, d={}, n={})", k, dim, n_labeled),
        });
    }

    let mut features = Vec::with_capacity(n_labeled);
    for _ in 0..n_labeled {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(read_f64(&mut f, &display)?);
        }
        features.push(row);
    }
    let mut labels = Vec::with_capacity(n_labeled);
    for _ in 0..n_labeled {
        let y = read_u32(&mut f, &display)? as usize;
        if y >= k {
            return Err(Error::MalformedFile {
                path: display,
                reason: format!("label {} out of range for {} classes", y, k),
            });
        }
        labels.push(y);
    }
    let mut unlabeled = Vec::with_capacity(n_unlabeled);
    for _ in 0..n_unlabeled {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(read_f64(&mut f, &display)?);
        }
        unlabeled.push(row);
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::MalformedFile {
            path: display,
            reason: "trailing bytes after samples".to_string(),
        });
    }

    let labeled: Vec<(Vec<f64>, usize)> = features.into_iter().zip(labels).collect();
    let priors_empirical = Dataset::empirical_priors(&labeled, k);
    Ok(Dataset {
        priors_empirical,
        meta: DatasetMeta {
            k,
            dim,
            n_labeled,
            n_unlabeled,
            seed,
            rho,
            mu,
        },
        labeled,
        unlabeled,
    })
}

/// CSV export with header `label,f0,f1,...` (unlabeled rows have an empty
/// label field).
pub fn export_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..ds.dim() {
        out.push_str(&format!(",f{}", j));
    }
    out.push('\n');
    for (x, y) in &ds.labeled {
        out.push_str(&y.to_string());
        for v in x {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    for x in &ds.unlabeled {
        for v in x {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn read_u64(f: &mut std::fs::File, path: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    f.read_exact(&mut buf).map_err(|_| Error::MalformedFile {
        path: path.to_string(),
        reason: "unexpected end of file".to_string(),
    })?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(f: &mut std::fs::File, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf).map_err(|_| Error::MalformedFile {
        path: path.to_string(),
        reason: "unexpected end of file".to_string(),
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(f: &mut std::fs::File, path: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    f.read_exact(&mut buf).map_err(|_| Error::MalformedFile {
        path: path.to_string(),
        reason: "unexpected end of file".to_string(),
    })?;
    Ok(f64::from_le_bytes(buf))
}
