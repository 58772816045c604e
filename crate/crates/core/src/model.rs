//! Small feed-forward classifier with an explicit forward pass, analytic
//! gradients for the gain-driven losses, a classic SGD-with-momentum
//! optimizer, and a flat binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::losses::{LogitVector, ProbVector};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CSSTMDL1";

/// Feed-forward network with rectifier hidden layers and identity output.
///
/// `layer_sizes = [input, hidden..., output]`. Layer `l` maps activations of
/// size `layer_sizes[l]` to `layer_sizes[l + 1]`; weights are stored
/// row-major with one row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Per-parameter gradients in the same shape as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-activation values per layer, starting with the input itself.
    activations: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Output-layer logits.
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }
}

impl MlpModel {
    /// Seeded uniform initialization in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes {:?} must list at least input and output, all positive",
                layer_sizes
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let fan_in = layer_sizes[l];
            let fan_out = layer_sizes[l + 1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b: Vec<f64> = (0..fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(w);
            biases.push(b);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Build from explicit parameters.
    pub fn from_parameters(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2
            || weights.len() != layer_sizes.len() - 1
            || biases.len() != layer_sizes.len() - 1
        {
            return Err(Error::InvalidConfig("parameter shape mismatch".to_string()));
        }
        for l in 0..weights.len() {
            if weights[l].len() != layer_sizes[l] * layer_sizes[l + 1]
                || biases[l].len() != layer_sizes[l + 1]
            {
                return Err(Error::InvalidConfig(format!(
                    "layer {} parameter shape mismatch",
                    l
                )));
            }
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Forward pass returning all intermediate activations.
    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("input of size {}", self.input_dim()),
                got: format!("{}", x.len()),
            });
        }
        let mut activations = vec![x.to_vec()];
        let mut pre_activations = Vec::new();
        let mut current = x.to_vec();
        for l in 0..self.n_layers() {
            let n_in = self.layer_sizes[l];
            let n_out = self.layer_sizes[l + 1];
            let mut z = self.biases[l].clone();
            for o in 0..n_out {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(&current) {
                    acc += wi * xi;
                }
                z[o] += acc;
            }
            pre_activations.push(z.clone());
            if l + 1 < self.n_layers() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            activations.push(z.clone());
            current = z;
        }
        Ok(ForwardTrace {
            activations,
            pre_activations,
        })
    }

    /// Forward pass returning only the logits.
    pub fn forward(&self, x: &[f64]) -> Result<LogitVector> {
        let trace = self.forward_trace(x)?;
        LogitVector::new(trace.logits().to_vec())
    }

    /// Predicted class: argmax of the logits, ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let trace = self.forward_trace(x)?;
        let logits = trace.logits();
        let mut best = 0;
        for i in 1..logits.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Zero-filled gradient buffers matching this model's shape.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Backpropagate `d_logits` (the loss gradient at the output layer) for
    /// one sample, accumulating parameter gradients into `grads`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[f64], grads: &mut Gradients) {
        let n_layers = self.n_layers();
        let mut delta = d_logits.to_vec();
        for l in (0..n_layers).rev() {
            let n_in = self.layer_sizes[l];
            let n_out = self.layer_sizes[l + 1];
            let input = &trace.activations[l];
            for o in 0..n_out {
                let d = delta[o];
                grads.biases[l][o] += d;
                let row = &mut grads.weights[l][o * n_in..(o + 1) * n_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if l > 0 {
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                    for (n, wi) in next.iter_mut().zip(row) {
                        *n += d * wi;
                    }
                }
                // rectifier gate from the previous layer's pre-activation
                for (n, &z) in next.iter_mut().zip(&trace.pre_activations[l - 1]) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    /// Flattened view of all parameters (weights then biases per layer).
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    /// Number of parameters.
    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Read one parameter by flat index.
    pub fn get_parameter(&self, index: usize) -> f64 {
        let mut idx = index;
        for l in 0..self.n_layers() {
            if idx < self.weights[l].len() {
                return self.weights[l][idx];
            }
            idx -= self.weights[l].len();
            if idx < self.biases[l].len() {
                return self.biases[l][idx];
            }
            idx -= self.biases[l].len();
        }
        panic!("parameter index {} out of range", index);
    }

    /// Overwrite one parameter by flat index.
    pub fn set_parameter(&mut self, index: usize, value: f64) {
        let mut idx = index;
        for l in 0..self.n_layers() {
            if idx < self.weights[l].len() {
                self.weights[l][idx] = value;
                return;
            }
            idx -= self.weights[l].len();
            if idx < self.biases[l].len() {
                self.biases[l][idx] = value;
                return;
            }
            idx -= self.biases[l].len();
        }
        panic!("parameter index {} out of range", index);
    }

    /// Serialize to the flat binary checkpoint format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.layer_sizes {
            f.write_all(&(s as u32).to_le_bytes())?;
        }
        for l in 0..self.n_layers() {
            for &v in &self.weights[l] {
                f.write_all(&v.to_le_bytes())?;
            }
            for &v in &self.biases[l] {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a checkpoint previously written by [`MlpModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        read_exact(&mut f, &mut magic, &display)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::VersionMismatch {
                path: display,
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).to_string(),
            });
        }
        let n_sizes = read_u32(&mut f, &display)? as usize;
        if n_sizes < 2 || n_sizes > 64 {
            return Err(Error::MalformedFile {
                path: display,
                reason: format!("implausible layer count {}", n_sizes),
            });
        }
        let mut layer_sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = read_u32(&mut f, &display)? as usize;
            if s == 0 {
                return Err(Error::MalformedFile {
                    path: display,
                    reason: "zero layer size".to_string(),
                });
            }
            layer_sizes.push(s);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..n_sizes - 1 {
            let n_in = layer_sizes[l];
            let n_out = layer_sizes[l + 1];
            let mut w = Vec::with_capacity(n_in * n_out);
            for _ in 0..n_in * n_out {
                w.push(read_f64(&mut f, &display)?);
            }
            let mut b = Vec::with_capacity(n_out);
            for _ in 0..n_out {
                b.push(read_f64(&mut f, &display)?);
            }
            weights.push(w);
            biases.push(b);
        }
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(Error::MalformedFile {
                path: display,
                reason: "trailing bytes after parameters".to_string(),
            });
        }
        Self::from_parameters(layer_sizes, weights, biases)
    }
}

fn read_exact(f: &mut std::fs::File, buf: &mut [u8], path: &str) -> Result<()> {
    f.read_exact(buf).map_err(|_| Error::MalformedFile {
        path: path.to_string(),
        reason: "unexpected end of file".to_string(),
    })
}

fn read_u32(f: &mut std::fs::File, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(f, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(f: &mut std::fs::File, path: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(f, &mut buf, path)?;
    Ok(f64::from_le_bytes(buf))
}

/// Numerically stable softmax over logits.
pub fn softmax(z: &LogitVector) -> ProbVector {
    let values = z.values();
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbVector::new(exps.iter().map(|&e| e / total).collect())
        .expect("softmax output is a valid distribution")
}

/// SGD with momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity_weights: Vec<Vec<f64>>,
    velocity_biases: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &MlpModel, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                learning_rate
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must lie in [0, 1)",
                momentum
            )));
        }
        if weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight decay {} must be nonnegative",
                weight_decay
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity_weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            velocity_biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        })
    }
}

/// One optimizer step: `v <- m v + g + wd theta; theta <- theta - lr v`.
/// Weight decay applies to weights only, not biases.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, opt: &mut OptimizerState) {
    for l in 0..model.weights.len() {
        for (i, w) in model.weights[l].iter_mut().enumerate() {
            let g = grads.weights[l][i] + opt.weight_decay * *w;
            let v = opt.momentum * opt.velocity_weights[l][i] + g;
            opt.velocity_weights[l][i] = v;
            *w -= opt.learning_rate * v;
        }
        for (i, b) in model.biases[l].iter_mut().enumerate() {
            let v = opt.momentum * opt.velocity_biases[l][i] + grads.biases[l][i];
            opt.velocity_biases[l][i] = v;
            *b -= opt.learning_rate * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::GainMatrix;
    use crate::losses::{hybrid_loss, la_weighted_consistency_grad};
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    #[test]
    fn zero_parameters_give_uniform_softmax() {
        let model =
            MlpModel::from_parameters(vec![3, 2], vec![vec![0.0; 6]], vec![vec![0.0; 2]]).unwrap();
        let z = model.forward(&[0.4, -1.0, 2.0]).unwrap();
        let p = softmax(&z);
        assert_abs_diff_eq!(p.get(0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let model = MlpModel::from_parameters(
            vec![2, 2],
            vec![vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0]],
        )
        .unwrap();
        let z = model.forward(&[0.7, -0.3]).unwrap();
        assert_eq!(z.values(), &[0.7, -0.3]);
    }

    #[test]
    fn forward_matches_naive_matmul_oracle() {
        let model = MlpModel::new(&[4, 5, 3], 99).unwrap();
        let x = [0.3, -0.8, 1.2, 0.05];

        // Independent route: explicit triple loop over layers.
        let mut a: Vec<f64> = x.to_vec();
        for l in 0..2 {
            let (n_in, n_out) = (model.layer_sizes()[l], model.layer_sizes()[l + 1]);
            let mut z = vec![0.0; n_out];
            for o in 0..n_out {
                z[o] = model.biases()[l][o];
                for i in 0..n_in {
                    z[o] += model.weights()[l][o * n_in + i] * a[i];
                }
            }
            if l == 0 {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            a = z;
        }
        let got = model.forward(&x).unwrap();
        for (g, e) in got.values().iter().zip(&a) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = MlpModel::new(&[4, 3], 1).unwrap();
        assert!(model.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&LogitVector::new(vec![0.0, 0.0]).unwrap());
        assert_abs_diff_eq!(p.get(0), 0.5);

        let shifted = softmax(&LogitVector::new(vec![100.0, 100.0]).unwrap());
        assert_abs_diff_eq!(shifted.get(0), 0.5);

        let p = softmax(&LogitVector::new(vec![std::f64::consts::LN_2, 0.0]).unwrap());
        assert_abs_diff_eq!(p.get(0), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.get(1), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_output_gradient_means_zero_parameter_gradients() {
        let model = MlpModel::new(&[3, 4, 2], 7).unwrap();
        let trace = model.forward_trace(&[1.0, -2.0, 0.5]).unwrap();
        let mut grads = model.zero_gradients();
        model.backward(&trace, &[0.0, 0.0], &mut grads);
        assert!(grads.weights.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.biases.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_cross_entropy_gradient_closed_form() {
        // Single linear layer with identity gain: d l / d W = (p - y) x^T.
        let model = MlpModel::new(&[3, 2], 5).unwrap();
        let x = [0.2, -0.7, 1.1];
        let y = 1usize;
        let trace = model.forward_trace(&x).unwrap();
        let p = softmax(&LogitVector::new(trace.logits().to_vec()).unwrap());
        let d_logits: Vec<f64> = (0..2)
            .map(|i| p.get(i) - if i == y { 1.0 } else { 0.0 })
            .collect();
        let mut grads = model.zero_gradients();
        model.backward(&trace, &d_logits, &mut grads);
        for o in 0..2 {
            for i in 0..3 {
                assert_abs_diff_eq!(
                    grads.weights[0][o * 3 + i],
                    d_logits[o] * x[i],
                    epsilon = 1e-12
                );
            }
            assert_abs_diff_eq!(grads.biases[0][o], d_logits[o], epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        let g = GainMatrix::new(
            3,
            vec![1.2, 0.4, 0.0, 0.3, 2.0, 0.7, 0.0, 0.5, 0.9],
        )
        .unwrap();
        let model = MlpModel::new(&[4, 6, 3], 23).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = 2usize;

        let loss_of = |m: &MlpModel| -> f64 {
            let z = m.forward(&x).unwrap();
            hybrid_loss(y, &softmax(&z), &g).unwrap()
        };

        let trace = model.forward_trace(&x).unwrap();
        let z = LogitVector::new(trace.logits().to_vec()).unwrap();
        let d = g.factor_d().unwrap().to_vec();
        let target: Vec<f64> = g.m_row(y).unwrap().to_vec();
        let d_logits = la_weighted_consistency_grad(&target, &z, &d).unwrap();
        let mut grads = model.zero_gradients();
        model.backward(&trace, &d_logits, &mut grads);

        let h = 1e-6;
        for idx in (0..model.parameter_count()).step_by(7) {
            let mut plus = model.clone();
            plus.set_parameter(idx, plus.get_parameter(idx) + h);
            let mut minus = model.clone();
            minus.set_parameter(idx, minus.get_parameter(idx) - h);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);

            let flat_w_len: usize = 4 * 6;
            let analytic = if idx < flat_w_len {
                grads.weights[0][idx]
            } else if idx < flat_w_len + 6 {
                grads.biases[0][idx - flat_w_len]
            } else if idx < flat_w_len + 6 + 18 {
                grads.weights[1][idx - flat_w_len - 6]
            } else {
                grads.biases[1][idx - flat_w_len - 6 - 18]
            };
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "param {}: analytic {} vs fd {}",
                idx,
                analytic,
                fd
            );
        }
    }

    #[test]
    fn sgd_step_identities() {
        let mut model = MlpModel::new(&[2, 2], 3).unwrap();
        let before = model.clone();
        let grads = model.zero_gradients();
        let mut opt = OptimizerState::new(&model, 0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut model, &grads, &mut opt);
        assert_eq!(model, before);

        // Plain gradient step without momentum or decay.
        let mut grads = model.zero_gradients();
        grads.weights[0][0] = 2.0;
        sgd_step(&mut model, &grads, &mut opt);
        assert_abs_diff_eq!(
            model.weights()[0][0],
            before.weights()[0][0] - 0.1 * 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        let mut model = MlpModel::from_parameters(
            vec![1, 1],
            vec![vec![1.0]],
            vec![vec![0.0]],
        )
        .unwrap();
        let mut opt = OptimizerState::new(&model, 0.5, 0.9, 0.0).unwrap();
        let mut grads = model.zero_gradients();
        grads.weights[0][0] = 1.0;

        // Hand-unrolled: v1 = 1, theta1 = 1 - .5; v2 = .9 + 1, theta2 = theta1 - .5*1.9
        sgd_step(&mut model, &grads, &mut opt);
        assert_abs_diff_eq!(model.weights()[0][0], 0.5, epsilon = 1e-15);
        sgd_step(&mut model, &grads, &mut opt);
        assert_abs_diff_eq!(model.weights()[0][0], 0.5 - 0.5 * 1.9, epsilon = 1e-15);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut model = MlpModel::from_parameters(
            vec![1, 1],
            vec![vec![2.0]],
            vec![vec![3.0]],
        )
        .unwrap();
        let mut opt = OptimizerState::new(&model, 0.1, 0.0, 0.5).unwrap();
        let grads = model.zero_gradients();
        sgd_step(&mut model, &grads, &mut opt);
        assert_abs_diff_eq!(model.weights()[0][0], 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(model.biases()[0][0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn last_layer_scaling_preserves_argmax() {
        let model = MlpModel::new(&[3, 4, 3], 11).unwrap();
        let mut scaled = model.clone();
        let last = scaled.weights.len() - 1;
        for w in &mut scaled.weights[last] {
            *w *= 3.0;
        }
        for b in &mut scaled.biases[last] {
            *b *= 3.0;
        }
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(13);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z1 = model.forward(&x).unwrap();
            let z2 = scaled.forward(&x).unwrap();
            for (a, b) in z1.values().iter().zip(z2.values()) {
                assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-10);
            }
            assert_eq!(model.predict(&x).unwrap(), scaled.predict(&x).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = MlpModel::new(&[5, 8, 4], 321).unwrap();
        model.save(&path).unwrap();
        let loaded = MlpModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        let bytes_a = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = MlpModel::new(&[3, 2], 1).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            MlpModel::load(&path),
            Err(Error::MalformedFile { .. })
        ));

        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(
            MlpModel::load(&path),
            Err(Error::VersionMismatch { .. }) | Err(Error::MalformedFile { .. })
        ));
    }
}
