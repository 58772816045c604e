//! Training orchestration: pseudo-labeling, the combined supervised +
//! weighted-consistency objective with inner SGD steps, the two Lagrangian
//! outer loops (worst-case recall via exponentiated gradient, coverage via
//! projected gradient), and the plain supervised / vanilla self-training
//! baselines.

use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{strong_augment, weak_augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::gain::{
    coverage_gain, exp_gradient_update, min_recall_gain, proj_gradient_update, GainMatrix,
    LagrangeState,
};
use crate::losses::{
    kl_threshold_mask, la_weighted_consistency, la_weighted_consistency_grad, ProbVector,
};
use crate::metrics::{
    confusion_from_predictions, csl_objective, gain_to_weight, group_coverage, group_recall,
    weighted_error_from_confusion, GroupPartition,
};
use crate::model::{sgd_step, softmax, MlpModel, OptimizerState};

/// Floor applied to validation recalls before the exponentiated-gradient
/// update, so a zero estimate from a tiny split cannot freeze a multiplier.
pub const RECALL_FLOOR: f64 = 1e-6;

/// Which outer objective (or baseline) a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    MinRecall,
    Coverage,
    Erm,
    VanillaSelftrain,
}

impl Objective {
    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, Objective::Erm)
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Objective::MinRecall => "min-recall",
            Objective::Coverage => "coverage",
            Objective::Erm => "erm",
            Objective::VanillaSelftrain => "vanilla-selftrain",
        };
        write!(f, "{}", s)
    }
}

/// How a weak-augmentation distribution becomes a pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoMode {
    /// One-hot at the argmax; ties break to the lowest index.
    Hard,
    /// Power sharpening `p^(1/T)` renormalized.
    Sharpen { temperature: f64 },
}

/// Which rule selects unlabeled samples for the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// KL distance between the gain-adjusted target and the weak
    /// distribution must not exceed tau.
    Kl,
    /// Maximum weak confidence must reach `exp(-tau)`.
    Confidence,
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub tau: f64,
    pub lambda_u: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub omega: f64,
    pub inner_steps: usize,
    pub outer_rounds: usize,
    pub pseudo_mode: PseudoMode,
    pub threshold_mode: ThresholdMode,
    /// Per-class coverage target; `None` means `0.95 / K`.
    pub coverage_target: Option<f64>,
    pub hidden_sizes: Vec<usize>,
    pub val_fraction: f64,
    /// Augmentation scales; `None` derives them from the feature dimension.
    pub augment: Option<AugmentConfig>,
    /// Return the parameter average of the last this-many round-end models
    /// instead of the last iterate. The multiplier game makes the last
    /// iterate orbit the saddle point; averaging the primal tail damps the
    /// orbit. 1 keeps the plain last iterate.
    pub tail_average_rounds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MinRecall,
            tau: 0.05,
            lambda_u: 1.0,
            batch_labeled: 64,
            batch_unlabeled: 256,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            omega: 0.25,
            inner_steps: 32,
            outer_rounds: 30,
            pseudo_mode: PseudoMode::Hard,
            threshold_mode: ThresholdMode::Kl,
            coverage_target: None,
            hidden_sizes: vec![64],
            val_fraction: 0.2,
            augment: None,
            tail_average_rounds: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0 {
            return Err(Error::InvalidConfig(format!("tau {} must be >= 0", self.tau)));
        }
        if self.lambda_u < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda_u {} must be >= 0",
                self.lambda_u
            )));
        }
        if self.omega <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "omega {} must be positive",
                self.omega
            )));
        }
        if self.batch_labeled == 0 {
            return Err(Error::InvalidConfig("labeled batch size must be >= 1".into()));
        }
        if self.objective.uses_unlabeled() && self.lambda_u > 0.0 && self.batch_unlabeled == 0 {
            return Err(Error::InvalidConfig("unlabeled batch size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "validation fraction {} must lie in (0, 1)",
                self.val_fraction
            )));
        }
        if let PseudoMode::Sharpen { temperature } = self.pseudo_mode {
            if temperature <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "sharpening temperature {} must be positive",
                    temperature
                )));
            }
        }
        if let Some(t) = self.coverage_target {
            if t <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "coverage target {} must be positive",
                    t
                )));
            }
        }
        if self.tail_average_rounds == 0 {
            return Err(Error::InvalidConfig(
                "tail_average_rounds must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Resolved per-class coverage target for `k` classes.
    pub fn resolved_coverage_target(&self, k: usize) -> f64 {
        self.coverage_target.unwrap_or(0.95 / k as f64)
    }
}

/// Everything measurable from one confusion matrix, plus the objective
/// values under the gain matrix in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub per_class_recall: Vec<f64>,
    pub per_class_coverage: Vec<f64>,
    /// Coverage the classifier would have under uniform class priors:
    /// the column means of the row-normalized confusion matrix. This is the
    /// quantity the per-class coverage constraint refers to; raw coverage on
    /// a long-tailed sample conflates it with the priors.
    pub per_class_balanced_coverage: Vec<f64>,
    pub per_class_precision: Vec<Option<f64>>,
    pub mean_recall: f64,
    pub worst_case_recall: f64,
    pub min_coverage: f64,
    pub accuracy: f64,
    pub csl_value: f64,
    pub err_w: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_metrics: Option<Vec<GroupMetrics>>,
}

/// Pooled recall/coverage of one class group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub recall: f64,
    pub coverage: f64,
}

impl MetricsReport {
    /// Serialize as CSV with header `metric,class,value`; aggregate rows
    /// leave the class column empty.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("metric,class,value\n");
        for i in 0..self.k {
            out.push_str(&format!("recall,{},{}\n", i, self.per_class_recall[i]));
        }
        for i in 0..self.k {
            out.push_str(&format!("coverage,{},{}\n", i, self.per_class_coverage[i]));
        }
        for i in 0..self.k {
            if let Some(p) = self.per_class_precision[i] {
                out.push_str(&format!("precision,{},{}\n", i, p));
            }
        }
        out.push_str(&format!("mean_recall,,{}\n", self.mean_recall));
        out.push_str(&format!("worst_case_recall,,{}\n", self.worst_case_recall));
        out.push_str(&format!("min_coverage,,{}\n", self.min_coverage));
        out.push_str(&format!("accuracy,,{}\n", self.accuracy));
        out.push_str(&format!("csl_value,,{}\n", self.csl_value));
        out.push_str(&format!("err_w,,{}\n", self.err_w));
        out
    }
}

/// One trajectory row, recorded at the end of an outer round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Cumulative SGD steps taken when this row was recorded.
    pub step: usize,
    pub loss_sup: f64,
    pub loss_cons: f64,
    pub mask_rate: f64,
    pub worst_recall: f64,
    pub mean_recall: f64,
    pub min_coverage: f64,
    pub err_w: f64,
    pub lambda: Vec<f64>,
}

/// Per-round records of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub rounds: Vec<RoundRecord>,
}

impl Trajectory {
    pub fn to_csv_string(&self) -> String {
        let k = self.rounds.first().map_or(0, |r| r.lambda.len());
        let mut out = String::from(
            "round,step,loss_sup,loss_cons,mask_rate,worst_recall,mean_recall,min_coverage,err_w",
        );
        for i in 0..k {
            out.push_str(&format!(",lambda_{}", i));
        }
        out.push('\n');
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}",
                r.round,
                r.step,
                r.loss_sup,
                r.loss_cons,
                r.mask_rate,
                r.worst_recall,
                r.mean_recall,
                r.min_coverage,
                r.err_w
            ));
            for v in &r.lambda {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    /// Multiplier vectors per round.
    pub fn lambda_history(&self) -> Vec<Vec<f64>> {
        self.rounds.iter().map(|r| r.lambda.clone()).collect()
    }
}

/// A finished run: the trained model, the per-round trajectory, and the
/// final validation report.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MlpModel,
    pub trajectory: Trajectory,
    pub final_report: MetricsReport,
}

/// Turn a weak-augmentation distribution into a pseudo-label target.
pub fn pseudo_label(p_weak: &ProbVector, mode: PseudoMode) -> ProbVector {
    match mode {
        PseudoMode::Hard => {
            ProbVector::one_hot(p_weak.k(), p_weak.argmax()).expect("argmax is in range")
        }
        PseudoMode::Sharpen { temperature } => {
            let powered: Vec<f64> = p_weak
                .values()
                .iter()
                .map(|&p| if p > 0.0 { p.powf(1.0 / temperature) } else { 0.0 })
                .collect();
            let total: f64 = powered.iter().sum();
            ProbVector::new(powered.iter().map(|&v| v / total).collect())
                .expect("sharpened distribution stays on the simplex")
        }
    }
}

/// Stratified carve-out of a validation split from the labeled pool. Every
/// class keeps at least one sample on each side.
pub fn split_validation(
    labeled: &[(Vec<f64>, usize)],
    k: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (idx, (_, y)) in labeled.iter().enumerate() {
        by_class[*y].push(idx);
    }
    if let Some(class) = by_class.iter().position(|v| v.len() < 2) {
        return Err(Error::MissingValidationClass { class });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut val_idx = Vec::new();
    for indices in by_class.iter_mut() {
        indices.shuffle(&mut rng);
        let take = ((indices.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(indices.len() - 1);
        val_idx.extend_from_slice(&indices[..take]);
    }
    let mut in_val = vec![false; labeled.len()];
    for &i in &val_idx {
        in_val[i] = true;
    }
    let train: Vec<_> = labeled
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_val[*i])
        .map(|(_, s)| s.clone())
        .collect();
    let val: Vec<_> = labeled
        .iter()
        .enumerate()
        .filter(|(i, _)| in_val[*i])
        .map(|(_, s)| s.clone())
        .collect();
    Ok((train, val))
}

/// One forward pass per sample (no augmentation), then the full metric set.
///
/// `g` prices the linear objective; `priors` are the training priors that
/// convert it into a weight matrix. The conditional error terms are
/// normalized by the evaluation set's own class frequencies.
pub fn evaluate(
    model: &MlpModel,
    eval_set: &[(Vec<f64>, usize)],
    g: &GainMatrix,
    priors: &[f64],
) -> Result<MetricsReport> {
    if eval_set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let k = g.k();
    let mut labels = Vec::with_capacity(eval_set.len());
    let mut preds = Vec::with_capacity(eval_set.len());
    for (x, y) in eval_set {
        labels.push(*y);
        preds.push(model.predict(x)?);
    }
    let c = confusion_from_predictions(&labels, &preds, k)?;

    let mut per_class_recall = Vec::with_capacity(k);
    let mut per_class_coverage = Vec::with_capacity(k);
    let mut per_class_precision = Vec::with_capacity(k);
    for i in 0..k {
        per_class_recall.push(c.recall(i)?);
        per_class_coverage.push(c.coverage(i));
        per_class_precision.push(c.precision(i).ok());
    }
    let eval_rows: Vec<f64> = (0..k).map(|i| c.row_sum(i)).collect();
    let per_class_balanced_coverage: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| c.get(i, j) / eval_rows[i]).sum::<f64>() / k as f64)
        .collect();
    let w = gain_to_weight(g, priors)?;
    let err_w = weighted_error_from_confusion(&w, &c, &eval_rows)?;
    Ok(MetricsReport {
        k,
        mean_recall: c.mean_recall()?,
        worst_case_recall: c.worst_case_recall()?,
        min_coverage: c.min_coverage(),
        accuracy: c.accuracy(),
        csl_value: csl_objective(g, &c)?,
        err_w,
        per_class_recall,
        per_class_coverage,
        per_class_balanced_coverage,
        per_class_precision,
        group_metrics: None,
    })
}

/// Attach pooled group metrics to a report.
pub fn evaluate_with_groups(
    model: &MlpModel,
    eval_set: &[(Vec<f64>, usize)],
    g: &GainMatrix,
    priors: &[f64],
    partition: &GroupPartition,
) -> Result<MetricsReport> {
    let mut report = evaluate(model, eval_set, g, priors)?;
    let k = g.k();
    let mut labels = Vec::with_capacity(eval_set.len());
    let mut preds = Vec::with_capacity(eval_set.len());
    for (x, y) in eval_set {
        labels.push(*y);
        preds.push(model.predict(x)?);
    }
    let c = confusion_from_predictions(&labels, &preds, k)?;
    let mut groups = Vec::new();
    for group in 0..partition.n_groups() {
        groups.push(GroupMetrics {
            group,
            recall: group_recall(&c, partition, group)?,
            coverage: group_coverage(&c, partition, group)?,
        });
    }
    report.group_metrics = Some(groups);
    Ok(report)
}

/// Mean losses and the mask rate over one round of inner steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundStats {
    pub loss_sup: f64,
    pub loss_cons: f64,
    pub mask_rate: f64,
}

/// Run `cfg.inner_steps` SGD steps of the combined objective
/// `L_sup + lambda_u * L_cons` under the given gain matrix.
#[allow(clippy::too_many_arguments)]
pub fn train_round(
    model: &mut MlpModel,
    opt: &mut OptimizerState,
    labeled: &[(Vec<f64>, usize)],
    unlabeled: &[Vec<f64>],
    g: &GainMatrix,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    rng: &mut ChaCha20Rng,
) -> Result<RoundStats> {
    if labeled.is_empty() {
        return Err(Error::EmptyPool);
    }
    let use_unlabeled = cfg.objective.uses_unlabeled() && cfg.lambda_u > 0.0;
    if use_unlabeled && unlabeled.is_empty() {
        return Err(Error::EmptyPool);
    }
    let k = g.k();
    let d_diag = g.factor_d()?.to_vec();
    let cutoff = (-cfg.tau).exp();

    let mut sup_total = 0.0;
    let mut cons_total = 0.0;
    let mut selected_total = 0usize;
    let mut drawn_total = 0usize;

    for _ in 0..cfg.inner_steps {
        let mut grads = model.zero_gradients();
        let mut step_sup = 0.0;
        let mut step_cons = 0.0;

        let sup_scale = 1.0 / cfg.batch_labeled as f64;
        for _ in 0..cfg.batch_labeled {
            let (x, y) = &labeled[rng.random_range(0..labeled.len())];
            let xw = weak_augment(x, aug, rng);
            let trace = model.forward_trace(&xw)?;
            let z = crate::losses::LogitVector::new(trace.logits().to_vec())?;
            let target: Vec<f64> = g.m_row(*y)?.to_vec();
            step_sup += la_weighted_consistency(&target, &z, &d_diag)?;
            let mut d_logits = la_weighted_consistency_grad(&target, &z, &d_diag)?;
            for v in &mut d_logits {
                *v *= sup_scale;
            }
            model.backward(&trace, &d_logits, &mut grads);
        }
        step_sup *= sup_scale;

        if use_unlabeled {
            let cons_scale = cfg.lambda_u / cfg.batch_unlabeled as f64;
            for _ in 0..cfg.batch_unlabeled {
                let x = &unlabeled[rng.random_range(0..unlabeled.len())];
                let xw = weak_augment(x, aug, rng);
                let xs = strong_augment(x, aug, rng);
                drawn_total += 1;

                let p_weak = softmax(&model.forward(&xw)?);
                let pseudo = pseudo_label(&p_weak, cfg.pseudo_mode);
                let selected = match cfg.threshold_mode {
                    ThresholdMode::Kl => kl_threshold_mask(&pseudo, &p_weak, g, cfg.tau)?,
                    ThresholdMode::Confidence => p_weak.max_value() >= cutoff,
                };
                if !selected {
                    continue;
                }
                selected_total += 1;
                let trace = model.forward_trace(&xs)?;
                let z = crate::losses::LogitVector::new(trace.logits().to_vec())?;
                let target = g.m_transpose_apply(pseudo.values())?;
                step_cons += la_weighted_consistency(&target, &z, &d_diag)?;
                let mut d_logits = la_weighted_consistency_grad(&target, &z, &d_diag)?;
                for v in &mut d_logits {
                    *v *= cons_scale;
                }
                model.backward(&trace, &d_logits, &mut grads);
            }
            step_cons /= cfg.batch_unlabeled as f64;
        }

        sgd_step(model, &grads, opt);
        sup_total += step_sup;
        cons_total += step_cons;
        let _ = k;
    }

    let steps = cfg.inner_steps.max(1) as f64;
    Ok(RoundStats {
        loss_sup: sup_total / steps,
        loss_cons: cons_total / steps,
        mask_rate: if drawn_total == 0 {
            0.0
        } else {
            selected_total as f64 / drawn_total as f64
        },
    })
}

fn resolve_augment(cfg: &TrainConfig, dim: usize) -> Result<AugmentConfig> {
    match cfg.augment {
        Some(a) => Ok(a),
        None => AugmentConfig::for_radius(0.5 / (dim as f64).sqrt(), dim),
    }
}

/// Full training run for any objective. The validation split is carved from
/// the labeled pool (stratified), multipliers are updated from validation
/// metrics once per outer round, and the gain matrix is rebuilt before the
/// round's inner steps.
pub fn run_training(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let k = dataset.k();
    let dim = dataset.dim();
    let priors = dataset.priors_empirical.clone();
    for (i, &p) in priors.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroPrior { class: i, value: p });
        }
    }

    let mut seeder = ChaCha20Rng::seed_from_u64(cfg.seed);
    let model_seed: u64 = seeder.random();
    let split_seed: u64 = seeder.random();
    let train_seed: u64 = seeder.random();

    let (train_labeled, val) =
        split_validation(&dataset.labeled, k, cfg.val_fraction, split_seed)?;
    let aug = resolve_augment(cfg, dim)?;

    let mut layer_sizes = vec![dim];
    layer_sizes.extend_from_slice(&cfg.hidden_sizes);
    layer_sizes.push(k);
    let mut model = MlpModel::new(&layer_sizes, model_seed)?;
    let mut opt = OptimizerState::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut rng = ChaCha20Rng::seed_from_u64(train_seed);

    let coverage_target = cfg.resolved_coverage_target(k);
    let mut lagrange = match cfg.objective {
        Objective::MinRecall => LagrangeState::uniform_simplex(k, cfg.omega),
        Objective::Coverage => LagrangeState::zeros(k, cfg.omega),
        Objective::Erm | Objective::VanillaSelftrain => LagrangeState::zeros(k, cfg.omega),
    };

    let mut trajectory = Trajectory::default();
    let mut lambda_sum = vec![0.0f64; k];
    let mut lambda_rounds = 0usize;
    let mut steps_done = 0usize;
    let mut g = GainMatrix::identity(k);
    let mut final_report = None;
    let mut tail_models: std::collections::VecDeque<MlpModel> =
        std::collections::VecDeque::with_capacity(cfg.tail_average_rounds);

    for round in 0..cfg.outer_rounds {
        match cfg.objective {
            Objective::MinRecall => {
                let probe = evaluate(&model, &val, &g, &priors)?;
                let recalls: Vec<f64> = probe
                    .per_class_recall
                    .iter()
                    .map(|&r| r.max(RECALL_FLOOR))
                    .collect();
                lagrange = exp_gradient_update(&lagrange, &recalls, cfg.omega)?;
                for (s, l) in lambda_sum.iter_mut().zip(&lagrange.lambda) { *s += l; }
                lambda_rounds += 1;
                let avg: Vec<f64> = lambda_sum.iter().map(|s| s / lambda_rounds as f64).collect();
                g = min_recall_gain(&avg, &priors)?;
            }
            Objective::Coverage => {
                let probe = evaluate(&model, &val, &g, &priors)?;
                lagrange = proj_gradient_update(
                    &lagrange,
                    &probe.per_class_balanced_coverage,
                    cfg.omega,
                    coverage_target,
                )?;
                g = coverage_gain(&lagrange.lambda, &priors, k)?;
            }
            Objective::Erm | Objective::VanillaSelftrain => {
                g = GainMatrix::identity(k);
            }
        }

        let effective_cfg = match cfg.objective {
            // A vanilla self-training run always thresholds on confidence;
            // plain supervised training drops the unlabeled term entirely.
            Objective::VanillaSelftrain => TrainConfig {
                threshold_mode: ThresholdMode::Confidence,
                ..cfg.clone()
            },
            Objective::Erm => TrainConfig {
                lambda_u: 0.0,
                ..cfg.clone()
            },
            _ => cfg.clone(),
        };

        let stats = train_round(
            &mut model,
            &mut opt,
            &train_labeled,
            &dataset.unlabeled,
            &g,
            &effective_cfg,
            &aug,
            &mut rng,
        )?;
        steps_done += cfg.inner_steps;

        if cfg.tail_average_rounds > 1 {
            if tail_models.len() == cfg.tail_average_rounds {
                tail_models.pop_front();
            }
            tail_models.push_back(model.clone());
        }

        let report = evaluate(&model, &val, &g, &priors)?;
        trajectory.rounds.push(RoundRecord {
            round,
            step: steps_done,
            loss_sup: stats.loss_sup,
            loss_cons: stats.loss_cons,
            mask_rate: stats.mask_rate,
            worst_recall: report.worst_case_recall,
            mean_recall: report.mean_recall,
            min_coverage: report.min_coverage,
            err_w: report.err_w,
            lambda: lagrange.lambda.clone(),
        });
        final_report = Some(report);
    }

    if tail_models.len() > 1 {
        model = average_parameters(tail_models.make_contiguous());
        final_report = Some(evaluate(&model, &val, &g, &priors)?);
    }
    let final_report = match final_report {
        Some(r) => r,
        None => evaluate(&model, &val, &g, &priors)?,
    };
    Ok(TrainRun {
        model,
        trajectory,
        final_report,
    })
}

/// Coordinate-wise mean of the model parameters across snapshots.
fn average_parameters(snapshots: &[MlpModel]) -> MlpModel {
    let mut averaged = snapshots[0].clone();
    let count = snapshots.len() as f64;
    for idx in 0..averaged.parameter_count() {
        let sum: f64 = snapshots.iter().map(|m| m.get_parameter(idx)).sum();
        averaged.set_parameter(idx, sum / count);
    }
    averaged
}

/// Worst-case-recall run (exponentiated-gradient multipliers).
pub fn run_csst_min_recall(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.objective != Objective::MinRecall {
        return Err(Error::InvalidConfig(
            "objective must be min-recall".to_string(),
        ));
    }
    run_training(dataset, cfg)
}

/// Coverage-constrained mean-recall run (projected-gradient multipliers).
pub fn run_csst_coverage(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.objective != Objective::Coverage {
        return Err(Error::InvalidConfig("objective must be coverage".to_string()));
    }
    run_training(dataset, cfg)
}

/// Plain supervised or vanilla self-training baseline.
pub fn run_baseline(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if !matches!(cfg.objective, Objective::Erm | Objective::VanillaSelftrain) {
        return Err(Error::InvalidConfig(
            "objective must be erm or vanilla-selftrain".to_string(),
        ));
    }
    run_training(dataset, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{long_tail_priors, sample_mixture, split_semi, MixtureModel};
    use crate::gain::MultiplierRule;
    use approx::assert_abs_diff_eq;

    fn small_dataset(k: usize, dim: usize, n_labeled: usize, mu: f64, seed: u64) -> Dataset {
        let priors = long_tail_priors(k, 5.0).unwrap();
        let m = MixtureModel::with_default_means(k, dim, priors, 1.2).unwrap();
        let pool = sample_mixture(&m, n_labeled * 8 + 2000, seed);
        split_semi(&pool, k, mu, n_labeled, seed ^ 0x5eed, true, 5.0).unwrap()
    }

    #[test]
    fn pseudo_label_modes() {
        let p = ProbVector::new(vec![0.7, 0.3]).unwrap();
        let hard = pseudo_label(&p, PseudoMode::Hard);
        assert_eq!(hard.values(), &[1.0, 0.0]);

        let same = pseudo_label(&p, PseudoMode::Sharpen { temperature: 1.0 });
        assert_abs_diff_eq!(same.get(0), 0.7, epsilon = 1e-12);

        let sharp = pseudo_label(&p, PseudoMode::Sharpen { temperature: 0.01 });
        assert!(sharp.get(0) > 1.0 - 1e-9);

        // Ties break to the lowest index.
        let tie = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(pseudo_label(&tie, PseudoMode::Hard).values(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_inner_steps_leave_model_unchanged() {
        let ds = small_dataset(3, 6, 60, 2.0, 1);
        let cfg = TrainConfig {
            inner_steps: 0,
            outer_rounds: 1,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut model = MlpModel::new(&[6, 8, 3], 2).unwrap();
        let before = model.clone();
        let mut opt = OptimizerState::new(&model, 0.1, 0.9, 0.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let aug = resolve_augment(&cfg, 6).unwrap();
        let g = GainMatrix::identity(3);
        train_round(
            &mut model,
            &mut opt,
            &ds.labeled,
            &ds.unlabeled,
            &g,
            &cfg,
            &aug,
            &mut rng,
        )
        .unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn zero_unlabeled_weight_matches_supervised_only() {
        let ds = small_dataset(3, 6, 90, 2.0, 5);
        let base = TrainConfig {
            outer_rounds: 3,
            inner_steps: 8,
            batch_labeled: 16,
            batch_unlabeled: 32,
            seed: 11,
            ..TrainConfig::default()
        };
        let vanilla_off = TrainConfig {
            objective: Objective::VanillaSelftrain,
            lambda_u: 0.0,
            ..base.clone()
        };
        let erm = TrainConfig {
            objective: Objective::Erm,
            ..base
        };
        let run_a = run_training(&ds, &vanilla_off).unwrap();
        let run_b = run_training(&ds, &erm).unwrap();
        assert_eq!(run_a.model, run_b.model);
        assert_eq!(
            run_a.trajectory.to_csv_string(),
            run_b.trajectory.to_csv_string()
        );
    }

    #[test]
    fn single_step_matches_finite_difference_of_frozen_batch() {
        // One inner step on a one-sample labeled batch, unlabeled disabled:
        // the parameter update must equal -lr * (grad + wd * theta) with the
        // gradient validated by central differences of the batch loss.
        let dim = 4;
        let mut model = MlpModel::new(&[dim, 5, 2], 7).unwrap();
        let frozen = model.clone();
        let lr = 0.05;
        let wd = 0.01;
        let g = GainMatrix::new(2, vec![1.5, 0.2, 0.4, 0.8]).unwrap();
        let x = vec![0.3, -0.2, 0.9, 0.1];
        let y = 1usize;

        let loss_of = |m: &MlpModel| -> f64 {
            let z = m.forward(&x).unwrap();
            crate::losses::hybrid_loss(y, &softmax(&z), &g).unwrap()
        };

        let mut opt = OptimizerState::new(&model, lr, 0.0, wd).unwrap();
        let mut grads = model.zero_gradients();
        let trace = model.forward_trace(&x).unwrap();
        let z = crate::losses::LogitVector::new(trace.logits().to_vec()).unwrap();
        let d = g.factor_d().unwrap().to_vec();
        let target = g.m_row(y).unwrap().to_vec();
        let d_logits = la_weighted_consistency_grad(&target, &z, &d).unwrap();
        model.backward(&trace, &d_logits, &mut grads);
        sgd_step(&mut model, &grads, &mut opt);

        let h = 1e-6;
        for idx in (0..frozen.parameter_count()).step_by(5) {
            let mut plus = frozen.clone();
            plus.set_parameter(idx, plus.get_parameter(idx) + h);
            let mut minus = frozen.clone();
            minus.set_parameter(idx, minus.get_parameter(idx) - h);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let theta = frozen.get_parameter(idx);
            // biases carry no weight decay
            let n_w0 = dim * 5;
            let is_bias = (idx >= n_w0 && idx < n_w0 + 5) || idx >= n_w0 + 5 + 10;
            let decay = if is_bias { 0.0 } else { wd * theta };
            let expected = theta - lr * (fd + decay);
            assert_abs_diff_eq!(model.get_parameter(idx), expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn frozen_multipliers_when_omega_effectively_zero() {
        // With uniform recalls the exponentiated update is a fixed point, so
        // the multipliers stay uniform round after round.
        let state = LagrangeState::uniform_simplex(4, 0.25);
        let next = exp_gradient_update(&state, &[0.5; 4], 0.25).unwrap();
        for v in &next.lambda {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn persistent_zero_recall_grows_its_multiplier() {
        let mut state = LagrangeState::uniform_simplex(3, 0.25);
        let mut prev_ratio = 1.0;
        for _ in 0..15 {
            // class 0 never recalled, the others always
            state = exp_gradient_update(&state, &[0.0, 1.0, 1.0], 0.25).unwrap();
            let ratio = state.lambda[0] / state.lambda[1];
            assert!(ratio > prev_ratio);
            prev_ratio = ratio;
        }
        assert!(state.lambda[0] > 0.9);
    }

    #[test]
    fn coverage_multiplier_rises_for_starved_class() {
        let mut state = LagrangeState::zeros(3, 0.25);
        let target = 0.95 / 3.0;
        for _ in 0..5 {
            state =
                proj_gradient_update(&state, &[0.6, 0.35, 0.05], 0.25, target).unwrap();
        }
        assert_abs_diff_eq!(state.lambda[0], 0.0);
        assert!(state.lambda[2] > 0.0);
        assert_eq!(state.rule, MultiplierRule::ProjGradientNonneg);
    }

    #[test]
    fn erm_reaches_high_accuracy_on_separable_data() {
        let m = MixtureModel::with_default_means(3, 6, vec![1.0 / 3.0; 3], 3.0).unwrap();
        let pool = sample_mixture(&m, 1200, 2);
        let ds = split_semi(&pool, 3, 0.0, 300, 3, true, 1.0).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Erm,
            outer_rounds: 10,
            inner_steps: 16,
            batch_labeled: 32,
            lr: 0.1,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = run_training(&ds, &cfg).unwrap();
        let g = GainMatrix::identity(3);
        let report = evaluate(&run.model, &ds.labeled, &g, &ds.priors_empirical).unwrap();
        assert!(report.accuracy >= 0.99, "accuracy {}", report.accuracy);
    }

    #[test]
    fn evaluate_matches_metrics_recomputation() {
        let ds = small_dataset(3, 6, 120, 0.0, 9);
        let cfg = TrainConfig {
            objective: Objective::Erm,
            outer_rounds: 2,
            inner_steps: 4,
            seed: 13,
            ..TrainConfig::default()
        };
        let run = run_training(&ds, &cfg).unwrap();
        let g = GainMatrix::identity(3);
        let report = evaluate(&run.model, &ds.labeled, &g, &ds.priors_empirical).unwrap();

        let labels: Vec<usize> = ds.labeled.iter().map(|(_, y)| *y).collect();
        let preds: Vec<usize> = ds
            .labeled
            .iter()
            .map(|(x, _)| run.model.predict(x).unwrap())
            .collect();
        let c = confusion_from_predictions(&labels, &preds, 3).unwrap();
        assert_abs_diff_eq!(report.accuracy, c.accuracy(), epsilon = 1e-12);
        for i in 0..3 {
            assert_abs_diff_eq!(
                report.per_class_recall[i],
                c.recall(i).unwrap(),
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(report.per_class_coverage[i], c.coverage(i), epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            report.csl_value,
            csl_objective(&g, &c).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn constant_predictor_concentrates_coverage() {
        // Output layer biased so class 0 always wins.
        let dim = 4;
        let mut weights = vec![vec![0.0; dim * 2]];
        let biases = vec![vec![5.0, 0.0]];
        weights[0][0] = 0.0;
        let model = MlpModel::from_parameters(vec![dim, 2], weights, biases).unwrap();
        let m = MixtureModel::with_default_means(2, dim, vec![0.5, 0.5], 1.0).unwrap();
        let eval: Vec<(Vec<f64>, usize)> = sample_mixture(&m, 200, 3);
        let g = GainMatrix::identity(2);
        let report = evaluate(&model, &eval, &g, &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(report.per_class_coverage[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.per_class_coverage[1], 0.0, epsilon = 1e-12);
        assert_eq!(report.per_class_precision[1], None);
    }

    #[test]
    fn missing_validation_class_is_an_error() {
        let labeled: Vec<(Vec<f64>, usize)> =
            (0..10).map(|i| (vec![i as f64], 0usize)).collect();
        assert!(matches!(
            split_validation(&labeled, 2, 0.2, 1),
            Err(Error::MissingValidationClass { class: 1 })
        ));
    }

    #[test]
    fn validation_split_keeps_all_classes_on_both_sides() {
        let ds = small_dataset(4, 6, 120, 0.0, 21);
        let (train, val) = split_validation(&ds.labeled, 4, 0.2, 7).unwrap();
        for side in [&train, &val] {
            for class in 0..4 {
                assert!(side.iter().any(|(_, y)| *y == class));
            }
        }
        assert_eq!(train.len() + val.len(), ds.labeled.len());
    }

    #[test]
    fn training_loss_decreases_on_convex_surrogate() {
        // Linear model, fixed gain: averaged over seeds, a round of inner
        // steps does not increase the supervised training loss.
        let mut improved = 0;
        let seeds = [1u64, 2, 3, 4, 5];
        for &seed in &seeds {
            let ds = small_dataset(3, 6, 120, 0.0, seed);
            let cfg = TrainConfig {
                objective: Objective::Erm,
                outer_rounds: 1,
                inner_steps: 40,
                batch_labeled: 32,
                lr: 0.05,
                momentum: 0.0,
                weight_decay: 0.0,
                hidden_sizes: vec![],
                seed,
                ..TrainConfig::default()
            };
            let g = GainMatrix::identity(3);
            let mut model = MlpModel::new(&[6, 3], seed).unwrap();
            let batch_loss = |m: &MlpModel| -> f64 {
                let probs: Vec<ProbVector> = ds
                    .labeled
                    .iter()
                    .map(|(x, _)| softmax(&m.forward(x).unwrap()))
                    .collect();
                let labels: Vec<usize> = ds.labeled.iter().map(|(_, y)| *y).collect();
                crate::losses::batch_supervised_loss(&labels, &probs, &g).unwrap()
            };
            let before = batch_loss(&model);
            let mut opt = OptimizerState::new(&model, cfg.lr, 0.0, 0.0).unwrap();
            let aug = resolve_augment(&cfg, 6).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            train_round(
                &mut model,
                &mut opt,
                &ds.labeled,
                &ds.unlabeled,
                &g,
                &cfg,
                &aug,
                &mut rng,
            )
            .unwrap();
            if batch_loss(&model) <= before {
                improved += 1;
            }
        }
        assert!(improved >= 4, "loss decreased for only {} of 5 seeds", improved);
    }

    #[test]
    fn trajectories_are_reproducible_per_seed() {
        let ds = small_dataset(3, 6, 90, 2.0, 31);
        let cfg = TrainConfig {
            objective: Objective::MinRecall,
            outer_rounds: 3,
            inner_steps: 6,
            batch_labeled: 16,
            batch_unlabeled: 32,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = run_training(&ds, &cfg).unwrap();
        let b = run_training(&ds, &cfg).unwrap();
        assert_eq!(a.trajectory.to_csv_string(), b.trajectory.to_csv_string());
        assert_eq!(a.model, b.model);

        let other = TrainConfig { seed: 78, ..cfg };
        let c = run_training(&ds, &other).unwrap();
        assert_ne!(a.trajectory.to_csv_string(), c.trajectory.to_csv_string());
    }

    #[test]
    fn min_recall_multipliers_stay_on_simplex_and_coverage_stays_nonneg() {
        let ds = small_dataset(3, 6, 90, 2.0, 41);
        for objective in [Objective::MinRecall, Objective::Coverage] {
            let cfg = TrainConfig {
                objective,
                outer_rounds: 4,
                inner_steps: 4,
                batch_labeled: 16,
                batch_unlabeled: 32,
                seed: 51,
                ..TrainConfig::default()
            };
            let run = run_training(&ds, &cfg).unwrap();
            for row in &run.trajectory.rounds {
                match objective {
                    Objective::MinRecall => {
                        let sum: f64 = row.lambda.iter().sum();
                        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
                        assert!(row.lambda.iter().all(|&l| l >= 0.0));
                    }
                    _ => assert!(row.lambda.iter().all(|&l| l >= 0.0)),
                }
            }
        }
    }

    #[test]
    fn coverage_with_satisfied_constraints_reduces_to_mean_recall_gain() {
        // All validation coverages above target and lambda = 0: the gain is
        // exactly the diagonal mean-recall gain.
        let priors = vec![0.5, 0.5];
        let state = LagrangeState::zeros(2, 0.25);
        let next = proj_gradient_update(&state, &[0.5, 0.5], 0.25, 0.475).unwrap();
        assert_eq!(next.lambda, vec![0.0, 0.0]);
        let g = coverage_gain(&next.lambda, &priors, 2).unwrap();
        assert!(g.is_diagonal());
        assert_abs_diff_eq!(g.get(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn vanilla_confidence_threshold_counts_exactly() {
        // The confidence rule with tau = -ln 0.95 admits exactly the samples
        // whose max weak confidence reaches 0.95.
        let tau = -(0.95f64).ln();
        let cutoff = (-tau).exp();
        assert_abs_diff_eq!(cutoff, 0.95, epsilon = 1e-12);
        let probs = [
            ProbVector::new(vec![0.96, 0.04]).unwrap(),
            ProbVector::new(vec![0.94, 0.06]).unwrap(),
            ProbVector::new(vec![0.05, 0.95]).unwrap(),
        ];
        let admitted: Vec<bool> = probs.iter().map(|p| p.max_value() >= cutoff).collect();
        assert_eq!(admitted, vec![true, false, true]);
    }

    #[test]
    fn report_csv_shape() {
        let ds = small_dataset(3, 6, 90, 0.0, 61);
        let cfg = TrainConfig {
            objective: Objective::Erm,
            outer_rounds: 1,
            inner_steps: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = run_training(&ds, &cfg).unwrap();
        let csv = run.final_report.to_csv_string();
        assert!(csv.starts_with("metric,class,value\n"));
        assert!(csv.contains("worst_case_recall,,"));
        let traj = run.trajectory.to_csv_string();
        assert!(traj.starts_with(
            "round,step,loss_sup,loss_cons,mask_rate,worst_recall,mean_recall,min_coverage,err_w,lambda_0,lambda_1,lambda_2\n"
        ));
    }
}
