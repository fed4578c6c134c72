//! Lagrangian training of the surrogate.
//!
//! Each epoch first evaluates the loss and the violations `σ^f, σ^p, σ^q`
//! of every sample at the current weights, then takes gradient steps on the
//! weights (one full-batch step, or one step per minibatch), and finally
//! raises every multiplier by `ρ·σ` using the violations measured at the
//! start of the epoch. Multipliers never decrease.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkCase;
use crate::pipeline::Sample;
use crate::powerflow::{self, Loads};
use crate::surrogate::{
    self, Activation, Batch, BaseLoss, LabelLayout, LossBreakdown, ModelConfig, MultiplierRows,
    SampleViolations, SurrogateError, SurrogateModel,
};

/// Totals above this count as divergence.
/// Multiplier stepsize. Costs are in $/h with marginal costs of 1e3 to 1e4
/// per p.u., and the multipliers have to reach that scale within a few
/// hundred epochs.
pub const DEFAULT_RHO: f64 = 100.0;

pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the training split is empty")]
    EmptyDataset,
    #[error("sample {0} has no label, which the MSE loss needs")]
    MissingLabel(usize),
    #[error("sample {index} has {actual} features, expected {expected}")]
    FeatureDimension {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: total loss {total}")]
    Diverged { epoch: usize, total: f64 },
    #[error("{what}: expected {expected} rows, found {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Powerflow(#[from] powerflow::PowerflowError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Generation cost of the predicted dispatch.
    #[default]
    Decision,
    /// Squared distance to the solver labels.
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Decision => "decision",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decision" => Ok(LossKind::Decision),
            "mse" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss '{other}' (expected decision or mse)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `W ← W − α∇L`.
    Sgd,
    /// Adam with β = (0.9, 0.999) and ε = 1e-8.
    #[default]
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!("unknown optimizer '{other}' (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    /// Label components the MSE loss compares.
    pub mse_layout: LabelLayout,
    /// Learning rate α.
    pub alpha: f64,
    /// Multiplier step ρ.
    pub rho: f64,
    pub epochs: usize,
    /// Samples per weight step; 0 means the full split.
    pub batch_size: usize,
    pub seed: u64,
    /// Starting value of every multiplier.
    pub multiplier_init: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub angle_box: (f64, f64),
    pub optimizer: Optimizer,
    /// Standardise each input feature with the split's mean and standard
    /// deviation before the first layer.
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            loss_kind: LossKind::Decision,
            mse_layout: LabelLayout::Full,
            alpha: 1e-3,
            rho: DEFAULT_RHO,
            epochs: 1000,
            batch_size: 0,
            seed: 0,
            multiplier_init: 0.0,
            hidden: model.hidden,
            activation: model.activation,
            angle_box: model.angle_box,
            optimizer: Optimizer::Adam,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden.clone(),
            activation: self.activation,
            angle_box: self.angle_box,
        }
    }

    pub fn base_loss(&self) -> BaseLoss {
        match self.loss_kind {
            LossKind::Decision => BaseLoss::Decision,
            LossKind::Mse => BaseLoss::Mse(self.mse_layout),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and ≥ 0, got {}", self.alpha));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad(format!("rho must be finite and ≥ 0, got {}", self.rho));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.multiplier_init.is_finite() && self.multiplier_init >= 0.0) {
            return bad(format!("multiplier_init must be finite and ≥ 0, got {}", self.multiplier_init));
        }
        Ok(())
    }
}

/// One epoch of history: the loss at the weights and multipliers the epoch
/// started from, and violation statistics over the split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective_term: f64,
    pub ineq_penalty: f64,
    pub eq_penalty_p: f64,
    pub eq_penalty_q: f64,
    pub total: f64,
    pub max_sigma_f: f64,
    pub max_sigma_p: f64,
    pub max_sigma_q: f64,
    pub mean_sigma_f: f64,
    pub mean_sigma_p: f64,
    pub mean_sigma_q: f64,
}

impl EpochRecord {
    pub fn loss(&self) -> LossBreakdown {
        LossBreakdown {
            objective_term: self.objective_term,
            ineq_penalty: self.ineq_penalty,
            eq_penalty_p: self.eq_penalty_p,
            eq_penalty_q: self.eq_penalty_q,
            total: self.total,
        }
    }
}

/// Per-sample multipliers (`lambda` per branch, `mu_p`/`mu_q` per bus) and
/// the epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub lambda: Vec<Vec<f64>>,
    pub mu_p: Vec<Vec<f64>>,
    pub mu_q: Vec<Vec<f64>>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(samples: usize, branches: usize, buses: usize, init: f64) -> Self {
        TrainState {
            lambda: vec![vec![init; branches]; samples],
            mu_p: vec![vec![init; buses]; samples],
            mu_q: vec![vec![init; buses]; samples],
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn multipliers(&self, sample: usize) -> MultiplierRows<'_> {
        MultiplierRows {
            lambda: &self.lambda[sample],
            mu_p: &self.mu_p[sample],
            mu_q: &self.mu_q[sample],
        }
    }
}

/// `λ += ρσ^f`, `μ^p += ρσ^p`, `μ^q += ρσ^q` for every sample.
pub fn update_multipliers(
    state: &mut TrainState,
    violations: &[SampleViolations],
    rho: f64,
) -> Result<(), TrainError> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(TrainError::Config(format!("rho must be finite and ≥ 0, got {rho}")));
    }
    if violations.len() != state.lambda.len() {
        return Err(TrainError::Shape {
            what: "violations",
            expected: state.lambda.len(),
            actual: violations.len(),
        });
    }
    for (n, v) in violations.iter().enumerate() {
        for (what, rows, sigma) in [
            ("sigma_f", &mut state.lambda[n], &v.sigma_f),
            ("sigma_p", &mut state.mu_p[n], &v.sigma_p),
            ("sigma_q", &mut state.mu_q[n], &v.sigma_q),
        ] {
            if rows.len() != sigma.len() {
                return Err(TrainError::Shape {
                    what,
                    expected: rows.len(),
                    actual: sigma.len(),
                });
            }
            for (m, s) in rows.iter_mut().zip(sigma) {
                *m += rho * s;
            }
        }
    }
    Ok(())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grad: &[f64], alpha: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (w, g)) in params.iter_mut().zip(grad).enumerate() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g;
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g * g;
            *w -= alpha * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn check_samples(case: &NetworkCase, samples: &[Sample], config: &TrainConfig) -> Result<(), TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = case.bus_count();
    for (index, s) in samples.iter().enumerate() {
        if s.features.len() != 2 * n {
            return Err(TrainError::FeatureDimension {
                index,
                expected: 2 * n,
                actual: s.features.len(),
            });
        }
        if config.loss_kind == LossKind::Mse && s.label.is_none() {
            return Err(TrainError::MissingLabel(index));
        }
    }
    Ok(())
}

/// Epoch-by-epoch driver; [`train`] runs it to completion.
pub struct Trainer<'a> {
    case: &'a NetworkCase,
    samples: &'a [Sample],
    config: TrainConfig,
    model: SurrogateModel,
    state: TrainState,
    rng: ChaCha8Rng,
    adam: Option<Adam>,
}

impl<'a> Trainer<'a> {
    /// Fresh model seeded from `config.seed`, with input standardisation
    /// fitted to `samples` when `config.normalize_inputs` is set.
    pub fn new(case: &'a NetworkCase, samples: &'a [Sample], config: TrainConfig) -> Result<Self, TrainError> {
        check_samples(case, samples, &config)?;
        let mut model = surrogate::init_model_with(case, &config.model_config(), config.seed)?;
        if config.normalize_inputs {
            let (shift, scale) = feature_statistics(samples);
            model.set_input_scaling(shift, scale)?;
        }
        Self::with_model(case, samples, config, model)
    }

    /// Continues from an existing model; its input scaling is kept as is.
    pub fn with_model(
        case: &'a NetworkCase,
        samples: &'a [Sample],
        config: TrainConfig,
        model: SurrogateModel,
    ) -> Result<Self, TrainError> {
        check_samples(case, samples, &config)?;
        let n = case.bus_count();
        let state = TrainState::new(samples.len(), case.branch_count(), n, config.multiplier_init);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let adam = (config.optimizer == Optimizer::Adam).then(|| Adam {
            m: vec![0.0; model.parameters().len()],
            v: vec![0.0; model.parameters().len()],
            t: 0,
        });
        Ok(Trainer {
            case,
            samples,
            config,
            model,
            state,
            rng,
            adam,
        })
    }

    pub fn model(&self) -> &SurrogateModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (SurrogateModel, TrainState) {
        (self.model, self.state)
    }

    fn batch(&self, indices: &[usize]) -> Batch<'_> {
        let labels = match self.config.loss_kind {
            LossKind::Mse => Some(
                indices
                    .iter()
                    .map(|&i| self.samples[i].label.as_deref().expect("checked at construction"))
                    .collect(),
            ),
            LossKind::Decision => None,
        };
        Batch {
            inputs: indices.iter().map(|&i| self.samples[i].features.as_slice()).collect(),
            labels,
            multipliers: indices.iter().map(|&i| self.state.multipliers(i)).collect(),
        }
    }

    fn apply(&mut self, grad: &[f64]) -> Result<(), TrainError> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged {
                epoch: self.state.epoch,
                total: f64::NAN,
            });
        }
        let alpha = self.config.alpha;
        let params = self.model.parameters_mut();
        match &mut self.adam {
            Some(adam) => adam.step(params, grad, alpha),
            None => params.iter_mut().zip(grad).for_each(|(w, g)| *w -= alpha * g),
        }
        Ok(())
    }

    /// Runs one epoch and returns its history entry.
    pub fn step_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let base = self.config.base_loss();
        let all: Vec<usize> = (0..self.samples.len()).collect();
        let full_batch = self.config.batch_size == 0 || self.config.batch_size >= all.len();

        let (loss, full_grad) = if full_batch {
            let (loss, grad) = surrogate::loss_and_grad(&self.model, &self.batch(&all), self.case, base)?;
            (loss, Some(grad))
        } else {
            (surrogate::lagrangian_loss(&self.model, &self.batch(&all), self.case, base)?, None)
        };
        let violations = sample_violations_all(self.case, &self.model, self.samples)?;
        let record = summarize(self.state.epoch, loss, &violations);
        if !record.total.is_finite() || record.total > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged {
                epoch: self.state.epoch,
                total: record.total,
            });
        }

        match full_grad {
            Some(grad) => self.apply(&grad)?,
            None => {
                let mut order = all;
                order.shuffle(&mut self.rng);
                for chunk in order.chunks(self.config.batch_size) {
                    let grad = surrogate::grad_weights(&self.model, &self.batch(chunk), self.case, base)?;
                    self.apply(&grad)?;
                }
            }
        }

        update_multipliers(&mut self.state, &violations, self.config.rho)?;
        self.state.epoch += 1;
        self.state.history.push(record);
        log::debug!(
            "epoch {}: total {:.6e} (objective {:.6e}), max σp {:.3e}, max σq {:.3e}, max σf {:.3e}",
            record.epoch,
            record.total,
            record.objective_term,
            record.max_sigma_p,
            record.max_sigma_q,
            record.max_sigma_f
        );
        Ok(record)
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    case: &NetworkCase,
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<(SurrogateModel, TrainState), TrainError> {
    let mut trainer = Trainer::new(case, samples, config.clone())?;
    for _ in 0..config.epochs {
        trainer.step_epoch()?;
    }
    Ok(trainer.into_parts())
}

/// Per-feature mean and standard deviation; constant features get scale 1.
pub fn feature_statistics(samples: &[Sample]) -> (Vec<f64>, Vec<f64>) {
    let d = samples[0].features.len();
    let count = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(&s.features) {
            *m += x / count;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(&s.features).zip(&mean) {
            *v += (x - m) * (x - m) / count;
        }
    }
    let scale = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| {
            let sd = v.sqrt();
            if sd > 1e-9 * m.abs().max(1.0) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn sample_violations_all(
    case: &NetworkCase,
    model: &SurrogateModel,
    samples: &[Sample],
) -> Result<Vec<SampleViolations>, TrainError> {
    samples
        .par_iter()
        .map(|s| {
            let decision = model.predict(&s.features)?;
            Ok(surrogate::sample_violations(case, &Loads::from_features(&s.features), &decision)?)
        })
        .collect()
}

fn summarize(epoch: usize, loss: LossBreakdown, violations: &[SampleViolations]) -> EpochRecord {
    let count = violations.len() as f64;
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let (mut mf, mut mp, mut mq) = (0.0f64, 0.0f64, 0.0f64);
    let (mut af, mut ap, mut aq) = (0.0, 0.0, 0.0);
    for v in violations {
        let (f, p, q) = (max(&v.sigma_f), max(&v.sigma_p), max(&v.sigma_q));
        mf = mf.max(f);
        mp = mp.max(p);
        mq = mq.max(q);
        af += f / count;
        ap += p / count;
        aq += q / count;
    }
    EpochRecord {
        epoch,
        objective_term: loss.objective_term,
        ineq_penalty: loss.ineq_penalty,
        eq_penalty_p: loss.eq_penalty_p,
        eq_penalty_q: loss.eq_penalty_q,
        total: loss.total,
        max_sigma_f: mf,
        max_sigma_p: mp,
        max_sigma_q: mq,
        mean_sigma_f: af,
        mean_sigma_p: ap,
        mean_sigma_q: aq,
    }
}

/// Writes the history as CSV with a header row.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    for record in history {
        w.serialize(record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Metrics of one prediction against its baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    /// Predicted cost minus baseline cost, $/h.
    pub regret: f64,
    pub max_sigma_f: f64,
    pub max_sigma_p: f64,
    pub max_sigma_q: f64,
    pub max_v_excess: f64,
    pub max_gen_excess: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub samples: usize,
    pub mean_regret: f64,
    pub max_regret: f64,
    pub mean_sigma_f: f64,
    pub max_sigma_f: f64,
    pub mean_sigma_p: f64,
    pub max_sigma_p: f64,
    pub mean_sigma_q: f64,
    pub max_sigma_q: f64,
    pub max_v_excess: f64,
    pub max_gen_excess: f64,
}

/// Regret and violations of the model's prediction for every sample;
/// `baselines[n]` is the solver cost for `inputs[n]`.
pub fn evaluate_samples(
    case: &NetworkCase,
    model: &SurrogateModel,
    inputs: &[&[f64]],
    baselines: &[f64],
) -> Result<Vec<SampleEvaluation>, TrainError> {
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if baselines.len() != inputs.len() {
        return Err(TrainError::Shape {
            what: "baselines",
            expected: inputs.len(),
            actual: baselines.len(),
        });
    }
    inputs
        .par_iter()
        .zip(baselines)
        .map(|(x, &base)| {
            let decision = model.predict(x)?;
            let report = powerflow::violation_report(case, &Loads::from_features(x), &decision, true)?;
            Ok(SampleEvaluation {
                regret: powerflow::generation_cost(case, &decision.p_g) - base,
                max_sigma_f: report.max_sigma_f(),
                max_sigma_p: report.max_sigma_p(),
                max_sigma_q: report.max_sigma_q(),
                max_v_excess: report.max_v_excess(),
                max_gen_excess: report.max_gen_excess(),
            })
        })
        .collect()
}

pub fn summarize_evaluations(rows: &[SampleEvaluation]) -> EvaluationSummary {
    let count = rows.len() as f64;
    let mean = |f: fn(&SampleEvaluation) -> f64| rows.iter().map(f).sum::<f64>() / count;
    let max = |f: fn(&SampleEvaluation) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    EvaluationSummary {
        samples: rows.len(),
        mean_regret: mean(|r| r.regret),
        max_regret: max(|r| r.regret),
        mean_sigma_f: mean(|r| r.max_sigma_f),
        max_sigma_f: max(|r| r.max_sigma_f),
        mean_sigma_p: mean(|r| r.max_sigma_p),
        max_sigma_p: max(|r| r.max_sigma_p),
        mean_sigma_q: mean(|r| r.max_sigma_q),
        max_sigma_q: max(|r| r.max_sigma_q),
        max_v_excess: max(|r| r.max_v_excess),
        max_gen_excess: max(|r| r.max_gen_excess),
    }
}

/// Aggregate regret and violation metrics of `model` over labelled samples,
/// using each sample's recorded objective as the baseline.
pub fn evaluate_epoch(
    case: &NetworkCase,
    model: &SurrogateModel,
    samples: &[Sample],
) -> Result<EvaluationSummary, TrainError> {
    let mut baselines = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        baselines.push(s.objective.ok_or(TrainError::MissingLabel(index))?);
    }
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    Ok(summarize_evaluations(&evaluate_samples(case, model, &inputs, &baselines)?))
}
