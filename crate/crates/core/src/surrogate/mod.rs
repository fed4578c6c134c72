//! Neural surrogate of the OPF map `loads → (p_g, q_g, V, θ)`.
//!
//! A fully connected trunk feeds four sigmoid heads. Each head is mapped
//! affinely onto its bound box, so generation and voltage limits hold for any
//! weights. A physics layer then evaluates flows and balance residuals of the
//! prediction, which the Lagrangian loss prices with per-sample multipliers.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as
//! its row-major weight matrix (`out × in`) followed by its bias.

mod io;

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkCase;
use crate::powerflow::{self, BranchFlows, DispatchDecision, Loads, PowerflowError};

pub use io::{deserialize, serialize, FORMAT_VERSION, MAGIC};

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("at least one hidden layer is required")]
    NoHiddenLayers,
    #[error("hidden layer {0} has zero width")]
    ZeroWidth(usize),
    #[error("angle box [{0}, {1}] is empty or not finite")]
    AngleBox(f64, f64),
    #[error("input has length {actual}, expected {expected}")]
    InputDimension { expected: usize, actual: usize },
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("label {index} has length {actual}, expected {expected}")]
    LabelDimension {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("labels are required for the MSE loss")]
    MissingLabels,
    #[error("{what} has {actual} rows for a batch of {expected}")]
    BatchRows {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("multiplier row {index}: {what} has length {actual}, expected {expected}")]
    MultiplierDimension {
        index: usize,
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("model was built for {model_buses} buses, case has {case_buses}")]
    CaseMismatch {
        model_buses: usize,
        case_buses: usize,
    },
    #[error("parameter vector has length {actual}, expected {expected}")]
    ParameterCount { expected: usize, actual: usize },
    #[error("model file, line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("model file is version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("model file was written for case {found}, not {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("model file ends early: {0}")]
    Truncated(String),
    #[error(transparent)]
    Powerflow(#[from] PowerflowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation '{other}' (expected relu or tanh)")),
        }
    }
}

/// Which part of the stacked decision the MSE loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLayout {
    /// `(p_g, q_g, V, θ)`, length 4N.
    #[default]
    Full,
    /// `(p_g, q_g)` only, length 2N.
    Generation,
}

impl fmt::Display for LabelLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelLayout::Full => "full",
            LabelLayout::Generation => "generation",
        })
    }
}

impl FromStr for LabelLayout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(LabelLayout::Full),
            "generation" => Ok(LabelLayout::Generation),
            other => Err(format!("unknown label layout '{other}' (expected full or generation)")),
        }
    }
}

impl LabelLayout {
    pub fn compared_len(self, bus_count: usize) -> usize {
        match self {
            LabelLayout::Full => 4 * bus_count,
            LabelLayout::Generation => 2 * bus_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseLoss {
    /// Mean generation cost of the predicted dispatch.
    Decision,
    /// Mean squared distance to the labels.
    Mse(LabelLayout),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Scaling box for every angle head, radians.
    pub angle_box: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![60, 60, 60],
            activation: Activation::Relu,
            angle_box: (-FRAC_PI_2, FRAC_PI_2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
    angle_box: (f64, f64),
    lower: Vec<f64>,
    upper: Vec<f64>,
    slack: Option<usize>,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    case_digest: String,
}

/// Per-sample multipliers handed to the Lagrangian loss: one `lambda` entry
/// per branch and one `mu_p`, `mu_q` entry per bus.
#[derive(Debug, Clone, Copy)]
pub struct MultiplierRows<'a> {
    pub lambda: &'a [f64],
    pub mu_p: &'a [f64],
    pub mu_q: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    /// Load features `(p_d, q_d)` in p.u.
    pub inputs: Vec<&'a [f64]>,
    /// Stacked labels `(p_g, q_g, V, θ)`, needed only by the MSE loss.
    pub labels: Option<Vec<&'a [f64]>>,
    pub multipliers: Vec<MultiplierRows<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Base loss: mean cost ($/h) or mean squared error.
    pub objective_term: f64,
    pub ineq_penalty: f64,
    pub eq_penalty_p: f64,
    pub eq_penalty_q: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.objective_term += other.objective_term;
        self.ineq_penalty += other.ineq_penalty;
        self.eq_penalty_p += other.eq_penalty_p;
        self.eq_penalty_q += other.eq_penalty_q;
    }

    fn finish(mut self) -> Self {
        self.total = self.objective_term + self.ineq_penalty + self.eq_penalty_p + self.eq_penalty_q;
        self
    }
}

/// Violations of one prediction against the loads it was made for.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleViolations {
    pub sigma_f: Vec<f64>,
    pub sigma_p: Vec<f64>,
    pub sigma_q: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Model with `hidden_dims` rectifier layers and ±π/2 angle heads.
pub fn init_model(
    case: &NetworkCase,
    hidden_dims: &[usize],
    seed: u64,
) -> Result<SurrogateModel, SurrogateError> {
    let config = ModelConfig {
        hidden: hidden_dims.to_vec(),
        ..ModelConfig::default()
    };
    init_model_with(case, &config, seed)
}

/// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`, zero biases.
pub fn init_model_with(
    case: &NetworkCase,
    config: &ModelConfig,
    seed: u64,
) -> Result<SurrogateModel, SurrogateError> {
    if config.hidden.is_empty() {
        return Err(SurrogateError::NoHiddenLayers);
    }
    if let Some(i) = config.hidden.iter().position(|&w| w == 0) {
        return Err(SurrogateError::ZeroWidth(i));
    }
    let n = case.bus_count();
    let mut layer_dims = vec![2 * n];
    layer_dims.extend(&config.hidden);
    layer_dims.push(4 * n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(&layer_dims));
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)));
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }

    let mut model = SurrogateModel {
        layer_dims,
        params,
        activation: config.activation,
        angle_box: (0.0, 0.0),
        lower: Vec::new(),
        upper: Vec::new(),
        slack: case.slack_index(),
        input_shift: vec![0.0; 2 * n],
        input_scale: vec![1.0; 2 * n],
        case_digest: case.digest(),
    };
    model.set_bounds(case, config.angle_box)?;
    Ok(model)
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl SurrogateModel {
    fn set_bounds(&mut self, case: &NetworkCase, angle_box: (f64, f64)) -> Result<(), SurrogateError> {
        let (lo, hi) = angle_box;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(SurrogateError::AngleBox(lo, hi));
        }
        let t = case.tables();
        let n = case.bus_count();
        self.lower = t.p_min.iter().chain(&t.q_min).chain(&t.v_min).copied().collect();
        self.upper = t.p_max.iter().chain(&t.q_max).chain(&t.v_max).copied().collect();
        self.lower.extend(std::iter::repeat_n(lo, n));
        self.upper.extend(std::iter::repeat_n(hi, n));
        self.angle_box = angle_box;
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn bus_count(&self) -> usize {
        self.layer_dims[0] / 2
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn angle_box(&self) -> (f64, f64) {
        self.angle_box
    }

    pub fn case_digest(&self) -> &str {
        &self.case_digest
    }

    /// Stacked `(min, max)` tables for the `(p_g, q_g, V, θ)` heads.
    pub fn bound_tables(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<(), SurrogateError> {
        if params.len() != self.params.len() {
            return Err(SurrogateError::ParameterCount {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Fixed input standardisation `(x − shift) / scale` applied before the
    /// first layer. Not trained.
    pub fn input_scaling(&self) -> (&[f64], &[f64]) {
        (&self.input_shift, &self.input_scale)
    }

    pub fn set_input_scaling(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<(), SurrogateError> {
        let d = self.layer_dims[0];
        for v in [&shift, &scale] {
            if v.len() != d {
                return Err(SurrogateError::InputDimension {
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        if shift.iter().chain(&scale).any(|x| !x.is_finite()) || scale.iter().any(|&s| s <= 0.0) {
            return Err(SurrogateError::NonFiniteInput);
        }
        self.input_shift = shift;
        self.input_scale = scale;
        Ok(())
    }

    /// Offsets of each layer's (weights, bias) blocks in the parameter vector.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::with_capacity(self.layer_dims.len() - 1);
        let mut at = 0;
        for w in self.layer_dims.windows(2) {
            offsets.push((at, at + w[0] * w[1]));
            at += w[0] * w[1] + w[1];
        }
        offsets
    }

    fn check_input(&self, x: &[f64]) -> Result<(), SurrogateError> {
        if x.len() != self.layer_dims[0] {
            return Err(SurrogateError::InputDimension {
                expected: self.layer_dims[0],
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFiniteInput);
        }
        Ok(())
    }

    fn check_case(&self, case: &NetworkCase) -> Result<(), SurrogateError> {
        if case.bus_count() != self.bus_count() {
            return Err(SurrogateError::CaseMismatch {
                model_buses: self.bus_count(),
                case_buses: case.bus_count(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping every layer's activations; the last entry holds
    /// the sigmoid head values.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layer_dims.len());
        acts.push(
            x.iter()
                .zip(&self.input_shift)
                .zip(&self.input_scale)
                .map(|((v, s), c)| (v - s) / c)
                .collect::<Vec<f64>>(),
        );
        let last = self.layer_dims.len() - 2;
        for (l, (w_at, b_at)) in self.layer_offsets().into_iter().enumerate() {
            let (d_in, d_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let input = &acts[l];
            let out: Vec<f64> = (0..d_out)
                .map(|r| {
                    let row = &self.params[w_at + r * d_in..w_at + (r + 1) * d_in];
                    let z = self.params[b_at + r]
                        + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                    if l == last {
                        sigmoid(z)
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    fn scale_heads(&self, heads: &[f64]) -> Vec<f64> {
        let n = self.bus_count();
        let mut out: Vec<f64> = heads
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(y, (lo, hi))| (y * (hi - lo) + lo).clamp(*lo, *hi))
            .collect();
        if let Some(s) = self.slack {
            out[3 * n + s] = 0.0;
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> Result<DispatchDecision, SurrogateError> {
        self.check_input(x)?;
        let acts = self.forward(x);
        Ok(DispatchDecision::from_slice(&self.scale_heads(acts.last().expect("output layer"))))
    }

    /// Backpropagates `d_out`, the loss gradient w.r.t. the scaled outputs,
    /// adding into `grad`.
    fn backward(&self, acts: &[Vec<f64>], d_out: &[f64], grad: &mut [f64]) {
        let n = self.bus_count();
        let heads = acts.last().expect("output layer");
        let mut delta: Vec<f64> = (0..4 * n)
            .map(|k| d_out[k] * (self.upper[k] - self.lower[k]) * heads[k] * (1.0 - heads[k]))
            .collect();
        if let Some(s) = self.slack {
            delta[3 * n + s] = 0.0;
        }
        let offsets = self.layer_offsets();
        for l in (0..offsets.len()).rev() {
            let (w_at, b_at) = offsets[l];
            let d_in = self.layer_dims[l];
            let input = &acts[l];
            for (r, &dr) in delta.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                grad[b_at + r] += dr;
                let row = &mut grad[w_at + r * d_in..w_at + (r + 1) * d_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += dr * a;
                }
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; d_in];
            for (r, &dr) in delta.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                let row = &self.params[w_at + r * d_in..w_at + (r + 1) * d_in];
                for (nx, w) in next.iter_mut().zip(row) {
                    *nx += dr * w;
                }
            }
            for (nx, a) in next.iter_mut().zip(input) {
                *nx *= self.activation.derivative(*a);
            }
            delta = next;
        }
    }
}

/// Squared distance between a prediction and a stacked label over `layout`.
pub fn decision_sq_error(prediction: &DispatchDecision, label: &[f64], layout: LabelLayout) -> f64 {
    let m = layout.compared_len(prediction.bus_count());
    prediction
        .to_vec()
        .iter()
        .zip(label)
        .take(m)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn check_labels(model: &SurrogateModel, labels: &[&[f64]], expected_rows: usize) -> Result<(), SurrogateError> {
    if labels.len() != expected_rows {
        return Err(SurrogateError::BatchRows {
            what: "labels",
            expected: expected_rows,
            actual: labels.len(),
        });
    }
    let expected = 4 * model.bus_count();
    for (index, y) in labels.iter().enumerate() {
        if y.len() != expected {
            return Err(SurrogateError::LabelDimension {
                index,
                expected,
                actual: y.len(),
            });
        }
    }
    Ok(())
}

/// `(1/|D|) Σ_n ‖y*_n − π(x_n)‖²`.
pub fn loss_mse(
    model: &SurrogateModel,
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
    layout: LabelLayout,
) -> Result<f64, SurrogateError> {
    if inputs.is_empty() {
        return Err(SurrogateError::EmptyBatch);
    }
    let label_refs: Vec<&[f64]> = labels.iter().map(Vec::as_slice).collect();
    check_labels(model, &label_refs, inputs.len())?;
    let mut sum = 0.0;
    for (x, y) in inputs.iter().zip(labels) {
        sum += decision_sq_error(&model.predict(x)?, y, layout);
    }
    Ok(sum / inputs.len() as f64)
}

/// `(1/|D|) Σ_n Cost(p̂_g(x_n))`.
pub fn loss_decision(
    model: &SurrogateModel,
    inputs: &[Vec<f64>],
    case: &NetworkCase,
) -> Result<f64, SurrogateError> {
    if inputs.is_empty() {
        return Err(SurrogateError::EmptyBatch);
    }
    model.check_case(case)?;
    let mut sum = 0.0;
    for x in inputs {
        sum += powerflow::generation_cost(case, &model.predict(x)?.p_g);
    }
    Ok(sum / inputs.len() as f64)
}

/// Flow-limit and balance violations of one decision under `loads`.
pub fn sample_violations(
    case: &NetworkCase,
    loads: &Loads,
    decision: &DispatchDecision,
) -> Result<SampleViolations, SurrogateError> {
    let flows = powerflow::branch_flows(case, &decision.v, &decision.theta)?;
    let sigma_f = powerflow::line_flow_violation(&flows, case);
    let (rp, rq) = powerflow::balance_mismatch(case, loads, decision, &flows)?;
    Ok(SampleViolations {
        sigma_f,
        sigma_p: rp.iter().map(|r| r.abs()).collect(),
        sigma_q: rq.iter().map(|r| r.abs()).collect(),
    })
}

fn check_batch(
    model: &SurrogateModel,
    batch: &Batch,
    case: &NetworkCase,
    base: BaseLoss,
) -> Result<(), SurrogateError> {
    let rows = batch.inputs.len();
    if rows == 0 {
        return Err(SurrogateError::EmptyBatch);
    }
    model.check_case(case)?;
    for x in &batch.inputs {
        model.check_input(x)?;
    }
    if batch.multipliers.len() != rows {
        return Err(SurrogateError::BatchRows {
            what: "multipliers",
            expected: rows,
            actual: batch.multipliers.len(),
        });
    }
    let (n, m) = (case.bus_count(), case.branch_count());
    for (index, row) in batch.multipliers.iter().enumerate() {
        for (what, len, expected) in [
            ("lambda", row.lambda.len(), m),
            ("mu_p", row.mu_p.len(), n),
            ("mu_q", row.mu_q.len(), n),
        ] {
            if len != expected {
                return Err(SurrogateError::MultiplierDimension {
                    index,
                    what,
                    expected,
                    actual: len,
                });
            }
        }
    }
    if let BaseLoss::Mse(_) = base {
        let labels = batch.labels.as_ref().ok_or(SurrogateError::MissingLabels)?;
        check_labels(model, labels, rows)?;
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss contribution of sample `idx` and, when `grad` is given, its weight
/// gradient added in.
fn sample_term(
    model: &SurrogateModel,
    batch: &Batch,
    idx: usize,
    case: &NetworkCase,
    base: BaseLoss,
    grad: Option<&mut [f64]>,
) -> Result<LossBreakdown, SurrogateError> {
    let n = case.bus_count();
    let inv = 1.0 / batch.inputs.len() as f64;
    let x = batch.inputs[idx];
    let acts = model.forward(x);
    let out = model.scale_heads(acts.last().expect("output layer"));
    let decision = DispatchDecision::from_slice(&out);
    let loads = Loads::from_features(x);
    let flows = powerflow::branch_flows(case, &decision.v, &decision.theta)?;
    let (rp, rq) = powerflow::balance_mismatch(case, &loads, &decision, &flows)?;
    let mult = batch.multipliers[idx];

    let mut term = LossBreakdown::default();
    let mut d_out = vec![0.0; 4 * n];
    match base {
        BaseLoss::Decision => {
            term.objective_term = inv * powerflow::generation_cost(case, &decision.p_g);
            let dc = powerflow::generation_cost_gradient(case, &decision.p_g);
            for i in 0..n {
                d_out[i] = inv * dc[i];
            }
        }
        BaseLoss::Mse(layout) => {
            let label = batch.labels.as_ref().expect("checked")[idx];
            let m = layout.compared_len(n);
            for k in 0..m {
                let e = out[k] - label[k];
                term.objective_term += inv * e * e;
                d_out[k] = 2.0 * inv * e;
            }
        }
    }

    let mut adj_p = vec![0.0; flows.p_f.len()];
    let mut adj_q = vec![0.0; flows.q_f.len()];
    for i in 0..n {
        term.eq_penalty_p += mult.mu_p[i] * rp[i].abs();
        term.eq_penalty_q += mult.mu_q[i] * rq[i].abs();
        let sp = mult.mu_p[i] * sign(rp[i]);
        let sq = mult.mu_q[i] * sign(rq[i]);
        d_out[i] += sp;
        d_out[n + i] += sq;
        for &(k, side) in case.incidence_by_index(i) {
            let slot = BranchFlows::slot(k, side);
            adj_p[slot] -= sp;
            adj_q[slot] -= sq;
        }
    }
    let apparent = flows.apparent();
    for (k, br) in case.branches().iter().enumerate() {
        let (a, b) = (apparent[2 * k], apparent[2 * k + 1]);
        let slot = if b > a { 2 * k + 1 } else { 2 * k };
        let excess = apparent[slot] - br.s_max;
        if excess > 0.0 {
            term.ineq_penalty += mult.lambda[k] * excess;
            let scale = mult.lambda[k] / apparent[slot];
            adj_p[slot] += scale * flows.p_f[slot];
            adj_q[slot] += scale * flows.q_f[slot];
        }
    }

    if let Some(grad) = grad {
        let (d_v, d_th) = d_out[2 * n..].split_at_mut(n);
        powerflow::branch_flows_vjp(case, &decision.v, &decision.theta, &adj_p, &adj_q, d_v, d_th)?;
        model.backward(&acts, &d_out, grad);
    }
    Ok(term)
}

/// Samples per work unit in batched loss and gradient evaluation. Sums are
/// formed per chunk and then across chunks in order, so results do not
/// depend on the thread count.
const CHUNK: usize = 16;

fn accumulate(
    model: &SurrogateModel,
    batch: &Batch,
    case: &NetworkCase,
    base: BaseLoss,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<f64>), SurrogateError> {
    check_batch(model, batch, case, base)?;
    let p = if with_grad { model.params.len() } else { 0 };
    let indices: Vec<usize> = (0..batch.inputs.len()).collect();
    let partial: Vec<Result<(LossBreakdown, Vec<f64>), SurrogateError>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = LossBreakdown::default();
            let mut grad = vec![0.0; p];
            for &idx in chunk {
                let g = if with_grad { Some(grad.as_mut_slice()) } else { None };
                loss.add(&sample_term(model, batch, idx, case, base, g)?);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = LossBreakdown::default();
    let mut grad = vec![0.0; p];
    for part in partial {
        let (l, g) = part?;
        loss.add(&l);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss.finish(), grad))
}

/// Base loss plus `Σ_n λ_nᵀσ^f_n + (μ^p_n)ᵀσ^p_n + (μ^q_n)ᵀσ^q_n`. The base
/// loss is a batch mean; the penalty sums over samples.
pub fn lagrangian_loss(
    model: &SurrogateModel,
    batch: &Batch,
    case: &NetworkCase,
    base: BaseLoss,
) -> Result<LossBreakdown, SurrogateError> {
    Ok(accumulate(model, batch, case, base, false)?.0)
}

/// Exact gradient of [`lagrangian_loss`] w.r.t. the parameter vector. Kinks
/// of `max` and `|·|` take the zero subgradient.
pub fn grad_weights(
    model: &SurrogateModel,
    batch: &Batch,
    case: &NetworkCase,
    base: BaseLoss,
) -> Result<Vec<f64>, SurrogateError> {
    Ok(accumulate(model, batch, case, base, true)?.1)
}

/// [`lagrangian_loss`] and [`grad_weights`] from one pass.
pub fn loss_and_grad(
    model: &SurrogateModel,
    batch: &Batch,
    case: &NetworkCase,
    base: BaseLoss,
) -> Result<(LossBreakdown, Vec<f64>), SurrogateError> {
    accumulate(model, batch, case, base, true)
}
