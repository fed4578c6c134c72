//! The three studies: the three-generator counterexample, the load sweep on the
//! discontinuity fixture, and a decision-vs-MSE comparison on one dataset.

use serde::{Deserialize, Serialize};

use super::{evaluate_model, generate_dataset, split_dataset, Dataset, Distribution, PipelineError, SamplingSpec};
use crate::fixtures;
use crate::labeler::SolverConfig;
use crate::network::NetworkCase;
use crate::powerflow::{self, DispatchDecision, Loads};
use crate::surrogate::{self, LabelLayout, SurrogateModel};
use crate::training::{self, EvaluationSummary, LossKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig1Row {
    pub candidate: [f64; 3],
    /// Squared distance of the dispatch to the label (3, 0, 0).
    pub mse: f64,
    /// $/h under unit costs (1, 2, 3).
    pub cost: f64,
}

pub const FIG1_LABEL: [f64; 3] = [3.0, 0.0, 0.0];
pub const FIG1_CANDIDATES: [[f64; 3]; 3] = [[3.0, 0.0, 0.0], [1.0, 2.0, 0.0], [1.0, 1.0, 1.0]];

/// MSE and cost of the label and the two competing dispatches.
pub fn fig1_table() -> Vec<Fig1Row> {
    let case = fixtures::fig1_case();
    let mut label = DispatchDecision::flat(3);
    label.p_g = FIG1_LABEL.to_vec();
    let label = label.to_vec();
    FIG1_CANDIDATES
        .iter()
        .map(|&c| {
            let mut d = DispatchDecision::flat(3);
            d.p_g = c.to_vec();
            Fig1Row {
                candidate: c,
                mse: surrogate::decision_sq_error(&d, &label, LabelLayout::Generation),
                cost: powerflow::generation_cost(&case, &c),
            }
        })
        .collect()
}

pub const STUDY_EPOCHS: usize = 3000;

/// Training settings shared by both surrogates in the sweep and comparison
/// studies.
pub fn study_train_config() -> TrainConfig {
    TrainConfig {
        epochs: STUDY_EPOCHS,
        ..TrainConfig::default()
    }
}

/// Labelled samples for the comparison study: uniform loads on the
/// discontinuity fixture.
pub const COMPARE_SAMPLES: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub points: usize,
    /// `p_d` range at bus 1, p.u.
    pub range: (f64, f64),
    pub solver: SolverConfig,
    /// Seed for the labelling solves.
    pub label_seed: u64,
    /// Shared by both surrogates; `loss_kind` is overridden.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            points: 200,
            range: fixtures::DISCONTINUITY_SWEEP,
            solver: SolverConfig {
                ignore_flow_limits: true,
                ..SolverConfig::default()
            },
            label_seed: 0,
            train: study_train_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p_d1: f64,
    /// `(p_g, q_g, V, θ)`.
    pub label: Vec<f64>,
    pub mse_prediction: Vec<f64>,
    pub decision_prediction: Vec<f64>,
    /// Largest `σ^p` or `σ^q` of each prediction.
    pub mse_balance: f64,
    pub decision_balance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepStudy {
    pub points: Vec<SweepPoint>,
    pub step: f64,
    /// Largest distance between labels at adjacent grid points.
    pub max_label_jump: f64,
    /// Grid index `i` of the largest jump, between points `i` and `i + 1`.
    pub jump_index: usize,
    pub mse_max_balance: f64,
    pub decision_max_balance: f64,
    pub mse_model: SurrogateModel,
    pub decision_model: SurrogateModel,
}

impl SweepStudy {
    pub fn jump_ratio(&self) -> f64 {
        self.max_label_jump / self.step
    }
}

/// Evenly spaced `p_d` values at bus 1, other loads nominal.
pub fn sweep_loads(case: &NetworkCase, points: usize, range: (f64, f64)) -> Vec<Loads> {
    let step = (range.1 - range.0) / (points.max(2) - 1) as f64;
    (0..points)
        .map(|i| {
            let mut l = Loads::nominal(case);
            l.p[0] = range.0 + step * i as f64;
            l
        })
        .collect()
}

/// Labels on the sweep grid. Every grid point must converge so that
/// adjacent labels really are adjacent in load.
pub fn sweep_dataset(case: &NetworkCase, config: &SweepConfig) -> Result<Dataset, PipelineError> {
    if config.points < 2 {
        return Err(PipelineError::Config("a sweep needs at least two points".into()));
    }
    let loads = sweep_loads(case, config.points, config.range);
    let sampling = SamplingSpec {
        distribution: Distribution::Grid,
        count: config.points,
        range_frac: 0.0,
        seed: config.label_seed,
    };
    let data = generate_dataset(case, &loads, sampling, &config.solver)?;
    if data.dropped > 0 {
        return Err(PipelineError::Config(format!(
            "{} sweep points failed to converge",
            data.dropped
        )));
    }
    Ok(data)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn max_balance(case: &NetworkCase, model: &SurrogateModel, x: &[f64]) -> Result<(f64, Vec<f64>), PipelineError> {
    let d = model.predict(x)?;
    let v = surrogate::sample_violations(case, &Loads::from_features(x), &d)?;
    let worst = v.sigma_p.iter().chain(&v.sigma_q).copied().fold(0.0, f64::max);
    Ok((worst, d.to_vec()))
}

/// Labels the sweep, trains an MSE and a decision-loss surrogate on it with
/// identical settings, and records both predictions along the sweep.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepStudy, PipelineError> {
    let case = fixtures::discontinuity_case();
    let data = sweep_dataset(&case, config)?;
    let step = (config.range.1 - config.range.0) / (config.points - 1) as f64;

    let mut jump = (0.0, 0);
    for (i, w) in data.samples.windows(2).enumerate() {
        let d = distance(w[0].label.as_deref().unwrap(), w[1].label.as_deref().unwrap());
        if d > jump.0 {
            jump = (d, i);
        }
    }

    let train_with = |kind: LossKind| {
        let cfg = TrainConfig {
            loss_kind: kind,
            ..config.train.clone()
        };
        training::train(&case, &data.samples, &cfg).map(|(m, _)| m)
    };
    let mse_model = train_with(LossKind::Mse)?;
    let decision_model = train_with(LossKind::Decision)?;

    let mut points = Vec::with_capacity(data.len());
    let (mut mse_max, mut dec_max) = (0.0f64, 0.0f64);
    for s in &data.samples {
        let (mb, mp) = max_balance(&case, &mse_model, &s.features)?;
        let (db, dp) = max_balance(&case, &decision_model, &s.features)?;
        mse_max = mse_max.max(mb);
        dec_max = dec_max.max(db);
        points.push(SweepPoint {
            p_d1: s.features[0],
            label: s.label.clone().unwrap(),
            mse_prediction: mp,
            decision_prediction: dp,
            mse_balance: mb,
            decision_balance: db,
        });
    }
    Ok(SweepStudy {
        points,
        step,
        max_label_jump: jump.0,
        jump_index: jump.1,
        mse_max_balance: mse_max,
        decision_max_balance: dec_max,
        mse_model,
        decision_model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    /// Shared by both surrogates; `loss_kind` and `seed` are overridden.
    pub train: TrainConfig,
    /// Each seed drives one split and one pair of trained models.
    pub seeds: Vec<u64>,
    pub train_frac: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            train: study_train_config(),
            seeds: vec![0, 1, 2],
            train_frac: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRun {
    pub seed: u64,
    pub decision: EvaluationSummary,
    pub mse: EvaluationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareStudy {
    pub runs: Vec<CompareRun>,
    pub mean_regret_decision: f64,
    pub mean_regret_mse: f64,
}

/// For every seed: split, train both losses, evaluate both on the test part.
pub fn run_compare(case: &NetworkCase, data: &Dataset, config: &CompareConfig) -> Result<CompareStudy, PipelineError> {
    if config.seeds.is_empty() {
        return Err(PipelineError::Config("at least one seed is required".into()));
    }
    super::check_digest(case, data)?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (train, test) = split_dataset(data, config.train_frac, seed)?;
        if train.is_empty() || test.is_empty() {
            return Err(PipelineError::Config(format!(
                "split of {} samples at {} leaves an empty side",
                data.len(),
                config.train_frac
            )));
        }
        let mut summaries = Vec::with_capacity(2);
        for kind in [LossKind::Decision, LossKind::Mse] {
            let cfg = TrainConfig {
                loss_kind: kind,
                seed,
                ..config.train.clone()
            };
            let (model, _) = training::train(case, &train.samples, &cfg)?;
            summaries.push(evaluate_model(case, &model, &test)?.summary);
        }
        runs.push(CompareRun {
            seed,
            decision: summaries[0],
            mse: summaries[1],
        });
    }
    let count = runs.len() as f64;
    Ok(CompareStudy {
        mean_regret_decision: runs.iter().map(|r| r.decision.mean_regret).sum::<f64>() / count,
        mean_regret_mse: runs.iter().map(|r| r.mse.mean_regret).sum::<f64>() / count,
        runs,
    })
}
