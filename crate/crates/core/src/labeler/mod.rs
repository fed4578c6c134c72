//! Label generation and baselines.
//!
//! [`solve_opf_local`] finds a locally optimal, feasible AC OPF point with an
//! augmented-Lagrangian method: the outer loop prices the nodal balance
//! equations and flow limits, the inner loop runs projected gradient inside
//! the generation and voltage boxes. Several random starts are tried and the
//! cheapest converged one is returned, so labels are local minima chosen by
//! cost, not certified global optima.

mod newton;
mod solver;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkCase;
use crate::powerflow::{self, DispatchDecision, Loads, PowerflowError, ViolationReport};

pub use newton::{newton_power_flow, NewtonError, NewtonSolution};
pub use solver::AugmentedState;

#[derive(Debug, Error)]
pub enum LabelerError {
    #[error("total generation capacity {capacity} p.u. is below total load {load} p.u.")]
    InsufficientCapacity { capacity: f64, load: f64 },
    #[error("baseline solve did not converge")]
    UnconvergedBaseline,
    #[error("expected {expected} buses in the load vectors, got {actual}")]
    LoadDimension { expected: usize, actual: usize },
    #[error(transparent)]
    Powerflow(#[from] PowerflowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Largest balance residual or flow excess (p.u.) accepted as feasible.
    pub feas_tol: f64,
    /// Projected-gradient stationarity required of the final inner solve.
    pub opt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub starts: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub inner_tol_init: f64,
    /// Half-width (radians) of the box random starting angles are drawn from.
    pub start_angle_spread: f64,
    /// Drop flow limits from both the solve and the feasibility audit.
    pub ignore_flow_limits: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            feas_tol: 1e-6,
            opt_tol: 1e-6,
            max_outer: 50,
            max_inner: 2000,
            starts: 5,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            inner_tol_init: 1e-2,
            start_angle_spread: 0.3,
            ignore_flow_limits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub decision: DispatchDecision,
    pub converged: bool,
    /// Inner iterations summed over all starts.
    pub iterations: usize,
    pub final_residual: f64,
    /// Generation cost of `decision` in $/h.
    pub objective: f64,
    /// Seconds for the whole multi-start solve.
    pub wall_time: f64,
    /// Index of the start that produced `decision`.
    pub start: usize,
    pub multipliers: AugmentedState,
}

/// Relative objective gap below which two converged starts count as equal.
const TIE_TOL: f64 = 1e-9;

fn start_rng(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    rng
}

fn starting_point(case: &NetworkCase, config: &SolverConfig, seed: u64, start: usize) -> Vec<f64> {
    let t = case.tables();
    let n = case.bus_count();
    let mut rng = start_rng(seed, start);
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let mut z = Vec::with_capacity(4 * n);
    for i in 0..n {
        z.push(draw(t.p_min[i], t.p_max[i]));
    }
    for i in 0..n {
        z.push(draw(t.q_min[i], t.q_max[i]));
    }
    for i in 0..n {
        z.push(draw(t.v_min[i], t.v_max[i]));
    }
    let spread = config.start_angle_spread;
    let slack = case.slack_index();
    for i in 0..n {
        let th = draw(-spread, spread);
        z.push(if Some(i) == slack { 0.0 } else { th });
    }
    z
}

/// Maps an angle into (−π, π]. Flows only see angle differences through sin
/// and cos, so this never changes the physics of a point.
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = theta - tau * (theta / tau).round();
    if w <= -std::f64::consts::PI {
        w + tau
    } else {
        w
    }
}

fn check_loads(case: &NetworkCase, loads: &Loads) -> Result<(), LabelerError> {
    let n = case.bus_count();
    for len in [loads.p.len(), loads.q.len()] {
        if len != n {
            return Err(LabelerError::LoadDimension {
                expected: n,
                actual: len,
            });
        }
    }
    Ok(())
}

/// Multi-start local AC OPF. Start `k` draws its initial point from a stream
/// keyed by `(seed, k)`, so a run with more starts tries a superset of points.
pub fn solve_opf_local(
    case: &NetworkCase,
    loads: &Loads,
    config: &SolverConfig,
    seed: u64,
) -> Result<SolveOutcome, LabelerError> {
    check_loads(case, loads)?;
    let t = case.tables();
    let capacity: f64 = t.p_max.iter().sum();
    let load: f64 = loads.p.iter().sum();
    if capacity < load {
        return Err(LabelerError::InsufficientCapacity { capacity, load });
    }

    let clock = Instant::now();
    let problem = solver::Problem::new(case, loads, config.ignore_flow_limits);
    let mut best: Option<(usize, solver::StartResult, f64)> = None;
    let mut iterations = 0;

    for start in 0..config.starts.max(1) {
        let z0 = starting_point(case, config, seed, start);
        let result = solver::solve_from(&problem, z0, config);
        log::trace!(
            "start {start}: converged {} residual {:e} stationarity {:e}",
            result.converged,
            result.residual,
            result.stationarity
        );
        iterations += result.iterations;
        let objective = problem.objective(&result.z);
        let better = match &best {
            None => true,
            Some((_, b, b_obj)) => match (result.converged, b.converged) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => objective < *b_obj - TIE_TOL * (1.0 + b_obj.abs()),
                (false, false) => result.residual < b.residual,
            },
        };
        if better {
            best = Some((start, result, objective));
        }
    }

    let (start, result, objective) = best.expect("at least one start");
    let mut decision = problem.decision(&result.z);
    decision.theta.iter_mut().for_each(|th| *th = wrap_angle(*th));
    Ok(SolveOutcome {
        decision,
        converged: result.converged,
        iterations,
        final_residual: result.residual,
        objective,
        wall_time: clock.elapsed().as_secs_f64(),
        start,
        multipliers: result.state,
    })
}

/// Value of the scaled augmented Lagrangian a solve ended on, evaluated at an
/// arbitrary stacked point `(p_g, q_g, V, θ)`.
pub fn augmented_objective(
    case: &NetworkCase,
    loads: &Loads,
    config: &SolverConfig,
    multipliers: &AugmentedState,
    point: &[f64],
) -> f64 {
    let problem = solver::Problem::new(case, loads, config.ignore_flow_limits);
    problem.augmented(point, multipliers, None).value
}

/// Projects a stacked point onto the solver's variable box.
pub fn project_onto_box(case: &NetworkCase, point: &mut [f64]) {
    let loads = Loads::nominal(case);
    solver::Problem::new(case, &loads, true).project(point);
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityCheck {
    pub report: ViolationReport,
    pub passed: bool,
}

/// Full audit of a decision; passes iff every violation entry is ≤ `tol`.
pub fn verify_feasibility(
    case: &NetworkCase,
    loads: &Loads,
    decision: &DispatchDecision,
    tol: f64,
    include_flow_limits: bool,
) -> Result<FeasibilityCheck, LabelerError> {
    let report = powerflow::violation_report(case, loads, decision, include_flow_limits)?;
    let passed = report.max_entry() <= tol;
    Ok(FeasibilityCheck { report, passed })
}

/// Cost of the predicted dispatch minus the baseline's cost ($/h). Negative
/// values mean the prediction undercuts a feasible optimum, which only an
/// infeasible prediction can do.
pub fn regret(
    case: &NetworkCase,
    predicted: &DispatchDecision,
    baseline: &SolveOutcome,
) -> Result<f64, LabelerError> {
    if !baseline.converged {
        return Err(LabelerError::UnconvergedBaseline);
    }
    regret_against(case, predicted, baseline.objective)
}

/// [`regret`] against a recorded baseline objective.
pub fn regret_against(
    case: &NetworkCase,
    predicted: &DispatchDecision,
    baseline_objective: f64,
) -> Result<f64, LabelerError> {
    if predicted.bus_count() != case.bus_count() {
        return Err(PowerflowError::DimensionMismatch {
            what: "p_g",
            expected: case.bus_count(),
            actual: predicted.bus_count(),
        }
        .into());
    }
    Ok(powerflow::generation_cost(case, &predicted.p_g) - baseline_objective)
}
