use opflab::fixtures;
use opflab::labeler::{
    augmented_objective, newton_power_flow, project_onto_box, regret, regret_against,
    solve_opf_local, verify_feasibility, LabelerError, SolveOutcome, SolverConfig,
};
use opflab::network::NetworkCase;
use opflab::powerflow::{self, DispatchDecision, Loads};

fn solve(case: &NetworkCase, loads: &Loads, config: &SolverConfig) -> SolveOutcome {
    solve_opf_local(case, loads, config, 11).expect("solve runs")
}

fn nominal(case: &NetworkCase) -> SolveOutcome {
    solve(case, &Loads::nominal(case), &SolverConfig::default())
}

#[test]
fn fig1_dispatch_is_recovered() {
    let case = fixtures::fig1_case();
    let out = nominal(&case);
    assert!(out.converged);
    for (got, want) in out.decision.p_g.iter().zip([3.0, 0.0, 0.0]) {
        assert!((got - want).abs() < 1e-3, "p_g {:?}", out.decision.p_g);
    }
    assert!((out.objective - 3.0).abs() < 1e-3, "objective {}", out.objective);
}

#[test]
fn two_bus_generation_matches_newton_power_flow() {
    let case = fixtures::two_bus_case();
    let loads = Loads::nominal(&case);
    let out = nominal(&case);
    assert!(out.converged);

    let v1 = out.decision.v[0];
    let p_net = vec![0.0, -loads.p[1]];
    let q_net = vec![0.0, -loads.q[1]];
    let pf = newton_power_flow(&case, v1, &p_net, &q_net, 1e-12, 30).expect("power flow converges");
    assert!((out.decision.p_g[0] - pf.p_net[0]).abs() < 1e-6);
    assert!((out.decision.q_g[0] - pf.q_net[0]).abs() < 1e-6);
    assert!((out.decision.v[1] - pf.v[1]).abs() < 1e-6);
    // generation covers the load plus a strictly positive line loss
    assert!(pf.p_net[0] > loads.p[1]);
}

#[test]
fn insufficient_capacity_fails_before_solving() {
    let case = fixtures::two_bus_case();
    let mut loads = Loads::nominal(&case);
    loads.p[1] = 3.5;
    match solve_opf_local(&case, &loads, &SolverConfig::default(), 0) {
        Err(LabelerError::InsufficientCapacity { capacity, load }) => {
            assert_eq!(capacity, 3.0);
            assert_eq!(load, 3.5);
        }
        other => panic!("expected a capacity failure, got {other:?}"),
    }
}

#[test]
fn wrong_load_length_is_rejected() {
    let case = fixtures::fig1_case();
    let loads = Loads {
        p: vec![1.0; 2],
        q: vec![0.0; 3],
    };
    assert!(matches!(
        solve_opf_local(&case, &loads, &SolverConfig::default(), 0),
        Err(LabelerError::LoadDimension { expected: 3, actual: 2 })
    ));
}

fn scaled_loads(case: &NetworkCase, factor: f64) -> Loads {
    let mut loads = Loads::nominal(case);
    loads.p.iter_mut().for_each(|p| *p *= factor);
    loads.q.iter_mut().for_each(|q| *q *= factor);
    loads
}

#[test]
fn converged_labels_pass_the_audit() {
    let config = SolverConfig::default();
    for case in [fixtures::fig1_case(), fixtures::two_bus_case(), fixtures::discontinuity_case()] {
        for factor in [0.8, 1.0, 1.15] {
            let loads = scaled_loads(&case, factor);
            let out = solve(&case, &loads, &config);
            assert!(out.converged, "factor {factor}");
            assert!(out.final_residual <= config.feas_tol);
            let check = verify_feasibility(&case, &loads, &out.decision, config.feas_tol, true).unwrap();
            assert!(check.passed, "{:?}", check.report);
        }
    }
}

#[test]
fn flow_limits_are_respected_when_binding() {
    let mut case = fixtures::fig1_case();
    // tighten every line so the (3, 0, 0) dispatch is no longer possible
    let branches = case
        .branches()
        .iter()
        .map(|b| opflab::network::Branch { s_max: 0.8, ..b.clone() })
        .collect();
    case = NetworkCase::new(
        case.base_mva(),
        case.buses().to_vec(),
        branches,
        case.generators().to_vec(),
    );
    let loads = Loads::nominal(&case);
    let out = nominal(&case);
    assert!(out.converged);
    let check = verify_feasibility(&case, &loads, &out.decision, 1e-6, true).unwrap();
    assert!(check.passed, "{:?}", check.report);
    assert!(out.objective > 3.0 + 1e-3, "limits should cost something: {}", out.objective);

    let relaxed = solve(&case, &loads, &SolverConfig { ignore_flow_limits: true, ..SolverConfig::default() });
    assert!(relaxed.objective <= out.objective + 1e-6);
}

/// Perturbs each free coordinate by ±1e-4, re-projects and checks that the
/// augmented objective the solve ended on never drops by more than 1e-8.
fn assert_locally_stationary(case: &NetworkCase, loads: &Loads, config: &SolverConfig, out: &SolveOutcome) {
    let z = out.decision.to_vec();
    let base = augmented_objective(case, loads, config, &out.multipliers, &z);
    let mut lower = vec![f64::NEG_INFINITY; z.len()];
    let mut upper = vec![f64::INFINITY; z.len()];
    project_onto_box(case, &mut lower);
    project_onto_box(case, &mut upper);
    for k in 0..z.len() {
        if lower[k] == upper[k] {
            continue;
        }
        for delta in [1e-4, -1e-4] {
            let mut trial = z.clone();
            trial[k] += delta;
            project_onto_box(case, &mut trial);
            let value = augmented_objective(case, loads, config, &out.multipliers, &trial);
            assert!(value >= base - 1e-8, "coordinate {k}, step {delta}: {base} -> {value}");
        }
    }
}

#[test]
fn converged_points_are_first_order_stationary() {
    for case in [fixtures::fig1_case(), fixtures::two_bus_case(), fixtures::discontinuity_case()] {
        for factor in [0.9, 1.0, 1.1] {
            let loads = scaled_loads(&case, factor);
            let config = SolverConfig::default();
            let out = solve(&case, &loads, &config);
            assert!(out.converged);
            assert_locally_stationary(&case, &loads, &config, &out);
        }
    }
}

#[test]
fn case39_converges_to_a_stationary_point() {
    let case = fixtures::case39();
    let loads = Loads::nominal(&case);
    let config = SolverConfig { starts: 2, ..SolverConfig::default() };
    let out = solve(&case, &loads, &config);
    assert!(out.converged, "residual {}", out.final_residual);
    assert!(verify_feasibility(&case, &loads, &out.decision, 1e-6, true).unwrap().passed);
    assert_locally_stationary(&case, &loads, &config, &out);
}

#[test]
fn more_starts_never_cost_more() {
    let case = fixtures::discontinuity_case();
    for pd1 in [0.1, 0.3, 0.75, 1.2] {
        let mut loads = Loads::nominal(&case);
        loads.p[0] = pd1;
        let mut previous: Option<SolveOutcome> = None;
        for starts in 1..=6 {
            let config = SolverConfig { starts, ignore_flow_limits: true, ..SolverConfig::default() };
            let out = solve_opf_local(&case, &loads, &config, 3).unwrap();
            if let Some(prev) = &previous {
                if prev.converged {
                    assert!(out.converged);
                    assert!(out.objective <= prev.objective, "pd1 {pd1}, starts {starts}");
                }
            }
            previous = Some(out);
        }
    }
}

#[test]
fn solves_are_deterministic_per_seed() {
    let case = fixtures::discontinuity_case();
    let loads = Loads::nominal(&case);
    let config = SolverConfig::default();
    let a = solve_opf_local(&case, &loads, &config, 5).unwrap();
    let b = solve_opf_local(&case, &loads, &config, 5).unwrap();
    assert_eq!(a.decision, b.decision);
    assert_eq!(a.start, b.start);
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn label_angles_are_wrapped() {
    let case = fixtures::discontinuity_case();
    for pd1 in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let mut loads = Loads::nominal(&case);
        loads.p[0] = pd1;
        let out = solve(&case, &loads, &SolverConfig { ignore_flow_limits: true, ..SolverConfig::default() });
        for th in &out.decision.theta {
            assert!(*th > -std::f64::consts::PI && *th <= std::f64::consts::PI);
        }
    }
}

#[test]
fn generation_equals_load_plus_losses() {
    let case = fixtures::case39();
    let loads = scaled_loads(&case, 0.95);
    let out = solve(&case, &loads, &SolverConfig { starts: 1, ..SolverConfig::default() });
    assert!(out.converged);
    let d = &out.decision;
    let flows = powerflow::branch_flows(&case, &d.v, &d.theta).unwrap();
    let losses: f64 = flows.p_f.iter().sum();
    let generated: f64 = d.p_g.iter().sum();
    let demand: f64 = loads.p.iter().sum();
    let slack = case.bus_count() as f64 * 1e-6;
    assert!((generated - demand - losses).abs() <= slack);
    assert!(losses > 0.0);
}

fn outcome(decision: DispatchDecision, objective: f64, converged: bool) -> SolveOutcome {
    let mut out = nominal(&fixtures::fig1_case());
    out.decision = decision;
    out.objective = objective;
    out.converged = converged;
    out
}

fn dispatch(p_g: [f64; 3]) -> DispatchDecision {
    let mut d = DispatchDecision::flat(3);
    d.p_g = p_g.to_vec();
    d
}

#[test]
fn regret_of_the_baseline_itself_is_zero() {
    let case = fixtures::fig1_case();
    let base = nominal(&case);
    assert_eq!(regret(&case, &base.decision, &base).unwrap(), 0.0);
}

#[test]
fn regret_is_cost_difference() {
    let case = fixtures::fig1_case();
    let baseline = outcome(dispatch([1.0, 2.0, 0.0]), 5.0, true);
    let r = regret(&case, &dispatch([1.0, 1.0, 1.0]), &baseline).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
}

#[test]
fn negative_regret_comes_with_an_infeasible_prediction() {
    let case = fixtures::fig1_case();
    let loads = Loads::nominal(&case);
    let predicted = dispatch([2.0, 1.0, 0.0]);
    let r = regret_against(&case, &predicted, 5.0).unwrap();
    assert!((r + 1.0).abs() < 1e-12);
    let check = verify_feasibility(&case, &loads, &predicted, 1e-6, true).unwrap();
    assert!(!check.passed);
    assert!(check.report.max_sigma_p() > 0.0);
}

#[test]
fn regret_needs_a_converged_baseline() {
    let case = fixtures::fig1_case();
    let baseline = outcome(dispatch([3.0, 0.0, 0.0]), 3.0, false);
    assert!(matches!(
        regret(&case, &dispatch([3.0, 0.0, 0.0]), &baseline),
        Err(LabelerError::UnconvergedBaseline)
    ));
}

#[test]
fn voltage_outside_the_box_fails_the_audit() {
    let case = fixtures::case39();
    let loads = Loads::nominal(&case);
    let mut d = DispatchDecision::flat(case.bus_count());
    d.v[4] = 1.1;
    let check = verify_feasibility(&case, &loads, &d, 1e-6, false).unwrap();
    assert!(!check.passed);
    assert!((check.report.v_excess[4] - 0.03).abs() < 1e-12);
}
