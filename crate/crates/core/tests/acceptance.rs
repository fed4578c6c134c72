//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use common::{finite_difference, jitter_biases, lossy_triangle, worst_relative_error, BatchData};
use opflab::fixtures;
use opflab::labeler::{solve_opf_local, verify_feasibility, SolverConfig};
use opflab::pipeline::studies::{self, CompareConfig, SweepConfig, COMPARE_SAMPLES};
use opflab::pipeline::{build_dataset, median, sample_loads, time_inference, Sample, DEFAULT_RANGE_FRAC};
use opflab::powerflow::{violation_report, Loads};
use opflab::surrogate::{
    self, init_model, init_model_with, Activation, BaseLoss, LabelLayout, ModelConfig,
};
use opflab::training::{self, evaluate_samples, LossKind, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn fig1_counterexample() -> Outcome {
    let rows = studies::fig1_table();
    let find = |c: [f64; 3]| rows.iter().find(|r| r.candidate == c).copied().unwrap();
    let a = find([1.0, 2.0, 0.0]);
    let b = find([1.0, 1.0, 1.0]);
    let passed = a.mse == 8.0 && b.mse == 6.0 && a.cost == 5.0 && b.cost == 6.0 && a.mse > b.mse && a.cost < b.cost;
    check(
        passed,
        format!("(1,2,0): MSE {} cost {}; (1,1,1): MSE {} cost {}", a.mse, a.cost, b.mse, b.cost),
    )
}

fn hard_box() -> Outcome {
    let case = fixtures::case39();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nominal = Loads::nominal(&case);
    let mut model = init_model(&case, &[60, 60, 60], 0).unwrap();
    let base: Vec<f64> = model.parameters().to_vec();
    let (mut worst_v, mut worst_g) = (0.0f64, 0.0f64);
    let mut inputs = Vec::new();
    for i in 0..10_000 {
        let gain = rng.gen_range(0.1..20.0);
        let w: Vec<f64> = base.iter().map(|w| w * gain * rng.gen_range(-1.0..1.0)).collect();
        model.set_parameters(&w).unwrap();
        let loads = Loads {
            p: nominal.p.iter().map(|p| p * rng.gen_range(0.0..2.0)).collect(),
            q: nominal.q.iter().map(|q| q * rng.gen_range(0.0..2.0)).collect(),
        };
        let x = loads.to_features();
        let d = model.predict(&x).unwrap();
        let report = violation_report(&case, &loads, &d, true).unwrap();
        worst_v = worst_v.max(report.max_v_excess());
        worst_g = worst_g.max(report.max_gen_excess());
        if i < 200 {
            inputs.push(x);
        }
    }
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let rows = evaluate_samples(&case, &model, &refs, &vec![0.0; refs.len()]).unwrap();
    let summary = training::summarize_evaluations(&rows);
    check(
        worst_v == 0.0 && worst_g == 0.0 && summary.max_v_excess == 0.0 && summary.max_gen_excess == 0.0,
        format!(
            "10000 predictions: max voltage excess {worst_v}, max generation excess {worst_g}; report max voltage violation {}",
            summary.max_v_excess
        ),
    )
}

fn gradients() -> Outcome {
    let case = lossy_triangle();
    let mut worst = (0.0f64, String::new());
    for (k, activation) in [Activation::Relu, Activation::Tanh].into_iter().enumerate() {
        let config = ModelConfig {
            hidden: vec![4, 4],
            activation,
            ..ModelConfig::default()
        };
        let mut model = init_model_with(&case, &config, 10 + k as u64).unwrap();
        jitter_biases(&mut model, 20 + k as u64);
        let data = BatchData::random(&case, 4, 30 + k as u64);
        for base in [BaseLoss::Decision, BaseLoss::Mse(LabelLayout::Full)] {
            let analytic = surrogate::grad_weights(&model, &data.batch(), &case, base).unwrap();
            let fd = finite_difference(&model, &data, &case, base, 1e-6);
            let (idx, err) = worst_relative_error(&analytic, &fd);
            if err >= worst.0 {
                worst = (err, format!("{activation:?}/{base:?} weight {idx}"));
            }
        }
    }
    check(
        worst.0 < 1e-5,
        format!("worst relative error {:.2e} ({}) over 2 activations × 2 losses", worst.0, worst.1),
    )
}

fn discontinuity() -> Outcome {
    let config = SweepConfig::default();
    let study = studies::run_sweep(&config).unwrap();
    let jump = study.jump_ratio() > 10.0;
    let direction = study.mse_max_balance >= study.decision_max_balance;
    check(
        jump && direction,
        format!(
            "largest adjacent label jump {:.1}× the step (near p_d1 = {:.3}); max balance violation MSE {:.4} vs decision {:.4} p.u. ({} epochs, seed {})",
            study.jump_ratio(),
            study.points[study.jump_index].p_d1,
            study.mse_max_balance,
            study.decision_max_balance,
            config.train.epochs,
            config.train.seed
        ),
    )
}

fn loss_comparison() -> Outcome {
    let case = fixtures::discontinuity_case();
    let data = build_dataset(&case, COMPARE_SAMPLES, DEFAULT_RANGE_FRAC, 0, &SolverConfig::default()).unwrap();
    let config = CompareConfig::default();
    let study = studies::run_compare(&case, &data, &config).unwrap();
    let per_seed: Vec<String> = study
        .runs
        .iter()
        .map(|r| format!("seed {}: {:.0}/{:.0}", r.seed, r.decision.mean_regret, r.mse.mean_regret))
        .collect();
    check(
        data.len() >= 200 && study.mean_regret_decision <= study.mean_regret_mse,
        format!(
            "{} labelled samples; mean test regret decision {:.1} vs MSE {:.1} $/h ({})",
            data.len(),
            study.mean_regret_decision,
            study.mean_regret_mse,
            per_seed.join(", ")
        ),
    )
}

fn speedup() -> Outcome {
    let case = fixtures::case39();
    let solver = SolverConfig::default();
    let loads = sample_loads(&case, 20, DEFAULT_RANGE_FRAC, 1).unwrap();
    let mut solve_times = Vec::new();
    for (i, l) in loads.iter().enumerate() {
        let start = Instant::now();
        let out = solve_opf_local(&case, l, &solver, i as u64).unwrap();
        solve_times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let model = init_model(&case, &[60, 60, 60], 0).unwrap();
    let inputs: Vec<Vec<f64>> = loads.iter().map(Loads::to_features).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let inference = time_inference(&model, &refs, 1000).unwrap();
    let (s, f) = (median(&solve_times), median(&inference));
    check(
        f <= s / 100.0,
        format!("39-bus median solve {:.3e} s, median inference {:.3e} s, ratio {:.0}", s, f, s / f),
    )
}

fn mechanics() -> Outcome {
    let case = lossy_triangle();
    let samples: Vec<Sample> = build_dataset(&case, 16, 0.1, 5, &SolverConfig::default()).unwrap().samples;
    let mut notes = Vec::new();
    let mut passed = true;

    let mut monotone = true;
    for kind in [LossKind::Decision, LossKind::Mse] {
        let config = TrainConfig {
            loss_kind: kind,
            hidden: vec![8, 8],
            batch_size: 5,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&case, &samples, config).unwrap();
        let mut prev = trainer.state().clone();
        for _ in 0..40 {
            trainer.step_epoch().unwrap();
            let now = trainer.state();
            for (a, b) in [(&prev.lambda, &now.lambda), (&prev.mu_p, &now.mu_p), (&prev.mu_q, &now.mu_q)] {
                monotone &= a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| y >= x);
            }
            prev = now.clone();
        }
    }
    passed &= monotone;
    notes.push(format!("multipliers nondecreasing over 40 epochs: {monotone}"));

    let frozen = TrainConfig {
        alpha: 0.0,
        hidden: vec![8, 8],
        epochs: 20,
        ..TrainConfig::default()
    };
    let initial = Trainer::new(&case, &samples, frozen.clone()).unwrap().model().clone();
    let (model, state) = training::train(&case, &samples, &frozen).unwrap();
    let unchanged = model.parameters() == initial.parameters();
    let advanced = state.mu_p.iter().flatten().any(|&m| m > 0.0);
    passed &= unchanged && advanced;
    notes.push(format!("α = 0 weights unchanged: {unchanged}, multipliers advanced: {advanced}"));

    let mut identical = true;
    for kind in [LossKind::Decision, LossKind::Mse] {
        let config = TrainConfig {
            loss_kind: kind,
            hidden: vec![8, 8],
            epochs: 30,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = training::train(&case, &samples, &config).unwrap();
        let b = training::train(&case, &samples, &config).unwrap();
        identical &= a == b;
    }
    passed &= identical;
    notes.push(format!("repeated runs bit-identical: {identical}"));
    check(passed, notes.join("; "))
}

fn label_quality() -> Outcome {
    let solver = SolverConfig::default();
    let mut converged = 0;
    let mut failures = 0;
    let mut worst = 0.0f64;
    let cases = [
        (lossy_triangle(), 40),
        (fixtures::discontinuity_case(), 40),
        (fixtures::two_bus_case(), 20),
        (fixtures::case39(), 5),
    ];
    for (case, count) in &cases {
        for (i, l) in sample_loads(case, *count, DEFAULT_RANGE_FRAC, 9).unwrap().iter().enumerate() {
            let Ok(out) = solve_opf_local(case, l, &solver, i as u64) else { continue };
            if !out.converged {
                continue;
            }
            converged += 1;
            let audit = verify_feasibility(case, l, &out.decision, 1e-6, true).unwrap();
            worst = worst.max(audit.report.max_entry());
            if !audit.passed {
                failures += 1;
            }
        }
    }
    let fig1 = fixtures::fig1_case();
    let out = solve_opf_local(&fig1, &Loads::nominal(&fig1), &solver, 0).unwrap();
    let dispatch_err = out
        .decision
        .p_g
        .iter()
        .zip([3.0, 0.0, 0.0])
        .map(|(p, e)| (p - e).abs())
        .fold(0.0, f64::max);
    let objective_err = (out.objective - 3.0).abs();
    check(
        converged > 0 && failures == 0 && out.converged && dispatch_err < 1e-3 && objective_err < 1e-3,
        format!(
            "{converged} converged labels, {failures} failed the 1e-6 audit (worst entry {worst:.1e}); counterexample dispatch error {dispatch_err:.1e}, objective {:.6}",
            out.objective
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("three-generator counterexample", fig1_counterexample, Duration::from_secs(1)),
        ("hard box feasibility", hard_box, Duration::from_secs(60)),
        ("gradient correctness", gradients, Duration::from_secs(60)),
        ("discontinuity study", discontinuity, Duration::from_secs(600)),
        ("loss comparison", loss_comparison, Duration::from_secs(900)),
        ("inference speedup", speedup, Duration::from_secs(300)),
        ("training mechanics", mechanics, Duration::from_secs(60)),
        ("label quality", label_quality, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| f == &id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let passed = outcome.passed && in_time;
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {id} {name}: {} ({:.1} s, limit {} s) {}{}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            outcome.detail,
            if in_time { "" } else { " [over time limit]" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
