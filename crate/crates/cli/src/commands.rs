use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use opflab::fixtures;
use opflab::labeler::{self, SolverConfig};
use opflab::network::{parse_matpower_case, parse_native_case, validate_case, NetworkCase};
use opflab::pipeline::studies::{self, CompareConfig, SweepConfig};
use opflab::pipeline::{self, Dataset};
use opflab::powerflow::Loads;
use opflab::surrogate;
use opflab::training::{self, TrainConfig};
use serde::Serialize;

use crate::args::*;
use crate::manifest::Run;

/// Cases above this size need `--long` for the comparison study.
const LONG_RUN_BUSES: usize = 10;

pub fn load_case(spec: &str) -> Result<NetworkCase> {
    let case = match spec {
        "fig1" => fixtures::fig1_case(),
        "two-bus" => fixtures::two_bus_case(),
        "discontinuity" => fixtures::discontinuity_case(),
        "case39" => fixtures::case39(),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading case file {path}"))?;
            let parsed = if Path::new(path).extension().is_some_and(|e| e == "m") {
                parse_matpower_case(&text)
            } else {
                parse_native_case(&text)
            };
            parsed.with_context(|| format!("parsing case file {path}"))?
        }
    };
    let report = validate_case(&case);
    if !report.is_ok() {
        bail!("case {spec} is invalid: {report}");
    }
    Ok(case)
}

fn config_file(global: &GlobalArgs) -> Result<ConfigFile> {
    match &global.config {
        None => Ok(ConfigFile::default()),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

fn resolve_seed(flag: Option<u64>, file: &ConfigFile) -> u64 {
    flag.or(file.seed).unwrap_or(DEFAULT_SEED)
}

fn solver_config(file: &ConfigFile, flags: &SolverFlags) -> SolverConfig {
    let mut config = file.solver.clone().unwrap_or_default();
    flags.apply(&mut config);
    config
}

fn train_config(file: &ConfigFile, base: TrainConfig, flags: &TrainFlags, seed: u64) -> Result<TrainConfig> {
    let mut config = file.train.clone().unwrap_or(base);
    flags.apply(&mut config)?;
    config.seed = seed;
    config.validate()?;
    Ok(config)
}

fn run_dir(global: &GlobalArgs, subcommand: &str, seed: u64) -> Result<Run> {
    let name = global.run_name.clone().unwrap_or_else(|| format!("{subcommand}-seed{seed}"));
    Run::create(&global.out_dir, &name, subcommand, seed)
}

fn load_dataset(run: &mut Run, case: &NetworkCase, path: &Path) -> Result<Dataset> {
    let data = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    run.input_file(path)?;
    pipeline::check_digest(case, &data).with_context(|| format!("dataset {}", path.display()))?;
    Ok(data)
}

#[derive(Serialize)]
struct GenDataConfig<'a> {
    case: &'a str,
    count: usize,
    range_frac: f64,
    seed: u64,
    solver: &'a SolverConfig,
}

pub fn gen_data(global: &GlobalArgs, a: GenDataArgs) -> Result<()> {
    let file = config_file(global)?;
    let case = load_case(&a.case.case)?;
    let seed = resolve_seed(a.seed, &file);
    let solver = solver_config(&file, &a.solver);
    let mut run = run_dir(global, "gen-data", seed)?;
    run.set_config(&GenDataConfig {
        case: &a.case.case,
        count: a.count,
        range_frac: a.range_frac,
        seed,
        solver: &solver,
    })?;
    run.input_digest("case", case.digest());

    let data = pipeline::build_dataset(&case, a.count, a.range_frac, seed, &solver)?;
    let path = run.artifact("dataset.csv");
    data.save(&path)?;
    run.artifact("dataset.timing.csv");
    println!("labelled {} of {} samples ({} dropped)", data.len(), a.count, data.dropped);
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainRunConfig<'a> {
    case: &'a str,
    data: &'a Path,
    train_frac: Option<f64>,
    train: &'a TrainConfig,
}

pub fn train(global: &GlobalArgs, a: TrainArgs) -> Result<()> {
    let file = config_file(global)?;
    let case = load_case(&a.case.case)?;
    let seed = resolve_seed(a.seed, &file);
    let config = train_config(&file, TrainConfig::default(), &a.train, seed)?;
    let mut run = run_dir(global, "train", seed)?;
    run.set_config(&TrainRunConfig {
        case: &a.case.case,
        data: &a.data,
        train_frac: a.train_frac,
        train: &config,
    })?;
    run.input_digest("case", case.digest());
    let data = load_dataset(&mut run, &case, &a.data)?;

    let train_split = match a.train_frac {
        Some(frac) => {
            let (train, test) = pipeline::split_dataset(&data, frac, seed)?;
            train.save(&run.artifact("train.csv"))?;
            run.artifact("train.timing.csv");
            test.save(&run.artifact("test.csv"))?;
            run.artifact("test.timing.csv");
            train
        }
        None => data,
    };
    let labelled: Vec<_> = train_split.samples.iter().filter(|s| s.label.is_some()).cloned().collect();
    let (model, state) = training::train(&case, &labelled, &config)?;
    run.write("model.txt", surrogate::serialize(&model))?;
    let mut history = Vec::new();
    training::write_history_csv(&state.history, &mut history)?;
    run.write("history.csv", history)?;
    if let Some(last) = state.history.last() {
        println!(
            "trained {} epochs on {} samples: total {:.6e}, objective {:.6e}, max σp {:.3e}, max σq {:.3e}, max σf {:.3e}",
            config.epochs,
            labelled.len(),
            last.total,
            last.objective_term,
            last.max_sigma_p,
            last.max_sigma_q,
            last.max_sigma_f
        );
    }
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    case: &'a str,
    model: &'a Path,
    data: &'a Path,
}

pub fn eval(global: &GlobalArgs, a: EvalArgs) -> Result<()> {
    let case = load_case(&a.case.case)?;
    let mut run = run_dir(global, "eval", DEFAULT_SEED)?;
    run.set_config(&EvalConfig {
        case: &a.case.case,
        model: &a.model,
        data: &a.data,
    })?;
    run.input_digest("case", case.digest());
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    run.input_file(&a.model)?;
    let model = surrogate::deserialize(&text, &case).with_context(|| format!("model {}", a.model.display()))?;
    let data = load_dataset(&mut run, &case, &a.data)?;

    let report = pipeline::evaluate_model(&case, &model, &data)?;
    let mut rows = Vec::new();
    pipeline::write_report_csv(&report.rows, &mut rows)?;
    run.write("report.csv", rows)?;
    pipeline::write_report_plots(&report, &run.dir, "")?;
    run.artifact("regret_hist.dat");
    run.artifact("violations.dat");
    #[derive(Serialize)]
    struct Summary<'a> {
        summary: &'a training::EvaluationSummary,
        timing: &'a pipeline::TimingSummary,
    }
    let summary = Summary {
        summary: &report.summary,
        timing: &report.timing,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    run.write("summary.json", format!("{json}\n"))?;
    println!("{json}");
    run.finish()?;
    Ok(())
}

pub fn solve(global: &GlobalArgs, a: SolveArgs) -> Result<()> {
    let file = config_file(global)?;
    let case = load_case(&a.case.case)?;
    let seed = resolve_seed(a.seed, &file);
    let solver = solver_config(&file, &a.solver);
    let mut loads = Loads::nominal(&case);
    let n = case.bus_count();
    for (flag, given, target) in [("--pd", &a.pd, &mut loads.p), ("--qd", &a.qd, &mut loads.q)] {
        if let Some(v) = given {
            if v.len() != n {
                bail!("{flag} has {} values but the case has {n} buses", v.len());
            }
            target.clone_from(v);
        }
    }
    let mut run = run_dir(global, "solve", seed)?;
    run.set_config(&serde_json::json!({
        "case": a.case.case,
        "pd": loads.p,
        "qd": loads.q,
        "seed": seed,
        "solver": solver,
    }))?;
    run.input_digest("case", case.digest());

    let out = labeler::solve_opf_local(&case, &loads, &solver, seed)?;
    let outcome = serde_json::json!({
        "converged": out.converged,
        "objective": out.objective,
        "iterations": out.iterations,
        "final_residual": out.final_residual,
        "wall_time": out.wall_time,
        "start": out.start,
        "p_g": out.decision.p_g,
        "q_g": out.decision.q_g,
        "v": out.decision.v,
        "theta": out.decision.theta,
    });
    let json = serde_json::to_string_pretty(&outcome)?;
    run.write("solve.json", format!("{json}\n"))?;
    println!("{json}");
    run.finish()?;
    if !out.converged {
        bail!("the solver did not converge (final residual {:.3e})", out.final_residual);
    }
    Ok(())
}

pub fn fig1_text() -> String {
    let mut out = String::new();
    let _ = writeln!(out, "label (3, 0, 0), costs (1, 2, 3) $/h per p.u.");
    let _ = writeln!(out, "{:<16} {:>6} {:>6}", "candidate", "MSE", "cost");
    for row in studies::fig1_table() {
        let [a, b, c] = row.candidate;
        let _ = writeln!(out, "{:<16} {:>6} {:>6}", format!("({a}, {b}, {c})"), row.mse, row.cost);
    }
    out
}

pub fn study_fig1(global: &GlobalArgs) -> Result<()> {
    let mut run = run_dir(global, "study-fig1", DEFAULT_SEED)?;
    run.set_config(&serde_json::json!({ "label": studies::FIG1_LABEL, "candidates": studies::FIG1_CANDIDATES }))?;
    run.input_digest("case", fixtures::fig1_case().digest());
    let text = fig1_text();
    print!("{text}");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["p_g1", "p_g2", "p_g3", "mse", "cost"])?;
    for row in studies::fig1_table() {
        let mut r: Vec<String> = row.candidate.iter().map(f64::to_string).collect();
        r.push(row.mse.to_string());
        r.push(row.cost.to_string());
        w.write_record(&r)?;
    }
    run.write("fig1.csv", w.into_inner()?)?;
    run.finish()?;
    Ok(())
}

pub fn study_sweep(global: &GlobalArgs, a: SweepArgs) -> Result<()> {
    let file = config_file(global)?;
    let seed = resolve_seed(a.seed, &file);
    let mut config = SweepConfig {
        points: a.points,
        label_seed: seed,
        ..SweepConfig::default()
    };
    if let Some(solver) = &file.solver {
        config.solver = solver.clone();
    }
    config.train = train_config(&file, studies::study_train_config(), &a.train, seed)?;
    let mut run = run_dir(global, "study-sweep", seed)?;
    run.set_config(&config)?;
    let case = fixtures::discontinuity_case();
    run.input_digest("case", case.digest());

    let study = studies::run_sweep(&config)?;
    let n = case.bus_count();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["p_d1".to_string()];
    for who in ["label", "mse", "decision"] {
        header.extend((1..=n).map(|i| format!("{who}_pg{i}")));
    }
    header.extend(["mse_balance".into(), "decision_balance".into()]);
    w.write_record(&header)?;
    for p in &study.points {
        let mut r = vec![p.p_d1.to_string()];
        for y in [&p.label, &p.mse_prediction, &p.decision_prediction] {
            r.extend(y[..n].iter().map(f64::to_string));
        }
        r.push(p.mse_balance.to_string());
        r.push(p.decision_balance.to_string());
        w.write_record(&r)?;
    }
    run.write("sweep.csv", w.into_inner()?)?;

    for (who, pick) in [
        ("label", (|p: &studies::SweepPoint| &p.label) as fn(&studies::SweepPoint) -> &Vec<f64>),
        ("mse", |p| &p.mse_prediction),
        ("decision", |p| &p.decision_prediction),
    ] {
        for i in 0..n {
            let path = run.artifact(&format!("{who}_pg{}.dat", i + 1));
            pipeline::write_plot_data(
                fs::File::create(path)?,
                &format!("p_d1 (p.u.), {who} p_g{} (p.u.)", i + 1),
                study.points.iter().map(|p| (p.p_d1, pick(p)[i])),
            )?;
        }
    }
    for (who, pick) in [
        ("mse", (|p: &studies::SweepPoint| p.mse_balance) as fn(&studies::SweepPoint) -> f64),
        ("decision", |p| p.decision_balance),
    ] {
        let path = run.artifact(&format!("{who}_balance.dat"));
        pipeline::write_plot_data(
            fs::File::create(path)?,
            &format!("p_d1 (p.u.), {who} largest balance violation (p.u.)"),
            study.points.iter().map(|p| (p.p_d1, pick(p))),
        )?;
    }
    run.write("mse_model.txt", surrogate::serialize(&study.mse_model))?;
    run.write("decision_model.txt", surrogate::serialize(&study.decision_model))?;

    let summary = serde_json::json!({
        "step": study.step,
        "max_label_jump": study.max_label_jump,
        "jump_ratio": study.jump_ratio(),
        "jump_between": [study.points[study.jump_index].p_d1, study.points[study.jump_index + 1].p_d1],
        "mse_max_balance": study.mse_max_balance,
        "decision_max_balance": study.decision_max_balance,
    });
    let json = serde_json::to_string_pretty(&summary)?;
    run.write("summary.json", format!("{json}\n"))?;
    println!("{json}");
    run.finish()?;
    Ok(())
}

pub fn study_compare(global: &GlobalArgs, a: CompareArgs) -> Result<()> {
    let file = config_file(global)?;
    let case = load_case(&a.case)?;
    if case.bus_count() > LONG_RUN_BUSES && !a.long {
        bail!(
            "case {} has {} buses; the comparison would take hours, pass --long to run it anyway",
            a.case,
            case.bus_count()
        );
    }
    let data_seed = resolve_seed(a.data_seed, &file);
    let config = CompareConfig {
        train: train_config(&file, studies::study_train_config(), &a.train, DEFAULT_SEED)?,
        seeds: a.seeds.clone(),
        train_frac: a.train_frac,
    };
    let solver = solver_config(&file, &a.solver);
    let mut run = run_dir(global, "study-compare", data_seed)?;
    run.set_config(&serde_json::json!({
        "case": a.case,
        "data": a.data,
        "count": a.count,
        "range_frac": a.range_frac,
        "data_seed": data_seed,
        "solver": solver,
        "compare": config,
    }))?;
    run.input_digest("case", case.digest());
    let data = match &a.data {
        Some(path) => load_dataset(&mut run, &case, path)?,
        None => {
            let data = pipeline::build_dataset(&case, a.count, a.range_frac, data_seed, &solver)?;
            data.save(&run.artifact("dataset.csv"))?;
            run.artifact("dataset.timing.csv");
            data
        }
    };

    let study = studies::run_compare(&case, &data, &config)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "seed",
        "loss",
        "mean_regret",
        "max_regret",
        "mean_sigma_f",
        "max_sigma_f",
        "mean_sigma_p",
        "max_sigma_p",
        "mean_sigma_q",
        "max_sigma_q",
        "max_v_excess",
    ])?;
    for r in &study.runs {
        for (loss, s) in [("decision", &r.decision), ("mse", &r.mse)] {
            w.write_record([
                r.seed.to_string(),
                loss.to_string(),
                s.mean_regret.to_string(),
                s.max_regret.to_string(),
                s.mean_sigma_f.to_string(),
                s.max_sigma_f.to_string(),
                s.mean_sigma_p.to_string(),
                s.max_sigma_p.to_string(),
                s.mean_sigma_q.to_string(),
                s.max_sigma_q.to_string(),
                s.max_v_excess.to_string(),
            ])?;
        }
    }
    run.write("compare.csv", w.into_inner()?)?;
    let json = serde_json::to_string_pretty(&study)?;
    run.write("compare.json", format!("{json}\n"))?;
    println!(
        "mean test regret over {} seeds: decision {:.6e} $/h, mse {:.6e} $/h",
        study.runs.len(),
        study.mean_regret_decision,
        study.mean_regret_mse
    );
    run.finish()?;
    Ok(())
}
