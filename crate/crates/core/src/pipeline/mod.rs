//! Datasets, splits and end-to-end evaluation.

mod dataset;
pub mod studies;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{timing_path, Dataset, Distribution, Sample, SamplingSpec, DATASET_MAGIC, DATASET_VERSION};

use crate::labeler::{self, LabelerError, SolverConfig};
use crate::network::NetworkCase;
use crate::powerflow::{Loads, PowerflowError};
use crate::surrogate::{SurrogateError, SurrogateModel};
use crate::training::{self, EvaluationSummary, SampleEvaluation, TrainError};

/// Default half-width of the uniform load band, as a fraction of nominal.
pub const DEFAULT_RANGE_FRAC: f64 = 0.2;

/// Inference timing repeats at least this many predictions.
pub const MIN_TIMING_REPS: usize = 100;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("range fraction must lie in [0, 1), got {0}")]
    InvalidRange(f64),
    #[error("sample count must be at least 1")]
    ZeroCount,
    #[error("train fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("the dataset is empty")]
    EmptyDataset,
    #[error("no sample could be labelled ({dropped} dropped)")]
    NoLabels { dropped: usize },
    #[error("sample {0} has no label")]
    Unlabeled(usize),
    #[error("dataset was built for case {found}, not {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("dataset file, line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid study setting: {0}")]
    Config(String),
    #[error(transparent)]
    Labeler(#[from] LabelerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Powerflow(#[from] PowerflowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `count` load vectors, each bus's `p_d` and `q_d` drawn independently and
/// uniformly within `±range_frac` of nominal.
pub fn sample_loads(
    case: &NetworkCase,
    count: usize,
    range_frac: f64,
    seed: u64,
) -> Result<Vec<Loads>, PipelineError> {
    if count == 0 {
        return Err(PipelineError::ZeroCount);
    }
    if !(0.0..1.0).contains(&range_frac) {
        return Err(PipelineError::InvalidRange(range_frac));
    }
    let nominal = Loads::nominal(case);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |x: f64| {
        if range_frac == 0.0 {
            x
        } else {
            x * rng.gen_range(1.0 - range_frac..=1.0 + range_frac)
        }
    };
    Ok((0..count)
        .map(|_| Loads {
            p: nominal.p.iter().map(|&p| draw(p)).collect(),
            q: nominal.q.iter().map(|&q| draw(q)).collect(),
        })
        .collect())
}

/// Solver seed for sample `index` of a dataset drawn with `seed`.
fn label_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// Labels every load vector with the local solver. Unconverged or
/// capacity-infeasible samples are dropped and counted; results keep the
/// input order whatever the thread count.
pub fn generate_dataset(
    case: &NetworkCase,
    loads: &[Loads],
    sampling: SamplingSpec,
    solver: &SolverConfig,
) -> Result<Dataset, PipelineError> {
    if loads.is_empty() {
        return Err(PipelineError::ZeroCount);
    }
    let include_flow_limits = !solver.ignore_flow_limits;
    let results: Vec<Option<Sample>> = loads
        .par_iter()
        .enumerate()
        .map(|(i, l)| -> Result<Option<Sample>, PipelineError> {
            let out = match labeler::solve_opf_local(case, l, solver, label_seed(sampling.seed, i)) {
                Ok(out) => out,
                Err(LabelerError::InsufficientCapacity { .. }) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            if !out.converged {
                return Ok(None);
            }
            let check = labeler::verify_feasibility(case, l, &out.decision, solver.feas_tol, include_flow_limits)?;
            if !check.passed {
                log::warn!("sample {i}: converged label failed the feasibility audit, dropped");
                return Ok(None);
            }
            Ok(Some(Sample {
                features: l.to_features(),
                label: Some(out.decision.to_vec()),
                objective: Some(out.objective),
                iterations: out.iterations,
                solve_time: out.wall_time,
            }))
        })
        .collect::<Result<_, _>>()?;
    let dropped = results.iter().filter(|s| s.is_none()).count();
    let samples: Vec<Sample> = results.into_iter().flatten().collect();
    if dropped > 0 {
        log::warn!("{dropped} of {} samples dropped (solver failure)", loads.len());
    }
    if samples.is_empty() {
        return Err(PipelineError::NoLabels { dropped });
    }
    Ok(Dataset {
        case_digest: case.digest(),
        sampling,
        solver: solver.clone(),
        samples,
        dropped,
    })
}

/// Samples and labels a uniform dataset in one go.
pub fn build_dataset(
    case: &NetworkCase,
    count: usize,
    range_frac: f64,
    seed: u64,
    solver: &SolverConfig,
) -> Result<Dataset, PipelineError> {
    let loads = sample_loads(case, count, range_frac, seed)?;
    let sampling = SamplingSpec {
        distribution: Distribution::Uniform,
        count,
        range_frac,
        seed,
    };
    generate_dataset(case, &loads, sampling, solver)
}

/// Shuffles with `seed` and puts the first `floor(train_frac · n)` samples
/// in the training split, the rest in the test split.
pub fn split_dataset(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), PipelineError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(PipelineError::InvalidFraction(train_frac));
    }
    if data.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_frac * data.len() as f64).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].clone()).collect();
    Ok((data.with_samples(pick(&order[..cut])), data.with_samples(pick(&order[cut..]))))
}

pub fn check_digest(case: &NetworkCase, data: &Dataset) -> Result<(), PipelineError> {
    let expected = case.digest();
    if data.case_digest != expected {
        return Err(PipelineError::DigestMismatch {
            expected,
            found: data.case_digest.clone(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    /// Seconds per single-sample prediction.
    pub inference_median: f64,
    pub inference_mean: f64,
    /// Seconds per solve, from the dataset's recorded solver times.
    pub solver_median: f64,
    pub solver_mean: f64,
    pub speedup_median: f64,
    pub speedup_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<SampleEvaluation>,
    pub summary: EvaluationSummary,
    pub timing: TimingSummary,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall time of `reps` single-sample predictions, cycling through `inputs`.
pub fn time_inference(model: &SurrogateModel, inputs: &[&[f64]], reps: usize) -> Result<Vec<f64>, PipelineError> {
    let mut times = Vec::with_capacity(reps);
    for r in 0..reps {
        let x = inputs[r % inputs.len()];
        let start = Instant::now();
        let d = model.predict(x)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(d);
    }
    Ok(times)
}

/// Regret, violations and timing of `model` on a labelled test split.
pub fn evaluate_model(case: &NetworkCase, model: &SurrogateModel, test: &Dataset) -> Result<EvaluationReport, PipelineError> {
    if test.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    check_digest(case, test)?;
    let mut baselines = Vec::with_capacity(test.len());
    for (i, s) in test.samples.iter().enumerate() {
        baselines.push(s.objective.ok_or(PipelineError::Unlabeled(i))?);
    }
    let inputs: Vec<&[f64]> = test.samples.iter().map(|s| s.features.as_slice()).collect();
    let rows = training::evaluate_samples(case, model, &inputs, &baselines)?;
    let summary = training::summarize_evaluations(&rows);

    let inference = time_inference(model, &inputs, MIN_TIMING_REPS.max(inputs.len()))?;
    let solver: Vec<f64> = test.samples.iter().map(|s| s.solve_time).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (im, sm) = (median(&inference), median(&solver));
    let (ia, sa) = (mean(&inference), mean(&solver));
    Ok(EvaluationReport {
        rows,
        summary,
        timing: TimingSummary {
            inference_median: im,
            inference_mean: ia,
            solver_median: sm,
            solver_mean: sa,
            speedup_median: sm / im,
            speedup_mean: sa / ia,
        },
    })
}

/// Per-sample CSV: `sample_id,regret,max_sigma_f,max_sigma_p,max_sigma_q,max_v_excess`.
pub fn write_report_csv<W: Write>(rows: &[SampleEvaluation], out: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "regret", "max_sigma_f", "max_sigma_p", "max_sigma_q", "max_v_excess"])?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.regret.to_string(),
            r.max_sigma_f.to_string(),
            r.max_sigma_p.to_string(),
            r.max_sigma_q.to_string(),
            r.max_v_excess.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(bin centre, count)` over `[min, max]` of the values.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![(lo, values.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + (b as f64 + 0.5) * width, c))
        .collect()
}

/// Two-column, whitespace-separated plot data with `#` comment lines.
pub fn write_plot_data<W: Write, X: std::fmt::Display, Y: std::fmt::Display>(
    mut out: W,
    comment: &str,
    points: impl IntoIterator<Item = (X, Y)>,
) -> std::io::Result<()> {
    for line in comment.lines() {
        writeln!(out, "# {line}")?;
    }
    for (x, y) in points {
        writeln!(out, "{x} {y}")?;
    }
    Ok(())
}

/// Regret histogram and violation bars for a report.
pub fn write_report_plots(report: &EvaluationReport, dir: &std::path::Path, prefix: &str) -> Result<(), PipelineError> {
    let regrets: Vec<f64> = report.rows.iter().map(|r| r.regret).collect();
    write_plot_data(
        std::fs::File::create(dir.join(format!("{prefix}regret_hist.dat")))?,
        "regret bin centre ($/h), sample count",
        histogram(&regrets, 20),
    )?;
    let s = &report.summary;
    write_plot_data(
        std::fs::File::create(dir.join(format!("{prefix}violations.dat")))?,
        "metric, value (p.u.)",
        [
            ("mean_sigma_f", s.mean_sigma_f),
            ("max_sigma_f", s.max_sigma_f),
            ("mean_sigma_p", s.mean_sigma_p),
            ("max_sigma_p", s.max_sigma_p),
            ("mean_sigma_q", s.mean_sigma_q),
            ("max_sigma_q", s.max_sigma_q),
            ("max_v_excess", s.max_v_excess),
        ],
    )?;
    Ok(())
}
