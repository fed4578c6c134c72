//! Labelled load samples and their on-disk form.
//!
//! A dataset file is CSV preceded by `#` header lines:
//!
//! ```text
//! # opflab-dataset 1
//! # {"case_digest":"…","sampling":{…},"solver":{…},"dropped":0}
//! pd_1,…,pd_N,qd_1,…,qd_N,pg_1,…,qg_1,…,v_1,…,th_1,…,objective,iterations
//! ```
//!
//! Unlabelled rows leave the label, objective and iteration fields empty.
//! Solver wall times are not reproducible, so they go to a sidecar file
//! (`<stem>.timing.csv`, columns `sample_id,solve_time`) and the dataset file
//! itself depends only on its inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::labeler::SolverConfig;
use crate::powerflow::{DispatchDecision, Loads};

pub const DATASET_MAGIC: &str = "opflab-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One load condition and, when labelled, the solver's answer for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(p_d, q_d)` in p.u., length 2N.
    pub features: Vec<f64>,
    /// `(p_g, q_g, V, θ)`, length 4N.
    pub label: Option<Vec<f64>>,
    /// Label cost in $/h.
    pub objective: Option<f64>,
    pub iterations: usize,
    /// Solver wall time in seconds.
    pub solve_time: f64,
}

impl Sample {
    pub fn unlabeled(loads: &Loads) -> Self {
        Sample {
            features: loads.to_features(),
            label: None,
            objective: None,
            iterations: 0,
            solve_time: 0.0,
        }
    }

    pub fn loads(&self) -> Loads {
        Loads::from_features(&self.features)
    }

    pub fn label_decision(&self) -> Option<DispatchDecision> {
        self.label.as_deref().map(DispatchDecision::from_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Each load independently uniform on `[(1 − r)·nominal, (1 + r)·nominal]`.
    #[default]
    Uniform,
    /// Loads given explicitly, e.g. a sweep grid.
    Grid,
}

/// How the load samples were drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub distribution: Distribution,
    pub count: usize,
    pub range_frac: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    case_digest: String,
    sampling: SamplingSpec,
    solver: SolverConfig,
    dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub case_digest: String,
    pub sampling: SamplingSpec,
    pub solver: SolverConfig,
    pub samples: Vec<Sample>,
    /// Samples dropped because the solver failed on them.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bus_count(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len() / 2)
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            case_digest: self.case_digest.clone(),
            sampling: self.sampling,
            solver: self.solver.clone(),
            samples,
            dropped: self.dropped,
        }
    }

    /// The dataset file's text.
    pub fn to_csv(&self) -> Result<String, PipelineError> {
        let n = self.bus_count();
        let manifest = Manifest {
            case_digest: self.case_digest.clone(),
            sampling: self.sampling,
            solver: self.solver.clone(),
            dropped: self.dropped,
        };
        let mut out = format!(
            "# {DATASET_MAGIC} {DATASET_VERSION}\n# {}\n",
            serde_json::to_string(&manifest)?
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header(n))?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
            match (&s.label, s.objective) {
                (Some(y), Some(obj)) => {
                    row.extend(y.iter().map(|v| v.to_string()));
                    row.push(obj.to_string());
                    row.push(s.iterations.to_string());
                }
                _ => row.extend(std::iter::repeat_n(String::new(), 4 * n + 2)),
            }
            w.write_record(&row)?;
        }
        let body = w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
        Ok(out)
    }

    /// Parses a dataset file; solve times are left at 0.
    pub fn from_csv(text: &str) -> Result<Dataset, PipelineError> {
        let format = |line: usize, message: String| PipelineError::Format { line, message };
        let mut lines = text.splitn(3, '\n');
        let magic = lines.next().unwrap_or("");
        let expected = format!("# {DATASET_MAGIC} {DATASET_VERSION}");
        if magic.trim_end() != expected {
            return Err(format(1, format!("expected '{expected}'")));
        }
        let manifest_line = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| format(2, "missing manifest line".into()))?;
        let manifest: Manifest =
            serde_json::from_str(manifest_line).map_err(|e| format(2, format!("manifest: {e}")))?;
        let body = lines.next().unwrap_or("");

        let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let columns = reader.headers()?.len();
        if columns < 2 || (columns - 2) % 6 != 0 {
            return Err(format(3, format!("{columns} columns do not fit any bus count")));
        }
        let n = (columns - 2) / 6;
        if reader.headers()?.iter().ne(header(n).iter().map(String::as_str)) {
            return Err(format(3, "unexpected column names".into()));
        }
        let mut samples = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let line = i + 4;
            let num = |s: &str| s.parse::<f64>().map_err(|_| format(line, format!("bad number '{s}'")));
            let fields: Vec<&str> = record.iter().collect();
            let features = fields[..2 * n].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
            let rest = &fields[2 * n..];
            let sample = if rest.iter().all(|s| s.is_empty()) {
                Sample {
                    features,
                    label: None,
                    objective: None,
                    iterations: 0,
                    solve_time: 0.0,
                }
            } else {
                let label = rest[..4 * n].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
                let objective = num(rest[4 * n])?;
                let iterations = rest[4 * n + 1]
                    .parse()
                    .map_err(|_| format(line, format!("bad iteration count '{}'", rest[4 * n + 1])))?;
                Sample {
                    features,
                    label: Some(label),
                    objective: Some(objective),
                    iterations,
                    solve_time: 0.0,
                }
            };
            samples.push(sample);
        }
        Ok(Dataset {
            case_digest: manifest.case_digest,
            sampling: manifest.sampling,
            solver: manifest.solver,
            samples,
            dropped: manifest.dropped,
        })
    }

    /// Writes the dataset file and its timing sidecar.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_csv()?)?;
        let mut w = csv::Writer::from_path(timing_path(path))?;
        w.write_record(["sample_id", "solve_time"])?;
        for (i, s) in self.samples.iter().enumerate() {
            w.write_record([i.to_string(), s.solve_time.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset file, plus solve times when the sidecar exists.
    pub fn load(path: &Path) -> Result<Dataset, PipelineError> {
        let text = fs::read_to_string(path)?;
        let mut data = Dataset::from_csv(&text)?;
        let timing = timing_path(path);
        if timing.exists() {
            let mut reader = csv::Reader::from_path(&timing)?;
            for record in reader.records() {
                let record = record?;
                let bad = || PipelineError::Format {
                    line: 0,
                    message: format!("{}: bad row {:?}", timing.display(), record),
                };
                let id: usize = record.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                let t: f64 = record.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                data.samples.get_mut(id).ok_or_else(bad)?.solve_time = t;
            }
        }
        Ok(data)
    }
}

/// `data.csv` → `data.timing.csv`.
pub fn timing_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.timing.csv"))
}

fn header(n: usize) -> Vec<String> {
    let mut h = Vec::with_capacity(6 * n + 2);
    for prefix in ["pd", "qd", "pg", "qg", "v", "th"] {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    h.push("objective".into());
    h.push("iterations".into());
    h
}
