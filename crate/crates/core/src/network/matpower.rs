//! Reader for the subset of the MATPOWER case format used here.
//!
//! Columns read (1-based MATPOWER numbering):
//!
//! * `mpc.bus`: 1 id, 2 type (3 = slack), 3 Pd, 4 Qd, 10 baseKV, 12 Vmax, 13 Vmin
//! * `mpc.gen`: 1 bus, 4 Qmax, 5 Qmin, 8 status, 9 Pmax, 10 Pmin
//! * `mpc.branch`: 1 from, 2 to, 3 r, 4 x, 6 rateA, 11 status (optional)
//! * `mpc.gencost`: model 2 only, 4 n, then n coefficients (n ≤ 3)
//!
//! Dropped on import: bus shunts (Gs, Bs), line charging (b), tap ratios and
//! phase shifts, areas and zones. `rateA = 0` means unlimited. Out-of-service
//! generators and branches are skipped.

use std::collections::HashSet;

use super::{Branch, Bus, Generator, NetworkCase, NetworkError};

struct Row {
    line: usize,
    values: Vec<f64>,
}

enum Value {
    Scalar(f64),
    Matrix(Vec<Row>),
    Other,
}

struct Assignment {
    name: String,
    line: usize,
    value: Value,
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '\'' => in_str = !in_str,
            '%' | '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_numbers(chunk: &str, line: usize) -> Result<Vec<f64>, NetworkError> {
    chunk
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let t = t.trim();
            match t.to_ascii_lowercase().as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => t.parse::<f64>().map_err(|_| NetworkError::Parse {
                    line,
                    message: format!("not a number: `{t}`"),
                }),
            }
        })
        .collect()
}

fn tokenize(text: &str) -> Result<Vec<Assignment>, NetworkError> {
    let mut out = Vec::new();
    // (name, start line, rows, pending row, pending row start line)
    let mut matrix: Option<(String, usize, Vec<Row>, Vec<f64>, usize)> = None;

    for (ln0, raw) in text.lines().enumerate() {
        let line_no = ln0 + 1;
        let mut rest = strip_comment(raw).trim();

        if matrix.is_none() {
            if rest.is_empty() || rest.starts_with("function") {
                continue;
            }
            let Some(eq) = rest.find('=') else {
                continue;
            };
            let lhs = rest[..eq].trim();
            let rhs = rest[eq + 1..].trim();
            let Some(name) = lhs.strip_prefix("mpc.") else {
                continue;
            };
            let name = name.trim().to_string();
            if let Some(body) = rhs.strip_prefix('[') {
                matrix = Some((name, line_no, Vec::new(), Vec::new(), line_no));
                rest = body;
            } else {
                let scalar = rhs.trim_end_matches(';').trim();
                let value = if scalar.starts_with('\'') || scalar.starts_with('"') {
                    Value::Other
                } else {
                    match parse_numbers(scalar, line_no)?.as_slice() {
                        [v] => Value::Scalar(*v),
                        _ => {
                            return Err(NetworkError::Parse {
                                line: line_no,
                                message: format!("expected a scalar for mpc.{name}"),
                            })
                        }
                    }
                };
                out.push(Assignment {
                    name,
                    line: line_no,
                    value,
                });
                continue;
            }
        }

        let (name, start, mut rows, mut pending, mut pending_line) =
            matrix.take().expect("inside matrix");
        let (body, closed) = match rest.find(']') {
            Some(pos) => (&rest[..pos], true),
            None => (rest, false),
        };
        for (seg_idx, seg) in body.split(';').enumerate() {
            if seg_idx > 0 && !pending.is_empty() {
                rows.push(Row {
                    line: pending_line,
                    values: std::mem::take(&mut pending),
                });
            }
            let nums = parse_numbers(seg, line_no)?;
            if !nums.is_empty() {
                if pending.is_empty() {
                    pending_line = line_no;
                }
                pending.extend(nums);
            }
        }
        // a newline also terminates a row
        if !pending.is_empty() {
            rows.push(Row {
                line: pending_line,
                values: std::mem::take(&mut pending),
            });
        }
        if closed {
            out.push(Assignment {
                name,
                line: start,
                value: Value::Matrix(rows),
            });
        } else {
            matrix = Some((name, start, rows, pending, pending_line));
        }
    }

    if let Some((name, start, ..)) = matrix {
        return Err(NetworkError::Parse {
            line: start,
            message: format!("unterminated matrix mpc.{name}"),
        });
    }
    Ok(out)
}

fn take_matrix<'a>(
    assigns: &'a [Assignment],
    name: &str,
) -> Result<&'a [Row], NetworkError> {
    assigns
        .iter()
        .rev()
        .find(|a| a.name == name)
        .ok_or_else(|| NetworkError::Structure(format!("missing table mpc.{name}")))
        .and_then(|a| match &a.value {
            Value::Matrix(rows) => Ok(rows.as_slice()),
            _ => Err(NetworkError::Parse {
                line: a.line,
                message: format!("mpc.{name} must be a matrix"),
            }),
        })
}

fn need(row: &Row, width: usize, table: &str) -> Result<(), NetworkError> {
    if row.values.len() < width {
        return Err(NetworkError::Parse {
            line: row.line,
            message: format!(
                "{table} row has {} columns, need at least {width}",
                row.values.len()
            ),
        });
    }
    Ok(())
}

fn as_id(v: f64, row: &Row, what: &str) -> Result<usize, NetworkError> {
    if v.fract() != 0.0 || v < 0.0 || !v.is_finite() {
        return Err(NetworkError::Parse {
            line: row.line,
            message: format!("{what} must be a nonnegative integer, got {v}"),
        });
    }
    Ok(v as usize)
}

/// Parses a MATPOWER-style case into per-unit quantities on `mpc.baseMVA`.
pub fn parse_matpower_case(text: &str) -> Result<NetworkCase, NetworkError> {
    let assigns = tokenize(text)?;

    let base_mva = match assigns.iter().rev().find(|a| a.name == "baseMVA") {
        Some(Assignment {
            value: Value::Scalar(v),
            ..
        }) => *v,
        Some(a) => {
            return Err(NetworkError::Parse {
                line: a.line,
                message: "mpc.baseMVA must be a scalar".into(),
            })
        }
        None => return Err(NetworkError::Structure("missing mpc.baseMVA".into())),
    };
    if !(base_mva > 0.0 && base_mva.is_finite()) {
        return Err(NetworkError::Structure(format!(
            "baseMVA must be positive, got {base_mva}"
        )));
    }

    let bus_rows = take_matrix(&assigns, "bus")?;
    let gen_rows = take_matrix(&assigns, "gen")?;
    let branch_rows = take_matrix(&assigns, "branch")?;
    let cost_rows = take_matrix(&assigns, "gencost")?;

    if bus_rows.is_empty() {
        return Err(NetworkError::Structure("bus table is empty".into()));
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in bus_rows {
        need(row, 13, "bus")?;
        let v = &row.values;
        buses.push(Bus {
            id: as_id(v[0], row, "bus id")?,
            is_slack: v[1] == 3.0,
            p_load: v[2] / base_mva,
            q_load: v[3] / base_mva,
            base_kv: v[9],
            v_max: v[11],
            v_min: v[12],
        });
    }

    if cost_rows.len() < gen_rows.len() {
        return Err(NetworkError::Structure(format!(
            "gencost has {} rows for {} generators",
            cost_rows.len(),
            gen_rows.len()
        )));
    }

    let mut generators = Vec::with_capacity(gen_rows.len());
    let mut gen_buses = HashSet::new();
    for (row, cost) in gen_rows.iter().zip(cost_rows) {
        need(row, 10, "gen")?;
        let v = &row.values;
        let in_service = v[7] > 0.0;
        if !in_service {
            continue;
        }
        let bus = as_id(v[0], row, "generator bus")?;
        if !gen_buses.insert(bus) {
            return Err(NetworkError::Unsupported(format!(
                "more than one generator at bus {bus} (line {})",
                row.line
            )));
        }

        need(cost, 4, "gencost")?;
        let c = &cost.values;
        if c[0] != 2.0 {
            return Err(NetworkError::Unsupported(format!(
                "gencost model {} on line {} (only polynomial model 2)",
                c[0], cost.line
            )));
        }
        let n = as_id(c[3], cost, "gencost n")?;
        if n > 3 {
            return Err(NetworkError::Unsupported(format!(
                "gencost with {n} coefficients on line {} (at most quadratic)",
                cost.line
            )));
        }
        need(cost, 4 + n, "gencost")?;
        let mut coeffs = [0.0; 3]; // c2, c1, c0
        for (k, &val) in c[4..4 + n].iter().enumerate() {
            coeffs[3 - n + k] = val;
        }

        generators.push(Generator {
            bus,
            q_max: v[3] / base_mva,
            q_min: v[4] / base_mva,
            p_max: v[8] / base_mva,
            p_min: v[9] / base_mva,
            cost_c2: coeffs[0] * base_mva * base_mva,
            cost_c1: coeffs[1] * base_mva,
            cost_c0: coeffs[2],
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in branch_rows {
        need(row, 6, "branch")?;
        let v = &row.values;
        if v.len() > 10 && v[10] <= 0.0 {
            continue;
        }
        let (r, x) = (v[2], v[3]);
        let z2 = r * r + x * x;
        if z2 == 0.0 {
            return Err(NetworkError::Parse {
                line: row.line,
                message: "branch has zero series impedance".into(),
            });
        }
        let rate = v[5];
        branches.push(Branch {
            from_bus: as_id(v[0], row, "branch from bus")?,
            to_bus: as_id(v[1], row, "branch to bus")?,
            g: r / z2,
            b: -x / z2,
            s_max: if rate == 0.0 {
                f64::INFINITY
            } else {
                rate / base_mva
            },
        });
    }

    Ok(NetworkCase::new(base_mva, buses, branches, generators))
}
