//! Native case format.
//!
//! Plain text, one record per line, `#` starts a comment. A `base_mva` line
//! is followed by three sections, each opened by a `[name]` marker and a
//! header line naming the columns in order:
//!
//! ```text
//! opflab-case 1
//! base_mva 100
//! [buses]
//! id v_min v_max base_kv is_slack p_load q_load
//! 1 0.93 1.07 345 1 0.092 0.046
//! [generators]
//! bus p_min p_max q_min q_max cost_c2 cost_c1 cost_c0
//! [branches]
//! from_bus to_bus g b s_max
//! ```
//!
//! Every value is per-unit (costs in $/h against p.u. power). Floats are
//! written in shortest round-trip form, so write → parse is lossless;
//! `inf` marks an unlimited branch.

use std::fmt::Write;

use super::{Branch, Bus, Generator, NetworkCase, NetworkError};

const MAGIC: &str = "opflab-case 1";
const BUS_HEADER: &str = "id v_min v_max base_kv is_slack p_load q_load";
const GEN_HEADER: &str = "bus p_min p_max q_min q_max cost_c2 cost_c1 cost_c0";
const BRANCH_HEADER: &str = "from_bus to_bus g b s_max";

pub fn write_native_case(case: &NetworkCase) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "base_mva {:?}", case.base_mva());
    let _ = writeln!(out, "[buses]\n{BUS_HEADER}");
    for b in case.buses() {
        let _ = writeln!(
            out,
            "{} {:?} {:?} {:?} {} {:?} {:?}",
            b.id,
            b.v_min,
            b.v_max,
            b.base_kv,
            u8::from(b.is_slack),
            b.p_load,
            b.q_load
        );
    }
    let _ = writeln!(out, "[generators]\n{GEN_HEADER}");
    for g in case.generators() {
        let _ = writeln!(
            out,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            g.bus, g.p_min, g.p_max, g.q_min, g.q_max, g.cost_c2, g.cost_c1, g.cost_c0
        );
    }
    let _ = writeln!(out, "[branches]\n{BRANCH_HEADER}");
    for br in case.branches() {
        let _ = writeln!(
            out,
            "{} {} {:?} {:?} {:?}",
            br.from_bus, br.to_bus, br.g, br.b, br.s_max
        );
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Buses,
    Generators,
    Branches,
}

fn fields<const N: usize>(line: &str, line_no: usize) -> Result<[&str; N], NetworkError> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    parts.try_into().map_err(|p: Vec<&str>| NetworkError::Parse {
        line: line_no,
        message: format!("expected {N} fields, found {}", p.len()),
    })
}

fn num(tok: &str, line_no: usize) -> Result<f64, NetworkError> {
    tok.parse::<f64>().map_err(|_| NetworkError::Parse {
        line: line_no,
        message: format!("not a number: `{tok}`"),
    })
}

fn id(tok: &str, line_no: usize) -> Result<usize, NetworkError> {
    tok.parse::<usize>().map_err(|_| NetworkError::Parse {
        line: line_no,
        message: format!("not a bus id: `{tok}`"),
    })
}

pub fn parse_native_case(text: &str) -> Result<NetworkCase, NetworkError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((n, other)) => {
            return Err(NetworkError::Parse {
                line: n,
                message: format!("expected `{MAGIC}`, found `{other}`"),
            })
        }
        None => return Err(NetworkError::Structure("empty case text".into())),
    }

    let mut base_mva = None;
    let mut section = Section::None;
    let mut expect_header: Option<&str> = None;
    let mut seen = [false; 3];
    let (mut buses, mut generators, mut branches) = (Vec::new(), Vec::new(), Vec::new());

    for (n, line) in lines {
        if let Some(header) = expect_header.take() {
            if line != header {
                return Err(NetworkError::Parse {
                    line: n,
                    message: format!("expected header `{header}`"),
                });
            }
            continue;
        }
        match line {
            "[buses]" => {
                section = Section::Buses;
                seen[0] = true;
                expect_header = Some(BUS_HEADER);
                continue;
            }
            "[generators]" => {
                section = Section::Generators;
                seen[1] = true;
                expect_header = Some(GEN_HEADER);
                continue;
            }
            "[branches]" => {
                section = Section::Branches;
                seen[2] = true;
                expect_header = Some(BRANCH_HEADER);
                continue;
            }
            _ => {}
        }
        match section {
            Section::None => {
                let [key, value] = fields::<2>(line, n)?;
                if key != "base_mva" {
                    return Err(NetworkError::Parse {
                        line: n,
                        message: format!("unexpected key `{key}`"),
                    });
                }
                base_mva = Some(num(value, n)?);
            }
            Section::Buses => {
                let f = fields::<7>(line, n)?;
                let is_slack = match f[4] {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(NetworkError::Parse {
                            line: n,
                            message: format!("is_slack must be 0 or 1, got `{other}`"),
                        })
                    }
                };
                buses.push(Bus {
                    id: id(f[0], n)?,
                    v_min: num(f[1], n)?,
                    v_max: num(f[2], n)?,
                    base_kv: num(f[3], n)?,
                    is_slack,
                    p_load: num(f[5], n)?,
                    q_load: num(f[6], n)?,
                });
            }
            Section::Generators => {
                let f = fields::<8>(line, n)?;
                generators.push(Generator {
                    bus: id(f[0], n)?,
                    p_min: num(f[1], n)?,
                    p_max: num(f[2], n)?,
                    q_min: num(f[3], n)?,
                    q_max: num(f[4], n)?,
                    cost_c2: num(f[5], n)?,
                    cost_c1: num(f[6], n)?,
                    cost_c0: num(f[7], n)?,
                });
            }
            Section::Branches => {
                let f = fields::<5>(line, n)?;
                branches.push(Branch {
                    from_bus: id(f[0], n)?,
                    to_bus: id(f[1], n)?,
                    g: num(f[2], n)?,
                    b: num(f[3], n)?,
                    s_max: num(f[4], n)?,
                });
            }
        }
    }

    let base_mva = base_mva.ok_or_else(|| NetworkError::Structure("missing base_mva".into()))?;
    for (present, name) in seen.iter().zip(["buses", "generators", "branches"]) {
        if !present {
            return Err(NetworkError::Structure(format!("missing [{name}] section")));
        }
    }
    if buses.is_empty() {
        return Err(NetworkError::Structure("bus table is empty".into()));
    }
    Ok(NetworkCase::new(base_mva, buses, branches, generators))
}
