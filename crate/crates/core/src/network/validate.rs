use std::collections::HashSet;
use std::fmt;

use super::NetworkCase;

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationFailure {
    NoBuses,
    DuplicateBusId(usize),
    NonFinite { what: String },
    NonPositiveVmin { bus: usize, v_min: f64 },
    InvertedVoltageBounds { bus: usize, v_min: f64, v_max: f64 },
    SlackCount(usize),
    NoGenerators,
    GeneratorAtUnknownBus { generator: usize, bus: usize },
    MultipleGeneratorsAtBus(usize),
    InvertedActiveLimits { generator: usize, bus: usize },
    InvertedReactiveLimits { generator: usize, bus: usize },
    NegativeQuadraticCost { generator: usize, bus: usize },
    SelfLoop { branch: usize, bus: usize },
    NonPositiveLimit { branch: usize, s_max: f64 },
    DanglingBranch { branch: usize, bus: usize },
    Disconnected { components: usize },
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationFailure::*;
        match self {
            NoBuses => write!(f, "case has no buses"),
            DuplicateBusId(id) => write!(f, "bus id {id} appears more than once"),
            NonFinite { what } => write!(f, "{what} is not finite"),
            NonPositiveVmin { bus, v_min } => write!(f, "bus {bus}: v_min {v_min} must be positive"),
            InvertedVoltageBounds { bus, v_min, v_max } => {
                write!(f, "bus {bus}: v_min {v_min} exceeds v_max {v_max}")
            }
            SlackCount(n) => write!(f, "expected exactly one slack bus, found {n}"),
            NoGenerators => write!(f, "case has no generators"),
            GeneratorAtUnknownBus { generator, bus } => {
                write!(f, "generator {generator}: bus {bus} does not exist")
            }
            MultipleGeneratorsAtBus(bus) => write!(f, "bus {bus} has more than one generator"),
            InvertedActiveLimits { generator, bus } => {
                write!(f, "generator {generator} at bus {bus}: p_min exceeds p_max")
            }
            InvertedReactiveLimits { generator, bus } => {
                write!(f, "generator {generator} at bus {bus}: q_min exceeds q_max")
            }
            NegativeQuadraticCost { generator, bus } => {
                write!(f, "generator {generator} at bus {bus}: negative quadratic cost")
            }
            SelfLoop { branch, bus } => write!(f, "branch {branch}: both ends at bus {bus}"),
            NonPositiveLimit { branch, s_max } => {
                write!(f, "branch {branch}: s_max {s_max} must be positive")
            }
            DanglingBranch { branch, bus } => {
                write!(f, "branch {branch}: bus {bus} does not exist")
            }
            Disconnected { components } => {
                write!(f, "network has {components} disconnected components")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.failures.is_empty() {
            return f.write_str("ok");
        }
        for (i, failure) in self.failures.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{failure}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a case. Branch and generator numbers
/// in failures are zero-based positions in the case's lists.
pub fn validate_case(case: &NetworkCase) -> ValidationReport {
    use ValidationFailure::*;
    let mut failures = Vec::new();

    if !(case.base_mva().is_finite() && case.base_mva() > 0.0) {
        failures.push(NonFinite {
            what: "base_mva".into(),
        });
    }
    if case.buses().is_empty() {
        failures.push(NoBuses);
    }

    let mut ids = HashSet::new();
    for bus in case.buses() {
        if !ids.insert(bus.id) {
            failures.push(DuplicateBusId(bus.id));
        }
        for (name, v) in [
            ("v_min", bus.v_min),
            ("v_max", bus.v_max),
            ("p_load", bus.p_load),
            ("q_load", bus.q_load),
        ] {
            if !v.is_finite() {
                failures.push(NonFinite {
                    what: format!("bus {} {name}", bus.id),
                });
            }
        }
        if bus.v_min <= 0.0 {
            failures.push(NonPositiveVmin {
                bus: bus.id,
                v_min: bus.v_min,
            });
        }
        if bus.v_min > bus.v_max {
            failures.push(InvertedVoltageBounds {
                bus: bus.id,
                v_min: bus.v_min,
                v_max: bus.v_max,
            });
        }
    }
    let slack = case.buses().iter().filter(|b| b.is_slack).count();
    if slack != 1 {
        failures.push(SlackCount(slack));
    }

    if case.generators().is_empty() {
        failures.push(NoGenerators);
    }
    let mut gen_buses = HashSet::new();
    for (k, g) in case.generators().iter().enumerate() {
        if case.bus_index(g.bus).is_none() {
            failures.push(GeneratorAtUnknownBus {
                generator: k,
                bus: g.bus,
            });
        }
        if !gen_buses.insert(g.bus) {
            failures.push(MultipleGeneratorsAtBus(g.bus));
        }
        for (name, v) in [
            ("p_min", g.p_min),
            ("p_max", g.p_max),
            ("q_min", g.q_min),
            ("q_max", g.q_max),
            ("cost_c2", g.cost_c2),
            ("cost_c1", g.cost_c1),
            ("cost_c0", g.cost_c0),
        ] {
            if !v.is_finite() {
                failures.push(NonFinite {
                    what: format!("generator {k} {name}"),
                });
            }
        }
        if g.p_min > g.p_max {
            failures.push(InvertedActiveLimits {
                generator: k,
                bus: g.bus,
            });
        }
        if g.q_min > g.q_max {
            failures.push(InvertedReactiveLimits {
                generator: k,
                bus: g.bus,
            });
        }
        if g.cost_c2 < 0.0 {
            failures.push(NegativeQuadraticCost {
                generator: k,
                bus: g.bus,
            });
        }
    }

    for (k, br) in case.branches().iter().enumerate() {
        if br.from_bus == br.to_bus {
            failures.push(SelfLoop {
                branch: k,
                bus: br.from_bus,
            });
        }
        if !(br.s_max > 0.0) {
            failures.push(NonPositiveLimit {
                branch: k,
                s_max: br.s_max,
            });
        }
        if !(br.g.is_finite() && br.b.is_finite()) {
            failures.push(NonFinite {
                what: format!("branch {k} admittance"),
            });
        }
        for end in [br.from_bus, br.to_bus] {
            if case.bus_index(end).is_none() {
                failures.push(DanglingBranch { branch: k, bus: end });
            }
        }
    }

    let components = count_components(case);
    if components > 1 {
        failures.push(Disconnected { components });
    }

    ValidationReport { failures }
}

fn count_components(case: &NetworkCase) -> usize {
    let n = case.bus_count();
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &(k, _) in case.incidence_by_index(i) {
                let (f, t) = case.branch_ends(k).expect("incidence holds resolved branches");
                let j = if f == i { t } else { f };
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    components
}
