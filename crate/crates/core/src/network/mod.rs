//! Grid data model.
//!
//! A [`NetworkCase`] is an immutable description of buses, series branches and
//! generators, stored in per-unit on the case's MVA base. Bus order is the
//! canonical order for every per-bus vector used elsewhere in the crate
//! (loads, generation, voltage magnitudes and angles).
//!
//! Cases are read from a MATPOWER `.m` subset ([`parse_matpower_case`]) or from
//! the native sectioned text format ([`parse_native_case`] / [`write_native_case`]).

mod matpower;
mod native;
mod validate;

use std::collections::HashMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use matpower::parse_matpower_case;
pub use native::{parse_native_case, write_native_case};
pub use validate::{validate_case, ValidationFailure, ValidationReport};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed case: {0}")]
    Structure(String),
    #[error("unsupported case feature: {0}")]
    Unsupported(String),
    #[error("unknown bus id {0}")]
    UnknownBus(usize),
    #[error("invalid case: {0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub base_kv: f64,
    pub is_slack: bool,
    pub p_load: f64,
    pub q_load: f64,
}

/// A dispatchable unit. Cost is `c2 p² + c1 p + c0` in $/h with `p` in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost_c2: f64,
    pub cost_c1: f64,
    pub cost_c0: f64,
}

/// Series branch with admittance `g + jb`; `s_max` is an apparent-power limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub g: f64,
    pub b: f64,
    pub s_max: f64,
}

/// Which end of a branch a bus sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// The bus is the branch's `from_bus`; its outgoing flow is `from → to`.
    From,
    /// The bus is the branch's `to_bus`; its outgoing flow is `to → from`.
    To,
}

/// Per-bus bound and cost tables. Buses without a generator carry zero
/// generation limits and zero cost.
#[derive(Debug, Clone, PartialEq)]
pub struct BusTables {
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub cost_c2: Vec<f64>,
    pub cost_c1: Vec<f64>,
    pub cost_c0: Vec<f64>,
    pub has_generator: Vec<bool>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NetworkCase {
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    generators: Vec<Generator>,
    index: HashMap<usize, usize>,
    ends: Vec<Option<(usize, usize)>>,
    incidence: Vec<Vec<(usize, Orientation)>>,
    tables: BusTables,
}

impl PartialEq for NetworkCase {
    fn eq(&self, other: &Self) -> bool {
        self.base_mva == other.base_mva
            && self.buses == other.buses
            && self.branches == other.branches
            && self.generators == other.generators
    }
}

impl NetworkCase {
    /// Assembles a case without validating it; see [`validate_case`].
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
    ) -> Self {
        let mut index = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            index.entry(bus.id).or_insert(i);
        }

        let ends: Vec<Option<(usize, usize)>> = branches
            .iter()
            .map(|br| match (index.get(&br.from_bus), index.get(&br.to_bus)) {
                (Some(&f), Some(&t)) => Some((f, t)),
                _ => None,
            })
            .collect();

        let mut incidence = vec![Vec::new(); buses.len()];
        for (k, end) in ends.iter().enumerate() {
            if let Some((f, t)) = *end {
                incidence[f].push((k, Orientation::From));
                incidence[t].push((k, Orientation::To));
            }
        }

        let n = buses.len();
        let mut tables = BusTables {
            v_min: buses.iter().map(|b| b.v_min).collect(),
            v_max: buses.iter().map(|b| b.v_max).collect(),
            p_min: vec![0.0; n],
            p_max: vec![0.0; n],
            q_min: vec![0.0; n],
            q_max: vec![0.0; n],
            cost_c2: vec![0.0; n],
            cost_c1: vec![0.0; n],
            cost_c0: vec![0.0; n],
            has_generator: vec![false; n],
            p_load: buses.iter().map(|b| b.p_load).collect(),
            q_load: buses.iter().map(|b| b.q_load).collect(),
        };
        for gen in &generators {
            // duplicates are reported by validate_case; the first one wins here
            if let Some(&i) = index.get(&gen.bus) {
                if tables.has_generator[i] {
                    continue;
                }
                tables.has_generator[i] = true;
                tables.p_min[i] = gen.p_min;
                tables.p_max[i] = gen.p_max;
                tables.q_min[i] = gen.q_min;
                tables.q_max[i] = gen.q_max;
                tables.cost_c2[i] = gen.cost_c2;
                tables.cost_c1[i] = gen.cost_c1;
                tables.cost_c0[i] = gen.cost_c0;
            }
        }

        NetworkCase {
            base_mva,
            buses,
            branches,
            generators,
            index,
            ends,
            incidence,
            tables,
        }
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn tables(&self) -> &BusTables {
        &self.tables
    }

    /// Canonical index of the bus with the given id.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Canonical `(from, to)` bus indices of branch `k`, if both endpoints exist.
    pub fn branch_ends(&self, k: usize) -> Option<(usize, usize)> {
        self.ends.get(k).copied().flatten()
    }

    pub(crate) fn resolved_ends(&self) -> Option<Vec<(usize, usize)>> {
        self.ends.iter().copied().collect()
    }

    pub(crate) fn incidence_by_index(&self, i: usize) -> &[(usize, Orientation)] {
        &self.incidence[i]
    }

    /// Canonical index of the first slack bus.
    pub fn slack_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.is_slack)
    }

    /// Nominal loads as the `(p_d, q_d)` pair of per-bus vectors.
    pub fn nominal_loads(&self) -> (Vec<f64>, Vec<f64>) {
        (self.tables.p_load.clone(), self.tables.q_load.clone())
    }

    /// Hex SHA-256 of the native serialization; identifies the case in
    /// model and dataset files.
    pub fn digest(&self) -> String {
        let text = write_native_case(self);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Every branch touching `bus` (by id), with the side the bus is on.
pub fn incident_branches(
    case: &NetworkCase,
    bus: usize,
) -> Result<Vec<(usize, Orientation)>, NetworkError> {
    let i = case.bus_index(bus).ok_or(NetworkError::UnknownBus(bus))?;
    Ok(case.incidence[i].clone())
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Orientation::From => f.write_str("from"),
            Orientation::To => f.write_str("to"),
        }
    }
}
