//! Small reference systems used by tests, studies and the CLI.

use crate::network::{parse_matpower_case, Branch, Bus, Generator, NetworkCase};

/// IEEE 39-bus New England system in MATPOWER form (voltage box [0.93, 1.07]).
pub const CASE39_M: &str = include_str!("../data/case39.m");

pub fn case39() -> NetworkCase {
    parse_matpower_case(CASE39_M).expect("bundled case39 parses")
}

fn bus(id: usize, slack: bool, v: (f64, f64), load: (f64, f64)) -> Bus {
    Bus {
        id,
        v_min: v.0,
        v_max: v.1,
        base_kv: 345.0,
        is_slack: slack,
        p_load: load.0,
        q_load: load.1,
    }
}

fn series(from: usize, to: usize, r: f64, x: f64, s_max: f64) -> Branch {
    let z2 = r * r + x * x;
    Branch {
        from_bus: from,
        to_bus: to,
        g: r / z2,
        b: -x / z2,
        s_max,
    }
}

/// Lossless triangle with unit costs (1, 2, 3) $/h per p.u. and unit active
/// loads; the cheapest dispatch is (3, 0, 0).
pub fn fig1_case() -> NetworkCase {
    let v = (0.9, 1.1);
    let buses = vec![
        bus(1, true, v, (1.0, 0.0)),
        bus(2, false, v, (1.0, 0.0)),
        bus(3, false, v, (1.0, 0.0)),
    ];
    let branches = vec![
        series(1, 2, 0.0, 0.1, 10.0),
        series(1, 3, 0.0, 0.1, 10.0),
        series(2, 3, 0.0, 0.1, 10.0),
    ];
    let generators = (1..=3)
        .map(|i| Generator {
            bus: i,
            p_min: 0.0,
            p_max: 4.0,
            q_min: -4.0,
            q_max: 4.0,
            cost_c2: 0.0,
            cost_c1: i as f64,
            cost_c0: 0.0,
        })
        .collect();
    NetworkCase::new(100.0, buses, branches, generators)
}

/// One generator feeding one load over a lossy line.
pub fn two_bus_case() -> NetworkCase {
    let v = (0.95, 1.05);
    let buses = vec![bus(1, true, v, (0.0, 0.0)), bus(2, false, v, (1.0, 0.3))];
    let branches = vec![series(1, 2, 0.01, 0.1, 5.0)];
    let generators = vec![Generator {
        bus: 1,
        p_min: 0.0,
        p_max: 3.0,
        q_min: -3.0,
        q_max: 3.0,
        cost_c2: 1.0,
        cost_c1: 10.0,
        cost_c0: 0.0,
    }];
    NetworkCase::new(100.0, buses, branches, generators)
}

/// Two-generator, three-bus system with capacitive loads and several local
/// optima. G1 (bus 1, 100.5 $/MWh) and G2 (bus 2, 499.8 $/MWh) have tight
/// reactive ranges, so some operating points sit at the lower voltage bound
/// and others near the upper one. Which optimum a local solver lands on
/// changes as the load at bus 1 moves. Voltage box [0.8, 1.2] p.u., no flow
/// limits.
pub fn discontinuity_case() -> NetworkCase {
    let v = (0.8, 1.2);
    let buses = vec![
        bus(1, true, v, (1.0, -1.4)),
        bus(2, false, v, (0.15, -1.2)),
        bus(3, false, v, (1.65, -2.3)),
    ];
    let branches = vec![
        series(1, 2, 0.12, 0.71, f64::INFINITY),
        series(1, 3, 0.09, 0.11, f64::INFINITY),
        series(2, 3, 0.39, 0.86, f64::INFINITY),
    ];
    let generators = vec![
        Generator {
            bus: 1,
            p_min: 0.0,
            p_max: 1.95,
            q_min: -0.85,
            q_max: 1.0,
            cost_c2: 0.0,
            cost_c1: 100.5 * 100.0,
            cost_c0: 0.0,
        },
        Generator {
            bus: 2,
            p_min: 0.0,
            p_max: 3.0,
            q_min: -0.75,
            q_max: 0.6,
            cost_c2: 0.0,
            cost_c1: 499.8 * 100.0,
            cost_c0: 0.0,
        },
    ];
    NetworkCase::new(100.0, buses, branches, generators)
}

/// Sweep range of the bus-1 active load used with [`discontinuity_case`].
pub const DISCONTINUITY_SWEEP: (f64, f64) = (0.0, 2.0);
