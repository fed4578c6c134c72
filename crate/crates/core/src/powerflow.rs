//! Physics kernel: directed branch flows, nodal balance residuals, bound
//! excesses and generation cost. Everything here is a pure function of its
//! inputs and carries no tolerances; callers decide what counts as feasible.
//!
//! Flow from bus `i` to bus `j` over a branch with series admittance `g + jb`:
//!
//! ```text
//! p_ij = g V_i² − V_i V_j (g cos θ_ij + b sin θ_ij)
//! q_ij = −b V_i² − V_i V_j (g sin θ_ij − b cos θ_ij)
//! ```
//!
//! with `θ_ij = θ_i − θ_j`. Both directions are stored since they differ
//! whenever `g ≠ 0`.

use thiserror::Error;

use crate::network::{NetworkCase, Orientation};

#[derive(Debug, Error, PartialEq)]
pub enum PowerflowError {
    #[error("{what}: expected length {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },
    #[error("branch {0} references a bus that is not in the case")]
    UnresolvedBranch(usize),
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), PowerflowError> {
    if expected != actual {
        return Err(PowerflowError::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Active and reactive demand per bus (p.u.).
#[derive(Debug, Clone, PartialEq)]
pub struct Loads {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Loads {
    pub fn nominal(case: &NetworkCase) -> Self {
        let (p, q) = case.nominal_loads();
        Loads { p, q }
    }

    /// Feature layout `(p_d, q_d)`.
    pub fn to_features(&self) -> Vec<f64> {
        self.p.iter().chain(&self.q).copied().collect()
    }

    pub fn from_features(x: &[f64]) -> Self {
        let n = x.len() / 2;
        Loads {
            p: x[..n].to_vec(),
            q: x[n..2 * n].to_vec(),
        }
    }
}

/// One candidate operating point, per bus in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchDecision {
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl DispatchDecision {
    pub fn new(
        p_g: Vec<f64>,
        q_g: Vec<f64>,
        v: Vec<f64>,
        theta: Vec<f64>,
    ) -> Result<Self, PowerflowError> {
        let n = p_g.len();
        check_len("q_g", n, q_g.len())?;
        check_len("v", n, v.len())?;
        check_len("theta", n, theta.len())?;
        let d = DispatchDecision { p_g, q_g, v, theta };
        if d.iter_all().any(|x| !x.is_finite()) {
            return Err(PowerflowError::NonFinite { what: "decision" });
        }
        Ok(d)
    }

    /// Flat start at zero generation.
    pub fn flat(n: usize) -> Self {
        DispatchDecision {
            p_g: vec![0.0; n],
            q_g: vec![0.0; n],
            v: vec![1.0; n],
            theta: vec![0.0; n],
        }
    }

    pub fn bus_count(&self) -> usize {
        self.p_g.len()
    }

    fn iter_all(&self) -> impl Iterator<Item = &f64> {
        self.p_g.iter().chain(&self.q_g).chain(&self.v).chain(&self.theta)
    }

    /// Stacked layout `(p_g, q_g, v, theta)`, length 4N.
    pub fn to_vec(&self) -> Vec<f64> {
        self.iter_all().copied().collect()
    }

    pub fn from_slice(stacked: &[f64]) -> Self {
        let n = stacked.len() / 4;
        DispatchDecision {
            p_g: stacked[..n].to_vec(),
            q_g: stacked[n..2 * n].to_vec(),
            v: stacked[2 * n..3 * n].to_vec(),
            theta: stacked[3 * n..4 * n].to_vec(),
        }
    }
}

/// Directed flows. Entry `2k` is branch `k` read from its `from_bus`,
/// entry `2k + 1` the same branch read from its `to_bus`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlows {
    pub p_f: Vec<f64>,
    pub q_f: Vec<f64>,
}

impl BranchFlows {
    pub fn slot(branch: usize, side: Orientation) -> usize {
        match side {
            Orientation::From => 2 * branch,
            Orientation::To => 2 * branch + 1,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.p_f.len() / 2
    }

    /// Apparent flow magnitude per slot.
    pub fn apparent(&self) -> Vec<f64> {
        self.p_f
            .iter()
            .zip(&self.q_f)
            .map(|(p, q)| p.hypot(*q))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport {
    pub sigma_f: Vec<f64>,
    pub sigma_p: Vec<f64>,
    pub sigma_q: Vec<f64>,
    pub v_excess: Vec<f64>,
    pub gen_excess: Vec<f64>,
}

fn vmax(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(0.0, f64::max)
}

impl ViolationReport {
    pub fn max_sigma_f(&self) -> f64 {
        vmax(&self.sigma_f)
    }
    pub fn max_sigma_p(&self) -> f64 {
        vmax(&self.sigma_p)
    }
    pub fn max_sigma_q(&self) -> f64 {
        vmax(&self.sigma_q)
    }
    pub fn max_v_excess(&self) -> f64 {
        vmax(&self.v_excess)
    }
    pub fn max_gen_excess(&self) -> f64 {
        vmax(&self.gen_excess)
    }
    /// Largest entry over all categories.
    pub fn max_entry(&self) -> f64 {
        self.max_sigma_f()
            .max(self.max_sigma_p())
            .max(self.max_sigma_q())
            .max(self.max_v_excess())
            .max(self.max_gen_excess())
    }
}

fn ends(case: &NetworkCase) -> Result<Vec<(usize, usize)>, PowerflowError> {
    case.resolved_ends().ok_or_else(|| {
        let k = (0..case.branch_count())
            .find(|&k| case.branch_ends(k).is_none())
            .unwrap_or(0);
        PowerflowError::UnresolvedBranch(k)
    })
}

#[inline]
fn directed_flow(g: f64, b: f64, vi: f64, vj: f64, dth: f64) -> (f64, f64) {
    let (s, c) = dth.sin_cos();
    let vv = vi * vj;
    (
        g * vi * vi - vv * (g * c + b * s),
        -b * vi * vi - vv * (g * s - b * c),
    )
}

pub fn branch_flows(
    case: &NetworkCase,
    v: &[f64],
    theta: &[f64],
) -> Result<BranchFlows, PowerflowError> {
    let n = case.bus_count();
    check_len("v", n, v.len())?;
    check_len("theta", n, theta.len())?;
    let ends = ends(case)?;
    let m = case.branch_count();
    let mut p_f = vec![0.0; 2 * m];
    let mut q_f = vec![0.0; 2 * m];
    for (k, (br, &(i, j))) in case.branches().iter().zip(&ends).enumerate() {
        let (p, q) = directed_flow(br.g, br.b, v[i], v[j], theta[i] - theta[j]);
        p_f[2 * k] = p;
        q_f[2 * k] = q;
        let (p, q) = directed_flow(br.g, br.b, v[j], v[i], theta[j] - theta[i]);
        p_f[2 * k + 1] = p;
        q_f[2 * k + 1] = q;
    }
    Ok(BranchFlows { p_f, q_f })
}

/// `max(|s| − s_max, 0)` per branch, using the worse of the two directions.
pub fn line_flow_violation(flows: &BranchFlows, case: &NetworkCase) -> Vec<f64> {
    assert_eq!(flows.branch_count(), case.branch_count(), "flows from another case");
    let s = flows.apparent();
    case.branches()
        .iter()
        .enumerate()
        .map(|(k, br)| (s[2 * k].max(s[2 * k + 1]) - br.s_max).max(0.0))
        .collect()
}

/// Signed nodal mismatch `g_i − d_i − Σ flow(i→·)` for active and reactive power.
pub fn balance_mismatch(
    case: &NetworkCase,
    loads: &Loads,
    decision: &DispatchDecision,
    flows: &BranchFlows,
) -> Result<(Vec<f64>, Vec<f64>), PowerflowError> {
    let n = case.bus_count();
    check_len("decision", n, decision.bus_count())?;
    check_len("p_d", n, loads.p.len())?;
    check_len("q_d", n, loads.q.len())?;
    check_len("flows", 2 * case.branch_count(), flows.p_f.len())?;
    let mut rp = vec![0.0; n];
    let mut rq = vec![0.0; n];
    for i in 0..n {
        let (mut sp, mut sq) = (0.0, 0.0);
        for &(k, side) in case.incidence_by_index(i) {
            let slot = BranchFlows::slot(k, side);
            sp += flows.p_f[slot];
            sq += flows.q_f[slot];
        }
        rp[i] = decision.p_g[i] - loads.p[i] - sp;
        rq[i] = decision.q_g[i] - loads.q[i] - sq;
    }
    Ok((rp, rq))
}

/// Absolute nodal balance residuals `(σ^p, σ^q)` against the given loads.
pub fn balance_residuals_with_loads(
    case: &NetworkCase,
    loads: &Loads,
    decision: &DispatchDecision,
    flows: &BranchFlows,
) -> Result<(Vec<f64>, Vec<f64>), PowerflowError> {
    let (rp, rq) = balance_mismatch(case, loads, decision, flows)?;
    Ok((
        rp.into_iter().map(f64::abs).collect(),
        rq.into_iter().map(f64::abs).collect(),
    ))
}

/// Absolute nodal balance residuals against the case's nominal loads.
pub fn balance_residuals(
    case: &NetworkCase,
    decision: &DispatchDecision,
    flows: &BranchFlows,
) -> Result<(Vec<f64>, Vec<f64>), PowerflowError> {
    balance_residuals_with_loads(case, &Loads::nominal(case), decision, flows)
}

/// Total generation cost in $/h.
pub fn generation_cost(case: &NetworkCase, p_g: &[f64]) -> f64 {
    let t = case.tables();
    assert_eq!(p_g.len(), case.bus_count(), "p_g length");
    p_g.iter()
        .enumerate()
        .filter(|(i, _)| t.has_generator[*i])
        .map(|(i, &p)| t.cost_c2[i] * p * p + t.cost_c1[i] * p + t.cost_c0[i])
        .sum()
}

/// d Cost / d p_g per bus.
pub fn generation_cost_gradient(case: &NetworkCase, p_g: &[f64]) -> Vec<f64> {
    let t = case.tables();
    p_g.iter()
        .enumerate()
        .map(|(i, &p)| {
            if t.has_generator[i] {
                2.0 * t.cost_c2[i] * p + t.cost_c1[i]
            } else {
                0.0
            }
        })
        .collect()
}

fn excess(x: f64, lo: f64, hi: f64) -> f64 {
    (x - hi).max(0.0) + (lo - x).max(0.0)
}

/// Per-bus `(v_excess, gen_excess)`; `gen_excess` adds the active and
/// reactive excesses at a bus.
pub fn bound_excess(case: &NetworkCase, decision: &DispatchDecision) -> (Vec<f64>, Vec<f64>) {
    let t = case.tables();
    let n = case.bus_count();
    assert_eq!(decision.bus_count(), n, "decision length");
    let v_ex = (0..n)
        .map(|i| excess(decision.v[i], t.v_min[i], t.v_max[i]))
        .collect();
    let g_ex = (0..n)
        .map(|i| {
            excess(decision.p_g[i], t.p_min[i], t.p_max[i])
                + excess(decision.q_g[i], t.q_min[i], t.q_max[i])
        })
        .collect();
    (v_ex, g_ex)
}

/// Full audit of a decision against given loads. With `include_flow_limits`
/// off, `sigma_f` is all zeros.
pub fn violation_report(
    case: &NetworkCase,
    loads: &Loads,
    decision: &DispatchDecision,
    include_flow_limits: bool,
) -> Result<ViolationReport, PowerflowError> {
    let flows = branch_flows(case, &decision.v, &decision.theta)?;
    let (sigma_p, sigma_q) = balance_residuals_with_loads(case, loads, decision, &flows)?;
    let sigma_f = if include_flow_limits {
        line_flow_violation(&flows, case)
    } else {
        vec![0.0; case.branch_count()]
    };
    let (v_excess, gen_excess) = bound_excess(case, decision);
    Ok(ViolationReport {
        sigma_f,
        sigma_p,
        sigma_q,
        v_excess,
        gen_excess,
    })
}

/// Pulls adjoints of the directed flows back onto voltage magnitudes and
/// angles, accumulating into `grad_v` and `grad_theta`.
pub fn branch_flows_vjp(
    case: &NetworkCase,
    v: &[f64],
    theta: &[f64],
    adj_p: &[f64],
    adj_q: &[f64],
    grad_v: &mut [f64],
    grad_theta: &mut [f64],
) -> Result<(), PowerflowError> {
    let n = case.bus_count();
    let m = case.branch_count();
    check_len("v", n, v.len())?;
    check_len("theta", n, theta.len())?;
    check_len("adj_p", 2 * m, adj_p.len())?;
    check_len("adj_q", 2 * m, adj_q.len())?;
    let ends = ends(case)?;
    for (k, (br, &(f, t))) in case.branches().iter().zip(&ends).enumerate() {
        for (slot, i, j) in [(2 * k, f, t), (2 * k + 1, t, f)] {
            let (ap, aq) = (adj_p[slot], adj_q[slot]);
            if ap == 0.0 && aq == 0.0 {
                continue;
            }
            let (g, b) = (br.g, br.b);
            let (vi, vj) = (v[i], v[j]);
            let (s, c) = (theta[i] - theta[j]).sin_cos();
            let gc_bs = g * c + b * s;
            let gs_bc = g * s - b * c;
            // ∂p/∂θ_i = V_i V_j (g sin − b cos), ∂q/∂θ_i = −V_i V_j (g cos + b sin)
            let dp_dvi = 2.0 * g * vi - vj * gc_bs;
            let dp_dvj = -vi * gc_bs;
            let dp_dth = vi * vj * gs_bc;
            let dq_dvi = -2.0 * b * vi - vj * gs_bc;
            let dq_dvj = -vi * gs_bc;
            let dq_dth = -vi * vj * gc_bs;
            grad_v[i] += ap * dp_dvi + aq * dq_dvi;
            grad_v[j] += ap * dp_dvj + aq * dq_dvj;
            let dth = ap * dp_dth + aq * dq_dth;
            grad_theta[i] += dth;
            grad_theta[j] -= dth;
        }
    }
    Ok(())
}
