//! Single-start augmented-Lagrangian solve.
//!
//! Variables are stacked as `z = (p_g, q_g, V, θ)`. Boxes hold generation and
//! voltage limits; angles are free except the slack angle, pinned at 0.
//! Nodal balance residuals are equality constraints; flow limits enter as
//! `|s|² / s_max² − 1 ≤ 0` for each direction. The inner problem is solved by
//! spectral projected gradient with a nonmonotone line search.

use nalgebra::{DMatrix, DVector};

use crate::network::NetworkCase;
use crate::powerflow::{self, BranchFlows, DispatchDecision, Loads};

use super::SolverConfig;

/// Multiplier estimates and penalty at the end of a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    /// One entry per balance equation: active rows then reactive rows.
    pub eq: Vec<f64>,
    /// One entry per limited flow direction.
    pub ineq: Vec<f64>,
    pub penalty: f64,
}

pub(crate) struct Problem<'a> {
    case: &'a NetworkCase,
    loads: &'a Loads,
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost_scale: f64,
    /// (flow slot, 1 / s_max²) for each limited direction
    limits: Vec<(usize, f64)>,
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(case: &'a NetworkCase, loads: &'a Loads, ignore_flow_limits: bool) -> Self {
        let n = case.bus_count();
        let t = case.tables();
        let mut lower = Vec::with_capacity(4 * n);
        let mut upper = Vec::with_capacity(4 * n);
        lower.extend(&t.p_min);
        lower.extend(&t.q_min);
        lower.extend(&t.v_min);
        upper.extend(&t.p_max);
        upper.extend(&t.q_max);
        upper.extend(&t.v_max);
        let slack = case.slack_index();
        for i in 0..n {
            let (lo, hi) = if Some(i) == slack {
                (0.0, 0.0)
            } else {
                (f64::NEG_INFINITY, f64::INFINITY)
            };
            lower.push(lo);
            upper.push(hi);
        }

        // marginal cost at full output of the most expensive unit
        let cost_scale = (0..n)
            .filter(|&i| t.has_generator[i])
            .map(|i| (2.0 * t.cost_c2[i] * t.p_max[i].abs() + t.cost_c1[i]).abs())
            .fold(0.0, f64::max);
        let cost_scale = if cost_scale > 0.0 { cost_scale } else { 1.0 };

        let limits = if ignore_flow_limits {
            Vec::new()
        } else {
            case.branches()
                .iter()
                .enumerate()
                .filter(|(_, br)| br.s_max.is_finite())
                .flat_map(|(k, br)| {
                    let w = 1.0 / (br.s_max * br.s_max);
                    [(2 * k, w), (2 * k + 1, w)]
                })
                .collect()
        };

        Problem {
            case,
            loads,
            n,
            lower,
            upper,
            cost_scale,
            limits,
        }
    }

    pub fn dim(&self) -> usize {
        4 * self.n
    }

    pub fn ineq_count(&self) -> usize {
        self.limits.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn project(&self, z: &mut [f64]) {
        for ((x, lo), hi) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*lo, *hi);
        }
    }

    fn split<'z>(&self, z: &'z [f64]) -> (&'z [f64], &'z [f64], &'z [f64], &'z [f64]) {
        let n = self.n;
        (&z[..n], &z[n..2 * n], &z[2 * n..3 * n], &z[3 * n..])
    }

    pub fn decision(&self, z: &[f64]) -> DispatchDecision {
        DispatchDecision::from_slice(z)
    }

    fn flows(&self, z: &[f64]) -> BranchFlows {
        let (_, _, v, th) = self.split(z);
        powerflow::branch_flows(self.case, v, th).expect("problem built from a validated case")
    }

    /// Raw constraint values: balance mismatches and scaled flow-limit margins.
    pub fn constraints(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>, BranchFlows) {
        let flows = self.flows(z);
        let d = self.decision(z);
        let (rp, rq) = powerflow::balance_mismatch(self.case, self.loads, &d, &flows)
            .expect("dimensions fixed by construction");
        let mut eq = rp;
        eq.extend(rq);
        let ineq = self
            .limits
            .iter()
            .map(|&(slot, w)| (flows.p_f[slot].powi(2) + flows.q_f[slot].powi(2)) * w - 1.0)
            .collect();
        (eq, ineq, flows)
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        powerflow::generation_cost(self.case, &z[..self.n])
    }

    /// Worst violation in the audit's units (p.u. mismatch, p.u. flow excess).
    pub fn infeasibility(&self, z: &[f64]) -> f64 {
        let d = self.decision(z);
        let report = powerflow::violation_report(self.case, self.loads, &d, !self.limits.is_empty())
            .expect("dimensions fixed by construction");
        report.max_sigma_p().max(report.max_sigma_q()).max(report.max_sigma_f())
    }

    /// Augmented Lagrangian value and, when `grad` is given, its gradient.
    pub fn augmented(
        &self,
        z: &[f64],
        state: &AugmentedState,
        grad: Option<&mut [f64]>,
    ) -> Evaluation {
        let n = self.n;
        let c = state.penalty;
        let (eq, ineq, flows) = self.constraints(z);

        let mut value = self.objective(z) / self.cost_scale;
        for (h, lam) in eq.iter().zip(&state.eq) {
            value += lam * h + 0.5 * c * h * h;
        }
        for (g, mu) in ineq.iter().zip(&state.ineq) {
            let s = (mu + c * g).max(0.0);
            value += (s * s - mu * mu) / (2.0 * c);
        }

        if let Some(grad) = grad {
            grad.iter_mut().for_each(|x| *x = 0.0);
            let (pg, _, v, th) = self.split(z);
            let dcost = powerflow::generation_cost_gradient(self.case, pg);
            for i in 0..n {
                grad[i] = dcost[i] / self.cost_scale;
            }
            let m2 = flows.p_f.len();
            let mut adj_p = vec![0.0; m2];
            let mut adj_q = vec![0.0; m2];
            for i in 0..n {
                let ap = state.eq[i] + c * eq[i];
                let aq = state.eq[n + i] + c * eq[n + i];
                grad[i] += ap;
                grad[n + i] += aq;
                for &(k, side) in self.case.incidence_by_index(i) {
                    let slot = BranchFlows::slot(k, side);
                    adj_p[slot] -= ap;
                    adj_q[slot] -= aq;
                }
            }
            for ((&(slot, w), g), mu) in self.limits.iter().zip(&ineq).zip(&state.ineq) {
                let s = (mu + c * g).max(0.0);
                if s > 0.0 {
                    adj_p[slot] += s * 2.0 * flows.p_f[slot] * w;
                    adj_q[slot] += s * 2.0 * flows.q_f[slot] * w;
                }
            }
            let (gv, gth) = grad[2 * n..].split_at_mut(n);
            powerflow::branch_flows_vjp(self.case, v, th, &adj_p, &adj_q, gv, gth)
                .expect("dimensions fixed by construction");
        }

        Evaluation { value, eq, ineq }
    }

    /// ‖P(z − ∇) − z‖∞, the first-order stationarity measure for the box.
    pub fn projected_gradient_norm(&self, z: &[f64], grad: &[f64]) -> f64 {
        (0..z.len())
            .map(|k| ((z[k] - grad[k]).clamp(self.lower[k], self.upper[k]) - z[k]).abs())
            .fold(0.0, f64::max)
    }

    /// Hessian of the augmented Lagrangian at `z`, where `eval` is the
    /// evaluation at the same point.
    pub fn hessian(&self, z: &[f64], state: &AugmentedState, eval: &Evaluation) -> DMatrix<f64> {
        let n = self.n;
        let dim = self.dim();
        let c = state.penalty;
        let (_, _, v, th) = self.split(z);
        let t = self.case.tables();
        let ends = self.case.resolved_ends().expect("problem built from a validated case");
        let flows = self.flows(z);

        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            if t.has_generator[i] {
                h[(i, i)] += 2.0 * t.cost_c2[i] / self.cost_scale;
            }
        }

        // local derivatives of every directed flow w.r.t. (V_i, V_j, θ_i, θ_j)
        let m2 = 2 * self.case.branch_count();
        let mut local = Vec::with_capacity(m2);
        for (k, br) in self.case.branches().iter().enumerate() {
            let (a, b) = ends[k];
            for (i, j) in [(a, b), (b, a)] {
                local.push(SlotDerivatives::new(br.g, br.b, v[i], v[j], th[i] - th[j], [
                    2 * n + i,
                    2 * n + j,
                    3 * n + i,
                    3 * n + j,
                ]));
            }
        }

        // second-order flow terms weighted by the effective multipliers
        let mut w_p = vec![0.0; m2];
        let mut w_q = vec![0.0; m2];
        let mut rows = DMatrix::<f64>::zeros(2 * n, dim);
        for i in 0..n {
            let ap = state.eq[i] + c * eval.eq[i];
            let aq = state.eq[n + i] + c * eval.eq[n + i];
            rows[(i, i)] = 1.0;
            rows[(n + i, n + i)] = 1.0;
            for &(k, side) in self.case.incidence_by_index(i) {
                let slot = BranchFlows::slot(k, side);
                w_p[slot] -= ap;
                w_q[slot] -= aq;
                let d = &local[slot];
                for r in 0..4 {
                    rows[(i, d.index[r])] -= d.grad_p[r];
                    rows[(n + i, d.index[r])] -= d.grad_q[r];
                }
            }
        }
        for ((&(slot, w), g), mu) in self.limits.iter().zip(&eval.ineq).zip(&state.ineq) {
            let s = (mu + c * g).max(0.0);
            if s <= 0.0 {
                continue;
            }
            let d = &local[slot];
            let (p, q) = (flows.p_f[slot], flows.q_f[slot]);
            w_p[slot] += s * 2.0 * w * p;
            w_q[slot] += s * 2.0 * w * q;
            let mut grad_g = [0.0; 4];
            for r in 0..4 {
                grad_g[r] = 2.0 * w * (p * d.grad_p[r] + q * d.grad_q[r]);
            }
            for r in 0..4 {
                for col in 0..4 {
                    h[(d.index[r], d.index[col])] += c * grad_g[r] * grad_g[col]
                        + s * 2.0 * w * (d.grad_p[r] * d.grad_p[col] + d.grad_q[r] * d.grad_q[col]);
                }
            }
        }
        for (slot, d) in local.iter().enumerate() {
            for r in 0..4 {
                for col in 0..4 {
                    h[(d.index[r], d.index[col])] += w_p[slot] * d.hess_p[r][col] + w_q[slot] * d.hess_q[r][col];
                }
            }
        }
        h += rows.tr_mul(&rows) * c;
        h
    }
}

/// First and second derivatives of one directed flow w.r.t. its four
/// coordinates in the stacked vector.
struct SlotDerivatives {
    index: [usize; 4],
    grad_p: [f64; 4],
    grad_q: [f64; 4],
    hess_p: [[f64; 4]; 4],
    hess_q: [[f64; 4]; 4],
}

impl SlotDerivatives {
    fn new(g: f64, b: f64, vi: f64, vj: f64, angle: f64, index: [usize; 4]) -> Self {
        let (s, c) = angle.sin_cos();
        let a = g * c + b * s;
        let bb = g * s - b * c;
        let grad_p = [2.0 * g * vi - vj * a, -vi * a, vi * vj * bb, -vi * vj * bb];
        let grad_q = [-2.0 * b * vi - vj * bb, -vi * bb, -vi * vj * a, vi * vj * a];
        // (V_i, V_j, θ) blocks, then θ = θ_i − θ_j spreads with signs (+, −)
        let expand = |vv: [[f64; 2]; 2], vt: [f64; 2], tt: f64| {
            let mut h = [[0.0; 4]; 4];
            for r in 0..2 {
                for col in 0..2 {
                    h[r][col] = vv[r][col];
                }
                h[r][2] = vt[r];
                h[r][3] = -vt[r];
                h[2][r] = vt[r];
                h[3][r] = -vt[r];
            }
            h[2][2] = tt;
            h[3][3] = tt;
            h[2][3] = -tt;
            h[3][2] = -tt;
            h
        };
        let hess_p = expand([[2.0 * g, -a], [-a, 0.0]], [vj * bb, vi * bb], vi * vj * a);
        let hess_q = expand([[-2.0 * b, -bb], [-bb, 0.0]], [-vj * a, -vi * a], vi * vj * bb);
        SlotDerivatives {
            index,
            grad_p,
            grad_q,
            hess_p,
            hess_q,
        }
    }
}

pub(crate) struct StartResult {
    pub z: Vec<f64>,
    pub state: AugmentedState,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub stationarity: f64,
}

const ARMIJO: f64 = 1e-4;
const ACTIVE_EPS: f64 = 1e-3;
const STALL_STEP: f64 = 1e-14;
/// Outer iterations at the penalty cap without progress before giving up.
const STALL_OUTER: usize = 3;

/// Minimises the augmented Lagrangian over the box from `z`, in place, by
/// projected Newton steps: coordinates at a bound with the gradient pushing
/// outward take a plain projected-gradient step, the rest a Newton step on
/// the reduced Hessian. Returns (iterations, final stationarity).
fn projected_newton(
    problem: &Problem,
    state: &AugmentedState,
    z: &mut Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> (usize, f64) {
    let dim = problem.dim();
    let (lo, hi) = (problem.lower(), problem.upper());
    problem.project(z);
    let mut g = vec![0.0; dim];
    let mut eval = problem.augmented(z, state, Some(&mut g));
    let mut pg_norm = problem.projected_gradient_norm(z, &g);
    let mut trial = vec![0.0; dim];
    let mut iter = 0;

    while iter < max_iter && pg_norm > tol {
        iter += 1;
        let eps = ACTIVE_EPS.min(pg_norm);
        let free: Vec<usize> = (0..dim)
            .filter(|&k| {
                let at_lo = z[k] <= lo[k] + eps && g[k] > 0.0;
                let at_hi = z[k] >= hi[k] - eps && g[k] < 0.0;
                lo[k] < hi[k] && !at_lo && !at_hi
            })
            .collect();

        let hess = problem.hessian(z, state, &eval);
        let mut d = vec![0.0; dim];
        for k in 0..dim {
            d[k] = -g[k] / hess[(k, k)].max(1.0);
        }
        if !free.is_empty() {
            let m = free.len();
            let reduced = DMatrix::from_fn(m, m, |r, c| hess[(free[r], free[c])]);
            let rhs = DVector::from_iterator(m, free.iter().map(|&k| -g[k]));
            let scale = (0..m).map(|r| reduced[(r, r)].abs()).fold(1.0, f64::max);
            let mut shift = 0.0;
            let step = loop {
                let shifted = &reduced + DMatrix::identity(m, m) * shift;
                if let Some(ch) = shifted.cholesky() {
                    break Some(ch.solve(&rhs));
                }
                shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
                if shift > 1e10 * scale {
                    break None;
                }
            };
            match step {
                Some(step) => {
                    for (r, &k) in free.iter().enumerate() {
                        d[k] = step[r];
                    }
                }
                None => log::debug!("reduced Hessian not positive definite; gradient step"),
            }
        }

        // Armijo along the projection arc
        let mut alpha = 1.0;
        let accepted = loop {
            for k in 0..dim {
                trial[k] = (z[k] + alpha * d[k]).clamp(lo[k], hi[k]);
            }
            let predicted: f64 = (0..dim).map(|k| g[k] * (trial[k] - z[k])).sum();
            let value = problem.augmented(&trial, state, None).value;
            if value.is_finite() && value <= eval.value + ARMIJO * predicted.min(0.0) {
                break true;
            }
            alpha *= 0.5;
            if alpha < 1e-16 {
                break false;
            }
        };
        if !accepted {
            break;
        }
        let moved = (0..dim).map(|k| (trial[k] - z[k]).abs()).fold(0.0, f64::max);
        std::mem::swap(z, &mut trial);
        if moved <= STALL_STEP {
            problem.augmented(z, state, Some(&mut g));
            pg_norm = problem.projected_gradient_norm(z, &g);
            break;
        }
        eval = problem.augmented(z, state, Some(&mut g));
        pg_norm = problem.projected_gradient_norm(z, &g);
    }
    (iter, pg_norm)
}

pub(crate) fn solve_from(problem: &Problem, mut z: Vec<f64>, config: &SolverConfig) -> StartResult {
    let mut state = AugmentedState {
        eq: vec![0.0; 2 * problem.n],
        ineq: vec![0.0; problem.ineq_count()],
        penalty: config.penalty_init,
    };
    let mut inner_tol = config.inner_tol_init;
    let mut iterations = 0;
    let mut prev_violation = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut stationarity = f64::INFINITY;
    let mut converged = false;
    let mut stalled = 0;

    for _ in 0..config.max_outer {
        let (it, pg) = projected_newton(problem, &state, &mut z, inner_tol, config.max_inner);
        iterations += it;
        stationarity = pg;
        residual = problem.infeasibility(&z);

        if residual <= config.feas_tol && stationarity <= config.opt_tol {
            converged = true;
            break;
        }

        let (eq, ineq, _) = problem.constraints(&z);
        let c = state.penalty;
        for (lam, h) in state.eq.iter_mut().zip(&eq) {
            *lam += c * h;
        }
        for (mu, g) in state.ineq.iter_mut().zip(&ineq) {
            *mu = (*mu + c * g).max(0.0);
        }
        let violation = eq
            .iter()
            .map(|h| h.abs())
            .chain(ineq.iter().zip(&state.ineq).map(|(g, mu)| g.max(-mu / c)))
            .fold(0.0, f64::max);
        if violation > 0.25 * prev_violation {
            if state.penalty >= config.penalty_max && violation > 0.9 * prev_violation {
                stalled += 1;
                if stalled >= STALL_OUTER {
                    break;
                }
            }
            state.penalty = (state.penalty * config.penalty_growth).min(config.penalty_max);
        } else {
            stalled = 0;
        }
        prev_violation = violation;
        inner_tol = (inner_tol * 0.1).max(config.opt_tol * 0.1);
    }

    StartResult {
        z,
        state,
        converged,
        iterations,
        residual,
        stationarity,
    }
}
