//! Newton–Raphson power flow on the bus admittance matrix.
//!
//! Every non-slack bus is a PQ bus with a scheduled net injection; the slack
//! bus holds its voltage magnitude and a zero angle. Injections are computed
//! as `S = V ∘ conj(Y V)` from the complex series admittances, independently
//! of the per-branch flow kernel, which makes this usable as a cross-check.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::network::NetworkCase;

#[derive(Debug, Error, PartialEq)]
pub enum NewtonError {
    #[error("case has no slack bus")]
    NoSlack,
    #[error("injection vectors must have one entry per bus")]
    Dimension,
    #[error("singular Jacobian at iteration {0}")]
    Singular(usize),
    #[error("no convergence after {iterations} iterations (mismatch {mismatch:e})")]
    NoConvergence { iterations: usize, mismatch: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    /// Net injection `p_g − p_d` at every bus, slack included.
    pub p_net: Vec<f64>,
    pub q_net: Vec<f64>,
    pub iterations: usize,
}

fn admittance(case: &NetworkCase) -> DMatrix<Complex64> {
    let n = case.bus_count();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for (k, br) in case.branches().iter().enumerate() {
        let (f, t) = case.branch_ends(k).expect("resolved branch");
        let ys = Complex64::new(br.g, br.b);
        y[(f, f)] += ys;
        y[(t, t)] += ys;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    y
}

fn injections(y: &DMatrix<Complex64>, v: &DVector<Complex64>) -> DVector<Complex64> {
    let current = y * v;
    v.component_mul(&current.map(|c| c.conj()))
}

/// Solves for voltages given `p_net`, `q_net` at the non-slack buses (slack
/// entries are ignored) and the slack voltage magnitude.
pub fn newton_power_flow(
    case: &NetworkCase,
    slack_voltage: f64,
    p_net: &[f64],
    q_net: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<NewtonSolution, NewtonError> {
    let n = case.bus_count();
    if p_net.len() != n || q_net.len() != n {
        return Err(NewtonError::Dimension);
    }
    let slack = case.slack_index().ok_or(NewtonError::NoSlack)?;
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let y = admittance(case);

    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    vm[slack] = slack_voltage;

    let phasors = |vm: &[f64], va: &[f64]| {
        DVector::from_iterator(n, (0..n).map(|i| Complex64::from_polar(vm[i], va[i])))
    };

    let mut iterations = 0;
    loop {
        let v = phasors(&vm, &va);
        let s = injections(&y, &v);
        let mut mismatch = DVector::<f64>::zeros(2 * m);
        for (r, &i) in pq.iter().enumerate() {
            mismatch[r] = s[i].re - p_net[i];
            mismatch[m + r] = s[i].im - q_net[i];
        }
        let worst = mismatch.amax();
        if worst <= tol {
            return Ok(NewtonSolution {
                p_net: s.iter().map(|c| c.re).collect(),
                q_net: s.iter().map(|c| c.im).collect(),
                v: vm,
                theta: va,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(NewtonError::NoConvergence {
                iterations,
                mismatch: worst,
            });
        }
        iterations += 1;

        // dS/dVa = j diag(V) conj(diag(I) − Y diag(V))
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let current = &y * &v;
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pq.iter().enumerate() {
                let mut d_va = -v[i] * (y[(i, k)] * v[k]).conj();
                let unit_k = v[k] / vm[k];
                let mut d_vm = v[i] * (y[(i, k)] * unit_k).conj();
                if i == k {
                    d_va += v[i] * current[i].conj();
                    d_vm += current[i].conj() * unit_k;
                }
                let d_va = Complex64::i() * d_va;
                jac[(r, c)] = d_va.re;
                jac[(r, m + c)] = d_vm.re;
                jac[(m + r, c)] = d_va.im;
                jac[(m + r, m + c)] = d_vm.im;
            }
        }
        let step = jac
            .lu()
            .solve(&mismatch)
            .ok_or(NewtonError::Singular(iterations))?;
        for (r, &i) in pq.iter().enumerate() {
            va[i] -= step[r];
            vm[i] -= step[m + r];
        }
    }
}
