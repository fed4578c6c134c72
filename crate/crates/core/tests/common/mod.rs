#![allow(dead_code)]

use opflab::network::{Branch, Bus, Generator, NetworkCase};
use num_traits::Float;
use opflab::surrogate::{Activation, Batch, BaseLoss, MultiplierRows, SurrogateModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

pub fn bus(id: usize, slack: bool, v: (f64, f64), load: (f64, f64)) -> Bus {
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

pub fn series(from: usize, to: usize, r: f64, x: f64, s_max: f64) -> Branch {
    let z2 = r * r + x * x;
    Branch {
        from_bus: from,
        to_bus: to,
        g: r / z2,
        b: -x / z2,
        s_max,
    }
}

pub fn generator(bus: usize, p: (f64, f64), q: (f64, f64), c2: f64, c1: f64) -> Generator {
    Generator {
        bus,
        p_min: p.0,
        p_max: p.1,
        q_min: q.0,
        q_max: q.1,
        cost_c2: c2,
        cost_c1: c1,
        cost_c0: 0.0,
    }
}

/// Lossy triangle with tight line ratings, so random predictions violate
/// every constraint family.
pub fn lossy_triangle() -> NetworkCase {
    let v = (0.9, 1.1);
    NetworkCase::new(
        100.0,
        vec![
            bus(1, true, v, (0.8, 0.2)),
            bus(2, false, v, (1.0, 0.3)),
            bus(3, false, v, (0.6, -0.1)),
        ],
        vec![
            series(1, 2, 0.02, 0.12, 0.25),
            series(1, 3, 0.03, 0.15, 0.25),
            series(2, 3, 0.02, 0.10, 0.25),
        ],
        vec![
            generator(1, (0.0, 2.0), (-1.0, 1.0), 0.5, 1.0),
            generator(2, (0.0, 2.0), (-1.0, 1.0), 0.8, 2.0),
            generator(3, (0.1, 1.5), (-0.5, 0.8), 1.1, 3.0),
        ],
    )
}

/// Owned rows behind a [`Batch`].
pub struct BatchData {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub mu_p: Vec<Vec<f64>>,
    pub mu_q: Vec<Vec<f64>>,
}

impl BatchData {
    /// `rows` load samples around the nominal point, labels drawn inside the
    /// case's bounds and strictly positive multipliers.
    pub fn random(case: &NetworkCase, rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = case.tables();
        let (n, m) = (case.bus_count(), case.branch_count());
        let mut data = BatchData {
            inputs: Vec::new(),
            labels: Vec::new(),
            lambda: Vec::new(),
            mu_p: Vec::new(),
            mu_q: Vec::new(),
        };
        for _ in 0..rows {
            let mut x: Vec<f64> = t.p_load.iter().map(|p| p * rng.gen_range(0.7..1.3)).collect();
            x.extend(t.q_load.iter().map(|q| q * rng.gen_range(0.7..1.3)));
            data.inputs.push(x);
            let mut y = Vec::with_capacity(4 * n);
            for (lo, hi) in [(&t.p_min, &t.p_max), (&t.q_min, &t.q_max), (&t.v_min, &t.v_max)] {
                y.extend((0..n).map(|i| lo[i] + (hi[i] - lo[i]) * rng.gen::<f64>()));
            }
            y.extend((0..n).map(|_| rng.gen_range(-0.3..0.3)));
            data.labels.push(y);
            data.lambda.push((0..m).map(|_| rng.gen_range(0.2..2.0)).collect());
            data.mu_p.push((0..n).map(|_| rng.gen_range(0.2..2.0)).collect());
            data.mu_q.push((0..n).map(|_| rng.gen_range(0.2..2.0)).collect());
        }
        data
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            inputs: self.inputs.iter().map(Vec::as_slice).collect(),
            labels: Some(self.labels.iter().map(Vec::as_slice).collect()),
            multipliers: (0..self.inputs.len())
                .map(|r| MultiplierRows {
                    lambda: &self.lambda[r],
                    mu_p: &self.mu_p[r],
                    mu_q: &self.mu_q[r],
                })
                .collect(),
        }
    }
}

/// Independent re-implementation of the Lagrangian loss over any float
/// type: forward pass, sigmoid scaling, branch flows, balance mismatches and
/// penalties, all written out from the defining formulas.
pub fn reference_loss<T: Float>(
    model: &SurrogateModel,
    params: &[T],
    data: &BatchData,
    case: &NetworkCase,
    base: BaseLoss,
) -> T {
    let c = |x: f64| T::from(x).unwrap();
    let n = case.bus_count();
    let t = case.tables();
    let (shift, scale) = model.input_scaling();
    let (th_lo, th_hi) = model.angle_box();
    let lower: Vec<f64> = [&t.p_min[..], &t.q_min, &t.v_min, &vec![th_lo; n]].concat();
    let upper: Vec<f64> = [&t.p_max[..], &t.q_max, &t.v_max, &vec![th_hi; n]].concat();
    let dims = model.layer_dims();
    let rows = data.inputs.len();
    let inv = T::one() / c(rows as f64);

    let mut total = T::zero();
    for r in 0..rows {
        let x = &data.inputs[r];
        let mut a: Vec<T> = (0..2 * n).map(|k| (c(x[k]) - c(shift[k])) / c(scale[k])).collect();
        let mut at = 0;
        for l in 0..dims.len() - 1 {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let b_at = at + d_in * d_out;
            a = (0..d_out)
                .map(|o| {
                    let mut z = params[b_at + o];
                    for i in 0..d_in {
                        z = z + params[at + o * d_in + i] * a[i];
                    }
                    if l == dims.len() - 2 {
                        T::one() / (T::one() + (-z).exp())
                    } else {
                        match model.activation() {
                            Activation::Relu => z.max(T::zero()),
                            Activation::Tanh => z.tanh(),
                        }
                    }
                })
                .collect();
            at = b_at + d_out;
        }
        let mut y: Vec<T> = (0..4 * n).map(|k| a[k] * (c(upper[k]) - c(lower[k])) + c(lower[k])).collect();
        if let Some(s) = case.slack_index() {
            y[3 * n + s] = T::zero();
        }
        let (p_g, q_g, v, th) = (&y[..n], &y[n..2 * n], &y[2 * n..3 * n], &y[3 * n..]);

        match base {
            BaseLoss::Decision => {
                for i in 0..n {
                    total = total
                        + inv * (c(t.cost_c2[i]) * p_g[i] * p_g[i] + c(t.cost_c1[i]) * p_g[i] + c(t.cost_c0[i]));
                }
            }
            BaseLoss::Mse(layout) => {
                for k in 0..layout.compared_len(n) {
                    let e = y[k] - c(data.labels[r][k]);
                    total = total + inv * e * e;
                }
            }
        }

        let mut out_p = vec![T::zero(); n];
        let mut out_q = vec![T::zero(); n];
        for (k, br) in case.branches().iter().enumerate() {
            let (f, to) = case.branch_ends(k).unwrap();
            let (g, b) = (c(br.g), c(br.b));
            let mut worst = T::neg_infinity();
            for (i, j) in [(f, to), (to, f)] {
                let d = th[i] - th[j];
                let p = g * v[i] * v[i] - v[i] * v[j] * (g * d.cos() + b * d.sin());
                let q = -b * v[i] * v[i] - v[i] * v[j] * (g * d.sin() - b * d.cos());
                out_p[i] = out_p[i] + p;
                out_q[i] = out_q[i] + q;
                worst = worst.max((p * p + q * q).sqrt());
            }
            let excess = worst - c(br.s_max);
            if excess > T::zero() {
                total = total + c(data.lambda[r][k]) * excess;
            }
        }
        for i in 0..n {
            let rp = p_g[i] - c(x[i]) - out_p[i];
            let rq = q_g[i] - c(x[n + i]) - out_q[i];
            total = total + c(data.mu_p[r][i]) * rp.abs() + c(data.mu_q[r][i]) * rq.abs();
        }
    }
    total
}

/// Central differences of [`reference_loss`], one parameter at a time,
/// evaluated in double-double arithmetic so that rounding in the loss stays
/// far below the step.
pub fn finite_difference(model: &SurrogateModel, data: &BatchData, case: &NetworkCase, base: BaseLoss, h: f64) -> Vec<f64> {
    let mut w: Vec<TwoFloat> = model.parameters().iter().map(|&p| TwoFloat::from(p)).collect();
    let step = TwoFloat::from(h);
    (0..w.len())
        .map(|k| {
            let w0 = w[k];
            w[k] = w0 + step;
            let up = reference_loss(model, &w, data, case, base);
            w[k] = w0 - step;
            let down = reference_loss(model, &w, data, case, base);
            w[k] = w0;
            ((up - down) / (step + step)).hi()
        })
        .collect()
}

/// Moves every bias off zero so no rectifier input sits exactly on its kink.
pub fn jitter_biases(model: &mut SurrogateModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = model.layer_dims().to_vec();
    let params = model.parameters_mut();
    let mut at = 0;
    for w in dims.windows(2) {
        at += w[0] * w[1];
        params[at..at + w[1]].iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        at += w[1];
    }
}

/// Largest `|analytic − fd| / (|fd| + 1e-8)` over all parameters.
pub fn worst_relative_error(analytic: &[f64], fd: &[f64]) -> (usize, f64) {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / (f.abs() + 1e-8))
        .enumerate()
        .fold((0, 0.0), |best, (k, e)| if e > best.1 { (k, e) } else { best })
}
