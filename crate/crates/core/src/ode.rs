//! Adaptive Dormand-Prince (RK45) integration for the probability-flow ODE.
//!
//! Classic DOPRI5 pair with FSAL, a mixed absolute/relative error norm and
//! a clamped step controller. The right-hand side may fail (shape errors,
//! non-finite state), so it returns `Result`.

use crate::error::{AuditError, Result};
use crate::scalar::Scalar;

/// Integration controls.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-5, atol: 1e-5, max_steps: 100_000 }
    }
}

// Dormand-Prince tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// 5th-order weights (row 7 of A; FSAL).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Embedded 4th-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;

/// Integrate `dy/dt = f(t, y)` from `t0` to `t1` (either direction),
/// returning the terminal state.
pub fn integrate<F, Rhs>(rhs: Rhs, t0: F, t1: F, y0: Vec<F>, opts: &OdeOptions) -> Result<Vec<F>>
where
    F: Scalar,
    Rhs: Fn(F, &[F]) -> Result<Vec<F>>,
{
    let dim = y0.len();
    let span = t1 - t0;
    if span == F::zero() {
        return Ok(y0);
    }
    let direction = if span > F::zero() { F::one() } else { -F::one() };

    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(t, &y)?;
    let mut h = span / F::lit(100.0);
    let mut steps = 0usize;

    while (t1 - t) * direction > F::zero() {
        if steps >= opts.max_steps {
            return Err(AuditError::Convergence(format!(
                "no convergence within {} steps (t = {t}, target {t1})",
                opts.max_steps
            )));
        }
        steps += 1;

        // do not overshoot the endpoint
        if (t + h - t1) * direction > F::zero() {
            h = t1 - t;
        }

        let mut k = vec![k1.clone()];
        for stage in 1..7 {
            let mut y_stage = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = F::lit(A[stage][j]);
                if a != F::zero() {
                    for (ys, &kv) in y_stage.iter_mut().zip(kj.iter()) {
                        *ys = *ys + h * a * kv;
                    }
                }
            }
            k.push(rhs(t + F::lit(C[stage]) * h, &y_stage)?);
        }

        let mut y5 = y.clone();
        let mut y4 = y.clone();
        for (j, kj) in k.iter().enumerate() {
            let (b5, b4) = (F::lit(B5[j]), F::lit(B4[j]));
            for i in 0..dim {
                if b5 != F::zero() {
                    y5[i] = y5[i] + h * b5 * kj[i];
                }
                if b4 != F::zero() {
                    y4[i] = y4[i] + h * b4 * kj[i];
                }
            }
        }

        if y5.iter().any(|v| !v.is_finite()) {
            return Err(AuditError::Divergence {
                step: steps,
                detail: format!("non-finite ODE state at t = {t}"),
            });
        }

        // scaled RMS error of the embedded pair
        let mut err_sq = F::zero();
        for i in 0..dim {
            let scale = F::lit(opts.atol) + F::lit(opts.rtol) * y[i].abs().max(y5[i].abs());
            let e = (y5[i] - y4[i]) / scale;
            err_sq = err_sq + e * e;
        }
        let err = (err_sq / F::from_usize(dim).expect("dim fits scalar")).sqrt();

        if err <= F::one() {
            t = t + h;
            y = y5;
            // FSAL: stage 7 was evaluated at (t + h, y5)
            k1 = k.pop().expect("seven stages");
            let grow = F::lit(SAFETY)
                * (F::one() / err.max(F::lit(1e-10))).powf(F::lit(0.2));
            h = h * grow.max(F::lit(MIN_SCALE)).min(F::lit(MAX_SCALE));
        } else {
            let shrink = F::lit(SAFETY) * (F::one() / err).powf(F::lit(0.2));
            h = h * shrink.max(F::lit(MIN_SCALE)).min(F::one());
        }
    }
    Ok(y)
}
