//! Fixed-step RK4 and adaptive Dormand–Prince 5(4) on flat state vectors.

use serde::{Deserialize, Serialize};

use crate::autodiff::canonical_sum;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Rk4Fixed,
    Dopri5Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub scheme: Scheme,
    /// Steps per unit interval for [`Scheme::Rk4Fixed`].
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_evals: usize,
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            scheme: Scheme::Rk4Fixed,
            steps,
            rtol: 1e-5,
            atol: 1e-5,
            max_evals: 10_000,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            scheme: Scheme::Dopri5Adaptive,
            steps: 20,
            rtol,
            atol,
            max_evals: 10_000,
        }
    }

    /// RK4 with 20 steps.
    pub fn training_default() -> Self {
        Self::rk4(20)
    }

    /// Dormand–Prince with `rtol = atol = 1e-5`.
    pub fn evaluation_default() -> Self {
        Self::dopri5(1e-5, 1e-5)
    }

    pub fn validate(&self) -> Result<()> {
        match self.scheme {
            Scheme::Rk4Fixed if self.steps == 0 => Err(Error::Config("steps must be positive".into())),
            Scheme::Dopri5Adaptive if !(self.rtol > 0.0 && self.atol > 0.0) => {
                Err(Error::Config("rtol and atol must be positive".into()))
            }
            _ if self.max_evals == 0 => Err(Error::Config("max_evals must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub y: Vec<f64>,
    /// Right-hand-side evaluations.
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` (either direction).
pub fn solve<F>(f: F, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    match cfg.scheme {
        Scheme::Rk4Fixed => rk4(f, y0, t0, t1, cfg.steps),
        Scheme::Dopri5Adaptive => dopri5(f, y0, t0, t1, cfg),
    }
}

fn axpy(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        let hc = h * c;
        for (o, v) in out.iter_mut().zip(k.iter()) {
            *o += hc * v;
        }
    }
    out
}

fn check_finite(y: &[f64]) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: "ode state".into(),
        })
    }
}

/// Classic RK4 with `steps` equal steps; exactly `4 * steps` evaluations.
pub fn rk4<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, steps: usize) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let k1 = f(t, &y)?;
        let k2 = f(t + 0.5 * h, &axpy(&y, 0.5 * h, &[(1.0, &k1)]))?;
        let k3 = f(t + 0.5 * h, &axpy(&y, 0.5 * h, &[(1.0, &k2)]))?;
        let k4 = f(t + h, &axpy(&y, h, &[(1.0, &k3)]))?;
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&y)?;
    }
    Ok(OdeSolution {
        y,
        nfe: 4 * steps,
        accepted: steps,
        rejected: 0,
    })
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Fifth-order weights minus the embedded fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// RMS of `v / (atol + rtol * max(|a|, |b|))`. Squares are summed in value
/// order so the norm does not depend on how the state is laid out.
fn error_norm(v: &[f64], a: &[f64], b: &[f64], rtol: f64, atol: f64) -> f64 {
    let sq: Vec<f64> = v
        .iter()
        .zip(a.iter().zip(b))
        .map(|(e, (x, y))| {
            let sc = atol + rtol * x.abs().max(y.abs());
            (e / sc).powi(2)
        })
        .collect();
    (canonical_sum(&sq) / v.len().max(1) as f64).sqrt()
}

fn dopri5<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let (rtol, atol) = (cfg.rtol, cfg.atol);
    let span = t1 - t0;
    let dir = if span >= 0.0 { 1.0 } else { -1.0 };
    let mut y = y0.to_vec();
    let mut nfe = 0;
    let (mut accepted, mut rejected) = (0, 0);
    if span == 0.0 {
        return Ok(OdeSolution {
            y,
            nfe,
            accepted,
            rejected,
        });
    }
    let mut t = t0;
    let mut k1 = f(t, &y)?;
    nfe += 1;

    // Initial step from the local scale of the solution and its derivative.
    let zeros = vec![0.0; y.len()];
    let d0 = error_norm(&y, &y, &zeros, rtol, atol);
    let d1 = error_norm(&k1, &y, &zeros, rtol, atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span.abs());
    let y1 = axpy(&y, dir * h0, &[(1.0, &k1)]);
    let f1 = f(t + dir * h0, &y1)?;
    nfe += 1;
    let diff: Vec<f64> = f1.iter().zip(&k1).map(|(a, b)| a - b).collect();
    let d2 = error_norm(&diff, &y, &zeros, rtol, atol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(span.abs());

    while dir * (t1 - t) > 0.0 {
        if nfe + 6 > cfg.max_evals {
            return Err(Error::SolverDivergence {
                last_t: t,
                max_evals: cfg.max_evals,
            });
        }
        if h < 1e-12 * t.abs().max(1.0) {
            return Err(Error::SolverDivergence {
                last_t: t,
                max_evals: cfg.max_evals,
            });
        }
        let last = h >= (t1 - t).abs();
        if last {
            h = (t1 - t).abs();
        }
        let hs = dir * h;
        let k2 = f(t + C2 * hs, &axpy(&y, hs, &[(A21, &k1)]))?;
        let k3 = f(t + C3 * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]))?;
        let k4 = f(t + C4 * hs, &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]))?;
        let k5 = f(
            t + C5 * hs,
            &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        )?;
        let k6 = f(
            t + hs,
            &axpy(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        )?;
        let y_new = axpy(&y, hs, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let t_new = if last { t1 } else { t + hs };
        let k7 = f(t_new, &y_new)?;
        nfe += 6;
        let err: Vec<f64> = (0..y.len())
            .map(|i| hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]))
            .collect();
        let en = error_norm(&err, &y, &y_new, rtol, atol);
        let factor = if en == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * en.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if en <= 1.0 && y_new.iter().all(|v| v.is_finite()) {
            t = t_new;
            y = y_new;
            k1 = k7;
            accepted += 1;
            h *= factor;
        } else {
            rejected += 1;
            h *= factor.min(1.0);
        }
    }
    Ok(OdeSolution {
        y,
        nfe,
        accepted,
        rejected,
    })
}
