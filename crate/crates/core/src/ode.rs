//! Explicit Runge–Kutta kernels: Dormand–Prince 5(4) for slow segments and
//! classical fixed-step RK4.

use crate::error::{Error, Result};

pub(crate) type Rhs<'a> = dyn FnMut(f64, &[f64]) -> Result<Vec<f64>> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Flow {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub(crate) struct Dopri5 {
    pub atol: f64,
    pub rtol: f64,
    pub initial_step: Option<f64>,
    pub max_steps: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct SegmentEnd {
    pub y: Vec<f64>,
    /// The observer asked to stop before `t1`.
    pub stopped: bool,
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
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        for (o, v) in out.iter_mut().zip(k.iter()) {
            *o += h * c * v;
        }
    }
    out
}

impl Dopri5 {
    pub fn new(tol: f64) -> Dopri5 {
        Dopri5 {
            atol: tol,
            rtol: tol,
            initial_step: None,
            max_steps: 2_000_000,
        }
    }

    fn err_norm(&self, y: &[f64], y_new: &[f64], err: &[f64]) -> f64 {
        let n = y.len().max(1) as f64;
        let sum: f64 = y
            .iter()
            .zip(y_new)
            .zip(err)
            .map(|((a, b), e)| {
                let sc = self.atol + self.rtol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (sum / n).sqrt()
    }

    fn initial_step(&self, rhs: &mut Rhs<'_>, t0: f64, y0: &[f64], k1: &[f64], span: f64) -> Result<f64> {
        if let Some(h) = self.initial_step {
            return Ok(h.min(span));
        }
        let scale: Vec<f64> = y0.iter().map(|v| self.atol + self.rtol * v.abs()).collect();
        let rms = |v: &[f64]| {
            (v.iter().zip(&scale).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
        };
        let d0 = rms(y0);
        let d1 = rms(k1);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let y1 = axpy(y0, h0, &[(1.0, k1)]);
        let k2 = rhs(t0 + h0, &y1)?;
        let diff: Vec<f64> = k2.iter().zip(k1).map(|(a, b)| (a - b) / h0).collect();
        let d2 = rms(&diff);
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span))
    }

    /// Integrates from `t0` to `t1`, landing exactly on every time in `stops`
    /// and reporting each accepted step to `observer`.
    pub fn integrate(
        &self,
        rhs: &mut Rhs<'_>,
        t0: f64,
        y0: &[f64],
        t1: f64,
        stops: &[f64],
        observer: &mut dyn FnMut(f64, &[f64]) -> Flow,
    ) -> Result<SegmentEnd> {
        let mut t = t0;
        let mut y = y0.to_vec();
        if t1 <= t0 {
            return Ok(SegmentEnd { y, stopped: false });
        }
        let mut targets: Vec<f64> = stops.iter().copied().filter(|s| *s > t0 && *s < t1).collect();
        targets.push(t1);
        let mut next_target = 0;

        let mut k1 = rhs(t, &y)?;
        let mut h = self.initial_step(rhs, t, &y, &k1, t1 - t0)?;
        let mut steps = 0usize;
        while t < t1 {
            steps += 1;
            if steps > self.max_steps {
                return Err(Error::TooManySteps(self.max_steps));
            }
            let target = targets[next_target];
            let mut h_try = h;
            let mut lands = false;
            if t + h_try >= target - 1e-14 * target.abs().max(1.0) {
                h_try = target - t;
                lands = true;
            }
            if h_try < 1e-14 * t.abs().max(1.0) && !lands {
                return Err(Error::StepUnderflow { t, h: h_try });
            }

            let k2 = rhs(t + C2 * h_try, &axpy(&y, h_try, &[(A21, &k1)]))?;
            let k3 = rhs(t + C3 * h_try, &axpy(&y, h_try, &[(A31, &k1), (A32, &k2)]))?;
            let k4 = rhs(t + C4 * h_try, &axpy(&y, h_try, &[(A41, &k1), (A42, &k2), (A43, &k3)]))?;
            let k5 = rhs(
                t + C5 * h_try,
                &axpy(&y, h_try, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
            )?;
            let k6 = rhs(
                t + h_try,
                &axpy(&y, h_try, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
            )?;
            let y_new = axpy(&y, h_try, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
            let t_new = if lands { target } else { t + h_try };
            let k7 = rhs(t_new, &y_new)?;
            let err: Vec<f64> = (0..y.len())
                .map(|i| h_try * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]))
                .collect();
            let e = self.err_norm(&y, &y_new, &err);
            if !e.is_finite() {
                h = 0.25 * h_try;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::StepUnderflow { t, h });
                }
                continue;
            }
            let factor = if e == 0.0 {
                5.0
            } else {
                (0.9 * e.powf(-0.2)).clamp(0.2, 5.0)
            };
            if e <= 1.0 {
                t = t_new;
                y = y_new;
                k1 = k7;
                if lands {
                    next_target += 1;
                    // keep the proposed step when the landing shortened it
                    h = h.max(h_try * factor);
                } else {
                    h = h_try * factor;
                }
                if observer(t, &y) == Flow::Stop {
                    return Ok(SegmentEnd { y, stopped: true });
                }
            } else {
                h = h_try * factor.min(1.0);
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::StepUnderflow { t, h });
                }
            }
        }
        Ok(SegmentEnd { y, stopped: false })
    }
}

/// Classical RK4 with `steps` equal steps, returning every node.
pub(crate) fn rk4_path(rhs: &mut Rhs<'_>, t0: f64, y0: &[f64], t1: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(y.clone());
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        y = rk4_step(rhs, t, &y, h)?;
        out.push(y.clone());
    }
    Ok(out)
}

pub(crate) fn rk4_step(rhs: &mut Rhs<'_>, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>> {
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &axpy(y, h, &[(0.5, &k1)]))?;
    let k3 = rhs(t + 0.5 * h, &axpy(y, h, &[(0.5, &k2)]))?;
    let k4 = rhs(t + h, &axpy(y, h, &[(1.0, &k3)]))?;
    Ok(axpy(
        y,
        h,
        &[(1.0 / 6.0, &k1), (2.0 / 6.0, &k2), (2.0 / 6.0, &k3), (1.0 / 6.0, &k4)],
    ))
}
