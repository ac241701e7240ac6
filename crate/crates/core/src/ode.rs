//! Classical RK4 with step-halving control for linear moment systems.

use crate::error::{BrwError, Result};

/// Step control: start at `initial_step`, halve until two successive
/// resolutions differ by less than `tolerance` at every output time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub initial_step: f64,
    pub tolerance: f64,
    pub max_halvings: u32,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            initial_step: 0.1,
            tolerance: 1e-8,
            max_halvings: 14,
        }
    }
}

impl StepControl {
    pub fn with_initial_step(mut self, h: f64) -> Self {
        self.initial_step = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_step > 0.0) || !(self.tolerance > 0.0) {
            return Err(BrwError::InvalidParameter(format!(
                "step control needs positive step and tolerance, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Runs RK4 with nominal step `h`, landing exactly on every output time.
/// `rhs(t, y, dy)` overwrites `dy`.
pub fn rk4_fixed<F>(rhs: &mut F, y0: &[f64], times: &[f64], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = 0.0;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / h).ceil().max(1.0) as usize;
            let dt = span / steps as f64;
            for i in 0..steps {
                let t0 = t + i as f64 * dt;
                rhs(t0, &y, &mut k1);
                for j in 0..n {
                    tmp[j] = y[j] + 0.5 * dt * k1[j];
                }
                rhs(t0 + 0.5 * dt, &tmp, &mut k2);
                for j in 0..n {
                    tmp[j] = y[j] + 0.5 * dt * k2[j];
                }
                rhs(t0 + 0.5 * dt, &tmp, &mut k3);
                for j in 0..n {
                    tmp[j] = y[j] + dt * k3[j];
                }
                rhs(t0 + dt, &tmp, &mut k4);
                for j in 0..n {
                    y[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
            t = target;
        }
        out.push(y.clone());
    }
    out
}

fn check_times(times: &[f64]) -> Result<()> {
    let mut last = 0.0;
    for &t in times {
        if !(t >= last) || !t.is_finite() {
            return Err(BrwError::InvalidParameter(format!(
                "output times must be finite, nonnegative and nondecreasing, got {times:?}"
            )));
        }
        last = t;
    }
    Ok(())
}

/// Integrates from `t = 0` and returns the solution at each output time,
/// taken from the finer of the two resolutions that agreed.
pub fn integrate_controlled<F>(mut rhs: F, y0: &[f64], times: &[f64], control: StepControl) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    control.validate()?;
    check_times(times)?;
    let mut h = control.initial_step;
    let mut coarse = rk4_fixed(&mut rhs, y0, times, h);
    let mut drift = f64::INFINITY;
    for _ in 0..control.max_halvings {
        let fine = rk4_fixed(&mut rhs, y0, times, h / 2.0);
        drift = coarse
            .iter()
            .flatten()
            .zip(fine.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, |m: f64, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
        if drift < control.tolerance {
            return Ok(fine);
        }
        h /= 2.0;
        coarse = fine;
    }
    Err(BrwError::StepControl {
        halvings: control.max_halvings,
        drift,
        suggested_step: h / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let out = integrate_controlled(
            |_, y, dy| dy[0] = -2.0 * y[0],
            &[1.0],
            &[0.0, 1.0, 3.0],
            StepControl::default(),
        )
        .unwrap();
        assert_eq!(out[0][0], 1.0);
        assert!((out[1][0] - (-2.0f64).exp()).abs() < 1e-9);
        assert!((out[2][0] - (-6.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn stiff_system_reports_failure() {
        let control = StepControl {
            initial_step: 1.0,
            tolerance: 1e-8,
            max_halvings: 2,
        };
        let err = integrate_controlled(|_, y, dy| dy[0] = -1e4 * y[0], &[1.0], &[1.0], control).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn time_dependent_forcing() {
        let out = integrate_controlled(
            |t, _, dy| dy[0] = t.cos(),
            &[0.0],
            &[2.0],
            StepControl::default(),
        )
        .unwrap();
        assert!((out[0][0] - 2.0f64.sin()).abs() < 1e-9);
    }
}
