//! First and second moments of the constant-rate field.
//!
//! `m_1(t)` has a closed form. The second moment `m_2(t, u)`, `u = x - y`, is
//! split into the decay of the initial data (`m_{2,1}`), the part driven by
//! the constant source `2 k m_1(t)` (`m_{2,2}`), and the part driven by the
//! remaining sources (`m_{2,3}`). Each piece is solved per torus frequency.
//!
//! In the steady state
//!
//! ```text
//! m_2(inf, u) = A^2 + A d_0(u) + c (d_0(u) + sum_{n>=1} q^n a^{*n}(u)),
//! A = k / v,  c = k sum C(n,2) b_n / (v (v + kappa)),  q = kappa / (v + kappa)
//! ```
//!
//! with `v = mu - beta`. The Fourier form of the third piece is
//! `(C_2 - C_1 a^) / (C_3 - C_4 a^)`.

use crate::dft;
use crate::error::{BrwError, Result};
use crate::kernel::{TorusGrid, TorusKernel};
use crate::model::ModelParams;

/// `(e^{x t} - 1) / x`, continuous at `x = 0`.
fn growth_integral(x: f64, t: f64) -> f64 {
    if x.abs() * t.max(1.0) < 1e-300 {
        t
    } else {
        (x * t).exp_m1() / x
    }
}

/// `m_1(t) = k/(beta-mu) (e^{(beta-mu)t} - 1) + e^{(beta-mu)t} u0`.
///
/// `t = inf` is accepted: it yields `k/(mu-beta)` when subcritical, `u0`
/// when there is neither immigration nor growth, and `inf` otherwise.
pub fn m1_closed_form(k: f64, mu: f64, beta: f64, u0: f64, t: f64) -> f64 {
    let r = beta - mu;
    if t.is_infinite() {
        return if r < -1e-12 {
            k / (mu - beta)
        } else if k == 0.0 && r.abs() <= 1e-12 {
            u0
        } else {
            f64::INFINITY
        };
    }
    if r.abs() <= 1e-12 {
        return u0 + k * t;
    }
    k * growth_integral(r, t) + (r * t).exp() * u0
}

/// `t -> m_1(t)` for fixed rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstMomentCurve {
    pub k: f64,
    pub mu: f64,
    pub beta: f64,
    pub u0: f64,
}

impl FirstMomentCurve {
    pub fn new(params: &ModelParams) -> Self {
        FirstMomentCurve {
            k: params.k,
            mu: params.law.mu,
            beta: params.beta(),
            u0: params.init.mean(),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        m1_closed_form(self.k, self.mu, self.beta, self.u0, t)
    }

    pub fn limit(&self) -> f64 {
        self.eval(f64::INFINITY)
    }
}

/// Coefficients of the steady-state Fourier form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyCoefficients {
    /// `k kappa / v`
    pub c1: f64,
    /// `k (mu + sum (n-1)(n-2) b_n / 2 + kappa) / v`
    pub c2: f64,
    /// `v + kappa`
    pub c3: f64,
    /// `kappa`
    pub c4: f64,
    /// `kappa / (v + kappa)`
    pub q: f64,
    /// Weight `c` of the convolution series.
    pub series_weight: f64,
}

impl SteadyCoefficients {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let v = params.require_subcritical()?;
        let kappa = params.kernel.kappa;
        let k = params.k;
        let rates = params.law.derived_rates();
        let c3 = v + kappa;
        Ok(SteadyCoefficients {
            c1: k * kappa / v,
            c2: k * (params.law.mu + rates.sum_fact / 2.0 + kappa) / v,
            c3,
            c4: kappa,
            q: kappa / c3,
            series_weight: k * rates.sum_choose2 / (v * c3),
        })
    }

    /// `(C_2 - C_1 a^) / (C_3 - C_4 a^)`
    pub fn spectrum(&self, symbol: f64) -> f64 {
        (self.c2 - self.c1 * symbol) / (self.c3 - self.c4 * symbol)
    }
}

/// `m_2(t, .)` on a torus with its three pieces. Tables are indexed by the
/// displacement site `u` (see [`TorusGrid::displacement`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMomentField {
    pub grid: TorusGrid,
    pub time: f64,
    pub values: Vec<f64>,
    /// Decay of the initial data.
    pub m21: Vec<f64>,
    /// Response to the constant source `2 k m_1(t)`.
    pub m22: f64,
    /// Response to the remaining sources.
    pub m23: Vec<f64>,
    pub coefficients: SteadyCoefficients,
}

impl SecondMomentField {
    pub fn at(&self, offset: &[i64]) -> Result<f64> {
        if !self.grid.contains_offset(offset) {
            return Err(BrwError::OffsetOutOfRange {
                offset: offset.to_vec(),
            });
        }
        Ok(self.values[self.grid.offset_site(offset)])
    }

    pub fn q(&self) -> f64 {
        self.coefficients.q
    }
}

fn kernel_symbols(params: &ModelParams, grid: &TorusGrid) -> Result<Vec<f64>> {
    Ok(TorusKernel::new(&params.kernel, grid)?.symbol_table())
}

/// Solves the second-moment equation from the initial law in `params.init`.
pub fn m2_transient(params: &ModelParams, grid: &TorusGrid, t: f64) -> Result<SecondMomentField> {
    params.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(BrwError::InvalidParameter(format!("time {t} must be finite and >= 0")));
    }
    let coefficients = SteadyCoefficients::new(params)?;
    let symbols = kernel_symbols(params, grid)?;
    let v = params.decay();
    let kappa = params.kernel.kappa;
    let k = params.k;
    let u0 = params.init.mean();
    let variance = params.init.raw_moment(2) - u0 * u0;
    let a_inf = k / v;
    let b0 = u0 - a_inf;
    let d = params.law.power_sum(2) + params.law.mu + 2.0 * kappa;
    let decay = (-v * t).exp();

    let mut spec21 = Vec::with_capacity(symbols.len());
    let mut spec23 = Vec::with_capacity(symbols.len());
    for &a in &symbols {
        let lambda = -2.0 * v - 2.0 * kappa * (1.0 - a);
        spec21.push(variance * (lambda * t).exp());
        let c0 = a_inf * (d - 2.0 * kappa * a) + k;
        let c1 = b0 * (d - 2.0 * kappa * a);
        spec23.push(c0 * growth_integral(lambda, t) + c1 * decay * growth_integral(lambda + v, t));
    }
    let mut m21 = dft::inverse_real(grid, &spec21);
    let mean_part = u0 * u0 * (-2.0 * v * t).exp();
    m21.iter_mut().for_each(|x| *x += mean_part);
    let m23 = dft::inverse_real(grid, &spec23);
    let m22 = a_inf * a_inf * -(-2.0 * v * t).exp_m1() + 2.0 * k * b0 * decay * -(-v * t).exp_m1() / v;

    let values = m21.iter().zip(&m23).map(|(a, c)| a + m22 + c).collect();
    Ok(SecondMomentField {
        grid: grid.clone(),
        time: t,
        values,
        m21,
        m22,
        m23,
        coefficients,
    })
}

/// Steady state by the truncated convolution series.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadySeries {
    pub values: Vec<f64>,
    /// Number of convolution powers summed.
    pub terms: usize,
    /// Bound on the discarded tail, `c q^{N+1} / (1 - q)`.
    pub tail_bound: f64,
}

/// Sums the series until the geometric tail bound drops below `tol`.
pub fn m2_steady_state_series(params: &ModelParams, grid: &TorusGrid, tol: f64) -> Result<SteadySeries> {
    if !(tol > 0.0) {
        return Err(BrwError::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    params.validate()?;
    let coeff = SteadyCoefficients::new(params)?;
    if !(params.k > 0.0) {
        return Err(BrwError::InvalidParameter(
            "the steady state needs immigration k > 0".into(),
        ));
    }
    let kernel = TorusKernel::new(&params.kernel, grid)?;
    let a_inf = params.k / params.decay();
    let c = coeff.series_weight;
    let q = coeff.q;

    let mut sum = vec![0.0; grid.num_sites()];
    sum[0] = 1.0;
    let mut terms = 0;
    let mut tail = c * q / (1.0 - q);
    if c > 0.0 {
        let mut power = vec![0.0; grid.num_sites()];
        power[0] = 1.0;
        let mut qn = 1.0;
        while tail >= tol {
            power = kernel.convolve(&power);
            qn *= q;
            terms += 1;
            sum.iter_mut().zip(&power).for_each(|(s, p)| *s += qn * p);
            tail = c * qn * q / (1.0 - q);
        }
    }
    let mut values: Vec<f64> = sum.iter().map(|s| a_inf * a_inf + c * s).collect();
    values[0] += a_inf;
    Ok(SteadySeries {
        values,
        terms,
        tail_bound: tail,
    })
}

/// Steady state by inverting the limit spectrum exactly on the torus.
pub fn m2_steady_state_fourier(params: &ModelParams, grid: &TorusGrid) -> Result<Vec<f64>> {
    params.validate()?;
    let coeff = SteadyCoefficients::new(params)?;
    let spectrum: Vec<f64> = kernel_symbols(params, grid)?
        .into_iter()
        .map(|a| coeff.spectrum(a))
        .collect();
    let a_inf = params.k / params.decay();
    Ok(dft::inverse_real(grid, &spectrum)
        .into_iter()
        .map(|x| x + a_inf * a_inf)
        .collect())
}

/// `m_2(inf, u) - m_1(inf)^2`.
pub fn steady_covariance(params: &ModelParams, grid: &TorusGrid) -> Result<Vec<f64>> {
    let mean = params.steady_mean()?;
    Ok(m2_steady_state_fourier(params, grid)?
        .into_iter()
        .map(|x| x - mean * mean)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use crate::model::{BranchingLaw, InitialCondition};
    use proptest::prelude::*;

    const M2_INF_0: f64 = 2.408248290463863;
    const M2_INF_1: f64 = 1.0412414523193152;
    const M2_INF_2: f64 = 1.0041662327292877;

    fn line(l: usize) -> TorusGrid {
        TorusGrid::cube(1, l).unwrap()
    }

    #[test]
    fn first_moment_examples() {
        for t in [0.0, 0.3, 4.0, 50.0] {
            assert!((m1_closed_form(1.0, 1.5, 0.5, 1.0, t) - 1.0).abs() < 1e-15);
        }
        assert!((m1_closed_form(0.0, 1.5, 0.5, 1.0, 3.0) - (-3.0f64).exp()).abs() < 1e-15);
        assert_eq!(m1_closed_form(1.0, 1.5, 0.5, 0.0, f64::INFINITY), 1.0);
        assert_eq!(m1_closed_form(2.0, 0.5, 0.5, 1.0, 3.0), 7.0);
        let near = m1_closed_form(2.0, 0.5, 0.5 + 1e-9, 1.0, 3.0);
        assert!((near - 7.0).abs() < 1e-6);
    }

    #[test]
    fn steady_values_on_large_torus() {
        let p = ModelParams::binary_example();
        let grid = line(4096);
        let m2 = m2_steady_state_fourier(&p, &grid).unwrap();
        assert!((m2[0] - M2_INF_0).abs() < 1e-12);
        assert!((m2[1] - M2_INF_1).abs() < 1e-12);
        assert!((m2[2] - M2_INF_2).abs() < 1e-12);
        let cov = steady_covariance(&p, &grid).unwrap();
        assert!((cov[0] - (M2_INF_0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn series_matches_fourier() {
        let p = ModelParams::binary_example();
        let grid = line(64);
        let series = m2_steady_state_series(&p, &grid, 1e-13).unwrap();
        let fourier = m2_steady_state_fourier(&p, &grid).unwrap();
        for (s, f) in series.values.iter().zip(&fourier) {
            assert!((s - f).abs() < 1e-10);
        }
        assert!(series.tail_bound < 1e-13 && series.terms > 0);
    }

    #[test]
    fn series_rejects_bad_tolerance() {
        let p = ModelParams::binary_example();
        assert!(m2_steady_state_series(&p, &line(8), 0.0).is_err());
        assert!(m2_steady_state_series(&p, &line(8), -1.0).is_err());
    }

    #[test]
    fn small_kappa_series_is_flat_away_from_origin() {
        let mut p = ModelParams::binary_example();
        p.kernel.kappa = 1e-9;
        let s = m2_steady_state_series(&p, &line(32), 1e-14).unwrap();
        assert!((s.values[10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_frequency_is_pole_free() {
        let c = SteadyCoefficients::new(&ModelParams::binary_example()).unwrap();
        assert!(c.c3 - c.c4 > 0.0);
        assert!((c.spectrum(1.0) - (c.c2 - c.c1) / (c.c3 - c.c4)).abs() < 1e-15);
        assert!(c.q > 0.0 && c.q < 1.0);
    }

    #[test]
    fn transient_starts_at_initial_condition() {
        let grid = line(16);
        let p = ModelParams::binary_example();
        let f = m2_transient(&p, &grid, 0.0).unwrap();
        for v in &f.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let p = p.with_init(InitialCondition::Poisson(2.0));
        let f = m2_transient(&p, &grid, 0.0).unwrap();
        assert!((f.values[0] - 6.0).abs() < 1e-14);
        assert!((f.values[3] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn transient_converges_to_steady_state() {
        let grid = line(32);
        let p = ModelParams::binary_example();
        let f = m2_transient(&p, &grid, 60.0).unwrap();
        assert!((f.m22 - 1.0).abs() < 1e-12);
        let steady = m2_steady_state_fourier(&p, &grid).unwrap();
        for (a, b) in f.values.iter().zip(&steady) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn m21_decays_at_twice_the_rate() {
        let grid = line(16);
        let p = ModelParams::binary_example();
        let a = m2_transient(&p, &grid, 2.0).unwrap().m21[0];
        let b = m2_transient(&p, &grid, 6.0).unwrap().m21[0];
        let slope = (b.ln() - a.ln()) / 4.0;
        assert!((slope + 2.0).abs() < 0.1);
    }

    #[test]
    fn transient_out_of_range_offset() {
        let f = m2_transient(&ModelParams::binary_example(), &line(8), 1.0).unwrap();
        assert!(f.at(&[5]).is_err());
        assert_eq!(f.at(&[-2]).unwrap(), f.at(&[2]).unwrap());
    }

    #[test]
    fn rejects_non_subcritical() {
        let mut p = ModelParams::binary_example();
        p.law = BranchingLaw::binary(0.5, 0.5);
        assert!(matches!(m2_transient(&p, &line(8), 1.0), Err(BrwError::NotSubcritical { .. })));
        assert!(m2_steady_state_fourier(&p, &line(8)).is_err());
    }

    #[test]
    fn covariance_decays_with_distance() {
        let cov = steady_covariance(&ModelParams::binary_example(), &line(64)).unwrap();
        assert!(cov[6] < cov[2]);
        assert_eq!(cov[5], cov[64 - 5]);
    }

    proptest! {
        #[test]
        fn steady_variance_is_positive(
            mu in 0.5f64..3.0,
            b2 in 0.0f64..1.0,
            b3 in 0.0f64..0.5,
            kappa in 0.05f64..2.0,
            k in 0.1f64..3.0,
        ) {
            let law = BranchingLaw::new(mu, [(2, b2), (3, b3)]);
            prop_assume!(mu - law.beta() > 0.05);
            let p = ModelParams {
                kernel: KernelSpec::simple_random_walk(1, kappa),
                law,
                k,
                init: InitialCondition::Const(1.0),
            };
            let cov = steady_covariance(&p, &line(32)).unwrap();
            prop_assert!(cov[0] > 0.0);
        }
    }
}
