//! Moment envelopes for spatially perturbed rates.
//!
//! With site-dependent `v(x) = mu(x) - beta(x)` and `k(x)` inside
//! `[v0 - eps, v0 + eps]` and `[k0 - eps, k0 + eps]`, the first moment solves
//!
//! ```text
//! dm_1/dt = s L_a m_1 - v(x) m_1 + k(x)
//! ```
//!
//! and the two-point moment solves the pair problem
//!
//! ```text
//! dm_2/dt = s (L_ax + L_ay) m_2 - V(x, y) m_2 + f(t, x, y)
//! ```
//!
//! The envelopes come from the path representation: bound the potential and
//! the sources pointwise and integrate. `s = 1` is the default diffusion scale;
//! `s = kappa` recovers the constant-rate moment equations exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{BrwError, Result};
use crate::feynman_kac::{solve_direct_at, ParabolicProblem, Source};
use crate::kernel::{KernelSpec, TorusGrid, TorusKernel};
use crate::model::{BranchingLaw, SpatialModel};
use crate::ode::StepControl;
use crate::rng::stream_rng;

/// Centers and half-width of the admissible rate window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationEnvelope {
    pub v0: f64,
    pub k0: f64,
    pub u0: f64,
    pub u0_pair: f64,
    pub epsilon: f64,
}

impl PerturbationEnvelope {
    pub fn new(v0: f64, k0: f64, u0: f64, u0_pair: f64, epsilon: f64) -> Result<Self> {
        let env = PerturbationEnvelope {
            v0,
            k0,
            u0,
            u0_pair,
            epsilon,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("v0", self.v0), ("k0", self.k0), ("u0", self.u0), ("u0_pair", self.u0_pair)] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(BrwError::InvalidParameter(format!("{name} = {x} must be positive")));
            }
        }
        if !(self.epsilon >= 0.0) || self.epsilon > self.k0.min(self.v0) / 2.0 {
            return Err(BrwError::InvalidParameter(format!(
                "epsilon = {} must lie in [0, min(k0, v0)/2]",
                self.epsilon
            )));
        }
        if self.epsilon > self.u0.min(self.u0_pair) {
            return Err(BrwError::InvalidParameter(format!(
                "epsilon = {} exceeds the initial level; the lower envelopes need u0 - eps >= 0",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// `k0 / v0`
    pub fn center(&self) -> f64 {
        self.k0 / self.v0
    }
}

/// One out-of-window value.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionViolation {
    /// `"v"`, `"k"`, `"u0"` or `"u0_pair"`.
    pub field: &'static str,
    /// One site, or two for the pair field.
    pub site: Vec<usize>,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssumptionReport {
    pub violations: Vec<AssumptionViolation>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first(&self) -> Option<&AssumptionViolation> {
        self.violations.first()
    }
}

const WINDOW_SLACK: f64 = 1e-12;

/// Checks every field against its window, site by site.
pub fn check_assumptions(spatial: &SpatialModel, env: &PerturbationEnvelope, u0: &[f64], u0_pair: &[f64]) -> AssumptionReport {
    let n = spatial.grid.num_sites();
    let eps = env.epsilon;
    let mut violations = Vec::new();
    let mut scan = |field: &'static str, values: &[f64], center: f64, pair: bool| {
        for (i, &value) in values.iter().enumerate() {
            let (lower, upper) = (center - eps, center + eps);
            if !(value >= lower - WINDOW_SLACK && value <= upper + WINDOW_SLACK) {
                let site = if pair { vec![i / n, i % n] } else { vec![i] };
                violations.push(AssumptionViolation {
                    field,
                    site,
                    value,
                    lower,
                    upper,
                });
            }
        }
    };
    scan("v", &spatial.potential(), env.v0, false);
    scan("k", &spatial.k, env.k0, false);
    scan("u0", u0, env.u0, false);
    scan("u0_pair", u0_pair, env.u0_pair, true);
    AssumptionReport { violations }
}

/// `int_0^t e^{-w s} (K + D e^{-r (t - s)}) ds`
fn source_integral(level: f64, transient: f64, r: f64, w: f64, t: f64) -> f64 {
    let e_w = (-w * t).exp();
    let slow = if (r - w).abs() < 1e-14 {
        transient * t * e_w
    } else {
        transient * (e_w - (-r * t).exp()) / (r - w)
    };
    level * -(-w * t).exp_m1() / w + slow
}

/// First-moment envelope `K + (u0 +- eps - K) e^{-r t}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstMomentSide {
    /// Limit level `(k0 +- eps) / (v0 -+ eps)`.
    pub level: f64,
    /// Rate `v0 -+ eps`.
    pub rate: f64,
    /// `u0 +- eps - level`
    pub transient: f64,
}

impl FirstMomentSide {
    pub fn eval(&self, t: f64) -> f64 {
        self.level + (-self.rate * t).exp() * self.transient
    }
}

/// Explicit envelopes of both moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeBounds {
    pub env: PerturbationEnvelope,
    pub kappa: f64,
    pub m1_lower: FirstMomentSide,
    pub m1_upper: FirstMomentSide,
}

/// Coefficients of `c2 e^{-r t} + c3 e^{-2 r t} + window +- (kappa k0/v0^2)(1 - e^{-2 r' t})`,
/// plus the lower side's extra `e^{-r' t}`, `e^{-2 r' t}` terms coming from the
/// `kappa` part of the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondMomentConstants {
    pub c2: f64,
    pub c3: f64,
    /// `C_4 eps`, kept as a product so that `eps = 0` is exact.
    pub c4_eps: f64,
    pub extra_slow: f64,
    pub extra_fast: f64,
}

impl EnvelopeBounds {
    pub fn new(env: PerturbationEnvelope, kappa: f64) -> Result<Self> {
        if env.epsilon >= env.v0 {
            return Err(BrwError::InvalidParameter(format!(
                "epsilon = {} must be below v0 = {}",
                env.epsilon, env.v0
            )));
        }
        Ok(EnvelopeBounds {
            env,
            kappa,
            m1_lower: m1_side(&env, env.u0, -1.0),
            m1_upper: m1_side(&env, env.u0, 1.0),
        })
    }

    /// `C_0^-`, `C_1^- eps`, `C_0^+`, `C_1^+ eps`
    pub fn first_moment_constants(&self) -> [f64; 4] {
        let c = self.env.center();
        [
            self.m1_lower.transient,
            self.m1_lower.level - c,
            self.m1_upper.transient,
            self.m1_upper.level - c,
        ]
    }

    /// Bounds on `G`, the response to the initial pair data alone.
    pub fn g_bounds(&self, t: f64) -> (f64, f64) {
        let e = &self.env;
        (
            (e.u0_pair - e.epsilon) * (-2.0 * (e.v0 + e.epsilon) * t).exp(),
            (e.u0_pair + e.epsilon) * (-2.0 * (e.v0 - e.epsilon) * t).exp(),
        )
    }

    /// Upper bound on `m_2 - L - (k0/v0)^2`.
    pub fn b(&self, t: f64) -> f64 {
        let e = &self.env;
        let up = &self.m1_upper;
        self.g_bounds(t).1
            + 2.0 * (e.k0 + e.epsilon + self.kappa) * source_integral(up.level, up.transient, up.rate, 2.0 * up.rate, t)
            - e.center().powi(2)
    }

    /// Lower bound on `m_2 - L - (k0/v0)^2`.
    pub fn a(&self, t: f64) -> f64 {
        let e = &self.env;
        let lo = &self.m1_lower;
        let up = &self.m1_upper;
        self.g_bounds(t).0 + 2.0 * (e.k0 - e.epsilon) * source_integral(lo.level, lo.transient, lo.rate, 2.0 * lo.rate, t)
            - 2.0 * self.kappa * source_integral(up.level, up.transient, up.rate, 2.0 * up.rate, t)
            - e.center().powi(2)
    }

    /// Constants of `B` (the extra terms vanish on this side).
    pub fn upper_constants(&self) -> SecondMomentConstants {
        let e = &self.env;
        let up = &self.m1_upper;
        let r = up.rate;
        let c = e.k0 + e.epsilon + self.kappa;
        let kk = self.kappa * e.k0 / (e.v0 * e.v0);
        SecondMomentConstants {
            c2: 2.0 * c * up.transient / r,
            c3: e.u0_pair + e.epsilon - c * up.level / r - 2.0 * c * up.transient / r + kk,
            c4_eps: c * up.level / r - e.center().powi(2) - kk,
            extra_slow: 0.0,
            extra_fast: 0.0,
        }
    }

    /// Constants of `A`.
    pub fn lower_constants(&self) -> SecondMomentConstants {
        let e = &self.env;
        let lo = &self.m1_lower;
        let up = &self.m1_upper;
        let c = e.k0 - e.epsilon;
        let kk = self.kappa * e.k0 / (e.v0 * e.v0);
        let kappa_level = self.kappa * up.level / up.rate;
        SecondMomentConstants {
            c2: 2.0 * c * lo.transient / lo.rate,
            c3: e.u0_pair - e.epsilon - c * lo.level / lo.rate - 2.0 * c * lo.transient / lo.rate,
            c4_eps: c * lo.level / lo.rate - e.center().powi(2) - (kappa_level - kk),
            extra_slow: -2.0 * self.kappa * up.transient / up.rate,
            extra_fast: kappa_level - kk + 2.0 * self.kappa * up.transient / up.rate,
        }
    }

    /// `A(t)` rebuilt from [`Self::lower_constants`].
    pub fn a_from_constants(&self, t: f64) -> f64 {
        let k = self.lower_constants();
        let r = self.m1_lower.rate;
        let r2 = self.m1_upper.rate;
        let kk = self.kappa * self.env.k0 / (self.env.v0 * self.env.v0);
        k.c2 * (-r * t).exp() + k.c3 * (-2.0 * r * t).exp() + k.c4_eps - kk * -(-2.0 * r2 * t).exp_m1()
            + k.extra_slow * (-r2 * t).exp()
            + k.extra_fast * (-2.0 * r2 * t).exp()
    }

    /// `B(t)` rebuilt from [`Self::upper_constants`].
    pub fn b_from_constants(&self, t: f64) -> f64 {
        let k = self.upper_constants();
        let r = self.m1_upper.rate;
        let kk = self.kappa * self.env.k0 / (self.env.v0 * self.env.v0);
        k.c2 * (-r * t).exp() + k.c3 * (-2.0 * r * t).exp() + k.c4_eps + kk * -(-2.0 * r * t).exp_m1()
    }
}

fn m1_side(env: &PerturbationEnvelope, u0: f64, sign: f64) -> FirstMomentSide {
    let eps = sign * env.epsilon;
    let level = (env.k0 + eps) / (env.v0 - eps);
    FirstMomentSide {
        level,
        rate: env.v0 - eps,
        transient: u0 + eps - level,
    }
}

/// `(lower, upper)` for `m_1(t, x)` started from `u0 +- eps`.
pub fn m1_envelope(env: &PerturbationEnvelope, u0: f64, t: f64) -> Result<(f64, f64)> {
    if env.epsilon >= env.v0 {
        return Err(BrwError::InvalidParameter(format!(
            "epsilon = {} must be below v0 = {}",
            env.epsilon, env.v0
        )));
    }
    Ok((m1_side(env, u0, -1.0).eval(t), m1_side(env, u0, 1.0).eval(t)))
}

/// A perturbed model with its initial data.
#[derive(Debug, Clone)]
pub struct PerturbedSystem {
    pub model: SpatialModel,
    pub u0: Vec<f64>,
    /// Row-major over `(x, y)`.
    pub u0_pair: Vec<f64>,
    /// Multiplier of `L_a` in the moment equations.
    pub diffusion: f64,
}

impl PerturbedSystem {
    pub fn new(model: SpatialModel, u0: Vec<f64>, u0_pair: Vec<f64>, diffusion: f64) -> Result<Self> {
        let n = model.grid.num_sites();
        if u0.len() != n || u0_pair.len() != n * n {
            return Err(BrwError::GridMismatch(format!(
                "initial data of lengths {} and {} on {n} sites",
                u0.len(),
                u0_pair.len()
            )));
        }
        if !(diffusion >= 0.0) {
            return Err(BrwError::InvalidParameter(format!("diffusion scale {diffusion}")));
        }
        Ok(PerturbedSystem {
            model,
            u0,
            u0_pair,
            diffusion,
        })
    }

    pub fn kernel(&self) -> Result<TorusKernel> {
        TorusKernel::new(&self.model.kernel, &self.model.grid)
    }

    pub fn first_moment_problem(&self) -> Result<ParabolicProblem> {
        ParabolicProblem::new(
            self.kernel()?,
            self.diffusion,
            self.model.potential(),
            Source::Static(self.model.k.clone()),
            self.u0.clone(),
        )
    }

    pub fn solve_m1(&self, times: &[f64], control: StepControl) -> Result<Vec<Vec<f64>>> {
        solve_direct_at(&self.first_moment_problem()?, times, control)
    }

    /// Dense `m_1` trajectory on `[0, horizon]` for use inside pair sources.
    pub fn first_moment_path(&self, horizon: f64, control: StepControl) -> Result<FirstMomentPath> {
        let steps = ((horizon / PATH_SPACING).ceil() as usize).max(1);
        let dt = horizon / steps as f64;
        let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        let values = self.solve_m1(&times, control)?;
        let kernel = self.kernel()?;
        let v = self.model.potential();
        let slopes = values
            .iter()
            .map(|m| {
                (0..m.len())
                    .map(|x| self.diffusion * kernel.generator_at(m, x) - v[x] * m[x] + self.model.k[x])
                    .collect()
            })
            .collect();
        Ok(FirstMomentPath { dt, values, slopes })
    }
}

const PATH_SPACING: f64 = 1.0 / 64.0;

/// Cubic Hermite interpolant of `m_1(t, x)` through solved values and slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstMomentPath {
    dt: f64,
    values: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

impl FirstMomentPath {
    pub fn horizon(&self) -> f64 {
        self.dt * (self.values.len() - 1) as f64
    }

    pub fn eval(&self, t: f64, x: usize) -> f64 {
        let last = self.values.len() - 1;
        let pos = (t / self.dt).clamp(0.0, last as f64);
        let i = (pos.floor() as usize).min(last.saturating_sub(1));
        if last == 0 {
            return self.values[0][x];
        }
        let s = pos - i as f64;
        let (y0, y1) = (self.values[i][x], self.values[i + 1][x]);
        let (d0, d1) = (self.slopes[i][x] * self.dt, self.slopes[i + 1][x] * self.dt);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * d0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * d1
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        (0..self.values[0].len()).map(|x| self.eval(t, x)).collect()
    }
}

/// `V`, `F` and `f` of the pair equation.
#[derive(Debug, Clone)]
pub struct SecondMomentFunctions {
    path: Arc<FirstMomentPath>,
    kernel: TorusKernel,
    /// `a` over displacement sites, with `a(0) = -1`.
    weight: Vec<f64>,
    v: Vec<f64>,
    k: Vec<f64>,
    /// `mu(x) + sum (n-1)^2 b_n(x)`
    branching: Vec<f64>,
    kappa: f64,
}

pub fn second_moment_functions(system: &PerturbedSystem, path: FirstMomentPath) -> Result<SecondMomentFunctions> {
    let kernel = system.kernel()?;
    let mut weight = kernel.weight_table();
    weight[0] = -1.0;
    let branching = system
        .model
        .mu()
        .iter()
        .zip(system.model.sum_sq())
        .map(|(m, s)| m + s)
        .collect();
    Ok(SecondMomentFunctions {
        path: Arc::new(path),
        kernel,
        weight,
        v: system.model.potential(),
        k: system.model.k.clone(),
        branching,
        kappa: system.model.kernel.kappa,
    })
}

impl SecondMomentFunctions {
    fn sites(&self) -> usize {
        self.v.len()
    }

    pub fn potential(&self, x: usize, y: usize) -> f64 {
        self.v[x] + self.v[y]
    }

    /// `F(t, x) = m_1 (mu + sum (n-1)^2 b_n) + k + kappa L_a m_1`
    pub fn big_f(&self, t: f64, x: usize) -> f64 {
        let m = self.path.eval(t, x);
        let lap: f64 = self
            .kernel
            .neighbours_of(x)
            .iter()
            .zip(self.kernel.weights())
            .map(|(&y, &w)| w * (self.path.eval(t, y) - m))
            .sum();
        m * self.branching[x] + self.k[x] + self.kappa * lap
    }

    fn a(&self, x: usize, y: usize) -> f64 {
        let grid = self.kernel.grid();
        let (cx, cy) = (grid.coords(x), grid.coords(y));
        let diff: Vec<i64> = cx.iter().zip(&cy).map(|(&a, &b)| a as i64 - b as i64).collect();
        self.weight[grid.offset_site(&diff)]
    }

    /// `f(t, x, y)`, optionally without the `delta_x(y) F` part.
    pub fn small_f(&self, t: f64, x: usize, y: usize, with_delta: bool) -> f64 {
        let (mx, my) = (self.path.eval(t, x), self.path.eval(t, y));
        let mut out = self.k[x] * my + self.k[y] * mx - self.kappa * self.a(x, y) * (mx + my);
        if with_delta && x == y {
            out += self.big_f(t, x);
        }
        out
    }

    pub fn pair_potential(&self) -> Vec<f64> {
        let n = self.sites();
        (0..n * n).map(|p| self.potential(p / n, p % n)).collect()
    }
}

/// Which part of `f` drives a pair solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSource {
    /// Full `f`
    Full,
    /// `f` without `delta_x(y) F`
    WithoutDelta,
    /// `delta_x(y) F` alone
    DeltaOnly,
    Zero,
}

/// Solves the pair problem on `T x T` with the chosen source and initial data.
pub fn solve_pair(
    system: &PerturbedSystem,
    funcs: &SecondMomentFunctions,
    source: PairSource,
    initial: Vec<f64>,
    times: &[f64],
    control: StepControl,
) -> Result<Vec<Vec<f64>>> {
    let kernel = TorusKernel::pair(&system.model.kernel, &system.model.grid)?;
    let n = funcs.sites();
    let f = funcs.clone();
    let source = match source {
        PairSource::Zero => Source::Zero,
        PairSource::Full => Source::dynamic(move |t, p| f.small_f(t, p / n, p % n, true)),
        PairSource::WithoutDelta => Source::dynamic(move |t, p| f.small_f(t, p / n, p % n, false)),
        PairSource::DeltaOnly => {
            Source::dynamic(move |t, p| if p / n == p % n { f.big_f(t, p / n) } else { 0.0 })
        }
    };
    let problem = ParabolicProblem::new(kernel, 2.0 * system.diffusion, funcs.pair_potential(), source, initial)?;
    solve_direct_at(&problem, times, control)
}

/// `L(t, x, y)`: zero initial data, source `delta_x(y) F(t, x)`.
pub fn compute_l(system: &PerturbedSystem, funcs: &SecondMomentFunctions, times: &[f64], control: StepControl) -> Result<Vec<Vec<f64>>> {
    let n = funcs.sites();
    solve_pair(system, funcs, PairSource::DeltaOnly, vec![0.0; n * n], times, control)
}

/// Full two-point moment `m_2(t, x, y)`.
pub fn solve_m2(system: &PerturbedSystem, funcs: &SecondMomentFunctions, times: &[f64], control: StepControl) -> Result<Vec<Vec<f64>>> {
    solve_pair(system, funcs, PairSource::Full, system.u0_pair.clone(), times, control)
}

/// Fixed ingredients of a stability experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySetup {
    pub env: PerturbationEnvelope,
    pub kernel: KernelSpec,
    pub grid: TorusGrid,
    /// Splitting intensities shared by all sites; `mu(x) = v(x) + beta`.
    pub offspring: BTreeMap<u32, f64>,
    pub diffusion: f64,
    pub horizon: f64,
    pub output_step: f64,
}

impl StabilitySetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.kernel.validate().into_result()?;
        self.grid.check_kernel(&self.kernel)?;
        BranchingLaw::new(0.0, self.offspring.clone()).validate()?;
        if !(self.horizon > 0.0) || !(self.output_step > 0.0) || !(self.diffusion >= 0.0) {
            return Err(BrwError::InvalidParameter(format!(
                "horizon {}, output step {} and diffusion {} must be positive",
                self.horizon, self.output_step, self.diffusion
            )));
        }
        Ok(())
    }

    pub fn output_times(&self) -> Vec<f64> {
        let steps = (self.horizon / self.output_step).round().max(1.0) as usize;
        (0..=steps).map(|i| self.horizon * i as f64 / steps as f64).collect()
    }

    pub fn bounds(&self) -> Result<EnvelopeBounds> {
        EnvelopeBounds::new(self.env, self.kernel.kappa)
    }

    /// Builds a system from explicit per-site fields.
    pub fn system(&self, v: &[f64], k: &[f64], u0: Vec<f64>, u0_pair: Vec<f64>) -> Result<PerturbedSystem> {
        let beta = BranchingLaw::new(0.0, self.offspring.clone()).beta();
        let laws = v
            .iter()
            .map(|&vx| BranchingLaw::new(vx + beta, self.offspring.clone()))
            .collect();
        let model = SpatialModel::new(self.kernel.clone(), self.grid.clone(), laws, k.to_vec())?;
        PerturbedSystem::new(model, u0, u0_pair, self.diffusion)
    }

    /// Every field at its center.
    pub fn centered(&self) -> Result<PerturbedSystem> {
        let n = self.grid.num_sites();
        let e = &self.env;
        self.system(&vec![e.v0; n], &vec![e.k0; n], vec![e.u0; n], vec![e.u0_pair; n * n])
    }

    /// i.i.d. uniform fields on the admissible windows; the pair data is
    /// drawn on `x <= y` and mirrored.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PerturbedSystem> {
        let n = self.grid.num_sites();
        let e = self.env;
        let mut uniform = |c: f64| if e.epsilon > 0.0 { rng.random_range(c - e.epsilon..=c + e.epsilon) } else { c };
        let v: Vec<f64> = (0..n).map(|_| uniform(e.v0)).collect();
        let k: Vec<f64> = (0..n).map(|_| uniform(e.k0)).collect();
        let u0: Vec<f64> = (0..n).map(|_| uniform(e.u0)).collect();
        let mut pair = vec![0.0; n * n];
        for x in 0..n {
            for y in x..n {
                let w = uniform(e.u0_pair);
                pair[x * n + y] = w;
                pair[y * n + x] = w;
            }
        }
        self.system(&v, &k, u0, pair)
    }
}

/// Numerical slack on envelope comparisons.
pub const ENVELOPE_SLACK: f64 = 1e-8;

pub fn lyapunov_control() -> StepControl {
    StepControl {
        initial_step: 0.05,
        tolerance: 1e-10,
        max_halvings: 14,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub draw: usize,
    pub t: f64,
    pub site: Vec<usize>,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// `min(value - lower, upper - value)`
    pub margin: f64,
    pub pass: bool,
}

impl StabilityRow {
    fn new(draw: usize, t: f64, site: Vec<usize>, value: f64, lower: f64, upper: f64) -> Self {
        let margin = (value - lower).min(upper - value);
        StabilityRow {
            draw,
            t,
            site,
            value,
            lower,
            upper,
            margin,
            pass: margin >= -ENVELOPE_SLACK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
}

impl StabilityReport {
    pub fn violations(&self) -> impl Iterator<Item = &StabilityRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn passed(&self) -> bool {
        self.violations().next().is_none()
    }

    pub fn min_margin(&self) -> f64 {
        self.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    }
}

/// `m_1` rows of one system against the first-moment envelope.
pub fn m1_rows(setup: &StabilitySetup, system: &PerturbedSystem, draw: usize) -> Result<Vec<StabilityRow>> {
    let bounds = setup.bounds()?;
    let times = setup.output_times();
    let solution = system.solve_m1(&times, lyapunov_control())?;
    let mut rows = Vec::new();
    for (m, &t) in solution.iter().zip(&times) {
        let (lo, hi) = (bounds.m1_lower.eval(t), bounds.m1_upper.eval(t));
        for (x, &value) in m.iter().enumerate() {
            rows.push(StabilityRow::new(draw, t, vec![x], value, lo, hi));
        }
    }
    Ok(rows)
}

/// `m_2 - L - (k0/v0)^2` rows of one system against `[A, B]`.
pub fn m2_rows(setup: &StabilitySetup, system: &PerturbedSystem, draw: usize) -> Result<Vec<StabilityRow>> {
    let bounds = setup.bounds()?;
    let times = setup.output_times();
    let control = lyapunov_control();
    let path = system.first_moment_path(setup.horizon, control)?;
    let funcs = second_moment_functions(system, path)?;
    let m2 = solve_m2(system, &funcs, &times, control)?;
    let l = compute_l(system, &funcs, &times, control)?;
    let n = setup.grid.num_sites();
    let center = setup.env.center().powi(2);
    let mut rows = Vec::new();
    for ((m, l), &t) in m2.iter().zip(&l).zip(&times) {
        let (lo, hi) = (bounds.a(t), bounds.b(t));
        for p in 0..n * n {
            rows.push(StabilityRow::new(draw, t, vec![p / n, p % n], m[p] - l[p] - center, lo, hi));
        }
    }
    Ok(rows)
}

fn verify<F>(setup: &StabilitySetup, trials: usize, seed: u64, rows: F) -> Result<StabilityReport>
where
    F: Fn(&StabilitySetup, &PerturbedSystem, usize) -> Result<Vec<StabilityRow>> + Sync,
{
    setup.validate()?;
    let per_draw: Vec<Result<Vec<StabilityRow>>> = (0..trials)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(seed, d as u64);
            let system = setup.draw(&mut rng)?;
            let report = check_assumptions(&system.model, &setup.env, &system.u0, &system.u0_pair);
            if let Some(v) = report.first() {
                return Err(BrwError::InvalidParameter(format!(
                    "draw {d}: {} = {} outside [{}, {}] at {:?}",
                    v.field, v.value, v.lower, v.upper, v.site
                )));
            }
            rows(setup, &system, d)
        })
        .collect();
    let mut report = StabilityReport::default();
    for r in per_draw {
        report.rows.extend(r?);
    }
    Ok(report)
}

/// Solves `m_1` for `trials` random admissible draws and compares every site
/// and output time with the envelope.
pub fn verify_m1_stability(setup: &StabilitySetup, trials: usize, seed: u64) -> Result<StabilityReport> {
    verify(setup, trials, seed, m1_rows)
}

/// Same for `m_2 - L - (k0/v0)^2` against `[A, B]`.
pub fn verify_m2_stability(setup: &StabilitySetup, trials: usize, seed: u64) -> Result<StabilityReport> {
    verify(setup, trials, seed, m2_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::m1_closed_form;

    fn env(eps: f64) -> PerturbationEnvelope {
        PerturbationEnvelope::new(1.0, 1.0, 1.0, 1.0, eps).unwrap()
    }

    fn setup(l: usize, eps: f64, diffusion: f64) -> StabilitySetup {
        StabilitySetup {
            env: env(eps),
            kernel: KernelSpec::simple_random_walk(1, 0.25),
            grid: TorusGrid::cube(1, l).unwrap(),
            offspring: BTreeMap::from([(2, 0.5)]),
            diffusion,
            horizon: 4.0,
            output_step: 0.5,
        }
    }

    #[test]
    fn envelope_values() {
        let e = env(0.05);
        let (lo, hi) = m1_envelope(&e, 0.0, 2.0).unwrap();
        assert!((hi - 0.947_428_904_451_903_6).abs() < 1e-12, "{hi}");
        assert!((lo - 0.787_845_172_072_748_2).abs() < 1e-12, "{lo}");
        let (lo, hi) = m1_envelope(&e, 0.0, f64::INFINITY).unwrap();
        assert!((lo - 0.95 / 1.05).abs() < 1e-15 && (hi - 1.05 / 0.95).abs() < 1e-15);
        let (lo, hi) = m1_envelope(&env(0.0), 0.3, 1.7).unwrap();
        let exact = m1_closed_form(1.0, 1.0, 0.0, 0.3, 1.7);
        assert!((lo - exact).abs() < 1e-15 && (hi - exact).abs() < 1e-15);
        assert!(m1_envelope(&PerturbationEnvelope { epsilon: 1.0, ..e }, 0.0, 1.0).is_err());
    }

    #[test]
    fn envelope_rejects_wide_windows() {
        assert!(PerturbationEnvelope::new(1.0, 1.0, 1.0, 1.0, 0.6).is_err());
        assert!(PerturbationEnvelope::new(1.0, 1.0, 0.01, 1.0, 0.05).is_err());
        assert!(PerturbationEnvelope::new(-1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn assumption_checks() {
        let s = setup(6, 0.05, 1.0);
        let sys = s.centered().unwrap();
        assert!(check_assumptions(&sys.model, &s.env, &sys.u0, &sys.u0_pair).passed());
        let mut v = vec![1.0; 6];
        v[4] = 1.1;
        let bad = s.system(&v, &[1.0; 6], vec![1.0; 6], vec![1.0; 36]).unwrap();
        let report = check_assumptions(&bad.model, &s.env, &bad.u0, &bad.u0_pair);
        let first = report.first().unwrap();
        assert_eq!((first.field, first.site.clone()), ("v", vec![4]));
        let strict = env(0.0);
        assert!(!check_assumptions(&bad.model, &strict, &bad.u0, &bad.u0_pair).passed());
        assert!(check_assumptions(&sys.model, &strict, &sys.u0, &sys.u0_pair).passed());
    }

    #[test]
    fn constants_reproduce_bounds() {
        for eps in [0.0, 0.05, 0.2] {
            let b = EnvelopeBounds::new(env(eps), 0.25).unwrap();
            for t in [0.0, 0.4, 2.0, 7.5] {
                assert!((b.a(t) - b.a_from_constants(t)).abs() < 1e-12);
                assert!((b.b(t) - b.b_from_constants(t)).abs() < 1e-12);
                assert!(b.a(t) <= b.b(t));
            }
        }
    }

    #[test]
    fn envelopes_nest() {
        let narrow = EnvelopeBounds::new(env(0.02), 0.25).unwrap();
        let wide = EnvelopeBounds::new(env(0.1), 0.25).unwrap();
        for i in 0..200 {
            let t = i as f64 * 0.1;
            assert!(wide.m1_lower.eval(t) <= narrow.m1_lower.eval(t));
            assert!(wide.m1_upper.eval(t) >= narrow.m1_upper.eval(t));
            assert!(wide.a(t) <= narrow.a(t) && wide.b(t) >= narrow.b(t));
        }
    }

    #[test]
    fn extremal_fields_touch_the_upper_envelope() {
        let s = setup(8, 0.05, 1.0);
        let n = 8;
        let sys = s.system(&vec![0.95; n], &vec![1.05; n], vec![1.05; n], vec![1.0; n * n]).unwrap();
        let rows = m1_rows(&s, &sys, 0).unwrap();
        for r in rows {
            assert!((r.value - r.upper).abs() < 1e-8);
        }
    }

    #[test]
    fn centered_first_moment_collapses() {
        let s = setup(8, 0.0, 1.0);
        for r in m1_rows(&s, &s.centered().unwrap(), 0).unwrap() {
            assert!((r.value - 1.0).abs() < 1e-8 && r.margin.abs() < 1e-8);
        }
    }

    #[test]
    fn hermite_path_is_accurate() {
        let s = setup(6, 0.05, 1.0);
        let sys = s.draw(&mut stream_rng(4, 0)).unwrap();
        let path = sys.first_moment_path(3.0, lyapunov_control()).unwrap();
        let direct = sys.solve_m1(&[1.2345], lyapunov_control()).unwrap();
        for x in 0..6 {
            assert!((path.eval(1.2345, x) - direct[0][x]).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_convention_on_the_diagonal() {
        let s = setup(6, 0.0, 1.0);
        let sys = s.centered().unwrap();
        let f = second_moment_functions(&sys, sys.first_moment_path(1.0, lyapunov_control()).unwrap()).unwrap();
        // stationary m_1 = 1: f(x, x) = 2 k + F + 2 kappa, F = mu + sum (n-1)^2 b + k
        let big_f = 1.5 + 0.5 + 1.0;
        assert!((f.big_f(0.7, 2) - big_f).abs() < 1e-12);
        assert!((f.small_f(0.7, 2, 2, true) - (2.0 + big_f + 0.5)).abs() < 1e-12);
        assert!((f.small_f(0.7, 2, 3, true) - (2.0 - 0.25)).abs() < 1e-12);
        assert!((f.potential(1, 4) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_source_gives_zero_l() {
        let s = setup(4, 0.05, 1.0);
        let sys = s.centered().unwrap();
        let funcs = second_moment_functions(&sys, sys.first_moment_path(1.0, lyapunov_control()).unwrap()).unwrap();
        let out = solve_pair(&sys, &funcs, PairSource::Zero, vec![0.0; 16], &[1.0], lyapunov_control()).unwrap();
        assert!(out[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_moment_draws_stay_inside() {
        let s = setup(4, 0.05, 1.0);
        let report = verify_m2_stability(&s, 3, 11).unwrap();
        assert!(report.passed(), "{:?}", report.violations().next());
    }
}
