//! Branching and immigration parameters and the scalar rates derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{BrwError, Result};
use crate::kernel::{validate_kernel, KernelSpec, TorusGrid};

/// Default largest offspring number `N_max`.
pub const DEFAULT_MAX_OFFSPRING: u32 = 10;

const CRITICAL_TOL: f64 = 1e-12;

/// Death rate `mu` and splitting intensities `b_n` (`n >= 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BranchingLaw {
    pub mu: f64,
    #[serde(default)]
    pub b: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedRates {
    /// `sum (n-1) b_n`
    pub beta: f64,
    /// `-(mu + sum b_n)`
    pub b1: f64,
    /// `sum (n-1)^2 b_n`
    pub sum_sq: f64,
    /// `sum (n-1)(n-2) b_n`
    pub sum_fact: f64,
    /// `sum C(n,2) b_n`
    pub sum_choose2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

impl std::fmt::Display for Criticality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Criticality::Subcritical => "subcritical",
            Criticality::Critical => "critical",
            Criticality::Supercritical => "supercritical",
        };
        f.write_str(s)
    }
}

impl BranchingLaw {
    pub fn new(mu: f64, b: impl IntoIterator<Item = (u32, f64)>) -> Self {
        BranchingLaw {
            mu,
            b: b.into_iter().collect(),
        }
    }

    /// Binary splitting only.
    pub fn binary(mu: f64, b2: f64) -> Self {
        BranchingLaw::new(mu, [(2, b2)])
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_max(DEFAULT_MAX_OFFSPRING)
    }

    pub fn validate_with_max(&self, max_offspring: u32) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(BrwError::InvalidParameter(format!(
                "death rate mu = {} must be finite and nonnegative",
                self.mu
            )));
        }
        for (&n, &bn) in &self.b {
            if n < 2 || n > max_offspring {
                return Err(BrwError::InvalidParameter(format!(
                    "offspring number {n} outside 2..={max_offspring}"
                )));
            }
            if !(bn >= 0.0) || !bn.is_finite() {
                return Err(BrwError::InvalidParameter(format!(
                    "splitting intensity b_{n} = {bn} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    pub fn total_split_rate(&self) -> f64 {
        self.b.values().sum()
    }

    pub fn beta(&self) -> f64 {
        self.b.iter().map(|(&n, &bn)| (n - 1) as f64 * bn).sum()
    }

    /// `sum (n-1)^p b_n`
    pub fn power_sum(&self, p: u32) -> f64 {
        self.b
            .iter()
            .map(|(&n, &bn)| ((n - 1) as f64).powi(p as i32) * bn)
            .sum()
    }

    pub fn derived_rates(&self) -> DerivedRates {
        let mut r = DerivedRates {
            beta: 0.0,
            b1: -(self.mu + self.total_split_rate()),
            sum_sq: 0.0,
            sum_fact: 0.0,
            sum_choose2: 0.0,
        };
        for (&n, &bn) in &self.b {
            let n = n as f64;
            r.beta += (n - 1.0) * bn;
            r.sum_sq += (n - 1.0) * (n - 1.0) * bn;
            r.sum_fact += (n - 1.0) * (n - 2.0) * bn;
            r.sum_choose2 += n * (n - 1.0) / 2.0 * bn;
        }
        r
    }

    /// Infinitesimal generating function `F(s) = mu + b_1 s + sum b_n s^n`.
    pub fn infinitesimal_gf(&self, s: f64) -> f64 {
        let b1 = -(self.mu + self.total_split_rate());
        self.mu + b1 * s + self.b.iter().map(|(&n, &bn)| bn * s.powi(n as i32)).sum::<f64>()
    }

    pub fn criticality(&self) -> Criticality {
        let gap = self.mu - self.beta();
        if gap.abs() <= CRITICAL_TOL {
            Criticality::Critical
        } else if gap > 0.0 {
            Criticality::Subcritical
        } else {
            Criticality::Supercritical
        }
    }
}

pub fn derived_rates(law: &BranchingLaw) -> DerivedRates {
    law.derived_rates()
}

pub fn evaluate_infinitesimal_gf(law: &BranchingLaw, s: f64) -> f64 {
    law.infinitesimal_gf(s)
}

pub fn classify_criticality(law: &BranchingLaw) -> Criticality {
    law.criticality()
}

/// Law of the i.i.d. initial occupation numbers `n(0, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum InitialCondition {
    Const(f64),
    Poisson(f64),
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Const(1.0)
    }
}

impl InitialCondition {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitialCondition::Const(c) if c >= 0.0 && c.fract() == 0.0 => Ok(()),
            InitialCondition::Poisson(l) if l >= 0.0 && l.is_finite() => Ok(()),
            other => Err(BrwError::InvalidParameter(format!(
                "initial condition {other:?}: const needs a nonnegative integer, poisson a nonnegative mean"
            ))),
        }
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    /// `E n(0,x)^p`.
    pub fn raw_moment(&self, p: u32) -> f64 {
        match *self {
            InitialCondition::Const(c) => c.powi(p as i32),
            InitialCondition::Poisson(l) => {
                // Touchard polynomials: sum_j S(p, j) l^j
                let stirling: &[f64] = match p {
                    0 => return 1.0,
                    1 => &[1.0],
                    2 => &[1.0, 1.0],
                    3 => &[1.0, 3.0, 1.0],
                    4 => &[1.0, 7.0, 6.0, 1.0],
                    _ => panic!("raw_moment supports p <= 4"),
                };
                stirling
                    .iter()
                    .enumerate()
                    .map(|(j, s)| s * l.powi(j as i32 + 1))
                    .sum()
            }
        }
    }
}

/// Constant-rate model on `Z^d` (or its torus surrogate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kernel: KernelSpec,
    pub law: BranchingLaw,
    /// Immigration rate per site.
    pub k: f64,
    #[serde(default)]
    pub init: InitialCondition,
}

impl ModelParams {
    /// The one-dimensional example used throughout the tests: nearest
    /// neighbour walk with `kappa = 0.25`, `mu = 1.5`, `b_2 = 0.5`, `k = 1`,
    /// one particle per site initially.
    pub fn binary_example() -> Self {
        ModelParams {
            kernel: KernelSpec::simple_random_walk(1, 0.25),
            law: BranchingLaw::binary(1.5, 0.5),
            k: 1.0,
            init: InitialCondition::Const(1.0),
        }
    }

    pub fn with_init(mut self, init: InitialCondition) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_kernel(&self.kernel).into_result()?;
        self.law.validate()?;
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(BrwError::InvalidParameter(format!(
                "immigration rate k = {} must be finite and nonnegative",
                self.k
            )));
        }
        self.init.validate()
    }

    pub fn beta(&self) -> f64 {
        self.law.beta()
    }

    /// `mu - beta`
    pub fn decay(&self) -> f64 {
        self.law.mu - self.law.beta()
    }

    /// Returns `mu - beta` when the steady-state preconditions hold.
    pub fn require_subcritical(&self) -> Result<f64> {
        let margin = self.decay();
        if margin <= CRITICAL_TOL {
            return Err(BrwError::NotSubcritical { margin });
        }
        Ok(margin)
    }

    pub fn steady_mean(&self) -> Result<f64> {
        Ok(self.k / self.require_subcritical()?)
    }
}

/// Site-dependent rates on a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialModel {
    pub kernel: KernelSpec,
    pub grid: TorusGrid,
    pub laws: Vec<BranchingLaw>,
    pub k: Vec<f64>,
}

impl SpatialModel {
    pub fn new(kernel: KernelSpec, grid: TorusGrid, laws: Vec<BranchingLaw>, k: Vec<f64>) -> Result<Self> {
        let n = grid.num_sites();
        if laws.len() != n || k.len() != n {
            return Err(BrwError::GridMismatch(format!(
                "per-site tables have lengths {} and {}, torus has {n} sites",
                laws.len(),
                k.len()
            )));
        }
        grid.check_kernel(&kernel)?;
        for law in &laws {
            law.validate()?;
        }
        if let Some(bad) = k.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(BrwError::InvalidParameter(format!("immigration rate {bad}")));
        }
        Ok(SpatialModel { kernel, grid, laws, k })
    }

    /// Every site carries the same rates.
    pub fn homogeneous(params: &ModelParams, grid: &TorusGrid) -> Result<Self> {
        let n = grid.num_sites();
        SpatialModel::new(
            params.kernel.clone(),
            grid.clone(),
            vec![params.law.clone(); n],
            vec![params.k; n],
        )
    }

    pub fn mu(&self) -> Vec<f64> {
        self.laws.iter().map(|l| l.mu).collect()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.laws.iter().map(|l| l.beta()).collect()
    }

    /// `v(x) = mu(x) - beta(x)`.
    pub fn potential(&self) -> Vec<f64> {
        self.laws.iter().map(|l| l.mu - l.beta()).collect()
    }

    /// `sum (n-1)^2 b_n(x)`.
    pub fn sum_sq(&self) -> Vec<f64> {
        self.laws.iter().map(|l| l.power_sum(2)).collect()
    }

    pub fn require_positive_potential(&self) -> Result<()> {
        match self.potential().into_iter().enumerate().find(|(_, v)| *v <= 0.0) {
            Some((site, v)) => Err(BrwError::InvalidParameter(format!(
                "v(x) = mu - beta = {v} is not positive at site {site}"
            ))),
            None => Ok(()),
        }
    }
}
