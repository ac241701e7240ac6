//! Lattice parabolic problems
//!
//! ```text
//! du/dt = s L_a u - v(x) u + f(t, x),   u(0, x) = u_0(x)
//! ```
//!
//! solved directly (RK4) and by the path representation
//!
//! ```text
//! u(t, x) = E_x[ e^{-int_0^t v(X_s) ds} u_0(X_t)
//!              + int_0^t f(t - s, X_s) e^{-int_0^s v(X_r) dr} ds ]
//! ```
//!
//! where `X` jumps at rate `s` with law `a`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::dft;
use crate::error::{BrwError, Result};
use crate::kernel::TorusKernel;
use crate::ode::{integrate_controlled, StepControl};
use crate::rng::{stream_rng, Estimate};

pub type SourceFn = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// Forcing term `f(t, x)`.
#[derive(Clone)]
pub enum Source {
    Zero,
    /// Time-independent table.
    Static(Vec<f64>),
    Dynamic(SourceFn),
}

impl Source {
    pub fn dynamic(f: impl Fn(f64, usize) -> f64 + Send + Sync + 'static) -> Self {
        Source::Dynamic(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: usize) -> f64 {
        match self {
            Source::Zero => 0.0,
            Source::Static(table) => table[x],
            Source::Dynamic(f) => f(t, x),
        }
    }
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Zero => write!(f, "Zero"),
            Source::Static(t) => f.debug_tuple("Static").field(t).finish(),
            Source::Dynamic(_) => write!(f, "Dynamic(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParabolicProblem {
    pub kernel: TorusKernel,
    /// Multiplier of the generator (jump rate of the path).
    pub scale: f64,
    pub potential: Vec<f64>,
    pub source: Source,
    pub initial: Vec<f64>,
}

fn check_table(name: &str, table: &[f64], n: usize) -> Result<()> {
    if table.len() != n {
        return Err(BrwError::GridMismatch(format!(
            "{name} has {} entries, torus has {n} sites",
            table.len()
        )));
    }
    if let Some((x, v)) = table.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(BrwError::InvalidParameter(format!("{name} is not finite at site {x}: {v}")));
    }
    Ok(())
}

impl ParabolicProblem {
    pub fn new(kernel: TorusKernel, scale: f64, potential: Vec<f64>, source: Source, initial: Vec<f64>) -> Result<Self> {
        let n = kernel.grid().num_sites();
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(BrwError::InvalidParameter(format!("generator scale {scale}")));
        }
        check_table("potential", &potential, n)?;
        check_table("initial data", &initial, n)?;
        match &source {
            Source::Static(t) => check_table("source", t, n)?,
            Source::Dynamic(f) => {
                if let Some(x) = (0..n).find(|&x| !f(0.0, x).is_finite()) {
                    return Err(BrwError::InvalidParameter(format!("source is not finite at site {x}")));
                }
            }
            Source::Zero => {}
        }
        Ok(ParabolicProblem {
            kernel,
            scale,
            potential,
            source,
            initial,
        })
    }

    pub fn num_sites(&self) -> usize {
        self.initial.len()
    }

    pub fn with_source(self, source: Source) -> Result<Self> {
        ParabolicProblem::new(self.kernel, self.scale, self.potential, source, self.initial)
    }

    pub fn with_initial(self, initial: Vec<f64>) -> Result<Self> {
        ParabolicProblem::new(self.kernel, self.scale, self.potential, self.source, initial)
    }

    fn rhs(&self, t: f64, u: &[f64], du: &mut [f64]) {
        for (x, out) in du.iter_mut().enumerate() {
            *out = self.scale * self.kernel.generator_at(u, x) - self.potential[x] * u[x] + self.source.eval(t, x);
        }
    }
}

/// Row-major `p(t, x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub sites: usize,
    pub data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.sites + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.sites..(x + 1) * self.sites]
    }

    /// `sum_y p(x, y) f(y)`
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.sites)
            .map(|x| self.row(x).iter().zip(f).map(|(p, v)| p * v).sum())
            .collect()
    }
}

/// `exp(t s L_a)` on the torus, from the spectral decomposition.
pub fn transition_matrix(kernel: &TorusKernel, scale: f64, t: f64) -> Result<TransitionMatrix> {
    if !(t >= 0.0) || !(scale >= 0.0) {
        return Err(BrwError::InvalidParameter(format!("need t >= 0 and scale >= 0, got {t}, {scale}")));
    }
    let grid = kernel.grid();
    let n = grid.num_sites();
    let spectrum: Vec<f64> = kernel
        .symbol_table()
        .into_iter()
        .map(|a| (scale * t * (a - 1.0)).exp())
        .collect();
    let from_origin = dft::inverse_real(grid, &spectrum);
    let coords: Vec<Vec<usize>> = (0..n).map(|x| grid.coords(x)).collect();
    let mut data = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            let diff: Vec<i64> = coords[y]
                .iter()
                .zip(&coords[x])
                .map(|(&b, &a)| b as i64 - a as i64)
                .collect();
            data[x * n + y] = from_origin[grid.offset_site(&diff)];
        }
    }
    Ok(TransitionMatrix { sites: n, data })
}

/// `u(t, .)` at each output time by RK4 with step halving.
pub fn solve_direct_at(problem: &ParabolicProblem, times: &[f64], control: StepControl) -> Result<Vec<Vec<f64>>> {
    let bound = problem.scale * 2.0 + problem.potential.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let h0 = if bound > 0.0 {
        control.initial_step.min(1.0 / bound)
    } else {
        control.initial_step
    };
    integrate_controlled(
        |t, u, du| problem.rhs(t, u, du),
        &problem.initial,
        times,
        control.with_initial_step(h0),
    )
}

pub fn solve_direct(problem: &ParabolicProblem, t: f64) -> Result<Vec<f64>> {
    Ok(solve_direct_at(problem, &[t], StepControl::default())?.remove(0))
}

pub type PathEstimate = Estimate;

// Gauss-Legendre nodes and weights on [-1, 1]
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];
const MAX_PANEL: f64 = 0.25;

/// `int_0^len e^{-v r} dr`
fn discount_integral(v: f64, len: f64) -> f64 {
    if v.abs() * len < 1e-12 {
        len * (1.0 - 0.5 * v * len)
    } else {
        -(-v * len).exp_m1() / v
    }
}

/// `int_{s0}^{s0+len} f(t - s, x) e^{-v (s - s0)} ds`
fn source_segment(source: &Source, t: f64, x: usize, v: f64, s0: f64, len: f64) -> f64 {
    match source {
        Source::Zero => 0.0,
        Source::Static(table) => table[x] * discount_integral(v, len),
        Source::Dynamic(f) => {
            let panels = (len / MAX_PANEL).ceil().max(1.0) as usize;
            let w = len / panels as f64;
            let mut acc = 0.0;
            for p in 0..panels {
                let mid = (p as f64 + 0.5) * w;
                for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
                    let r = mid + 0.5 * w * node;
                    acc += 0.5 * w * weight * f(t - s0 - r, x) * (-v * r).exp();
                }
            }
            acc
        }
    }
}

/// One path sample of the representation, started at `x`.
pub fn sample_path<R: Rng + ?Sized>(problem: &ParabolicProblem, t: f64, x: usize, rng: &mut R) -> f64 {
    let weights = problem.kernel.weights();
    let holding = (problem.scale > 0.0).then(|| Exp::new(problem.scale).expect("positive rate"));
    let mut site = x;
    let mut s = 0.0;
    let mut log_weight = 0.0f64;
    let mut value = 0.0f64;
    loop {
        let hold = holding.as_ref().map_or(f64::INFINITY, |e| e.sample(rng));
        let len = hold.min(t - s);
        let v = problem.potential[site];
        value += (-log_weight).exp() * source_segment(&problem.source, t, site, v, s, len);
        log_weight += v * len;
        s += len;
        if s >= t {
            break;
        }
        let mut pick = rng.random::<f64>();
        let mut entry = weights.len() - 1;
        for (j, &w) in weights.iter().enumerate() {
            if pick < w {
                entry = j;
                break;
            }
            pick -= w;
        }
        site = problem.kernel.neighbour(site, entry);
    }
    value + (-log_weight).exp() * problem.initial[site]
}

const PATHS_PER_STREAM: usize = 256;

/// Monte Carlo estimate of `u(t, x)` from `paths` independent walks.
pub fn solve_fk_mc(problem: &ParabolicProblem, t: f64, x: usize, paths: usize, seed: u64) -> Result<PathEstimate> {
    if paths < 100 {
        return Err(BrwError::InvalidParameter(format!("need at least 100 paths, got {paths}")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(BrwError::InvalidParameter(format!("time {t}")));
    }
    if x >= problem.num_sites() {
        return Err(BrwError::InvalidParameter(format!("site {x} is off the torus")));
    }
    let chunks = paths.div_ceil(PATHS_PER_STREAM);
    let samples: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let count = PATHS_PER_STREAM.min(paths - c * PATHS_PER_STREAM);
            (0..count).map(|_| sample_path(problem, t, x, &mut rng)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat();
    Ok(Estimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelSpec, TorusGrid};

    fn srw(l: usize) -> TorusKernel {
        TorusKernel::new(&KernelSpec::simple_random_walk(1, 0.25), &TorusGrid::cube(1, l).unwrap()).unwrap()
    }

    fn scalar(l: usize, v0: f64, k0: f64, u0: f64) -> ParabolicProblem {
        ParabolicProblem::new(srw(l), 1.0, vec![v0; l], Source::Static(vec![k0; l]), vec![u0; l]).unwrap()
    }

    #[test]
    fn transition_matrix_basics() {
        let k = srw(8);
        let id = transition_matrix(&k, 0.25, 0.0).unwrap();
        for x in 0..8 {
            for y in 0..8 {
                assert!((id.get(x, y) - if x == y { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        let p = transition_matrix(&k, 0.25, 3.0).unwrap();
        for x in 0..8 {
            assert!((p.row(x).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for y in 0..8 {
                assert!((p.get(x, y) - p.get(y, x)).abs() < 1e-14);
            }
        }
        let short = transition_matrix(&k, 0.25, 1e-3).unwrap();
        assert!((short.get(2, 3) - 0.125e-3).abs() < 1e-5);
        assert!((short.get(2, 1) - 0.125e-3).abs() < 1e-5);
    }

    #[test]
    fn constant_is_harmonic() {
        let p = ParabolicProblem::new(srw(8), 1.0, vec![0.0; 8], Source::Zero, vec![3.0; 8]).unwrap();
        for u in solve_direct(&p, 4.0).unwrap() {
            assert!((u - 3.0).abs() < 1e-12);
        }
        let e = solve_fk_mc(&p, 4.0, 2, 200, 1).unwrap();
        assert_eq!((e.mean, e.se), (3.0, 0.0));
    }

    #[test]
    fn scalar_problem() {
        let p = scalar(8, 1.3, 0.7, 2.0);
        let exact = 0.7 / 1.3 + (2.0 - 0.7 / 1.3) * (-1.3f64 * 2.0).exp();
        for u in solve_direct(&p, 2.0).unwrap() {
            assert!((u - exact).abs() < 1e-8);
        }
        // every path sees the same constant fields
        let e = solve_fk_mc(&p, 2.0, 0, 100, 3).unwrap();
        assert!((e.mean - exact).abs() < 1e-12);
    }

    #[test]
    fn heat_flow_matches_transition_matrix() {
        let k = srw(10);
        let u0: Vec<f64> = (0..10).map(|x| (x as f64).sin().abs()).collect();
        let p = ParabolicProblem::new(k.clone(), 0.8, vec![0.0; 10], Source::Zero, u0.clone()).unwrap();
        let direct = solve_direct(&p, 2.5).unwrap();
        let spectral = transition_matrix(&k, 0.8, 2.5).unwrap().apply(&u0);
        for (a, b) in direct.iter().zip(&spectral) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn dynamic_source_quadrature() {
        let l = 4;
        let p = ParabolicProblem::new(srw(l), 0.5, vec![0.5; l], Source::dynamic(|t, _| t.cos()), vec![0.0; l]).unwrap();
        let direct = solve_direct(&p, 3.0).unwrap();
        let e = solve_fk_mc(&p, 3.0, 1, 100, 9).unwrap();
        assert!((e.mean - direct[1]).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ParabolicProblem::new(srw(4), 1.0, vec![0.0; 3], Source::Zero, vec![0.0; 4]).is_err());
        assert!(ParabolicProblem::new(srw(4), 1.0, vec![f64::NAN; 4], Source::Zero, vec![0.0; 4]).is_err());
        let p = scalar(4, 1.0, 1.0, 1.0);
        assert!(solve_fk_mc(&p, 1.0, 0, 99, 0).is_err());
    }
}
