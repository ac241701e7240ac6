//! Exact continuous-time simulation of the particle field on a torus, and
//! ensemble estimators built on top of it.
//!
//! The field is stored as occupation counts per site. Each step draws an
//! exponential waiting time from the total rate
//! `R = sum_x [n(x) (kappa + mu + sum_n b_n) + k]` and then a single event.
//! Because every per-particle rate is the same, the site of a particle event
//! is chosen proportionally to `n(x)` through a Fenwick tree over the integer
//! counts, which keeps the selection exact.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;

use crate::error::{BrwError, Result};
use crate::kernel::{TorusGrid, TorusKernel};
use crate::model::{InitialCondition, ModelParams};
use crate::rng::{stream_rng, Estimate, StreamRng};

/// Default cap on the total particle count of one replica.
pub const DEFAULT_POPULATION_CAP: u64 = 50_000_000;

/// Particle counts on the torus at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub grid: TorusGrid,
    pub counts: Vec<u64>,
    pub time: f64,
}

impl FieldState {
    pub fn new(grid: TorusGrid, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != grid.num_sites() {
            return Err(BrwError::GridMismatch(format!(
                "{} counts for {} sites",
                counts.len(),
                grid.num_sites()
            )));
        }
        Ok(FieldState {
            grid,
            counts,
            time: 0.0,
        })
    }

    pub fn constant(grid: &TorusGrid, c: u64) -> Self {
        FieldState {
            grid: grid.clone(),
            counts: vec![c; grid.num_sites()],
            time: 0.0,
        }
    }

    pub fn sample_initial<R: Rng + ?Sized>(grid: &TorusGrid, init: &InitialCondition, rng: &mut R) -> Self {
        let n = grid.num_sites();
        let counts = match *init {
            InitialCondition::Const(c) => vec![c as u64; n],
            InitialCondition::Poisson(l) if l > 0.0 => {
                let dist = Poisson::new(l).expect("validated poisson mean");
                (0..n).map(|_| dist.sample(rng) as u64).collect()
            }
            InitialCondition::Poisson(_) => vec![0; n],
        };
        FieldState {
            grid: grid.clone(),
            counts,
            time: 0.0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    Jump { from: usize, to: usize },
    Death { site: usize },
    /// One particle becomes `offspring`, adding `offspring - 1` at `site`.
    Branch { site: usize, offspring: u32 },
    Immigration { site: usize },
}

impl EventKind {
    /// Increment `xi` this event induces at `site`.
    pub fn increment_at(&self, site: usize) -> i64 {
        match *self {
            EventKind::Jump { from, to } => (to == site) as i64 - (from == site) as i64,
            EventKind::Death { site: s } => -((s == site) as i64),
            EventKind::Branch { site: s, offspring } => {
                if s == site {
                    offspring as i64 - 1
                } else {
                    0
                }
            }
            EventKind::Immigration { site: s } => (s == site) as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Fired(Event),
    /// Total rate is zero: empty field and no immigration.
    Exhausted,
}

/// Fenwick tree over integer site counts.
#[derive(Debug, Clone)]
struct CountTree {
    tree: Vec<u64>,
    top: usize,
}

impl CountTree {
    fn new(counts: &[u64]) -> Self {
        let n = counts.len();
        let mut tree = vec![0u64; n + 1];
        for (i, &c) in counts.iter().enumerate() {
            tree[i + 1] += c;
            let parent = (i + 1) + ((i + 1) & (i + 1).wrapping_neg());
            if parent <= n {
                let v = tree[i + 1];
                tree[parent] += v;
            }
        }
        let top = if n == 0 { 0 } else { 1usize << (usize::BITS - 1 - n.leading_zeros()) };
        CountTree { tree, top }
    }

    fn add(&mut self, site: usize, delta: i64) {
        let n = self.tree.len() - 1;
        let mut i = site + 1;
        while i <= n {
            self.tree[i] = (self.tree[i] as i64 + delta) as u64;
            i += i & i.wrapping_neg();
        }
    }

    /// Site holding the `rank`-th particle (0-based) in site order.
    fn find(&self, mut rank: u64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0usize;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rank {
                pos = next;
                rank -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

/// Per-particle event menu shared by every site.
#[derive(Debug, Clone)]
struct EventMenu {
    // cumulative rates: jumps (one per kernel entry), death, then branchings
    cumulative: Vec<f64>,
    jumps: usize,
    offspring: Vec<u32>,
}

impl EventMenu {
    fn new(params: &ModelParams, kernel: &TorusKernel) -> Self {
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for w in kernel.weights() {
            acc += params.kernel.kappa * w;
            cumulative.push(acc);
        }
        acc += params.law.mu;
        cumulative.push(acc);
        let mut offspring = Vec::new();
        for (&n, &bn) in &params.law.b {
            acc += bn;
            cumulative.push(acc);
            offspring.push(n);
        }
        EventMenu {
            cumulative,
            jumps: kernel.num_entries(),
            offspring,
        }
    }

    fn per_particle_rate(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn pick(&self, u: f64) -> usize {
        let target = u * self.per_particle_rate();
        self.cumulative
            .iter()
            .position(|&c| target < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

/// Compiled event dynamics for one parameter set on one torus.
#[derive(Debug, Clone)]
pub struct Dynamics {
    kernel: TorusKernel,
    menu: EventMenu,
    k: f64,
    params: ModelParams,
}

impl Dynamics {
    pub fn new(params: &ModelParams, grid: &TorusGrid) -> Result<Self> {
        params.validate()?;
        let kernel = TorusKernel::new(&params.kernel, grid)?;
        let menu = EventMenu::new(params, &kernel);
        Ok(Dynamics {
            kernel,
            menu,
            k: params.k,
            params: params.clone(),
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        self.kernel.grid()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn kernel(&self) -> &TorusKernel {
        &self.kernel
    }

    /// Total event rate of the site: `n(x)(kappa + mu + sum b_n) + k`.
    pub fn site_rate(&self, n: u64) -> f64 {
        n as f64 * self.menu.per_particle_rate() + self.k
    }

    pub fn total_rate(&self, state: &FieldState) -> f64 {
        state.total() as f64 * self.menu.per_particle_rate() + self.k * state.counts.len() as f64
    }

    /// Start a replica from `state`.
    pub fn start(&self, state: FieldState) -> Replica<'_> {
        let tree = CountTree::new(&state.counts);
        let total = state.total();
        Replica {
            dynamics: self,
            state,
            tree,
            total,
        }
    }
}

/// One evolving trajectory.
#[derive(Debug, Clone)]
pub struct Replica<'a> {
    dynamics: &'a Dynamics,
    state: FieldState,
    tree: CountTree,
    total: u64,
}

impl<'a> Replica<'a> {
    pub fn state(&self) -> &FieldState {
        &self.state
    }

    pub fn into_state(self) -> FieldState {
        self.state
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn total_rate(&self) -> f64 {
        let d = self.dynamics;
        self.total as f64 * d.menu.per_particle_rate() + d.k * self.state.counts.len() as f64
    }

    fn add(&mut self, site: usize, delta: i64) {
        let c = &mut self.state.counts[site];
        *c = (*c as i64 + delta) as u64;
        self.tree.add(site, delta);
        self.total = (self.total as i64 + delta) as u64;
    }

    /// Draws the waiting time to the next event without applying it.
    fn waiting_time<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        let rate = self.total_rate();
        if rate <= 0.0 {
            return None;
        }
        let e: f64 = Exp1.sample(rng);
        Some(e / rate)
    }

    /// Chooses and applies one event at time `time`.
    fn fire<R: Rng + ?Sized>(&mut self, time: f64, rng: &mut R) -> Event {
        let d = self.dynamics;
        let n_sites = self.state.counts.len();
        let particle_rate = self.total as f64 * d.menu.per_particle_rate();
        let immigration_rate = d.k * n_sites as f64;
        let u: f64 = rng.random::<f64>() * (particle_rate + immigration_rate);
        let kind = if u >= particle_rate {
            let site = rng.random_range(0..n_sites);
            self.add(site, 1);
            EventKind::Immigration { site }
        } else {
            let rank = rng.random_range(0..self.total);
            let site = self.tree.find(rank);
            let choice = d.menu.pick(rng.random::<f64>());
            if choice < d.menu.jumps {
                let to = d.kernel.neighbour(site, choice);
                self.add(site, -1);
                self.add(to, 1);
                EventKind::Jump { from: site, to }
            } else if choice == d.menu.jumps {
                self.add(site, -1);
                EventKind::Death { site }
            } else {
                let offspring = d.menu.offspring[choice - d.menu.jumps - 1];
                self.add(site, offspring as i64 - 1);
                EventKind::Branch { site, offspring }
            }
        };
        self.state.time = time;
        Event { kind, time }
    }

    /// Advances by exactly one event.
    pub fn step_event<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepOutcome {
        match self.waiting_time(rng) {
            None => StepOutcome::Exhausted,
            Some(dt) => {
                let t = self.state.time + dt;
                StepOutcome::Fired(self.fire(t, rng))
            }
        }
    }

    /// Runs until `horizon` and returns the state at each requested time.
    /// `snapshot_times` must be sorted and lie in `[current time, horizon]`.
    /// Fails with the event time if the population exceeds `cap`.
    pub fn run_until<R: Rng + ?Sized>(
        &mut self,
        horizon: f64,
        snapshot_times: &[f64],
        cap: u64,
        rng: &mut R,
    ) -> std::result::Result<Vec<FieldState>, f64> {
        let mut out = Vec::with_capacity(snapshot_times.len());
        let mut pending = snapshot_times.iter().copied().peekable();
        loop {
            let next = self
                .waiting_time(rng)
                .map(|dt| self.state.time + dt)
                .filter(|&t| t <= horizon);
            let limit = next.unwrap_or(f64::INFINITY);
            // snapshots before the next event see the current state
            while let Some(&s) = pending.peek() {
                if s >= limit || s > horizon {
                    break;
                }
                let mut snap = self.state.clone();
                snap.time = s;
                out.push(snap);
                pending.next();
            }
            match next {
                None => {
                    self.state.time = horizon;
                    return Ok(out);
                }
                Some(t) => {
                    self.fire(t, rng);
                    if self.total > cap {
                        return Err(t);
                    }
                }
            }
        }
    }
}

/// `step_event` as a free function over a replica.
pub fn step_event<R: Rng + ?Sized>(replica: &mut Replica<'_>, rng: &mut R) -> StepOutcome {
    replica.step_event(rng)
}

/// Simulates one replica from the model's initial law using stream 0 of `seed`.
pub fn simulate_replica(
    params: &ModelParams,
    grid: &TorusGrid,
    horizon: f64,
    snapshot_times: &[f64],
    seed: u64,
) -> Result<Vec<FieldState>> {
    let dynamics = Dynamics::new(params, grid)?;
    check_snapshot_times(horizon, snapshot_times)?;
    let mut rng = stream_rng(seed, 0);
    run_one(&dynamics, horizon, snapshot_times, DEFAULT_POPULATION_CAP, 0, &mut rng)
}

fn check_snapshot_times(horizon: f64, times: &[f64]) -> Result<()> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(BrwError::InvalidParameter(format!("horizon {horizon}")));
    }
    if times.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(BrwError::InvalidParameter("snapshot times must be sorted".into()));
    }
    if times.iter().any(|&t| !(t >= 0.0 && t <= horizon)) {
        return Err(BrwError::InvalidParameter(format!(
            "snapshot times must lie in [0, {horizon}]"
        )));
    }
    Ok(())
}

fn run_one(
    dynamics: &Dynamics,
    horizon: f64,
    snapshot_times: &[f64],
    cap: u64,
    replica: usize,
    rng: &mut StreamRng,
) -> Result<Vec<FieldState>> {
    let init = FieldState::sample_initial(dynamics.grid(), &dynamics.params().init, rng);
    let mut run = dynamics.start(init);
    run.run_until(horizon, snapshot_times, cap, rng)
        .map_err(|time| BrwError::Explosion { replica, time, cap })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub replicas: usize,
    pub master_seed: u64,
    /// Drive every replica with the same stream (a determinism check: the
    /// ensemble variance is then exactly zero).
    pub shared_stream: bool,
    pub population_cap: u64,
}

impl EnsembleOptions {
    pub fn new(replicas: usize, master_seed: u64) -> Self {
        EnsembleOptions {
            replicas,
            master_seed,
            shared_stream: false,
            population_cap: DEFAULT_POPULATION_CAP,
        }
    }
}

/// Snapshots of `M` independent replicas, stored replica-major.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: TorusGrid,
    pub times: Vec<f64>,
    pub replicas: Vec<Vec<FieldState>>,
}

pub fn run_ensemble(
    params: &ModelParams,
    grid: &TorusGrid,
    horizon: f64,
    snapshot_times: &[f64],
    options: &EnsembleOptions,
) -> Result<Ensemble> {
    if options.replicas < 2 {
        return Err(BrwError::InvalidParameter(format!(
            "an ensemble needs at least 2 replicas, got {}",
            options.replicas
        )));
    }
    check_snapshot_times(horizon, snapshot_times)?;
    let dynamics = Dynamics::new(params, grid)?;
    let results: Vec<Result<Vec<FieldState>>> = (0..options.replicas)
        .into_par_iter()
        .map(|i| {
            let stream = if options.shared_stream { 0 } else { i as u64 };
            let mut rng = stream_rng(options.master_seed, stream);
            run_one(&dynamics, horizon, snapshot_times, options.population_cap, i, &mut rng)
        })
        .collect();
    let replicas = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        grid: grid.clone(),
        times: snapshot_times.to_vec(),
        replicas,
    })
}

/// One summary line of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub time: f64,
    pub statistic: &'static str,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub replicas: usize,
    pub rows: Vec<StatRow>,
}

/// Moment estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub order: usize,
    pub time: f64,
    pub offsets: Vec<Vec<i64>>,
    pub estimate: Estimate,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn snapshot_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
            .ok_or(BrwError::MissingSnapshot(t))
    }

    /// Per-replica values of `stat` at snapshot `t`.
    pub fn per_replica(&self, t: f64, stat: impl Fn(&FieldState) -> f64) -> Result<Vec<f64>> {
        let idx = self.snapshot_index(t)?;
        Ok(self.replicas.iter().map(|r| stat(&r[idx])).collect())
    }

    /// Mean site count and the on-site second moment at every snapshot.
    pub fn stats(&self) -> EnsembleStats {
        let mut rows = Vec::new();
        for &t in &self.times {
            for (order, name) in [(1usize, "m1"), (2, "m2")] {
                let offsets = vec![vec![0i64; self.grid.dimension()]; order - 1];
                let est = estimate_moment(self, t, order, &offsets).expect("snapshot exists");
                rows.push(StatRow {
                    time: t,
                    statistic: name,
                    estimate: est.estimate,
                });
            }
        }
        EnsembleStats {
            replicas: self.len(),
            rows,
        }
    }
}

/// Spatial average of `prod_i n(x + offset_i)` over `x`, with `offset_0 = 0`.
pub fn spatial_product(state: &FieldState, shifts: &[usize]) -> f64 {
    let grid = &state.grid;
    let n = grid.num_sites();
    let mut acc = 0.0;
    for x in 0..n {
        let mut prod = state.counts[x] as f64;
        for &s in shifts {
            if prod == 0.0 {
                break;
            }
            prod *= state.counts[shift_site(grid, x, s)] as f64;
        }
        acc += prod;
    }
    acc / n as f64
}

// x + (site s viewed as a displacement)
fn shift_site(grid: &TorusGrid, x: usize, s: usize) -> usize {
    if grid.dimension() == 1 {
        let l = grid.sides()[0];
        return (x + s) % l;
    }
    let cx = grid.coords(x);
    let cs = grid.coords(s);
    let moved: Vec<usize> = cx
        .iter()
        .zip(&cs)
        .zip(grid.sides())
        .map(|((&a, &b), &l)| (a + b) % l)
        .collect();
    grid.index(&moved)
}

/// Ensemble estimate of the order-`p` moment (`p` in 1..=3) at time `t`.
/// Order 2 uses `offsets = [u]` (`E n(x) n(x+u)`), order 3 uses `[u, v]`.
pub fn estimate_moment(
    ensemble: &Ensemble,
    t: f64,
    order: usize,
    offsets: &[Vec<i64>],
) -> Result<MomentEstimate> {
    if !(1..=3).contains(&order) {
        return Err(BrwError::UnsupportedOrder(order));
    }
    if offsets.len() != order - 1 {
        return Err(BrwError::InvalidParameter(format!(
            "order {order} needs {} offsets, got {}",
            order - 1,
            offsets.len()
        )));
    }
    let grid = &ensemble.grid;
    for o in offsets {
        if !grid.contains_offset(o) {
            return Err(BrwError::OffsetOutOfRange { offset: o.clone() });
        }
    }
    let shifts: Vec<usize> = offsets.iter().map(|o| grid.offset_site(o)).collect();
    let samples = ensemble.per_replica(t, |s| spatial_product(s, &shifts))?;
    Ok(MomentEstimate {
        order,
        time: t,
        offsets: offsets.to_vec(),
        estimate: Estimate::from_samples(&samples),
    })
}

/// Ensemble average of `exp(-z n(t, x))`.
pub fn estimate_generating_function(ensemble: &Ensemble, z: f64, t: f64, site: usize) -> Result<Estimate> {
    if !(z >= 0.0) {
        return Err(BrwError::InvalidParameter(format!(
            "generating function argument z = {z} must be nonnegative"
        )));
    }
    if site >= ensemble.grid.num_sites() {
        return Err(BrwError::InvalidParameter(format!("site {site} outside the torus")));
    }
    let samples = ensemble.per_replica(t, |s| (-z * s.counts[site] as f64).exp())?;
    Ok(Estimate::from_samples(&samples))
}

/// Moments of `n(t, x)` read off the empirical generating function by
/// finite differences at `z = 0` with step `h`:
/// order 1 is `-(F(h) - F(0))/h`, order 2 is `(F(2h) - 2F(h) + F(0))/h^2`.
/// The standard error is that of the per-replica difference quotients.
pub fn generating_function_moment(
    ensemble: &Ensemble,
    t: f64,
    site: usize,
    order: usize,
    h: f64,
) -> Result<Estimate> {
    if !(h > 0.0) {
        return Err(BrwError::InvalidParameter(format!("step h = {h}")));
    }
    let f = |z: f64| estimate_generating_function(ensemble, z, t, site).map(|e| e.mean);
    let samples = match order {
        1 => ensemble.per_replica(t, |s| {
            let n = s.counts[site] as f64;
            (1.0 - (-h * n).exp()) / h
        })?,
        2 => ensemble.per_replica(t, |s| {
            let n = s.counts[site] as f64;
            ((-2.0 * h * n).exp() - 2.0 * (-h * n).exp() + 1.0) / (h * h)
        })?,
        other => return Err(BrwError::UnsupportedOrder(other)),
    };
    let mut est = Estimate::from_samples(&samples);
    // report the mean through F itself so it is literally the difference quotient
    est.mean = match order {
        1 => -(f(h)? - f(0.0)?) / h,
        _ => (f(2.0 * h)? - 2.0 * f(h)? + f(0.0)?) / (h * h),
    };
    Ok(est)
}

/// Which increments a drift audit examines.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftProbes {
    /// `(site, p)`: compare `E[dn(x)^p]`.
    pub powers: Vec<(usize, u32)>,
    /// `(x, y, p, q)` with `x != y`: compare `E[dn(x)^p dn(y)^q]`.
    pub mixed: Vec<(usize, usize, u32, u32)>,
}

impl DriftProbes {
    /// Site `x` is the most occupied site. Powers 1..=3 there; the pair
    /// `(x, x + z_0)` with `(p, q)` in `{1,2}^2`; and `(x, far)` with `p = q = 1`
    /// for a site outside the kernel's reach.
    pub fn standard(state: &FieldState, kernel: &TorusKernel) -> Self {
        let x = state
            .counts
            .iter()
            .enumerate()
            .max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let grid = &state.grid;
        let y = kernel.neighbour(x, 0);
        let half: Vec<i64> = grid.sides().iter().map(|&l| (l / 2) as i64).collect();
        let far = grid.shift(x, &half);
        let mut mixed = Vec::new();
        for p in 1..=2 {
            for q in 1..=2 {
                mixed.push((x, y, p, q));
            }
        }
        if far != x && !kernel.neighbours_of(x).contains(&far) {
            mixed.push((x, far, 1, 1));
        }
        DriftProbes {
            powers: (1..=3).map(|p| (x, p)).collect(),
            mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftCheck {
    pub label: String,
    pub empirical: Estimate,
    pub target: f64,
    pub bias_allowance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub delta: f64,
    pub restarts: usize,
    pub checks: Vec<DriftCheck>,
}

impl DriftReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// `a(y - x)` on the torus.
fn kernel_weight_between(kernel: &TorusKernel, x: usize, y: usize) -> f64 {
    kernel
        .neighbours_of(x)
        .iter()
        .zip(kernel.weights())
        .filter(|(&n, _)| n == y)
        .map(|(_, &w)| w)
        .sum()
}

/// Conditional rate of `xi(dt,x)^p` per unit time at a frozen state:
/// `sum (n-1)^p b_n n(x) + k + kappa sum_z a(z) n(x+z) + (-1)^p (mu + kappa) n(x)`.
pub fn single_site_rate(params: &ModelParams, kernel: &TorusKernel, counts: &[u64], x: usize, p: u32) -> f64 {
    let nx = counts[x] as f64;
    let inflow: f64 = kernel
        .neighbours_of(x)
        .iter()
        .zip(kernel.weights())
        .map(|(&y, &w)| w * counts[y] as f64)
        .sum();
    let sign = if p .is_multiple_of(2) { 1.0 } else { -1.0 };
    params.law.power_sum(p) * nx
        + params.k
        + params.kernel.kappa * inflow
        + sign * (params.law.mu + params.kernel.kappa) * nx
}

/// Conditional rate of `xi(dt,x)^p xi(dt,y)^q` for `x != y`:
/// `kappa [(-1)^p a(y-x) n(x) + (-1)^q a(x-y) n(y)]`.
pub fn pair_rate(params: &ModelParams, kernel: &TorusKernel, counts: &[u64], x: usize, y: usize, p: u32, q: u32) -> f64 {
    let sp = if p .is_multiple_of(2) { 1.0 } else { -1.0 };
    let sq = if q .is_multiple_of(2) { 1.0 } else { -1.0 };
    params.kernel.kappa
        * (sp * kernel_weight_between(kernel, x, y) * counts[x] as f64
            + sq * kernel_weight_between(kernel, y, x) * counts[y] as f64)
}

/// Restarts the frozen `state` `restarts` times for a short time `delta` and
/// compares the empirical increment moments against the conditional-rate
/// relations evaluated at the state. A check passes when
/// `|mean - rate * delta| <= 3 se + bias`, where the bias allowance bounds the
/// second-order (two-event) contribution:
/// `(delta R_near)(delta R_local) K^(p+q)`, `R_local` being the rate of events
/// that change the probed sites, `R_near` the rate of all events within two
/// kernel radii, and `K` the largest single-event increment.
pub fn drift_audit(
    params: &ModelParams,
    state: &FieldState,
    delta: f64,
    restarts: usize,
    seed: u64,
    probes: &DriftProbes,
) -> Result<DriftReport> {
    if !(delta > 0.0) || restarts < 2 {
        return Err(BrwError::InvalidParameter(format!(
            "drift audit needs delta > 0 and at least 2 restarts (got {delta}, {restarts})"
        )));
    }
    let dynamics = Dynamics::new(params, &state.grid)?;
    let kernel = dynamics.kernel();
    let counts = &state.counts;
    let n_checks = probes.powers.len() + probes.mixed.len();

    const CHUNK: usize = 1000;
    let chunks = restarts.div_ceil(CHUNK);
    let partial: Vec<Vec<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let mut sums = vec![(0.0, 0.0); n_checks];
            let todo = CHUNK.min(restarts - c * CHUNK);
            for _ in 0..todo {
                let mut start = state.clone();
                start.time = 0.0;
                let mut run = dynamics.start(start);
                run.run_until(delta, &[], u64::MAX, &mut rng)
                    .expect("no cap in drift audit");
                let end = run.state();
                let inc = |s: usize| end.counts[s] as f64 - counts[s] as f64;
                let values = probes
                    .powers
                    .iter()
                    .map(|&(x, p)| inc(x).powi(p as i32))
                    .chain(
                        probes
                            .mixed
                            .iter()
                            .map(|&(x, y, p, q)| inc(x).powi(p as i32) * inc(y).powi(q as i32)),
                    );
                for (slot, v) in sums.iter_mut().zip(values) {
                    slot.0 += v;
                    slot.1 += v * v;
                }
            }
            sums
        })
        .collect();
    let mut totals = vec![(0.0, 0.0); n_checks];
    for chunk in &partial {
        for (t, v) in totals.iter_mut().zip(chunk) {
            t.0 += v.0;
            t.1 += v.1;
        }
    }
    let m = restarts as f64;
    let estimate = |(s, ss): (f64, f64)| {
        let mean = s / m;
        let var = ((ss - m * mean * mean) / (m - 1.0)).max(0.0);
        Estimate {
            mean,
            se: (var / m).sqrt(),
            count: restarts,
        }
    };

    let max_jump = params.law.b.keys().map(|&n| (n - 1) as f64).fold(1.0, f64::max);
    let local_rate = |x: usize| {
        let inflow: f64 = kernel
            .neighbours_of(x)
            .iter()
            .map(|&y| counts[y] as f64)
            .sum::<f64>()
            * params.kernel.kappa;
        dynamics.site_rate(counts[x]) + inflow
    };
    let reach = 2 * params.kernel.support_radius() as i64;
    let near_rate = |sites: &[usize]| {
        let grid = &state.grid;
        let mut seen = std::collections::BTreeSet::new();
        for &s in sites {
            let d = grid.dimension();
            let side = (2 * reach + 1) as usize;
            for cell in 0..side.pow(d as u32) {
                let mut c = cell;
                let mut off = vec![0i64; d];
                for o in off.iter_mut() {
                    *o = (c % side) as i64 - reach;
                    c /= side;
                }
                seen.insert(grid.shift(s, &off));
            }
        }
        seen.iter().map(|&y| dynamics.site_rate(counts[y])).sum::<f64>()
    };

    let mut checks = Vec::with_capacity(n_checks);
    for (i, &(x, p)) in probes.powers.iter().enumerate() {
        let target = single_site_rate(params, kernel, counts, x, p) * delta;
        let bias = (delta * near_rate(&[x])) * (delta * local_rate(x)) * max_jump.powi(p as i32);
        let empirical = estimate(totals[i]);
        checks.push(DriftCheck {
            label: format!("E[dn({x})^{p}]"),
            passed: empirical.agrees_with(target, 3.0, bias),
            empirical,
            target,
            bias_allowance: bias,
        });
    }
    for (j, &(x, y, p, q)) in probes.mixed.iter().enumerate() {
        let target = pair_rate(params, kernel, counts, x, y, p, q) * delta;
        let bias = (delta * near_rate(&[x, y]))
            * (delta * (local_rate(x) + local_rate(y)))
            * max_jump.powi((p + q) as i32);
        let empirical = estimate(totals[probes.powers.len() + j]);
        checks.push(DriftCheck {
            label: format!("E[dn({x})^{p} dn({y})^{q}]"),
            passed: empirical.agrees_with(target, 3.0, bias),
            empirical,
            target,
            bias_allowance: bias,
        });
    }
    Ok(DriftReport {
        delta,
        restarts,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BranchingLaw;

    fn line(l: usize) -> TorusGrid {
        TorusGrid::cube(1, l).unwrap()
    }

    fn walk_only() -> ModelParams {
        ModelParams {
            law: BranchingLaw::new(0.0, []),
            k: 0.0,
            ..ModelParams::binary_example()
        }
    }

    #[test]
    fn empty_field_without_immigration_is_exhausted() {
        let p = walk_only();
        let d = Dynamics::new(&p, &line(8)).unwrap();
        let mut r = d.start(FieldState::constant(&line(8), 0));
        let mut rng = stream_rng(1, 0);
        for _ in 0..3 {
            assert_eq!(r.step_event(&mut rng), StepOutcome::Exhausted);
        }
    }

    #[test]
    fn pure_walk_conserves_particles() {
        let p = walk_only();
        let grid = line(8);
        let d = Dynamics::new(&p, &grid).unwrap();
        let mut r = d.start(FieldState::new(grid, vec![3, 0, 1, 0, 0, 7, 0, 2]).unwrap());
        let mut rng = stream_rng(2, 0);
        for _ in 0..5000 {
            match step_event(&mut r, &mut rng) {
                StepOutcome::Fired(e) => assert!(matches!(e.kind, EventKind::Jump { .. })),
                StepOutcome::Exhausted => panic!("walk cannot stop"),
            }
            assert_eq!(r.total(), 13);
            assert_eq!(r.state().total(), 13);
        }
    }

    #[test]
    fn site_rate_of_the_example() {
        let d = Dynamics::new(&ModelParams::binary_example(), &line(8)).unwrap();
        assert!((d.site_rate(1) - (2.25 + 1.0)).abs() < 1e-15);
        assert!((d.site_rate(0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn replicas_are_reproducible() {
        let p = ModelParams::binary_example();
        let times = [0.0, 0.5, 2.0];
        let a = simulate_replica(&p, &line(16), 2.0, &times, 42).unwrap();
        let b = simulate_replica(&p, &line(16), 2.0, &times, 42).unwrap();
        let c = simulate_replica(&p, &line(16), 2.0, &times, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a[0].counts, vec![1; 16]);
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let p = ModelParams::binary_example().with_init(InitialCondition::Const(2.0));
        let out = simulate_replica(&p, &line(8), 0.0, &[0.0], 7).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].counts, vec![2; 8]);
    }

    #[test]
    fn increments_of_events() {
        let jump = EventKind::Jump { from: 2, to: 3 };
        assert_eq!((jump.increment_at(2), jump.increment_at(3), jump.increment_at(4)), (-1, 1, 0));
        assert_eq!(EventKind::Branch { site: 1, offspring: 3 }.increment_at(1), 2);
        assert_eq!(EventKind::Death { site: 1 }.increment_at(1), -1);
        assert_eq!(EventKind::Immigration { site: 0 }.increment_at(0), 1);
    }

    #[test]
    fn fenwick_find_matches_linear_scan() {
        let counts = [0u64, 3, 0, 0, 5, 1, 0, 2, 0];
        let tree = CountTree::new(&counts);
        let mut rank = 0;
        for (site, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                assert_eq!(tree.find(rank), site);
                rank += 1;
            }
        }
    }

    #[test]
    fn shared_stream_has_zero_spread() {
        let p = ModelParams::binary_example();
        let mut opts = EnsembleOptions::new(4, 9);
        opts.shared_stream = true;
        let e = run_ensemble(&p, &line(8), 1.0, &[1.0], &opts).unwrap();
        for row in e.stats().rows {
            assert_eq!(row.estimate.se, 0.0);
        }
        assert!(run_ensemble(&p, &line(8), 1.0, &[1.0], &EnsembleOptions::new(1, 9)).is_err());
    }

    #[test]
    fn initial_moments() {
        let grid = line(16);
        let p = ModelParams::binary_example().with_init(InitialCondition::Const(3.0));
        let e = run_ensemble(&p, &grid, 0.0, &[0.0], &EnsembleOptions::new(3, 1)).unwrap();
        let m2 = estimate_moment(&e, 0.0, 2, &[vec![2]]).unwrap();
        assert_eq!((m2.estimate.mean, m2.estimate.se), (9.0, 0.0));

        let p = p.with_init(InitialCondition::Poisson(1.5));
        let e = run_ensemble(&p, &grid, 0.0, &[0.0], &EnsembleOptions::new(4000, 2)).unwrap();
        let m2 = estimate_moment(&e, 0.0, 2, &[vec![0]]).unwrap().estimate;
        assert!(m2.agrees_with(1.5 * 1.5 + 1.5, 3.0, 0.0), "{m2:?}");
    }

    #[test]
    fn estimator_argument_checks() {
        let p = ModelParams::binary_example();
        let e = run_ensemble(&p, &line(8), 1.0, &[1.0], &EnsembleOptions::new(2, 3)).unwrap();
        assert!(estimate_generating_function(&e, -0.1, 1.0, 0).is_err());
        assert_eq!(estimate_generating_function(&e, 0.0, 1.0, 0).unwrap().mean, 1.0);
        assert!(matches!(estimate_moment(&e, 1.0, 2, &[vec![5]]), Err(BrwError::OffsetOutOfRange { .. })));
        assert!(matches!(estimate_moment(&e, 0.5, 1, &[]), Err(BrwError::MissingSnapshot(_))));
    }

    #[test]
    fn explosion_guard_trips() {
        let p = ModelParams {
            law: BranchingLaw::binary(0.0, 3.0),
            ..ModelParams::binary_example()
        };
        let mut opts = EnsembleOptions::new(2, 5);
        opts.population_cap = 1000;
        let err = run_ensemble(&p, &line(8), 20.0, &[20.0], &opts).unwrap_err();
        assert!(matches!(err, BrwError::Explosion { replica: 0, .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn quiet_state_has_zero_drift() {
        let p = walk_only();
        let state = FieldState::constant(&line(8), 0);
        let d = Dynamics::new(&p, &line(8)).unwrap();
        let probes = DriftProbes::standard(&state, d.kernel());
        let report = drift_audit(&p, &state, 1e-3, 100, 1, &probes).unwrap();
        for c in &report.checks {
            assert_eq!((c.empirical.mean, c.target), (0.0, 0.0));
        }
        assert!(report.passed());
    }

    #[test]
    fn pair_relation_has_negative_sign() {
        let p = ModelParams::binary_example();
        let grid = line(8);
        let kernel = TorusKernel::new(&p.kernel, &grid).unwrap();
        let counts = [0, 2, 3, 0, 0, 0, 0, 0];
        assert!((pair_rate(&p, &kernel, &counts, 1, 2, 1, 1) + 0.25 * (0.5 * 2.0 + 0.5 * 3.0)).abs() < 1e-15);
        let r1 = single_site_rate(&p, &kernel, &counts, 1, 1);
        let expected = (0.5 - 1.5) * 2.0 + 1.0 + 0.25 * (0.5 * 3.0 - 2.0);
        assert!((r1 - expected).abs() < 1e-15);
    }
}
