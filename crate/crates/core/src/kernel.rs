//! Symmetric jump kernels on `Z^d`, their torus images, and the random-walk
//! generator `L_a f(x) = sum_{z != 0} a(z) (f(x + z) - f(x))`.
//!
//! The generator is kept free of the jump intensity `kappa`; callers multiply
//! by whatever scale their equation carries. The diagonal `a(0) = -1` is never
//! stored, the `-f(x)` term realizes it.

use serde::{Deserialize, Serialize};

use crate::error::{BrwError, Result};

/// A lattice displacement in `Z^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeOffset(pub Vec<i64>);

impl LatticeOffset {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub fn negated(&self) -> LatticeOffset {
        LatticeOffset(self.0.iter().map(|c| -c).collect())
    }

    /// Sup-norm of the displacement.
    pub fn radius(&self) -> u64 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }
}

impl From<Vec<i64>> for LatticeOffset {
    fn from(v: Vec<i64>) -> Self {
        LatticeOffset(v)
    }
}

/// Finitely supported symmetric jump distribution with jump intensity `kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub dimension: usize,
    pub entries: Vec<(LatticeOffset, f64)>,
    pub kappa: f64,
}

impl KernelSpec {
    pub fn new(dimension: usize, entries: Vec<(LatticeOffset, f64)>, kappa: f64) -> Self {
        KernelSpec {
            dimension,
            entries,
            kappa,
        }
    }

    /// Nearest-neighbour walk: each of the `2d` unit steps has weight `1/(2d)`.
    pub fn simple_random_walk(dimension: usize, kappa: f64) -> Self {
        let w = 1.0 / (2 * dimension) as f64;
        let mut entries = Vec::with_capacity(2 * dimension);
        for axis in 0..dimension {
            for sign in [1i64, -1] {
                let mut c = vec![0i64; dimension];
                c[axis] = sign;
                entries.push((LatticeOffset(c), w));
            }
        }
        KernelSpec::new(dimension, entries, kappa)
    }

    /// Largest sup-norm over the support.
    pub fn support_radius(&self) -> u64 {
        self.entries.iter().map(|(z, _)| z.radius()).max().unwrap_or(0)
    }

    /// Weight `a(z)` for `z != 0`; zero off the support.
    pub fn weight(&self, z: &LatticeOffset) -> f64 {
        self.entries
            .iter()
            .filter(|(o, _)| o == z)
            .map(|(_, w)| *w)
            .sum()
    }

    /// The walk's symbol `sum_{z != 0} cos(theta . z) a(z)`.
    pub fn fourier_symbol(&self, theta: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|(z, w)| {
                let phase: f64 = z.0.iter().zip(theta).map(|(&c, &t)| c as f64 * t).sum();
                phase.cos() * w
            })
            .sum()
    }

    pub fn validate(&self) -> KernelReport {
        validate_kernel(self)
    }
}

/// One failed kernel invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelViolation {
    Empty,
    DimensionMismatch { offset: LatticeOffset },
    ZeroOffset,
    NonPositiveWeight { offset: LatticeOffset, weight: f64 },
    DuplicateOffset { offset: LatticeOffset },
    Asymmetric { offset: LatticeOffset },
    Normalization { sum: f64 },
    /// The offsets generate a sublattice of the given index (0 = not full rank).
    Reducible { index: u64 },
    NonPositiveKappa { kappa: f64 },
}

impl std::fmt::Display for KernelViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelViolation::Empty => write!(f, "kernel has no entries"),
            KernelViolation::DimensionMismatch { offset } => {
                write!(f, "offset {:?} has the wrong dimension", offset.0)
            }
            KernelViolation::ZeroOffset => write!(f, "zero offset present (a(0) is implicit)"),
            KernelViolation::NonPositiveWeight { offset, weight } => {
                write!(f, "weight {weight} at offset {:?} is not in (0, 1]", offset.0)
            }
            KernelViolation::DuplicateOffset { offset } => {
                write!(f, "offset {:?} listed twice", offset.0)
            }
            KernelViolation::Asymmetric { offset } => {
                write!(f, "asymmetric: a({:?}) != a(-z)", offset.0)
            }
            KernelViolation::Normalization { sum } => write!(f, "weights sum to {sum}, not 1"),
            KernelViolation::Reducible { index } if *index == 0 => {
                write!(f, "reducible: offsets do not span a full-rank lattice")
            }
            KernelViolation::Reducible { index } => {
                write!(f, "reducible: offsets span a sublattice of index {index}")
            }
            KernelViolation::NonPositiveKappa { kappa } => write!(f, "kappa {kappa} is not positive"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelReport {
    pub violations: Vec<KernelViolation>,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            let msg: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(BrwError::InvalidParameter(format!("kernel: {}", msg.join("; "))))
        }
    }
}

/// Checks symmetry, normalization, irreducibility and the storage conventions.
pub fn validate_kernel(spec: &KernelSpec) -> KernelReport {
    let mut violations = Vec::new();
    if spec.entries.is_empty() {
        violations.push(KernelViolation::Empty);
        return KernelReport { violations };
    }
    if !(spec.kappa > 0.0) {
        violations.push(KernelViolation::NonPositiveKappa { kappa: spec.kappa });
    }

    let mut seen = std::collections::BTreeSet::new();
    for (z, w) in &spec.entries {
        if z.dim() != spec.dimension {
            violations.push(KernelViolation::DimensionMismatch { offset: z.clone() });
            continue;
        }
        if z.is_zero() {
            violations.push(KernelViolation::ZeroOffset);
        }
        if !(*w > 0.0 && *w <= 1.0) {
            violations.push(KernelViolation::NonPositiveWeight {
                offset: z.clone(),
                weight: *w,
            });
        }
        if !seen.insert(z.clone()) {
            violations.push(KernelViolation::DuplicateOffset { offset: z.clone() });
        }
    }
    if !violations.is_empty() {
        return KernelReport { violations };
    }

    for (z, w) in &spec.entries {
        let mirror = spec.weight(&z.negated());
        if (mirror - w).abs() > 1e-12 {
            violations.push(KernelViolation::Asymmetric { offset: z.clone() });
        }
    }

    let sum: f64 = spec.entries.iter().map(|(_, w)| w).sum();
    if (sum - 1.0).abs() > 1e-12 {
        violations.push(KernelViolation::Normalization { sum });
    }

    let offsets: Vec<&LatticeOffset> = spec
        .entries
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(z, _)| z)
        .collect();
    let index = lattice_index(&offsets, spec.dimension);
    if index != 1 {
        violations.push(KernelViolation::Reducible { index });
    }
    KernelReport { violations }
}

/// Index of the integer span of `offsets` in `Z^d` (0 if rank-deficient),
/// via row reduction to Hermite form.
fn lattice_index(offsets: &[&LatticeOffset], dim: usize) -> u64 {
    let mut rows: Vec<Vec<i128>> = offsets
        .iter()
        .map(|z| z.0.iter().map(|&c| c as i128).collect())
        .collect();
    let mut index: u64 = 1;
    let mut pivot_row = 0;
    for col in 0..dim {
        loop {
            // smallest nonzero |entry| in this column at or below pivot_row
            let best = (pivot_row..rows.len())
                .filter(|&r| rows[r][col] != 0)
                .min_by_key(|&r| rows[r][col].abs());
            let Some(best) = best else {
                return 0;
            };
            rows.swap(pivot_row, best);
            let p = rows[pivot_row][col];
            let mut clean = true;
            for r in pivot_row + 1..rows.len() {
                let q = rows[r][col] / p;
                if q != 0 {
                    for c in col..dim {
                        rows[r][c] -= q * rows[pivot_row][c];
                    }
                }
                if rows[r][col] != 0 {
                    clean = false;
                }
            }
            if clean {
                index = index.saturating_mul(p.unsigned_abs() as u64);
                break;
            }
        }
        pivot_row += 1;
    }
    index
}

/// Finite torus `Z_{L_1} x ... x Z_{L_d}`, sites indexed row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    sides: Vec<usize>,
}

impl TorusGrid {
    pub fn new(sides: Vec<usize>) -> Result<Self> {
        if sides.is_empty() || sides.contains(&0) {
            return Err(BrwError::InvalidParameter(format!(
                "torus sides must be positive, got {sides:?}"
            )));
        }
        Ok(TorusGrid { sides })
    }

    pub fn cube(dimension: usize, side: usize) -> Result<Self> {
        TorusGrid::new(vec![side; dimension])
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn dimension(&self) -> usize {
        self.sides.len()
    }

    pub fn num_sites(&self) -> usize {
        self.sides.iter().product()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.sides)
            .fold(0, |acc, (&c, &l)| acc * l + c % l)
    }

    pub fn coords(&self, mut site: usize) -> Vec<usize> {
        let mut out = vec![0; self.sides.len()];
        for (slot, &l) in out.iter_mut().zip(&self.sides).rev() {
            *slot = site % l;
            site /= l;
        }
        out
    }

    /// Site reached from `site` by displacement `offset`, with wraparound.
    pub fn shift(&self, site: usize, offset: &[i64]) -> usize {
        let c = self.coords(site);
        let moved: Vec<usize> = c
            .iter()
            .zip(offset)
            .zip(&self.sides)
            .map(|((&x, &z), &l)| (x as i64 + z).rem_euclid(l as i64) as usize)
            .collect();
        self.index(&moved)
    }

    /// Site corresponding to the displacement `offset` from the origin.
    pub fn offset_site(&self, offset: &[i64]) -> usize {
        self.shift(0, offset)
    }

    /// Signed representative of `site` viewed as a displacement from the
    /// origin, each coordinate in `(-L/2, L/2]`.
    pub fn displacement(&self, site: usize) -> Vec<i64> {
        self.coords(site)
            .iter()
            .zip(&self.sides)
            .map(|(&c, &l)| {
                let c = c as i64;
                let l = l as i64;
                if 2 * c > l {
                    c - l
                } else {
                    c
                }
            })
            .collect()
    }

    /// Whether `offset` is representable without aliasing: `|z_i| <= L_i / 2`.
    pub fn contains_offset(&self, offset: &[i64]) -> bool {
        offset.len() == self.sides.len()
            && offset
                .iter()
                .zip(&self.sides)
                .all(|(&z, &l)| 2 * z.unsigned_abs() as usize <= l)
    }

    /// Frequency vector `theta_j = 2 pi j / L` for the site index `j`.
    pub fn frequency(&self, site: usize) -> Vec<f64> {
        self.coords(site)
            .iter()
            .zip(&self.sides)
            .map(|(&j, &l)| 2.0 * std::f64::consts::PI * j as f64 / l as f64)
            .collect()
    }

    /// Requires every side to exceed twice the kernel's support radius.
    pub fn check_kernel(&self, kernel: &KernelSpec) -> Result<()> {
        if kernel.dimension != self.dimension() {
            return Err(BrwError::GridMismatch(format!(
                "kernel dimension {} vs torus dimension {}",
                kernel.dimension,
                self.dimension()
            )));
        }
        let r = kernel.support_radius() as usize;
        if let Some(&l) = self.sides.iter().find(|&&l| l <= 2 * r) {
            return Err(BrwError::GridMismatch(format!(
                "torus side {l} must exceed twice the support radius {r}"
            )));
        }
        Ok(())
    }

    /// Product torus `T x T` used for pair (two-point) problems. A pair
    /// `(x, y)` sits at index `x * N + y`.
    pub fn squared(&self) -> TorusGrid {
        let mut sides = self.sides.clone();
        sides.extend_from_slice(&self.sides);
        TorusGrid { sides }
    }
}

/// A kernel bound to a torus: neighbour tables precomputed for fast
/// generator application and event sampling.
#[derive(Debug, Clone)]
pub struct TorusKernel {
    grid: TorusGrid,
    weights: Vec<f64>,
    offsets: Vec<LatticeOffset>,
    // neighbours[site * m + j] = site + z_j
    neighbours: Vec<usize>,
    kappa: f64,
}

impl TorusKernel {
    pub fn new(kernel: &KernelSpec, grid: &TorusGrid) -> Result<Self> {
        grid.check_kernel(kernel)?;
        let m = kernel.entries.len();
        let n = grid.num_sites();
        let mut neighbours = Vec::with_capacity(n * m);
        for site in 0..n {
            for (z, _) in &kernel.entries {
                neighbours.push(grid.shift(site, &z.0));
            }
        }
        Ok(TorusKernel {
            grid: grid.clone(),
            weights: kernel.entries.iter().map(|(_, w)| *w).collect(),
            offsets: kernel.entries.iter().map(|(z, _)| z.clone()).collect(),
            neighbours,
            kappa: kernel.kappa,
        })
    }

    /// Two independent copies of the walk on `T x T`: jumps `(z, 0)` and
    /// `(0, z)` with weights `a(z) / 2`, so that `2 * L` of this kernel equals
    /// `L_x + L_y`.
    pub fn pair(kernel: &KernelSpec, grid: &TorusGrid) -> Result<Self> {
        let d = kernel.dimension;
        let mut entries = Vec::with_capacity(2 * kernel.entries.len());
        for (z, w) in &kernel.entries {
            let mut left = z.0.clone();
            left.extend(std::iter::repeat_n(0, d));
            let mut right = vec![0; d];
            right.extend_from_slice(&z.0);
            entries.push((LatticeOffset(left), w / 2.0));
            entries.push((LatticeOffset(right), w / 2.0));
        }
        let doubled = KernelSpec::new(2 * d, entries, kernel.kappa);
        TorusKernel::new(&doubled, &grid.squared())
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn num_entries(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn offsets(&self) -> &[LatticeOffset] {
        &self.offsets
    }

    #[inline]
    pub fn neighbour(&self, site: usize, entry: usize) -> usize {
        self.neighbours[site * self.weights.len() + entry]
    }

    #[inline]
    pub fn neighbours_of(&self, site: usize) -> &[usize] {
        let m = self.weights.len();
        &self.neighbours[site * m..(site + 1) * m]
    }

    /// `(L_a f)(x)`, unscaled.
    #[inline]
    pub fn generator_at(&self, f: &[f64], site: usize) -> f64 {
        let fx = f[site];
        self.neighbours_of(site)
            .iter()
            .zip(&self.weights)
            .map(|(&y, &w)| w * (f[y] - fx))
            .sum()
    }

    pub fn apply_generator(&self, f: &[f64]) -> Vec<f64> {
        (0..f.len()).map(|x| self.generator_at(f, x)).collect()
    }

    /// `sum_z cos(theta . z) a(z)`
    pub fn symbol(&self, theta: &[f64]) -> f64 {
        self.offsets
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| {
                let phase: f64 = z.0.iter().zip(theta).map(|(&c, &t)| c as f64 * t).sum();
                phase.cos() * w
            })
            .sum()
    }

    /// The symbol at every torus frequency, indexed like the sites.
    pub fn symbol_table(&self) -> Vec<f64> {
        (0..self.grid.num_sites())
            .map(|j| self.symbol(&self.grid.frequency(j)))
            .collect()
    }

    /// `a` as a table over torus displacements (`a(0) = 0` in this table).
    pub fn weight_table(&self) -> Vec<f64> {
        let mut table = vec![0.0; self.grid.num_sites()];
        for (z, w) in self.offsets.iter().zip(&self.weights) {
            table[self.grid.offset_site(&z.0)] += w;
        }
        table
    }

    /// `a * f` on the torus, i.e. `sum_z a(z) f(u - z)`.
    pub fn convolve(&self, f: &[f64]) -> Vec<f64> {
        // a is symmetric, so sum_z a(z) f(u - z) = sum_z a(z) f(u + z)
        (0..f.len())
            .map(|u| {
                self.neighbours_of(u)
                    .iter()
                    .zip(&self.weights)
                    .map(|(&y, &w)| w * f[y])
                    .sum()
            })
            .collect()
    }
}

/// Standalone form of [`TorusKernel::generator_at`].
pub fn apply_generator(kernel: &TorusKernel, f: &[f64], site: usize) -> f64 {
    kernel.generator_at(f, site)
}

/// Torus-wrapped `n`-fold convolution `a^{*n}` as a table over displacements.
pub fn convolution_power(kernel: &TorusKernel, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(BrwError::InvalidParameter(
            "convolution power needs n >= 1".into(),
        ));
    }
    let mut table = kernel.weight_table();
    for _ in 1..n {
        table = kernel.convolve(&table);
    }
    Ok(table)
}
