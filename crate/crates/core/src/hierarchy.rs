//! Linear ODE system for the moment tensors `m_n(t, x_1, ..., x_n)`, `n <= 3`,
//! on a small torus.
//!
//! Rows are derived from the conditional increment relations rather than from
//! a closed-form equation: for a tuple with distinct sites `s` carrying
//! multiplicities `p_s`,
//!
//! ```text
//! d/dt E prod n(s)^{p_s} = E sum_{j != 0} prod_s C(p_s, j_s) n(s)^{p_s - j_s} R(j)
//! ```
//!
//! where `R(j) dt = E[prod xi(s)^{j_s} | n]` is nonzero only when `j` touches
//! one or two sites, and is affine in the field. Each monomial is mapped to
//! the sorted tuple of its order, so permuted tuples share identical rows.

use std::collections::HashMap;

use crate::error::{BrwError, Result};
use crate::kernel::{validate_kernel, KernelViolation, TorusGrid, TorusKernel};
use crate::model::{InitialCondition, ModelParams};
use crate::ode::{integrate_controlled, StepControl};

pub const MAX_ORDER: usize = 3;
const MAX_UNKNOWNS: usize = 1 << 16;

/// `m_n(t, .)` over ordered site tuples; tuple `(x_1..x_n)` sits at
/// `sum_i x_i N^{n-1-i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    pub order: usize,
    pub grid: TorusGrid,
    pub time: f64,
    pub values: Vec<f64>,
}

impl MomentTensor {
    pub fn tuple_index(&self, sites: &[usize]) -> usize {
        tuple_index(self.grid.num_sites(), sites)
    }

    pub fn get(&self, sites: &[usize]) -> f64 {
        assert_eq!(sites.len(), self.order);
        self.values[self.tuple_index(sites)]
    }

    /// Largest gap between an entry and the entry of its sorted tuple.
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.grid.num_sites();
        (0..self.values.len())
            .map(|i| {
                let mut t = tuple_sites(n, self.order, i);
                t.sort_unstable();
                (self.values[i] - self.values[tuple_index(n, &t)]).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn tuple_index(n: usize, sites: &[usize]) -> usize {
    sites.iter().fold(0, |acc, &s| acc * n + s)
}

fn tuple_sites(n: usize, order: usize, mut index: usize) -> Vec<usize> {
    let mut out = vec![0; order];
    for slot in out.iter_mut().rev() {
        *slot = index % n;
        index /= n;
    }
    out
}

fn tuple_count(n: usize, order: usize) -> usize {
    n.pow(order as u32)
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseBlock {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseBlock {
    fn from_rows(rows: &[Vec<(usize, f64)>]) -> Self {
        let mut block = SparseBlock {
            row_ptr: vec![0],
            ..Default::default()
        };
        for row in rows {
            for &(c, v) in row {
                block.cols.push(c);
                block.vals.push(v);
            }
            block.row_ptr.push(block.cols.len());
        }
        block
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// `y += A x`
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[i] * x[self.cols[i]];
            }
            *out += acc;
        }
    }

    pub fn max_abs_row_sum(&self) -> f64 {
        (0..self.rows())
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// `d m_n / dt = sum_{l=1}^{n} B_l m_l + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyOperator {
    pub order: usize,
    pub grid: TorusGrid,
    /// `blocks[l - 1]` couples to `m_l`.
    pub blocks: Vec<SparseBlock>,
    pub constant: Vec<f64>,
}

impl HierarchyOperator {
    pub fn block(&self, source_order: usize) -> &SparseBlock {
        &self.blocks[source_order - 1]
    }

    /// Coefficient of `m_l(cols)` in the row of `rows`.
    pub fn coefficient(&self, rows: &[usize], cols: &[usize]) -> f64 {
        let n = self.grid.num_sites();
        let r = tuple_index(n, rows);
        let c = tuple_index(n, cols);
        self.block(cols.len()).row(r).filter(|(j, _)| *j == c).map(|(_, v)| v).sum()
    }

    pub fn constant_at(&self, rows: &[usize]) -> f64 {
        self.constant[tuple_index(self.grid.num_sites(), rows)]
    }
}

/// Affine form `constant + sum coeff * n(site)`.
struct Affine {
    constant: f64,
    terms: Vec<(usize, f64)>,
}

struct Rates<'a> {
    params: &'a ModelParams,
    kernel: TorusKernel,
    /// `a` over displacement sites
    weight: Vec<f64>,
}

impl<'a> Rates<'a> {
    fn displacement(&self, from: usize, to: usize) -> usize {
        let grid = self.kernel.grid();
        let a = grid.coords(from);
        let b = grid.coords(to);
        let diff: Vec<i64> = b.iter().zip(&a).map(|(&y, &x)| y as i64 - x as i64).collect();
        grid.offset_site(&diff)
    }

    /// `E[xi(s)^p] / dt`
    fn single(&self, s: usize, p: u32) -> Affine {
        let kappa = self.params.kernel.kappa;
        let law = &self.params.law;
        let sign = if p.is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut terms = vec![(s, law.power_sum(p) + sign * (law.mu + kappa))];
        for (&y, &w) in self.kernel.neighbours_of(s).iter().zip(self.kernel.weights()) {
            terms.push((y, kappa * w));
        }
        Affine {
            constant: self.params.k,
            terms,
        }
    }

    /// `E[xi(s)^p xi(r)^q] / dt`, `s != r`
    fn pair(&self, s: usize, r: usize, p: u32, q: u32) -> Affine {
        let kappa = self.params.kernel.kappa;
        let sp = if p.is_multiple_of(2) { 1.0 } else { -1.0 };
        let sq = if q.is_multiple_of(2) { 1.0 } else { -1.0 };
        let a_sr = self.weight[self.displacement(s, r)];
        let a_rs = self.weight[self.displacement(r, s)];
        Affine {
            constant: 0.0,
            terms: vec![(s, kappa * sp * a_sr), (r, kappa * sq * a_rs)],
        }
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

type Polynomial = HashMap<Vec<usize>, f64>;

fn add_term(poly: &mut Polynomial, base: &[usize], scale: f64, form: &Affine) {
    if form.constant != 0.0 {
        *poly.entry(base.to_vec()).or_insert(0.0) += scale * form.constant;
    }
    for &(site, c) in &form.terms {
        if c == 0.0 {
            continue;
        }
        let mut mono = base.to_vec();
        let pos = mono.partition_point(|&x| x <= site);
        mono.insert(pos, site);
        *poly.entry(mono).or_insert(0.0) += scale * c;
    }
}

/// Sorted sites of `multiset` with `drop` copies of each listed site removed.
fn remove_copies(multiset: &[(usize, u32)], drop: &[(usize, u32)]) -> Vec<usize> {
    let mut out = Vec::new();
    for &(s, p) in multiset {
        let d = drop.iter().find(|(x, _)| *x == s).map_or(0, |(_, j)| *j);
        out.extend(std::iter::repeat_n(s, (p - d) as usize));
    }
    out
}

fn row_polynomial(rates: &Rates<'_>, sorted: &[usize]) -> Polynomial {
    let mut multiset: Vec<(usize, u32)> = Vec::new();
    for &s in sorted {
        match multiset.last_mut() {
            Some((x, p)) if *x == s => *p += 1,
            _ => multiset.push((s, 1)),
        }
    }
    let mut poly = Polynomial::new();
    for (i, &(s, ps)) in multiset.iter().enumerate() {
        for j in 1..=ps {
            let base = remove_copies(&multiset, &[(s, j)]);
            add_term(&mut poly, &base, binomial(ps, j), &rates.single(s, j));
        }
        for &(r, pr) in &multiset[i + 1..] {
            for j in 1..=ps {
                for l in 1..=pr {
                    let base = remove_copies(&multiset, &[(s, j), (r, l)]);
                    let scale = binomial(ps, j) * binomial(pr, l);
                    add_term(&mut poly, &base, scale, &rates.pair(s, r, j, l));
                }
            }
        }
    }
    poly
}

fn validate_for_hierarchy(params: &ModelParams) -> Result<()> {
    let mut report = validate_kernel(&params.kernel);
    // kappa = 0 is a legitimate degenerate case for the moment equations
    report
        .violations
        .retain(|v| !matches!(v, KernelViolation::NonPositiveKappa { kappa } if *kappa == 0.0));
    report.into_result()?;
    params.law.validate()?;
    if !(params.k >= 0.0) {
        return Err(BrwError::InvalidParameter(format!("immigration rate {}", params.k)));
    }
    params.init.validate()
}

/// Builds the row system of `m_order`.
pub fn assemble(order: usize, params: &ModelParams, grid: &TorusGrid) -> Result<HierarchyOperator> {
    if order == 0 || order > MAX_ORDER {
        return Err(BrwError::UnsupportedOrder(order));
    }
    validate_for_hierarchy(params)?;
    let n = grid.num_sites();
    if tuple_count(n, order) > MAX_UNKNOWNS {
        return Err(BrwError::InvalidParameter(format!(
            "{} unknowns for order {order} on {n} sites exceeds {MAX_UNKNOWNS}",
            tuple_count(n, order)
        )));
    }
    let kernel = TorusKernel::new(&params.kernel, grid)?;
    let weight = kernel.weight_table();
    let rates = Rates {
        params,
        kernel,
        weight,
    };

    let rows_total = tuple_count(n, order);
    let mut rows: Vec<Vec<Vec<(usize, f64)>>> = vec![Vec::with_capacity(rows_total); order];
    let mut constant = Vec::with_capacity(rows_total);
    let mut cache: HashMap<Vec<usize>, (Vec<Vec<(usize, f64)>>, f64)> = HashMap::new();
    for index in 0..rows_total {
        let mut sorted = tuple_sites(n, order, index);
        sorted.sort_unstable();
        let (per_order, c) = cache.entry(sorted.clone()).or_insert_with(|| {
            let poly = row_polynomial(&rates, &sorted);
            let mut per_order = vec![Vec::new(); order];
            let mut c = 0.0;
            let mut monomials: Vec<_> = poly.into_iter().collect();
            monomials.sort_by(|a, b| a.0.cmp(&b.0));
            for (mono, coeff) in monomials {
                if mono.is_empty() {
                    c += coeff;
                } else if coeff != 0.0 {
                    per_order[mono.len() - 1].push((tuple_index(n, &mono), coeff));
                }
            }
            (per_order, c)
        });
        for (l, r) in per_order.iter().enumerate() {
            rows[l].push(r.clone());
        }
        constant.push(*c);
    }
    Ok(HierarchyOperator {
        order,
        grid: grid.clone(),
        blocks: rows.iter().map(|r| SparseBlock::from_rows(r)).collect(),
        constant,
    })
}

/// Operators for every order up to `max_order`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub operators: Vec<HierarchyOperator>,
}

impl Hierarchy {
    pub fn max_order(&self) -> usize {
        self.operators.len()
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.operators[0].grid
    }
}

pub fn assemble_hierarchy(max_order: usize, params: &ModelParams, grid: &TorusGrid) -> Result<Hierarchy> {
    if max_order == 0 || max_order > MAX_ORDER {
        return Err(BrwError::UnsupportedOrder(max_order));
    }
    Ok(Hierarchy {
        operators: (1..=max_order)
            .map(|n| assemble(n, params, grid))
            .collect::<Result<_>>()?,
    })
}

/// `m_n(0, x_1..x_n) = prod_s E[n(0)^{p_s}]` for i.i.d. initial counts, where
/// `p_s` is the number of times site `s` occurs in the tuple.
pub fn initial_tensor(order: usize, init: &InitialCondition, grid: &TorusGrid) -> MomentTensor {
    let n = grid.num_sites();
    let values = (0..tuple_count(n, order))
        .map(|i| {
            let mut sites = tuple_sites(n, order, i);
            sites.sort_unstable();
            let mut prod = 1.0;
            let mut start = 0;
            while start < sites.len() {
                let end = start + sites[start..].iter().take_while(|&&s| s == sites[start]).count();
                prod *= init.raw_moment((end - start) as u32);
                start = end;
            }
            prod
        })
        .collect();
    MomentTensor {
        order,
        grid: grid.clone(),
        time: 0.0,
        values,
    }
}

pub fn initial_tensors(max_order: usize, init: &InitialCondition, grid: &TorusGrid) -> Vec<MomentTensor> {
    (1..=max_order).map(|n| initial_tensor(n, init, grid)).collect()
}

/// `result[n - 1][i]` is `m_n` at `times[i]`.
pub type Trajectory = Vec<Vec<MomentTensor>>;

/// Integrates every order by RK4 with step halving.
///
/// Order `n` is taken from the stacked system of orders `1..=n` alone, so its
/// trajectory never depends on higher-order data.
pub fn integrate(hierarchy: &Hierarchy, initial: &[MomentTensor], times: &[f64], control: StepControl) -> Result<Trajectory> {
    let max = hierarchy.max_order();
    if initial.len() != max {
        return Err(BrwError::InvalidParameter(format!(
            "{} initial tensors for a hierarchy of order {max}",
            initial.len()
        )));
    }
    for (n, (op, m0)) in hierarchy.operators.iter().zip(initial).enumerate() {
        if m0.order != n + 1 || m0.values.len() != op.constant.len() {
            return Err(BrwError::GridMismatch(format!(
                "initial tensor of order {} does not fit the order-{} operator",
                m0.order,
                n + 1
            )));
        }
    }
    let mut out = Vec::with_capacity(max);
    for top in 1..=max {
        let ops = &hierarchy.operators[..top];
        let sizes: Vec<usize> = ops.iter().map(|op| op.constant.len()).collect();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let y0: Vec<f64> = initial[..top].iter().flat_map(|m| m.values.iter().copied()).collect();
        let stiffness = ops.iter().map(|op| op.block(op.order).max_abs_row_sum()).fold(0.0, f64::max);
        let h0 = if stiffness > 0.0 {
            control.initial_step.min(1.0 / stiffness)
        } else {
            control.initial_step
        };
        let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
            for (n, op) in ops.iter().enumerate() {
                let span = offsets[n]..offsets[n] + sizes[n];
                let out = &mut dy[span];
                out.copy_from_slice(&op.constant);
                for (l, block) in op.blocks.iter().enumerate() {
                    block.mul_add(&y[offsets[l]..offsets[l] + sizes[l]], out);
                }
            }
        };
        let solution = integrate_controlled(rhs, &y0, times, control.with_initial_step(h0))?;
        let span = offsets[top - 1]..offsets[top - 1] + sizes[top - 1];
        out.push(
            solution
                .into_iter()
                .zip(times)
                .map(|(y, &t)| MomentTensor {
                    order: top,
                    grid: hierarchy.grid().clone(),
                    time: t,
                    values: y[span.clone()].to_vec(),
                })
                .collect(),
        );
    }
    Ok(out)
}
