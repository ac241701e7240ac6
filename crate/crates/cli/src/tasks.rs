//! Task implementations. Each returns its tables and a short summary.

use brw_core::feynman_kac::{solve_direct_at, solve_fk_mc, ParabolicProblem, Source};
use brw_core::hierarchy::{assemble_hierarchy, initial_tensors, integrate, MAX_ORDER};
use brw_core::lyapunov::{check_assumptions, m1_rows, m2_rows, verify_m1_stability, verify_m2_stability, StabilityReport};
use brw_core::moments::{m2_steady_state_fourier, m2_steady_state_series, m2_transient, FirstMomentCurve};
use brw_core::simulator::{estimate_moment, run_ensemble, Ensemble, EnsembleOptions};
use brw_core::{Criticality, TorusGrid, TorusKernel};
use clap::ValueEnum;

use crate::config::ExperimentConfig;
use crate::output::{format_number, format_offset, Cell, Table};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Simulate,
    Moments,
    #[value(name = "steady-state")]
    SteadyState,
    Hierarchy,
    Fk,
    #[value(name = "lyapunov-m1")]
    LyapunovM1,
    #[value(name = "lyapunov-m2")]
    LyapunovM2,
    Validate,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Simulate => "simulate",
            Task::Moments => "moments",
            Task::SteadyState => "steady-state",
            Task::Hierarchy => "hierarchy",
            Task::Fk => "fk",
            Task::LyapunovM1 => "lyapunov-m1",
            Task::LyapunovM2 => "lyapunov-m2",
            Task::Validate => "validate",
        }
    }
}

pub struct TaskOutput {
    pub tables: Vec<Table>,
    pub summary: Vec<String>,
}

pub fn run_task(task: Task, config: &ExperimentConfig) -> Result<TaskOutput, CliError> {
    match task {
        Task::Simulate => simulate(config),
        Task::Moments => moments(config),
        Task::SteadyState => steady_state(config),
        Task::Hierarchy => hierarchy(config),
        Task::Fk => fk(config),
        Task::LyapunovM1 => lyapunov(config, false),
        Task::LyapunovM2 => lyapunov(config, true),
        Task::Validate => validate(config),
    }
}

fn ensemble(config: &ExperimentConfig, grid: &TorusGrid) -> Result<Ensemble, CliError> {
    let params = config.params();
    params.validate()?;
    let mut options = EnsembleOptions::new(config.run.replicas, config.run.master_seed);
    options.shared_stream = config.run.shared_stream;
    if let Some(cap) = config.run.population_cap {
        options.population_cap = cap;
    }
    Ok(run_ensemble(&params, grid, config.horizon(), &config.run.snapshot_times, &options)?)
}

fn simulate(config: &ExperimentConfig) -> Result<TaskOutput, CliError> {
    let grid = config.grid()?;
    let ens = ensemble(config, &grid)?;
    let stats = ens.stats();
    let mut table = Table::new("simulate", &["t", "stat", "mc_mean", "mc_se", "replicas"]);
    for row in &stats.rows {
        table.push(vec![
            Cell::Num(row.time),
            Cell::Text(row.statistic.into()),
            Cell::Num(row.estimate.mean),
            Cell::Num(row.estimate.se),
            Cell::Int(stats.replicas as u64),
        ]);
    }
    Ok(TaskOutput {
        summary: vec![format!("{} replicas, {} snapshots", stats.replicas, ens.times.len())],
        tables: vec![table],
    })
}

fn moments(config: &ExperimentConfig) -> Result<TaskOutput, CliError> {
    let grid = config.grid()?;
    let params = config.params();
    let ens = ensemble(config, &grid)?;
    let m1 = FirstMomentCurve::new(&params);
    let origin = vec![0i64; grid.dimension()];
    let mut table = Table::new("moments", &["t", "stat", "offset", "mc_mean", "mc_se", "analytic", "abs_diff"]);
    let mut worst: f64 = 0.0;
    let mut push = |t: f64, stat: &str, offset: &[i64], mean: f64, se: f64, analytic: f64| {
        let diff = (mean - analytic).abs();
        if se > 0.0 {
            worst = worst.max(diff / se);
        }
        table.push(vec![
            Cell::Num(t),
            Cell::Text(stat.into()),
            Cell::Text(format_offset(offset)),
            Cell::Num(mean),
            Cell::Num(se),
            Cell::Num(analytic),
            Cell::Num(diff),
        ]);
    };
    for &t in &config.run.snapshot_times {
        let est = estimate_moment(&ens, t, 1, &[])?.estimate;
        push(t, "m1", &origin, est.mean, est.se, m1.eval(t));
        let field = m2_transient(&params, &grid, t)?;
        for offset in config.offsets() {
            let est = estimate_moment(&ens, t, 2, std::slice::from_ref(&offset))?.estimate;
            push(t, "m2", &offset, est.mean, est.se, field.at(&offset)?);
        }
    }
    Ok(TaskOutput {
        summary: vec![format!("largest |mc - analytic| / se: {}", format_number(worst))],
        tables: vec![table],
    })
}

fn steady_state(config: &ExperimentConfig) -> Result<TaskOutput, CliError> {
    let grid = config.grid()?;
    let params = config.params();
    let series = m2_steady_state_series(&params, &grid, config.tolerances.series)?;
    let fourier = m2_steady_state_fourier(&params, &grid)?;
    let mut columns: Vec<String> = if grid.dimension() == 1 {
        vec!["u".into()]
    } else {
        (1..=grid.dimension()).map(|i| format!("u{i}")).collect()
    };
    columns.extend(["m2_series", "m2_fourier", "abs_diff"].map(String::from));
    let mut table = Table::with_columns("m2_steady", columns);
    let mut worst: f64 = 0.0;
    for site in 0..grid.num_sites() {
        let mut row: Vec<Cell> = grid
            .displacement(site)
            .into_iter()
            .map(|c| Cell::Text(c.to_string()))
            .collect();
        let diff = (series.values[site] - fourier[site]).abs();
        worst = worst.max(diff);
        row.extend([Cell::Num(series.values[site]), Cell::Num(fourier[site]), Cell::Num(diff)]);
        table.push(row);
    }
    Ok(TaskOutput {
        summary: vec![format!(
            "{} series terms, tail bound {}, max |series - fourier| {}",
            series.terms,
            format_number(series.tail_bound),
            format_number(worst)
        )],
        tables: vec![table],
    })
}

/// Tuples `(0, x_2, ..., x_n)` with `x_2 <= ... <= x_n`.
fn anchored_tuples(order: usize, sites: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0]];
    for _ in 1..order {
        out = out
            .into_iter()
            .flat_map(|t| {
                let from = if t.len() > 1 { *t.last().unwrap() } else { 0 };
                (from..sites).map(move |s| {
                    let mut next = t.clone();
                    next.push(s);
                    next
                })
            })
            .collect();
    }
    out
}

fn hierarchy(config: &ExperimentConfig) -> Result<TaskOutput, CliError> {
    let grid = config.grid()?;
    let params = config.params();
    let max_order = config.run.max_order;
    if !(1..=MAX_ORDER).contains(&max_order) {
        return Err(CliError::Config(format!("run.max_order must be in 1..={MAX_ORDER}, got {max_order}")));
    }
    let h = assemble_hierarchy(max_order, &params, &grid)?;
    let init = initial_tensors(max_order, &params.init, &grid);
    let times = &config.run.snapshot_times;
    let trajectory = integrate(&h, &init, times, config.control())?;
    let mut table = Table::new("hierarchy", &["t", "order", "offset", "value"]);
    for (ti, &t) in times.iter().enumerate() {
        for (order, per_time) in (1..=max_order).zip(&trajectory) {
            let tensor = &per_time[ti];
            for tuple in anchored_tuples(order, grid.num_sites()) {
                let offset: Vec<String> = tuple[1..].iter().map(|&s| format_offset(&grid.displacement(s))).collect();
                table.push(vec![
                    Cell::Num(t),
                    Cell::Int(order as u64),
                    Cell::Text(offset.join("|")),
                    Cell::Num(tensor.get(&tuple)),
                ]);
            }
        }
    }
    Ok(TaskOutput {
        summary: vec![format!("orders 1..={max_order} at {} times", times.len())],
        tables: vec![table],
    })
}

fn fk(config: &ExperimentConfig) -> Result<TaskOutput, CliError> {
    let block = config
        .fk
        .as_ref()
        .ok_or_else(|| CliError::Config("task fk needs an [fk] block".into()))?;
    let grid = config.grid()?;
    let kernel = TorusKernel::new(&config.kernel(), &grid)?;
    let n = grid.num_sites();
    let scale = block.scale.unwrap_or(config.model.kappa);
    let problem = ParabolicProblem::new(
        kernel,
        scale,
        block.potential.expand("potential", n)?,
        Source::Static(block.source.expand("source", n)?),
        block.initial.expand("initial", n)?,
    )?;
    let direct = solve_direct_at(&problem, &[block.time], config.control())?.remove(0);
    let sites: Vec<usize> = if block.sites.is_empty() { (0..n).collect() } else { block.sites.clone() };
    let mut table = Table::new("fk", &["site", "t", "direct", "mc_mean", "mc_se", "abs_diff"]);
    let mut worst: f64 = 0.0;
    for &x in &sites {
        if x >= n {
            return Err(CliError::Config(format!("fk.sites entry {x} is off the torus ({n} sites)")));
        }
        let seed = config.run.master_seed.wrapping_add(x as u64);
        let est = solve_fk_mc(&problem, block.time, x, block.paths, seed)?;
        let diff = (est.mean - direct[x]).abs();
        if est.se > 0.0 {
            worst = worst.max(diff / est.se);
        }
        table.push(vec![
            Cell::Int(x as u64),
            Cell::Num(block.time),
            Cell::Num(direct[x]),
            Cell::Num(est.mean),
            Cell::Num(est.se),
            Cell::Num(diff),
        ]);
    }
    Ok(TaskOutput {
        summary: vec![format!("largest |mc - direct| / se: {}", format_number(worst))],
        tables: vec![table],
    })
}

fn lyapunov(config: &ExperimentConfig, second: bool) -> Result<TaskOutput, CliError> {
    let (setup, block) = config.stability_setup()?;
    let report = match (&block.v, &block.k) {
        (Some(v), Some(k)) => {
            let n = setup.grid.num_sites();
            let env = setup.env;
            let system = setup.system(v, k, vec![env.u0; n], vec![env.u0_pair; n * n])?;
            let check = check_assumptions(&system.model, &env, &system.u0, &system.u0_pair);
            if let Some(bad) = check.first() {
                return Err(CliError::Config(format!(
                    "lyapunov.{} = {} at site {:?} lies outside [{}, {}]",
                    bad.field, bad.value, bad.site, bad.lower, bad.upper
                )));
            }
            let rows = if second { m2_rows(&setup, &system, 0)? } else { m1_rows(&setup, &system, 0)? };
            StabilityReport { rows }
        }
        (None, None) if second => verify_m2_stability(&setup, block.draws, config.run.master_seed)?,
        (None, None) => verify_m1_stability(&setup, block.draws, config.run.master_seed)?,
        _ => return Err(CliError::Config("lyapunov.v and lyapunov.k must be given together".into())),
    };
    let mut table = Table::new("lyapunov", &["draw", "t", "site", "value", "lower", "upper", "margin", "pass"]);
    for r in &report.rows {
        let site: Vec<String> = r.site.iter().map(|s| s.to_string()).collect();
        table.push(vec![
            Cell::Int(r.draw as u64),
            Cell::Num(r.t),
            Cell::Text(site.join(";")),
            Cell::Num(r.value),
            Cell::Num(r.lower),
            Cell::Num(r.upper),
            Cell::Num(r.margin),
            Cell::Bool(r.pass),
        ]);
    }
    Ok(TaskOutput {
        summary: vec![format!(
            "{} rows, {} violations, min margin {}",
            report.rows.len(),
            report.violations().count(),
            format_number(report.min_margin())
        )],
        tables: vec![table],
    })
}

fn validate(config: &ExperimentConfig) -> Result<TaskOutput, CliError> {
    let params = config.params();
    let kernel = config.kernel();
    kernel.validate().into_result()?;
    let grid = config.grid()?;
    grid.check_kernel(&kernel)?;
    params.law.validate().map_err(|e| CliError::Config(format!("law: {e}")))?;
    params.validate()?;
    let criticality = params.law.criticality();
    let mut summary = vec![format!("kernel pass, law pass, {criticality}")];
    if criticality != Criticality::Subcritical {
        summary.push(format!(
            "mu - beta = {}: steady-state and forgetting results do not apply",
            params.decay()
        ));
    }
    if config.lyapunov.is_some() {
        config.stability_setup()?;
        summary.push("lyapunov envelope pass".into());
    }
    Ok(TaskOutput {
        tables: Vec::new(),
        summary,
    })
}
