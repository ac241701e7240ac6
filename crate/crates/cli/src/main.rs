//! `brw <task> --config <path> --out <dir> [--seed N] [--replicas M]`
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 numerical
//! failure (step control, explosion guard).

mod config;
mod output;
mod tasks;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use brw_core::BrwError;
use clap::Parser;
use serde_json::json;

use config::ExperimentConfig;
use output::{emit, sha256_hex, write_file, RunTag};
use tasks::{run_task, Task};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<BrwError> for CliError {
    fn from(e: BrwError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 2,
            CliError::Config(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "brw", version, about = "Branching random walks with immigration on a lattice torus")]
struct Args {
    task: Task,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides run.master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.replicas.
    #[arg(long)]
    replicas: Option<usize>,
}

fn configure_threads() -> Result<usize, CliError> {
    if let Ok(raw) = std::env::var("BRW_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("BRW_THREADS must be a positive integer, got {raw:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(rayon::current_num_threads())
}

fn load(args: &Args) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.config.display())))?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(name) = &config.task {
        if name != args.task.name() {
            return Err(CliError::Config(format!(
                "config selects task {name:?} but {:?} was requested",
                args.task.name()
            )));
        }
    }
    config.task = Some(args.task.name().to_string());
    if let Some(seed) = args.seed {
        config.run.master_seed = seed;
    }
    if let Some(m) = args.replicas {
        config.run.replicas = m;
    }
    Ok(config)
}

fn run(args: &Args) -> Result<Vec<String>, CliError> {
    let start = Instant::now();
    let config = load(args)?;
    let threads = configure_threads()?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;

    // The echo is the effective configuration, overrides included, so that
    // re-running it reproduces every output.
    let echo = config.to_toml();
    let tag = RunTag {
        master_seed: config.run.master_seed,
        config_hash: sha256_hex(echo.as_bytes()),
    };
    let out = run_task(args.task, &config)?;

    let mut written = Vec::new();
    let config_path = args.out.join("config.toml");
    write_file(&config_path, &echo)?;
    written.push(config_path);
    for table in &out.tables {
        written.extend(emit(&args.out, table, &tag)?);
    }
    if args.task == Task::Validate {
        let path = args.out.join("validate.txt");
        let mut text = out.summary.join("\n");
        text.push_str(&format!("\n# master_seed={} config_hash={}\n", tag.master_seed, tag.config_hash));
        write_file(&path, &text)?;
        written.push(path);
    }
    write_manifest(&args.out, args.task, &echo, &tag, threads, start, &written)?;
    Ok(out.summary)
}

fn write_manifest(
    dir: &Path,
    task: Task,
    echo: &str,
    tag: &RunTag,
    threads: usize,
    start: Instant,
    written: &[PathBuf],
) -> Result<(), CliError> {
    let mut files = Vec::new();
    for path in written {
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        files.push(json!({
            "file": path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "sha256": sha256_hex(&bytes),
        }));
    }
    let manifest = json!({
        "task": task.name(),
        "config": echo,
        "config_hash": tag.config_hash,
        "master_seed": tag.master_seed,
        "versions": { "brw": env!("CARGO_PKG_VERSION"), "brw-core": brw_core::VERSION },
        "threads": threads,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
        "outputs": files,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &text)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(summary) => {
            for line in summary {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("brw {}: {e}", args.task.name());
            ExitCode::from(e.exit_code())
        }
    }
}
