//! Experiment configuration, read from TOML.

use std::collections::BTreeMap;

use brw_core::kernel::{KernelSpec, LatticeOffset};
use brw_core::lyapunov::{PerturbationEnvelope, StabilitySetup};
use brw_core::model::{BranchingLaw, InitialCondition, ModelParams};
use brw_core::ode::StepControl;
use brw_core::TorusGrid;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub model: ModelBlock,
    pub grid: GridBlock,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fk: Option<FkBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub kappa: f64,
    pub mu: f64,
    /// Splitting intensities keyed by offspring count.
    #[serde(default)]
    pub b: BTreeMap<String, f64>,
    pub k: f64,
    /// `[offset, weight]` pairs; the nearest-neighbour walk when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Vec<(Vec<i64>, f64)>>,
    #[serde(default)]
    pub init: InitBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Const,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitBlock {
    #[serde(rename = "type")]
    pub kind: InitKind,
    pub value: f64,
}

impl Default for InitBlock {
    fn default() -> Self {
        InitBlock {
            kind: InitKind::Const,
            value: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub dimension: usize,
    pub sides: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    /// Defaults to the last snapshot time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub snapshot_times: Vec<f64>,
    pub replicas: usize,
    pub master_seed: u64,
    /// Drive all replicas from one random stream.
    pub shared_stream: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population_cap: Option<u64>,
    /// Displacements `u` reported for `m2(t, u)`.
    pub offsets: Vec<Vec<i64>>,
    /// Highest order integrated by the hierarchy task.
    pub max_order: usize,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock {
            horizon: None,
            snapshot_times: vec![1.0],
            replicas: 1000,
            master_seed: 0,
            shared_stream: false,
            population_cap: None,
            offsets: Vec::new(),
            max_order: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Step-halving agreement for the ODE integrations.
    pub ode: f64,
    pub initial_step: f64,
    /// Tail bound for the steady-state series.
    pub series: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            ode: 1e-8,
            initial_step: 0.1,
            series: 1e-14,
        }
    }
}

/// A site table given either as one value for every site or site by site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteTable {
    Uniform(f64),
    Sites(Vec<f64>),
}

impl SiteTable {
    pub fn expand(&self, name: &str, n: usize) -> Result<Vec<f64>, CliError> {
        match self {
            SiteTable::Uniform(v) => Ok(vec![*v; n]),
            SiteTable::Sites(v) if v.len() == n => Ok(v.clone()),
            SiteTable::Sites(v) => Err(CliError::Config(format!(
                "fk.{name} has {} entries but the torus has {n} sites",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkBlock {
    /// Generator multiplier; the model's kappa when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub potential: SiteTable,
    pub source: SiteTable,
    pub initial: SiteTable,
    pub time: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Sites estimated by Monte Carlo; all sites when empty.
    #[serde(default)]
    pub sites: Vec<usize>,
}

fn default_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovBlock {
    pub v0: f64,
    pub k0: f64,
    pub u0: f64,
    pub u0_pair: f64,
    pub epsilon: f64,
    #[serde(default = "default_diffusion")]
    pub diffusion: f64,
    pub horizon: f64,
    #[serde(default = "default_output_step")]
    pub output_step: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Explicit per-site tables; when given they replace the random draws.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
}

fn default_diffusion() -> f64 {
    1.0
}

fn default_output_step() -> f64 {
    0.5
}

fn default_draws() -> usize {
    10
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Schema-level checks that do not need a task.
    pub fn check(&self) -> Result<(), CliError> {
        let t = &self.tolerances;
        positive("tolerances.ode", t.ode)?;
        positive("tolerances.initial_step", t.initial_step)?;
        positive("tolerances.series", t.series)?;
        if self.grid.sides.len() != self.grid.dimension {
            return Err(CliError::Config(format!(
                "grid.sides has {} entries for dimension {}",
                self.grid.sides.len(),
                self.grid.dimension
            )));
        }
        if let Some(h) = self.run.horizon {
            if h.is_nan() || h < 0.0 || !h.is_finite() {
                return Err(CliError::Config(format!("run.horizon must be finite and >= 0, got {h}")));
            }
        }
        for n in self.model.b.keys() {
            if n.parse::<u32>().is_err() {
                return Err(CliError::Config(format!("model.b key {n:?} is not an offspring count")));
            }
        }
        for o in &self.run.offsets {
            if o.len() != self.grid.dimension {
                return Err(CliError::Config(format!(
                    "run.offsets entry {o:?} does not have dimension {}",
                    self.grid.dimension
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TorusGrid, CliError> {
        Ok(TorusGrid::new(self.grid.sides.clone())?)
    }

    pub fn kernel(&self) -> KernelSpec {
        let m = &self.model;
        match &m.kernel {
            Some(entries) => KernelSpec::new(
                self.grid.dimension,
                entries.iter().map(|(z, w)| (LatticeOffset(z.clone()), *w)).collect(),
                m.kappa,
            ),
            None => KernelSpec::simple_random_walk(self.grid.dimension, m.kappa),
        }
    }

    pub fn offspring(&self) -> BTreeMap<u32, f64> {
        self.model
            .b
            .iter()
            .map(|(n, &rate)| (n.parse().expect("checked on load"), rate))
            .collect()
    }

    pub fn params(&self) -> ModelParams {
        let init = match self.model.init.kind {
            InitKind::Const => InitialCondition::Const(self.model.init.value),
            InitKind::Poisson => InitialCondition::Poisson(self.model.init.value),
        };
        ModelParams {
            kernel: self.kernel(),
            law: BranchingLaw::new(self.model.mu, self.offspring()),
            k: self.model.k,
            init,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.run
            .horizon
            .unwrap_or_else(|| self.run.snapshot_times.iter().copied().fold(0.0, f64::max))
    }

    /// Reported displacements: the configured ones, or the origin.
    pub fn offsets(&self) -> Vec<Vec<i64>> {
        if self.run.offsets.is_empty() {
            vec![vec![0; self.grid.dimension]]
        } else {
            self.run.offsets.clone()
        }
    }

    pub fn control(&self) -> StepControl {
        StepControl {
            initial_step: self.tolerances.initial_step,
            tolerance: self.tolerances.ode,
            ..StepControl::default()
        }
    }

    pub fn stability_setup(&self) -> Result<(StabilitySetup, &LyapunovBlock), CliError> {
        let block = self
            .lyapunov
            .as_ref()
            .ok_or_else(|| CliError::Config("this task needs a [lyapunov] block".into()))?;
        let env = PerturbationEnvelope::new(block.v0, block.k0, block.u0, block.u0_pair, block.epsilon)?;
        let setup = StabilitySetup {
            env,
            kernel: self.kernel(),
            grid: self.grid()?,
            offspring: self.offspring(),
            diffusion: block.diffusion,
            horizon: block.horizon,
            output_step: block.output_step,
        };
        setup.validate()?;
        Ok((setup, block))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
kappa = 0.25
mu = 1.5
k = 1.0

[model.b]
2 = 0.5

[grid]
dimension = 1
sides = [8]
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.params(), ModelParams::binary_example());
        assert_eq!(c.run.replicas, 1000);
        assert_eq!(c.offsets(), vec![vec![0]]);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.model.init = InitBlock {
            kind: InitKind::Poisson,
            value: 2.5,
        };
        c.fk = Some(FkBlock {
            scale: None,
            potential: SiteTable::Uniform(1.0),
            source: SiteTable::Sites(vec![0.5; 8]),
            initial: SiteTable::Uniform(0.0),
            time: 1.0,
            paths: 200,
            sites: vec![0, 3],
        });
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("k = 1.0", "k = 1.0\nlambda = 3");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
    }

    #[test]
    fn tolerances_must_be_positive() {
        let text = format!("{MINIMAL}\n[tolerances]\node = 0.0\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("tolerances.ode"), "{err}");
    }
}
