//! Experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context as _};
use serde::{Deserialize, Serialize};
use specrl_core::costsim::TimingModel;
use specrl_core::learner::{KdPolicy, UpdateMode, WeightMode};
use specrl_core::rl::WorkloadSpec;
use specrl_core::SdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Speculative decoding off.
    Baseline,
    /// One fixed configuration, frozen drafter.
    NaiveSpec,
    /// Adaptive server plus reward-weighted distillation.
    Respec,
    /// Adaptive server, frozen drafter.
    Frozen,
    /// Adaptive server plus unweighted distillation.
    UniformKd,
    /// Reward-weighted distillation at several update intervals.
    AsyncAblation,
    /// One skewed generation batch under every serving policy.
    SkewDemo,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Baseline,
        Scenario::NaiveSpec,
        Scenario::Respec,
        Scenario::Frozen,
        Scenario::UniformKd,
        Scenario::AsyncAblation,
        Scenario::SkewDemo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::NaiveSpec => "naive-spec",
            Scenario::Respec => "respec",
            Scenario::Frozen => "frozen",
            Scenario::UniformKd => "uniform-kd",
            Scenario::AsyncAblation => "async-ablation",
            Scenario::SkewDemo => "skew-demo",
        }
    }

    /// Serving policy used when the config does not override it.
    pub fn default_server(&self) -> ServerMode {
        match self {
            Scenario::Baseline => ServerMode::Off,
            Scenario::NaiveSpec => ServerMode::Fixed,
            _ => ServerMode::Adaptive,
        }
    }

    /// Distillation weighting, or `None` for a frozen drafter.
    pub fn weight_mode(&self) -> WeightMode {
        match self {
            Scenario::Respec | Scenario::AsyncAblation => WeightMode::Reward,
            Scenario::UniformKd => WeightMode::Uniform,
            _ => WeightMode::Frozen,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match Scenario::ALL.iter().find(|sc| sc.name() == s) {
            Some(sc) => Ok(*sc),
            None => {
                let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
                bail!("unknown scenario `{s}` (expected one of {})", names.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerMode {
    Off,
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub scenario: Scenario,
    pub workload: WorkloadSpec,
    pub drafter_order: usize,
    pub timing: TimingModel,
    pub grid: Vec<SdConfig>,
    pub batch_sizes: Vec<usize>,
    pub kd: KdPolicy,
    pub buffer_capacity: usize,
    pub steps: usize,
    pub actor_lr: f64,
    pub update_mode: UpdateMode,
    /// Overrides the scenario's serving policy.
    pub server: Option<ServerMode>,
    /// Configuration for fixed serving.
    pub fixed_config: SdConfig,
    /// Update intervals swept by the ablation.
    pub intervals: Vec<u64>,
    /// Request batches decoded by the skew demo.
    pub skew_rounds: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            scenario: Scenario::Respec,
            workload: WorkloadSpec::default(),
            drafter_order: 1,
            timing: TimingModel::default(),
            grid: SdConfig::default_grid(),
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            kd: KdPolicy::default(),
            buffer_capacity: 4096,
            steps: 100,
            actor_lr: 0.02,
            update_mode: UpdateMode::Async,
            server: None,
            fixed_config: SdConfig { rounds: 1, branching: 1, draft_len: 4, enabled: true },
            intervals: vec![1, 3, 5],
            skew_rounds: 4,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config. An empty file is rejected rather than defaulted.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        if text.trim().is_empty() {
            bail!("config is empty");
        }
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.timing.validate()?;
        self.kd.validate()?;
        if self.grid.is_empty() || self.grid.iter().any(|c| !c.enabled) {
            bail!("config grid must be non-empty and hold only enabled configurations");
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|b| !b.is_power_of_two()) {
            bail!("batch sizes must be non-empty powers of two");
        }
        if self.drafter_order > self.workload.actor_order {
            bail!("drafter order {} exceeds actor order {}", self.drafter_order, self.workload.actor_order);
        }
        if !self.fixed_config.enabled {
            bail!("fixed_config must be an enabled configuration");
        }
        if self.intervals.is_empty() || self.intervals.contains(&0) {
            bail!("intervals must be non-empty and positive");
        }
        if self.buffer_capacity == 0 {
            bail!("buffer_capacity must be positive");
        }
        if !(self.actor_lr >= 0.0 && self.actor_lr.is_finite()) {
            bail!("actor_lr must be a nonnegative number");
        }
        Ok(())
    }

    pub fn server_mode(&self) -> ServerMode {
        self.server.unwrap_or_else(|| self.scenario.default_server())
    }

    pub fn require_seed(&self) -> anyhow::Result<u64> {
        self.seed.context("a seed is required (pass --seed)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_rejected() {
        assert!(ExperimentConfig::parse("").is_err());
        assert!(ExperimentConfig::parse(" \n").is_err());
    }

    #[test]
    fn empty_object_takes_defaults() {
        assert_eq!(ExperimentConfig::parse("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_scenario_is_rejected() {
        assert!(ExperimentConfig::parse(r#"{"scenario": "warp"}"#).is_err());
        assert!("warp".parse::<Scenario>().is_err());
        assert_eq!("skew-demo".parse::<Scenario>().unwrap(), Scenario::SkewDemo);
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig { seed: Some(3), scenario: Scenario::Frozen, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }
}
