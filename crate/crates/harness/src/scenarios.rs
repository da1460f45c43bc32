//! Scenario runners.
//!
//! Every run is a pure function of the config and the seed. Independent
//! random streams feed the workload, the profiler, request seeds and the
//! learner, so paired scenarios (say SD on and off) see the same task and
//! the same per-request seeds.

use std::sync::Arc;

use anyhow::Context as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use specrl_core::learner::{KdPolicy, Learner, LearnerMetrics, UpdateMode, WeightMode};
use specrl_core::rl::{marginal_drafter, train_loop, StepMetrics, StepSwitch, Task, TrainReport, TrainSettings};
use specrl_core::server::{profile, run_generation, CycleMetrics, ProfileTable, ServePolicy, SwitchEvent};
use specrl_core::TabularModel;

use crate::config::{ExperimentConfig, Scenario, ServerMode};

const WORKLOAD_STREAM: u64 = 0;
const PROFILE_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const LEARNER_STREAM: u64 = 3;
const SKEW_STREAM: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Task, initial actor and initial drafter for a seed.
#[derive(Debug, Clone)]
pub struct Setup {
    pub task: Task,
    pub actor: TabularModel,
    pub drafter: TabularModel,
}

pub fn setup(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Setup> {
    let (task, actor) = cfg.workload.build(&mut stream(seed, WORKLOAD_STREAM)).context("building workload")?;
    let drafter = marginal_drafter(&actor, cfg.drafter_order)?;
    Ok(Setup { task, actor, drafter })
}

/// Profiles the initial actor and drafter on the task prompts.
pub fn profile_table(cfg: &ExperimentConfig, seed: u64, setup: &Setup) -> anyhow::Result<ProfileTable> {
    Ok(profile(
        &setup.actor,
        &setup.drafter,
        &cfg.grid,
        &cfg.batch_sizes,
        &setup.task.prompts,
        setup.task.max_len,
        &cfg.timing,
        &mut stream(seed, PROFILE_STREAM),
    )?)
}

pub fn serve_policy(cfg: &ExperimentConfig, table: Option<&ProfileTable>) -> anyhow::Result<ServePolicy> {
    Ok(match cfg.server_mode() {
        ServerMode::Off => ServePolicy::NonSpec,
        ServerMode::Fixed => ServePolicy::Fixed(cfg.fixed_config),
        ServerMode::Adaptive => ServePolicy::Adaptive(table.context("adaptive serving needs a profile table")?.clone()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub weight_mode: WeightMode,
    pub interval: u64,
    pub update_mode: UpdateMode,
    pub steps: usize,
    pub total_time: f64,
    pub learner_time: f64,
    pub first_reward: f64,
    pub final_reward: f64,
    pub first_accept_len: Option<f64>,
    pub final_accept_len: Option<f64>,
    pub final_actor_version: u64,
    pub final_drafter_version: u64,
    pub switches: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub steps: Vec<StepMetrics>,
    pub learner: Vec<LearnerMetrics>,
    pub switches: Vec<StepSwitch>,
    pub first_step_cycles: Vec<CycleMetrics>,
}

impl RunOutput {
    fn new(label: String, kd: &KdPolicy, update_mode: UpdateMode, report: TrainReport) -> Self {
        let first = report.steps.first();
        let last = report.steps.last();
        let summary = RunSummary {
            label,
            weight_mode: kd.weight_mode,
            interval: kd.interval,
            update_mode,
            steps: report.steps.len(),
            total_time: report.total_time,
            learner_time: report.learner_time,
            first_reward: first.map_or(0.0, |s| s.mean_reward),
            final_reward: last.map_or(0.0, |s| s.mean_reward),
            first_accept_len: first.and_then(|s| s.mean_accept_len),
            final_accept_len: last.and_then(|s| s.mean_accept_len),
            final_actor_version: report.actor.version(),
            final_drafter_version: report.drafter.version(),
            switches: report.switches.len(),
        };
        Self {
            summary,
            steps: report.steps,
            learner: report.learner,
            switches: report.switches,
            first_step_cycles: report.first_step_cycles,
        }
    }
}

/// One training run with the given distillation settings.
pub fn train_run(
    cfg: &ExperimentConfig,
    seed: u64,
    setup: &Setup,
    policy: &ServePolicy,
    kd: KdPolicy,
    label: impl Into<String>,
) -> anyhow::Result<RunOutput> {
    let learner_seed = stream(seed, LEARNER_STREAM).random();
    let train_seed = stream(seed, TRAIN_STREAM).random();
    let learner = Learner::new(setup.drafter.clone(), kd, cfg.buffer_capacity, learner_seed)?;
    let settings = TrainSettings { steps: cfg.steps, lr: cfg.actor_lr, update_mode: cfg.update_mode };
    let report = train_loop(setup.actor.clone(), learner, &setup.task, policy, &cfg.timing, &settings, train_seed)?;
    Ok(RunOutput::new(label.into(), &kd, cfg.update_mode, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyTime {
    pub policy: String,
    pub total_time: f64,
}

/// Length skew and serving cost of freshly initialized rollouts.
#[derive(Debug, Clone, Serialize)]
pub struct SkewReport {
    pub rounds: usize,
    /// Active batch at the start of each cycle, first round, adaptive serving.
    pub active_trace: Vec<usize>,
    pub finish_cycles: Vec<usize>,
    pub early_fraction: f64,
    pub late_fraction: f64,
    pub switch_log: Vec<SwitchEvent>,
    pub adaptive_time: f64,
    pub non_spec_time: f64,
    pub best_fixed: PolicyTime,
    pub worst_fixed: PolicyTime,
    pub fixed: Vec<PolicyTime>,
}

pub fn skew_demo(cfg: &ExperimentConfig, seed: u64, setup: &Setup, table: &ProfileTable) -> anyhow::Result<SkewReport> {
    let mut rng = stream(seed, SKEW_STREAM);
    let rounds: Vec<_> = (0..cfg.skew_rounds.max(1)).map(|_| setup.task.requests(&mut rng)).collect();
    let mut drafter = Arc::new(setup.drafter.clone());
    let mut total = |policy: &ServePolicy| -> anyhow::Result<f64> {
        let mut t = 0.0;
        for requests in &rounds {
            t += run_generation(requests, policy, &setup.actor, &mut drafter, &cfg.timing, 0.0)?.total_time;
        }
        Ok(t)
    };
    let adaptive = ServePolicy::Adaptive(table.clone());
    let adaptive_time = total(&adaptive)?;
    let non_spec_time = total(&ServePolicy::NonSpec)?;
    let mut fixed = Vec::with_capacity(cfg.grid.len());
    for c in &cfg.grid {
        fixed.push(PolicyTime { policy: c.label(), total_time: total(&ServePolicy::Fixed(*c))? });
    }
    let best_fixed = fixed.iter().min_by(|a, b| a.total_time.total_cmp(&b.total_time)).cloned().context("empty grid")?;
    let worst_fixed = fixed.iter().max_by(|a, b| a.total_time.total_cmp(&b.total_time)).cloned().context("empty grid")?;

    let first = run_generation(&rounds[0], &adaptive, &setup.actor, &mut drafter, &cfg.timing, 0.0)?;
    let cycles = first.cycle_log.len() as f64;
    let n = first.finish_cycles.len().max(1) as f64;
    let early = first.finish_cycles.iter().filter(|&&c| (c as f64) < cycles / 3.0).count() as f64 / n;
    let late = first.finish_cycles.iter().filter(|&&c| (c as f64) >= 2.0 * cycles / 3.0).count() as f64 / n;
    Ok(SkewReport {
        rounds: rounds.len(),
        active_trace: first.active_trace(),
        finish_cycles: first.finish_cycles,
        early_fraction: early,
        late_fraction: late,
        switch_log: first.switch_log,
        adaptive_time,
        non_spec_time,
        best_fixed,
        worst_fixed,
        fixed,
    })
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub scenario: Scenario,
    pub seed: u64,
    pub table: Option<ProfileTable>,
    pub runs: Vec<RunOutput>,
    pub skew: Option<SkewReport>,
}

pub fn run_scenario(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<ScenarioOutput> {
    cfg.validate()?;
    let setup = setup(cfg, seed)?;
    let needs_table = cfg.scenario == Scenario::SkewDemo || cfg.server_mode() == ServerMode::Adaptive;
    let table = if needs_table { Some(profile_table(cfg, seed, &setup)?) } else { None };

    let mut runs = Vec::new();
    let mut skew = None;
    match cfg.scenario {
        Scenario::SkewDemo => {
            skew = Some(skew_demo(cfg, seed, &setup, table.as_ref().expect("profiled above"))?);
        }
        Scenario::AsyncAblation => {
            let policy = serve_policy(cfg, table.as_ref())?;
            for &interval in &cfg.intervals {
                let kd = KdPolicy { interval, weight_mode: WeightMode::Reward, ..cfg.kd };
                runs.push(train_run(cfg, seed, &setup, &policy, kd, format!("I{interval}"))?);
            }
        }
        scenario => {
            let policy = serve_policy(cfg, table.as_ref())?;
            let kd = KdPolicy { weight_mode: scenario.weight_mode(), ..cfg.kd };
            runs.push(train_run(cfg, seed, &setup, &policy, kd, scenario.name())?);
        }
    }
    Ok(ScenarioOutput { scenario: cfg.scenario, seed, table, runs, skew })
}
