//! Adaptive speculative-decoding server.
//!
//! The offline half ([`profile`]) replays decode cycles of every candidate
//! configuration at each batch-size bucket and keeps the cheapest one per
//! bucket. The online half is a batched decode engine with two states,
//! spec and non-spec. Before every cycle it asks the [`ServePolicy`] which
//! configuration the current active batch should run, and promotes or demotes
//! the batch accordingly:
//!
//! - non-spec to spec charges one drafter prefill over every active context,
//! - spec to non-spec drops speculative state at no cost.
//!
//! Finished requests leave the batch immediately, so a length-skewed
//! workload walks the engine down through the buckets.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costsim::{CostLedger, EventKind, ForwardEvent, Role, TimingModel};
use crate::error::{Error, Result};
use crate::model::{TabularModel, Token};
use crate::rl::RolloutSample;
use crate::specdec::{decode_cycle, generate, CycleCost, EmittedToken, RngSource, SdConfig, StandardRule};

/// Relative slack used when comparing predicted times.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub bucket: usize,
    pub config: SdConfig,
    pub time_per_token: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    /// Bucket upper bounds, ascending powers of two.
    pub buckets: Vec<usize>,
    pub entries: Vec<ProfileEntry>,
    /// Best configuration per bucket, parallel to `buckets`.
    pub best: Vec<SdConfig>,
}

impl ProfileTable {
    /// Builds a table from raw measurements and picks the per-bucket optimum.
    ///
    /// Ties go to the configuration with fewer drafted tokens, which puts
    /// the non-spec baseline first.
    pub fn from_entries(buckets: Vec<usize>, entries: Vec<ProfileEntry>) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::Empty("profile needs at least one batch bucket"));
        }
        let mut best = Vec::with_capacity(buckets.len());
        for &bucket in &buckets {
            let rows: Vec<&ProfileEntry> = entries.iter().filter(|e| e.bucket == bucket).collect();
            if !rows.iter().any(|e| !e.config.enabled) {
                return Err(Error::InvalidConfig(format!("bucket {bucket} has no non-spec baseline")));
            }
            let pick = rows
                .iter()
                .copied()
                .min_by(|a, b| {
                    let scale = a.time_per_token.abs().max(b.time_per_token.abs());
                    if (a.time_per_token - b.time_per_token).abs() <= TIE_TOLERANCE * scale {
                        a.config.tree_size().cmp(&b.config.tree_size())
                    } else {
                        a.time_per_token.total_cmp(&b.time_per_token)
                    }
                })
                .expect("bucket has a baseline row");
            best.push(pick.config);
        }
        Ok(Self { buckets, entries, best })
    }

    /// Index of the smallest bucket holding `active`, clamped to the largest.
    pub fn bucket_index(&self, active: usize) -> usize {
        self.buckets.iter().position(|&b| active <= b).unwrap_or(self.buckets.len() - 1)
    }

    pub fn entry(&self, bucket: usize, config: &SdConfig) -> Option<&ProfileEntry> {
        self.entries
            .iter()
            .find(|e| e.bucket == bucket && (e.config == *config || (!e.config.enabled && !config.enabled)))
    }

    /// Fig-6 style heatmap: `batch,s,t,n,speedup`, non-spec rows as `0,0,0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,s,t,n,speedup\n");
        for &bucket in &self.buckets {
            let mut rows: Vec<&ProfileEntry> = self.entries.iter().filter(|e| e.bucket == bucket).collect();
            rows.sort_by_key(|e| (e.config.enabled, e.config.rounds, e.config.branching, e.config.draft_len));
            for e in rows {
                let (s, t, n) =
                    if e.config.enabled { (e.config.rounds, e.config.branching, e.config.draft_len) } else { (0, 0, 0) };
                out.push_str(&format!("{bucket},{s},{t},{n},{:.9}\n", e.speedup));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Configuration the table recommends for the given active batch size.
pub fn solve(table: &ProfileTable, active_batch: usize) -> SdConfig {
    table.best[table.bucket_index(active_batch)]
}

/// Replays the recorded cycles as if `batch` identical sequences shared
/// every forward pass.
fn batched_time(tm: &TimingModel, cycles: &[CycleCost], batch: usize) -> f64 {
    cycles
        .iter()
        .flat_map(|c| c.events())
        .map(|e| tm.forward_time(e.role, e.batch_tokens * batch))
        .sum()
}

/// Offline profiling.
///
/// Every configuration decodes the evaluation prompts once per prompt with
/// common random streams, and the recorded per-cycle pass shapes are then
/// replayed through the timing model at each batch size. The result is a
/// predicted time per output token for every `(bucket, config)` pair.
#[allow(clippy::too_many_arguments)]
pub fn profile<R: Rng + ?Sized>(
    target: &TabularModel,
    drafter: &TabularModel,
    config_grid: &[SdConfig],
    batch_sizes: &[usize],
    eval_prompts: &[Vec<Token>],
    max_len: usize,
    tm: &TimingModel,
    rng: &mut R,
) -> Result<ProfileTable> {
    if config_grid.is_empty() {
        return Err(Error::Empty("config grid"));
    }
    if eval_prompts.is_empty() {
        return Err(Error::Empty("evaluation prompts"));
    }
    let mut buckets = batch_sizes.to_vec();
    buckets.sort_unstable();
    buckets.dedup();
    if buckets.is_empty() || buckets.iter().any(|b| !b.is_power_of_two()) {
        return Err(Error::InvalidConfig(format!("batch buckets must be powers of two, got {batch_sizes:?}")));
    }

    let seeds: Vec<u64> = eval_prompts.iter().map(|_| rng.random()).collect();
    let mut candidates = vec![SdConfig::disabled()];
    candidates.extend(config_grid.iter().copied().filter(|c| c.enabled));

    let mut measured = Vec::with_capacity(candidates.len());
    for cfg in &candidates {
        let mut cycles = Vec::new();
        let mut tokens = 0usize;
        for (prompt, &seed) in eval_prompts.iter().zip(&seeds) {
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            let g = generate(target, drafter, prompt, cfg, max_len, &mut stream)?;
            tokens += g.tokens.len();
            cycles.extend(g.cycle_costs);
        }
        measured.push((cfg, cycles, tokens));
    }

    let mut entries = Vec::with_capacity(candidates.len() * buckets.len());
    for &bucket in &buckets {
        let per_token = |cycles: &[CycleCost], tokens: usize| batched_time(tm, cycles, bucket) / (bucket * tokens) as f64;
        let (_, base_cycles, base_tokens) = &measured[0];
        let baseline = per_token(base_cycles, *base_tokens);
        for (cfg, cycles, tokens) in &measured {
            let t = per_token(cycles, *tokens);
            entries.push(ProfileEntry { bucket, config: **cfg, time_per_token: t, speedup: baseline / t });
        }
    }
    ProfileTable::from_entries(buckets, entries)
}

/// How the engine picks a configuration each cycle.
#[derive(Debug, Clone, PartialEq)]
pub enum ServePolicy {
    NonSpec,
    Fixed(SdConfig),
    Adaptive(ProfileTable),
}

impl ServePolicy {
    pub fn select(&self, active_batch: usize) -> SdConfig {
        match self {
            ServePolicy::NonSpec => SdConfig::disabled(),
            ServePolicy::Fixed(cfg) => *cfg,
            ServePolicy::Adaptive(table) => solve(table, active_batch),
        }
    }
}

/// Supplies the drafter for each verification cycle.
///
/// Called only at cycle boundaries, so a cycle always sees one version.
pub trait DrafterSource {
    fn drafter_at(&mut self, now: f64) -> Result<Arc<TabularModel>>;
}

impl DrafterSource for Arc<TabularModel> {
    fn drafter_at(&mut self, _now: f64) -> Result<Arc<TabularModel>> {
        Ok(Arc::clone(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    pub prompt: Vec<Token>,
    pub max_len: usize,
    /// Seed of the request's private decision stream.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RequestState {
    pub id: usize,
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
    pub steps: Vec<EmittedToken>,
    pub accept_trace: Vec<usize>,
    /// Set while the batch runs speculatively and this request carries draft state.
    pub spec_flag: bool,
    pub done: bool,
    pub max_len: usize,
    /// Cycle index at which the request finished.
    pub finished_at: Option<usize>,
    rng: ChaCha8Rng,
}

impl RequestState {
    pub fn new(request: &Request) -> Self {
        Self {
            id: request.id,
            prompt: request.prompt.clone(),
            generated: Vec::new(),
            steps: Vec::new(),
            accept_trace: Vec::new(),
            spec_flag: false,
            done: request.max_len == 0,
            max_len: request.max_len,
            finished_at: None,
            rng: ChaCha8Rng::seed_from_u64(request.seed),
        }
    }

    fn context(&self) -> Vec<Token> {
        let mut ctx = self.prompt.clone();
        ctx.extend_from_slice(&self.generated);
        ctx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EngineMode {
    NonSpec,
    Spec { config: SdConfig },
}

impl EngineMode {
    fn from_config(cfg: SdConfig) -> Self {
        if cfg.enabled {
            EngineMode::Spec { config: cfg }
        } else {
            EngineMode::NonSpec
        }
    }

    pub fn config(&self) -> SdConfig {
        match self {
            EngineMode::NonSpec => SdConfig::disabled(),
            EngineMode::Spec { config } => *config,
        }
    }

    pub fn label(&self) -> String {
        self.config().label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub cycle: usize,
    pub time: f64,
    pub active_batch: usize,
    pub from: String,
    pub to: String,
    /// Whether the switch promoted a non-spec batch (and paid a prefill).
    pub promoted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub active_batch: usize,
    pub mode: String,
    pub start_time: f64,
    pub cycle_time: f64,
    pub tokens: usize,
    pub accepted: usize,
    pub spec_cycles: usize,
    pub drafter_version: u64,
}

#[derive(Debug, Clone)]
pub struct BatchEngineState {
    pub requests: Vec<RequestState>,
    pub mode: EngineMode,
    pub ledger: CostLedger,
    pub now: f64,
    pub cycle: usize,
    pub switch_log: Vec<SwitchEvent>,
    pub cycle_log: Vec<CycleMetrics>,
}

impl BatchEngineState {
    pub fn new(requests: &[Request], start_time: f64) -> Self {
        Self {
            requests: requests.iter().map(RequestState::new).collect(),
            mode: EngineMode::NonSpec,
            ledger: CostLedger::new(),
            now: start_time,
            cycle: 0,
            switch_log: Vec::new(),
            cycle_log: Vec::new(),
        }
    }

    pub fn active(&self) -> usize {
        self.requests.iter().filter(|r| !r.done).count()
    }

    pub fn is_finished(&self) -> bool {
        self.active() == 0
    }
}

/// One cycle for every active request under the mode the policy picks.
pub fn engine_step(
    state: &mut BatchEngineState,
    policy: &ServePolicy,
    target: &TabularModel,
    drafter: &TabularModel,
    tm: &TimingModel,
) -> Result<()> {
    let active = state.active();
    if active == 0 {
        return Err(Error::EmptyBatch);
    }
    let start = state.now;
    let mut events = Vec::new();

    let next_mode = EngineMode::from_config(policy.select(active));
    if next_mode != state.mode {
        let promoted = matches!(state.mode, EngineMode::NonSpec);
        if promoted {
            let lens: Vec<usize> =
                state.requests.iter().filter(|r| !r.done).map(|r| r.prompt.len() + r.generated.len()).collect();
            events.push(ForwardEvent {
                role: Role::Drafter,
                kind: EventKind::Prefill,
                positions: lens.iter().copied().max().unwrap_or(1).max(1),
                batch_tokens: lens.iter().sum::<usize>().max(1),
            });
        }
        let spec = next_mode != EngineMode::NonSpec;
        for r in state.requests.iter_mut().filter(|r| !r.done) {
            r.spec_flag = spec;
        }
        state.switch_log.push(SwitchEvent {
            cycle: state.cycle,
            time: start,
            active_batch: active,
            from: state.mode.label(),
            to: next_mode.label(),
            promoted,
        });
        state.mode = next_mode;
    }

    let cfg = state.mode.config();
    let eos = target.eos();
    let mut cost = CycleCost::default();
    let (mut tokens, mut accepted, mut spec_cycles) = (0, 0, 0);
    for req in state.requests.iter_mut().filter(|r| !r.done) {
        let ctx = req.context();
        let remaining = req.max_len - req.generated.len();
        let outcome = decode_cycle(&StandardRule, target, drafter, &ctx, &cfg, remaining, &mut RngSource(&mut req.rng))?;
        if outcome.is_speculative() {
            req.accept_trace.push(outcome.accept_len);
            accepted += outcome.accept_len;
            spec_cycles += 1;
        }
        cost.merge(&outcome.cost);
        tokens += outcome.accepted_tokens.len();
        req.generated.extend_from_slice(&outcome.accepted_tokens);
        req.steps.extend(outcome.emitted);
        if req.generated.len() >= req.max_len || req.generated.last() == Some(&eos) {
            req.done = true;
            req.spec_flag = false;
            req.finished_at = Some(state.cycle);
        }
    }
    events.extend(cost.events());

    let cycle_time: f64 = events.iter().map(|e| tm.event_time(e)).sum();
    for event in events {
        state.ledger.push(event);
    }
    state.now += cycle_time;
    state.cycle_log.push(CycleMetrics {
        cycle: state.cycle,
        active_batch: active,
        mode: cfg.label(),
        start_time: start,
        cycle_time,
        tokens,
        accepted,
        spec_cycles,
        drafter_version: drafter.version(),
    });
    state.cycle += 1;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub samples: Vec<RolloutSample>,
    pub start_time: f64,
    pub total_time: f64,
    pub ledger: CostLedger,
    pub switch_log: Vec<SwitchEvent>,
    pub cycle_log: Vec<CycleMetrics>,
    /// Accepted drafts per speculative cycle, across all requests.
    pub accept_lens: Vec<usize>,
    /// Cycle index at which each request finished, in request order.
    pub finish_cycles: Vec<usize>,
}

impl GenerationReport {
    pub fn mean_accept_len(&self) -> Option<f64> {
        if self.accept_lens.is_empty() {
            None
        } else {
            Some(self.accept_lens.iter().sum::<usize>() as f64 / self.accept_lens.len() as f64)
        }
    }

    /// Active batch size at the start of each cycle.
    pub fn active_trace(&self) -> Vec<usize> {
        self.cycle_log.iter().map(|c| c.active_batch).collect()
    }
}

/// Drives the engine until every request has finished.
pub fn run_generation<D: DrafterSource + ?Sized>(
    requests: &[Request],
    policy: &ServePolicy,
    target: &TabularModel,
    drafters: &mut D,
    tm: &TimingModel,
    start_time: f64,
) -> Result<GenerationReport> {
    let mut state = BatchEngineState::new(requests, start_time);
    while !state.is_finished() {
        let drafter = drafters.drafter_at(state.now)?;
        engine_step(&mut state, policy, target, &drafter, tm)?;
    }
    let mut accept_lens = Vec::new();
    let finish_cycles = state.requests.iter().map(|r| r.finished_at.unwrap_or(0)).collect();
    let samples = state
        .requests
        .into_iter()
        .map(|r| {
            accept_lens.extend_from_slice(&r.accept_trace);
            RolloutSample::from_steps(r.prompt, r.steps, target.version())
        })
        .collect();
    Ok(GenerationReport {
        samples,
        start_time,
        total_time: state.now - start_time,
        ledger: state.ledger,
        switch_log: state.switch_log,
        cycle_log: state.cycle_log,
        accept_lens,
        finish_cycles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocabulary;

    fn entry(bucket: usize, config: SdConfig, time: f64) -> ProfileEntry {
        ProfileEntry { bucket, config, time_per_token: time, speedup: 1.0 / time }
    }

    fn two_bucket_table() -> ProfileTable {
        let spec = SdConfig::new(2, 1, 2).unwrap();
        ProfileTable::from_entries(
            vec![2, 32],
            vec![
                entry(2, SdConfig::disabled(), 1.0),
                entry(2, spec, 0.68),
                entry(32, SdConfig::disabled(), 1.0),
                entry(32, spec, 1.3),
            ],
        )
        .unwrap()
    }

    #[test]
    fn solve_crossover() {
        let table = two_bucket_table();
        assert_eq!(solve(&table, 2), SdConfig::new(2, 1, 2).unwrap());
        assert_eq!(solve(&table, 1), SdConfig::new(2, 1, 2).unwrap());
        assert!(!solve(&table, 32).enabled);
        // Above the profiled range clamps to the largest bucket.
        assert!(!solve(&table, 500).enabled);
    }

    #[test]
    fn single_bucket_always_answers_its_best() {
        let cfg = SdConfig::chain(4).unwrap();
        let table = ProfileTable::from_entries(
            vec![8],
            vec![entry(8, SdConfig::disabled(), 1.0), entry(8, cfg, 0.5)],
        )
        .unwrap();
        for active in 1..40 {
            assert_eq!(solve(&table, active), cfg);
        }
    }

    #[test]
    fn ties_prefer_fewer_drafted_tokens() {
        let small = SdConfig::chain(1).unwrap();
        let big = SdConfig::chain(4).unwrap();
        let table = ProfileTable::from_entries(
            vec![1],
            vec![entry(1, big, 0.5), entry(1, small, 0.5), entry(1, SdConfig::disabled(), 0.9)],
        )
        .unwrap();
        assert_eq!(table.best[0], small);
        let tie_with_base = ProfileTable::from_entries(
            vec![1],
            vec![entry(1, small, 1.0), entry(1, SdConfig::disabled(), 1.0)],
        )
        .unwrap();
        assert!(!tie_with_base.best[0].enabled);
    }

    #[test]
    fn table_requires_baseline() {
        let cfg = SdConfig::chain(1).unwrap();
        assert!(ProfileTable::from_entries(vec![1], vec![entry(1, cfg, 1.0)]).is_err());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let vocab = Vocabulary::new(3).unwrap();
        let model = TabularModel::uniform(vocab, 1, 1.0).unwrap();
        let mut state = BatchEngineState::new(&[], 0.0);
        let err = engine_step(&mut state, &ServePolicy::NonSpec, &model, &model, &TimingModel::default());
        assert!(matches!(err, Err(Error::EmptyBatch)));
    }

    #[test]
    fn max_len_one_finishes_in_one_cycle() {
        let vocab = Vocabulary::new(4).unwrap();
        let model = TabularModel::uniform(vocab, 1, 1.0).unwrap();
        let requests: Vec<Request> =
            (0..5).map(|id| Request { id, prompt: vec![1], max_len: 1, seed: id as u64 }).collect();
        let policy = ServePolicy::Fixed(SdConfig::chain(3).unwrap());
        let report =
            run_generation(&requests, &policy, &model, &mut Arc::new(model.clone()), &TimingModel::default(), 0.0)
                .unwrap();
        assert_eq!(report.cycle_log.len(), 1);
        assert!(report.samples.iter().all(|s| s.response.len() == 1));
    }

    #[test]
    fn csv_has_baseline_rows() {
        let csv = two_bucket_table().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "batch,s,t,n,speedup");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[1].starts_with("2,0,0,0,"));
    }
}
