//! Group-relative policy optimization over a tabular actor.
//!
//! Each step the actor samples a group of completions per prompt through the
//! serving engine, completions are scored by a bigram reward, advantages are
//! normalized within each group and one on-policy gradient step updates the
//! actor. Every rollout also goes to the drafter learner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costsim::TimingModel;
use crate::error::{Error, Result};
use crate::learner::{Learner, LearnerDriver, LearnerMetrics, UpdateMode};
use crate::model::{TabularModel, Token, Vocabulary};
use crate::server::{run_generation, CycleMetrics, Request, ServePolicy, SwitchEvent};
use crate::specdec::EmittedToken;

const ADVANTAGE_EPSILON: f64 = 1e-6;

/// Fraction of adjacent pairs equal to a golden bigram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub golden: (Token, Token),
    /// Terminator stripped from the end of a response before scoring.
    pub eos: Token,
}

/// `count(a, b) / max(1, |y| - 1)` over the response without its terminator.
pub fn reward(response: &[Token], spec: &RewardSpec) -> f64 {
    let body = match response.last() {
        Some(&last) if last == spec.eos => &response[..response.len() - 1],
        _ => response,
    };
    let hits = body.windows(2).filter(|w| (w[0], w[1]) == spec.golden).count();
    hits as f64 / body.len().saturating_sub(1).max(1) as f64
}

/// `(r - mean) / (std + 1e-6)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidConfig(format!("group needs at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPSILON)).collect())
}

/// One generated trajectory with what both trainers need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// Full target log-probability vector per response position.
    pub target_logprobs: Vec<Vec<f64>>,
    /// Drafter log-probability of the emitted token where it was drafted.
    pub drafter_logprobs: Vec<Option<f64>>,
    pub reward: f64,
    pub actor_version: u64,
}

impl RolloutSample {
    pub fn from_steps(prompt: Vec<Token>, steps: Vec<EmittedToken>, actor_version: u64) -> Self {
        let mut sample = Self {
            prompt,
            response: Vec::with_capacity(steps.len()),
            target_logprobs: Vec::with_capacity(steps.len()),
            drafter_logprobs: Vec::with_capacity(steps.len()),
            reward: 0.0,
            actor_version,
        };
        for step in steps {
            sample.response.push(step.token);
            sample.target_logprobs.push(step.target_logprobs);
            sample.drafter_logprobs.push(step.drafter_logprob);
        }
        sample
    }
}

fn check_on_policy(actor: &TabularModel, samples: &[(RolloutSample, f64)]) -> Result<()> {
    match samples.iter().find(|(s, _)| s.actor_version != actor.version()) {
        Some((s, _)) => Err(Error::OffPolicy { sample: s.actor_version, actor: actor.version() }),
        None => Ok(()),
    }
}

/// `sum_i A_i sum_t log pi(y_t | ctx_t)` under the given actor.
pub fn policy_objective(actor: &TabularModel, samples: &[(RolloutSample, f64)]) -> f64 {
    samples
        .iter()
        .map(|(s, adv)| {
            let mut ctx = s.prompt.clone();
            let mut total = 0.0;
            for &y in &s.response {
                total += actor.logprob(&ctx, y);
                ctx.push(y);
            }
            adv * total
        })
        .sum()
}

/// Gradient of [`policy_objective`] with respect to the actor logits.
pub fn policy_gradient(actor: &TabularModel, samples: &[(RolloutSample, f64)]) -> Result<Vec<f64>> {
    check_on_policy(actor, samples)?;
    let v = actor.vocab_size();
    let tau = actor.temperature();
    let mut grad = vec![0.0; actor.logits().len()];
    for (s, adv) in samples {
        if *adv == 0.0 {
            continue;
        }
        let mut ctx = s.prompt.clone();
        for &y in &s.response {
            let row = actor.row_index(&ctx);
            let pi = actor.dist_for_row(row);
            let out = &mut grad[row * v..(row + 1) * v];
            for (x, (g, &px)) in out.iter_mut().zip(pi.probs()).enumerate() {
                let onehot = if x == y as usize { 1.0 } else { 0.0 };
                *g += adv * (onehot - px) / tau;
            }
            ctx.push(y);
        }
    }
    Ok(grad)
}

/// One gradient-ascent step; the returned actor carries `version + 1`.
pub fn policy_update(actor: &TabularModel, samples: &[(RolloutSample, f64)], lr: f64) -> Result<TabularModel> {
    let grad = policy_gradient(actor, samples)?;
    let logits = actor.logits().iter().zip(&grad).map(|(&z, &g)| z + lr * g).collect();
    actor.with_logits(logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub prompts: Vec<Vec<Token>>,
    pub reward: RewardSpec,
    pub group_size: usize,
    pub max_len: usize,
    /// Multiplier on the end-of-sequence odds at each prompt's first step.
    pub eos_hazard_scale: Vec<f64>,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig("group size must be at least 2".into()));
        }
        if self.prompts.is_empty() {
            return Err(Error::Empty("task prompts"));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be positive".into()));
        }
        Ok(())
    }

    /// `group_size` requests per prompt, each with its own seed.
    pub fn requests<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Request> {
        let mut out = Vec::with_capacity(self.prompts.len() * self.group_size);
        for prompt in &self.prompts {
            for _ in 0..self.group_size {
                out.push(Request { id: out.len(), prompt: prompt.clone(), max_len: self.max_len, seed: rng.random() });
            }
        }
        out
    }
}

/// Shape of the synthetic task and its initial actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub vocab_size: usize,
    pub actor_order: usize,
    pub temperature: f64,
    pub num_prompts: usize,
    pub prompt_len: usize,
    pub group_size: usize,
    pub max_len: usize,
    pub golden: (Token, Token),
    /// Half-width of the uniform initial logits.
    pub logit_scale: f64,
    /// End-of-sequence logit in every actor row before prompt biases.
    pub eos_logit: f64,
    /// Pareto tail index of the per-prompt hazard multiplier.
    pub hazard_tail: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            actor_order: 2,
            temperature: 1.0,
            num_prompts: 8,
            prompt_len: 3,
            group_size: 8,
            max_len: 32,
            golden: (1, 2),
            logit_scale: 1.0,
            eos_logit: -1.0,
            hazard_tail: 0.5,
        }
    }
}

impl WorkloadSpec {
    /// Draws prompts with distinct suffixes, hazard multipliers and the actor.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Task, TabularModel)> {
        let vocab = Vocabulary::new(self.vocab_size)?;
        let eos = vocab.eos();
        for t in [self.golden.0, self.golden.1] {
            if t >= eos {
                return Err(Error::InvalidConfig(format!("golden token {t} must be a non-terminal token")));
            }
        }
        if self.prompt_len < self.actor_order.max(1) {
            return Err(Error::InvalidConfig("prompts must be at least as long as the actor order".into()));
        }
        if !(self.hazard_tail > 0.0) {
            return Err(Error::InvalidConfig("hazard tail index must be positive".into()));
        }
        let suffixes = (eos as usize).pow(self.actor_order as u32);
        if self.num_prompts > suffixes {
            return Err(Error::InvalidConfig(format!("at most {suffixes} prompts have distinct suffixes")));
        }

        let mut actor = TabularModel::random(vocab, self.actor_order, self.temperature, self.logit_scale, rng)?;
        let v = self.vocab_size;
        let mut logits = actor.logits().to_vec();
        for row in logits.chunks_mut(v) {
            row[eos as usize] = self.eos_logit;
        }

        let mut prompts: Vec<Vec<Token>> = Vec::with_capacity(self.num_prompts);
        let mut rows = Vec::with_capacity(self.num_prompts);
        while prompts.len() < self.num_prompts {
            let prompt: Vec<Token> = (0..self.prompt_len).map(|_| rng.random_range(0..eos)).collect();
            let row = actor.row_index(&prompt);
            if !rows.contains(&row) {
                rows.push(row);
                prompts.push(prompt);
            }
        }
        let mut scales = Vec::with_capacity(self.num_prompts);
        for &row in &rows {
            let u: f64 = rng.random();
            let scale = (1.0 - u).powf(-1.0 / self.hazard_tail);
            logits[row * v + eos as usize] += scale.ln() * self.temperature;
            scales.push(scale);
        }
        actor = TabularModel::new(vocab, self.actor_order, self.temperature, logits)?;

        let task = Task {
            prompts,
            reward: RewardSpec { golden: self.golden, eos },
            group_size: self.group_size,
            max_len: self.max_len,
            eos_hazard_scale: scales,
        };
        task.validate()?;
        Ok((task, actor))
    }
}

/// Lower-order drafter whose rows average the actor's rows sharing a suffix.
pub fn marginal_drafter(actor: &TabularModel, order: usize) -> Result<TabularModel> {
    if order > actor.order() {
        return Err(Error::InvalidConfig("drafter order cannot exceed the actor order".into()));
    }
    let v = actor.vocab_size();
    let rows = v.pow(order as u32);
    let group = actor.num_rows() / rows;
    let tau = actor.temperature();
    let mut logits = Vec::with_capacity(rows * v);
    for r in 0..rows {
        let mut mean = vec![0.0; v];
        // Rows sharing the last `order` tokens are `r + k * rows` in base-V folding.
        for k in 0..group {
            for (m, p) in mean.iter_mut().zip(actor.dist_for_row(r + k * rows).probs()) {
                *m += p / group as f64;
            }
        }
        logits.extend(mean.iter().map(|m| m.ln() * tau));
    }
    TabularModel::new(actor.vocab(), order, tau, logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean accepted drafts over the step's speculative cycles.
    pub mean_accept_len: Option<f64>,
    /// Simulated time of the step: generation plus any blocking learner time.
    pub sim_time: f64,
    pub gen_time: f64,
    pub learner_wait: f64,
    pub actor_version: u64,
    pub drafter_version: u64,
    pub spec_cycles: usize,
    pub cycles: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSwitch {
    pub step: usize,
    #[serde(flatten)]
    pub event: SwitchEvent,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    pub learner: Vec<LearnerMetrics>,
    pub switches: Vec<StepSwitch>,
    /// Per-cycle metrics of the first step.
    pub first_step_cycles: Vec<CycleMetrics>,
    /// Cycle index at which each first-step request finished.
    pub first_step_finish: Vec<usize>,
    pub total_time: f64,
    pub learner_time: f64,
    pub actor: TabularModel,
    pub drafter: TabularModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub update_mode: UpdateMode,
}

/// Generation, reward, policy step and drafter feed, `settings.steps` times.
pub fn train_loop(
    actor: TabularModel,
    learner: Learner,
    task: &Task,
    policy: &ServePolicy,
    tm: &TimingModel,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainReport> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut driver = LearnerDriver::start(learner, settings.update_mode, *tm);
    let mut actor = actor;
    let mut clock = 0.0;
    let mut steps = Vec::with_capacity(settings.steps);
    let mut switches = Vec::new();
    let mut first_step_cycles = Vec::new();
    let mut first_step_finish = Vec::new();

    for step in 1..=settings.steps {
        let requests = task.requests(&mut rng);
        let drafter_version = driver.current().version;
        let report = run_generation(&requests, policy, &actor, &mut driver, tm, clock)?;
        clock += report.total_time;

        let mut samples = report.samples;
        for s in samples.iter_mut() {
            s.reward = reward(&s.response, &task.reward);
        }
        let mut weighted = Vec::with_capacity(samples.len());
        for group in samples.chunks(task.group_size) {
            let rewards: Vec<f64> = group.iter().map(|s| s.reward).collect();
            for (s, a) in group.iter().zip(group_advantages(&rewards)?) {
                weighted.push((s.clone(), a));
            }
        }
        let mean_reward = samples.iter().map(|s| s.reward).sum::<f64>() / samples.len() as f64;
        let tokens = samples.iter().map(|s| s.response.len()).sum();
        let actor_version = actor.version();
        actor = policy_update(&actor, &weighted, settings.lr)?;

        driver.feed(samples)?;
        let wait = driver.boundary(clock)?;
        clock += wait;

        let mean_accept_len = if report.accept_lens.is_empty() {
            None
        } else {
            Some(report.accept_lens.iter().sum::<usize>() as f64 / report.accept_lens.len() as f64)
        };
        if step == 1 {
            first_step_cycles = report.cycle_log.clone();
            first_step_finish = report.finish_cycles.clone();
        }
        switches.extend(report.switch_log.into_iter().map(|event| StepSwitch { step, event }));
        steps.push(StepMetrics {
            step,
            mean_reward,
            mean_accept_len,
            sim_time: report.total_time + wait,
            gen_time: report.total_time,
            learner_wait: wait,
            actor_version,
            drafter_version,
            spec_cycles: report.accept_lens.len(),
            cycles: report.cycle_log.len(),
            tokens,
        });
    }

    let learner_time = driver.learner_time();
    let learner = driver.finish()?;
    Ok(TrainReport {
        steps,
        learner: learner.metrics().to_vec(),
        switches,
        first_step_cycles,
        first_step_finish,
        total_time: clock,
        learner_time,
        actor,
        drafter: (*learner.drafter().model).clone(),
    })
}
