//! Online drafter learner.
//!
//! Rollouts flow into a [`ReplayBuffer`]. Every `interval`-th RL iteration
//! boundary the learner distills the target's recorded distributions into
//! the drafter over a random `1/interval` slice of the buffer, takes one
//! gradient step, publishes a new [`DrafterSnapshot`] and clears the buffer.
//!
//! The same [`Learner`] runs either inline ([`UpdateMode::Sync`]) or on its
//! own thread ([`UpdateMode::Async`]). In both modes the update semantics are
//! identical; only simulated time differs. Async publications become visible
//! to the engine once the simulated clock passes the point where the
//! learner would have finished, so runs stay reproducible.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costsim::TimingModel;
use crate::error::{Error, Result};
use crate::model::{CategoricalDist, TabularModel, Token};
use crate::rl::RolloutSample;
use crate::server::DrafterSource;

const WEIGHT_EPSILON: f64 = 1e-6;

/// FIFO buffer of rollouts awaiting distillation.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: VecDeque<RolloutSample>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay buffer capacity must be positive".into()));
        }
        Ok(Self { entries: VecDeque::new(), capacity })
    }

    /// Appends a sample, evicting the oldest entry when full.
    pub fn push(&mut self, sample: RolloutSample) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &RolloutSample> {
        self.entries.iter()
    }
}

/// Immutable published drafter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DrafterSnapshot {
    pub model: Arc<TabularModel>,
    pub version: u64,
}

impl DrafterSnapshot {
    pub fn new(model: TabularModel) -> Self {
        let version = model.version();
        Self { model: Arc::new(model), version }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Batch-normalized, clipped reward.
    Reward,
    Uniform,
    /// No distillation at all.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdPolicy {
    /// Update every `interval` iterations; `u64::MAX` never updates.
    pub interval: u64,
    pub weight_mode: WeightMode,
    pub weight_clip: (f64, f64),
    pub lr: f64,
}

impl Default for KdPolicy {
    fn default() -> Self {
        Self { interval: 1, weight_mode: WeightMode::Reward, weight_clip: (0.0, 4.0), lr: 0.01 }
    }
}

impl KdPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.weight_clip;
        if self.interval == 0 {
            return Err(Error::InvalidConfig("KD interval must be positive".into()));
        }
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig(format!("weight clip must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("KD learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-sample distillation weight.
pub fn weight(reward: f64, batch_rewards: &[f64], policy: &KdPolicy) -> f64 {
    match policy.weight_mode {
        WeightMode::Uniform => 1.0,
        WeightMode::Frozen => 0.0,
        WeightMode::Reward => {
            let mean = if batch_rewards.is_empty() {
                0.0
            } else {
                batch_rewards.iter().sum::<f64>() / batch_rewards.len() as f64
            };
            let (lo, hi) = policy.weight_clip;
            (reward / mean.max(WEIGHT_EPSILON)).clamp(lo, hi)
        }
    }
}

/// Soft targets recovered from stored target log-probabilities.
fn soft_target(logprobs: &[f64]) -> Result<CategoricalDist> {
    let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    CategoricalDist::from_weights(logprobs.iter().map(|&l| (l - max).exp()).collect())
}

/// Visits every response position of a sample with its context and soft target.
fn for_each_position<F>(sample: &RolloutSample, mut f: F) -> Result<()>
where
    F: FnMut(&[Token], &CategoricalDist) -> Result<()>,
{
    let mut ctx: Vec<Token> = sample.prompt.clone();
    for (token, logprobs) in sample.response.iter().zip(&sample.target_logprobs) {
        f(&ctx, &soft_target(logprobs)?)?;
        ctx.push(*token);
    }
    Ok(())
}

/// `w * sum_t KL(p_t || q_t)` against the current drafter.
pub fn kd_loss(drafter: &TabularModel, sample: &RolloutSample, w: f64) -> Result<f64> {
    if w == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for_each_position(sample, |ctx, p| {
        let q = drafter.next_dist(ctx);
        for (x, (&px, &qx)) in p.probs().iter().zip(q.probs()).enumerate() {
            if px > 0.0 {
                if qx <= 0.0 {
                    return Err(Error::ZeroDrafterMass { token: x });
                }
                total += px * (px.ln() - qx.ln());
            }
        }
        Ok(())
    })?;
    Ok(w * total)
}

/// Gradient of `sum_i w_i * kd_loss_i` with respect to the drafter logits.
pub fn kd_gradient(drafter: &TabularModel, weighted: &[(&RolloutSample, f64)]) -> Result<Vec<f64>> {
    let v = drafter.vocab_size();
    let tau = drafter.temperature();
    let mut grad = vec![0.0; drafter.logits().len()];
    for &(sample, w) in weighted {
        if w == 0.0 {
            continue;
        }
        for_each_position(sample, |ctx, p| {
            let row = drafter.row_index(ctx);
            let q = drafter.dist_for_row(row);
            let out = &mut grad[row * v..(row + 1) * v];
            for (g, (&qx, &px)) in out.iter_mut().zip(q.probs().iter().zip(p.probs())) {
                *g += w * (qx - px) / tau;
            }
            Ok(())
        })?;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl WeightStats {
    fn of(weights: &[f64]) -> Self {
        let n = weights.len().max(1) as f64;
        Self {
            mean: weights.iter().sum::<f64>() / n,
            min: weights.iter().copied().fold(f64::INFINITY, f64::min),
            max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KdUpdate {
    pub snapshot: Arc<DrafterSnapshot>,
    pub kd_loss: f64,
    pub samples_used: usize,
    pub tokens_used: usize,
    pub weight_stats: WeightStats,
}

/// One distillation step over a random `1/interval` slice of the buffer.
///
/// Returns `None` and leaves everything untouched when the buffer is empty.
/// Otherwise the buffer is cleared.
pub fn kd_update<R: rand::Rng + ?Sized>(
    drafter: &TabularModel,
    buffer: &mut ReplayBuffer,
    policy: &KdPolicy,
    rng: &mut R,
) -> Result<Option<KdUpdate>> {
    if buffer.is_empty() {
        return Ok(None);
    }
    let n = buffer.len();
    let take = (n as u64).div_ceil(policy.interval).max(1) as usize;
    let mut picked = index::sample(rng, n, take).into_vec();
    picked.sort_unstable();
    let entries: Vec<&RolloutSample> = picked.iter().map(|&i| &buffer.entries[i]).collect();

    let rewards: Vec<f64> = entries.iter().map(|s| s.reward).collect();
    let weights: Vec<f64> = rewards.iter().map(|&r| weight(r, &rewards, policy)).collect();
    let weighted: Vec<(&RolloutSample, f64)> = entries.iter().copied().zip(weights.iter().copied()).collect();

    let mut loss = 0.0;
    for &(sample, w) in &weighted {
        loss += kd_loss(drafter, sample, w)?;
    }
    let grad = kd_gradient(drafter, &weighted)?;
    let logits: Vec<f64> = drafter.logits().iter().zip(&grad).map(|(&z, &g)| z - policy.lr * g).collect();
    let model = drafter.with_logits(logits)?;
    let tokens_used = entries.iter().map(|s| s.response.len()).sum();
    buffer.clear();

    Ok(Some(KdUpdate {
        snapshot: Arc::new(DrafterSnapshot::new(model)),
        kd_loss: loss,
        samples_used: take,
        tokens_used,
        weight_stats: WeightStats::of(&weights),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerMetrics {
    pub update_idx: usize,
    /// RL iteration boundary that triggered the update.
    pub boundary: u64,
    pub drafter_version: u64,
    pub kd_loss: f64,
    pub samples_used: usize,
    pub tokens_used: usize,
    pub weight_stats: WeightStats,
}

/// Buffer, current drafter and update schedule.
#[derive(Debug, Clone)]
pub struct Learner {
    drafter: Arc<DrafterSnapshot>,
    buffer: ReplayBuffer,
    policy: KdPolicy,
    rng: ChaCha8Rng,
    boundaries: u64,
    metrics: Vec<LearnerMetrics>,
}

impl Learner {
    pub fn new(drafter: TabularModel, policy: KdPolicy, capacity: usize, seed: u64) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            drafter: Arc::new(DrafterSnapshot::new(drafter)),
            buffer: ReplayBuffer::new(capacity)?,
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            boundaries: 0,
            metrics: Vec::new(),
        })
    }

    pub fn drafter(&self) -> &Arc<DrafterSnapshot> {
        &self.drafter
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn policy(&self) -> &KdPolicy {
        &self.policy
    }

    pub fn metrics(&self) -> &[LearnerMetrics] {
        &self.metrics
    }

    pub fn push(&mut self, sample: RolloutSample) {
        self.buffer.push(sample);
    }

    /// Marks the end of one RL iteration and updates when the schedule says so.
    pub fn on_boundary(&mut self) -> Result<Option<KdUpdate>> {
        self.boundaries += 1;
        if self.policy.weight_mode == WeightMode::Frozen || !self.boundaries.is_multiple_of(self.policy.interval) {
            return Ok(None);
        }
        let update = kd_update(&self.drafter.model, &mut self.buffer, &self.policy, &mut self.rng)?;
        if let Some(u) = &update {
            self.drafter = Arc::clone(&u.snapshot);
            self.metrics.push(LearnerMetrics {
                update_idx: self.metrics.len(),
                boundary: self.boundaries,
                drafter_version: u.snapshot.version,
                kd_loss: u.kd_loss,
                samples_used: u.samples_used,
                tokens_used: u.tokens_used,
                weight_stats: u.weight_stats,
            });
        }
        Ok(update)
    }
}

#[derive(Debug)]
pub enum LearnerMsg {
    Sample(Box<RolloutSample>),
    Boundary,
    Shutdown,
}

/// Result of one boundary as seen by the learner thread.
#[derive(Debug, Clone)]
pub struct Publication {
    pub boundary: u64,
    pub snapshot: Option<Arc<DrafterSnapshot>>,
    pub tokens_used: usize,
}

/// Where the learner thread publishes snapshots.
#[derive(Debug)]
pub struct SnapshotOutlet {
    latest: RwLock<Arc<DrafterSnapshot>>,
    acks: Mutex<Vec<Publication>>,
    ready: Condvar,
}

impl SnapshotOutlet {
    pub fn new(initial: Arc<DrafterSnapshot>) -> Self {
        Self { latest: RwLock::new(initial), acks: Mutex::new(Vec::new()), ready: Condvar::new() }
    }

    /// Most recently published snapshot.
    pub fn latest(&self) -> Arc<DrafterSnapshot> {
        Arc::clone(&self.latest.read().expect("outlet lock poisoned"))
    }

    fn publish(&self, publication: Publication) {
        if let Some(snapshot) = &publication.snapshot {
            *self.latest.write().expect("outlet lock poisoned") = Arc::clone(snapshot);
        }
        self.acks.lock().expect("outlet lock poisoned").push(publication);
        self.ready.notify_all();
    }

    /// Blocks until the given boundary (1-based) has been processed.
    pub fn wait_for(&self, boundary: u64) -> Publication {
        let mut acks = self.acks.lock().expect("outlet lock poisoned");
        loop {
            if let Some(p) = acks.iter().find(|p| p.boundary == boundary) {
                return p.clone();
            }
            acks = self.ready.wait(acks).expect("outlet lock poisoned");
        }
    }

    pub fn publications(&self) -> Vec<Publication> {
        self.acks.lock().expect("outlet lock poisoned").clone()
    }
}

/// Runs the learner on its own thread until shutdown or a closed feed.
///
/// Samples still queued at shutdown are drained into the buffer without a
/// final update. The learner is handed back on join.
pub fn run_async(
    mut learner: Learner,
    feed: Receiver<LearnerMsg>,
    outlet: Arc<SnapshotOutlet>,
) -> JoinHandle<Result<Learner>> {
    thread::spawn(move || {
        while let Ok(msg) = feed.recv() {
            match msg {
                LearnerMsg::Sample(sample) => learner.push(*sample),
                LearnerMsg::Boundary => {
                    let update = learner.on_boundary();
                    let publication = match &update {
                        Ok(Some(u)) => Publication {
                            boundary: learner.boundaries,
                            snapshot: Some(Arc::clone(&u.snapshot)),
                            tokens_used: u.tokens_used,
                        },
                        _ => Publication { boundary: learner.boundaries, snapshot: None, tokens_used: 0 },
                    };
                    outlet.publish(publication);
                    update?;
                }
                LearnerMsg::Shutdown => {
                    for msg in feed.try_iter() {
                        if let LearnerMsg::Sample(sample) = msg {
                            learner.push(*sample);
                        }
                    }
                    break;
                }
            }
        }
        Ok(learner)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Generation waits for every update; learner time lands on the clock.
    Sync,
    /// Updates overlap generation on a separate thread.
    Async,
}

#[derive(Debug)]
struct Pending {
    boundary: u64,
    time: f64,
    resolved: Option<(Option<Arc<DrafterSnapshot>>, f64)>,
}

#[derive(Debug)]
enum Backend {
    Inline(Box<Learner>),
    Thread { feed: Sender<LearnerMsg>, outlet: Arc<SnapshotOutlet>, handle: JoinHandle<Result<Learner>> },
}

/// Drafter provider for the train loop, backed by a learner.
///
/// In async mode the simulated learner processes boundaries one at a time,
/// starting no earlier than the boundary and no earlier than its previous
/// update finished. A snapshot is adopted at the first cycle boundary whose
/// clock reaches that finish time.
#[derive(Debug)]
pub struct LearnerDriver {
    backend: Backend,
    current: Arc<DrafterSnapshot>,
    tm: TimingModel,
    boundaries: u64,
    pending: VecDeque<Pending>,
    learner_free_at: f64,
    learner_time: f64,
}

impl LearnerDriver {
    pub fn start(learner: Learner, mode: UpdateMode, tm: TimingModel) -> Self {
        let current = Arc::clone(learner.drafter());
        let backend = match mode {
            UpdateMode::Sync => Backend::Inline(Box::new(learner)),
            UpdateMode::Async => {
                let (feed, rx) = mpsc::channel();
                let outlet = Arc::new(SnapshotOutlet::new(Arc::clone(&current)));
                let handle = run_async(learner, rx, Arc::clone(&outlet));
                Backend::Thread { feed, outlet, handle }
            }
        };
        Self { backend, current, tm, boundaries: 0, pending: VecDeque::new(), learner_free_at: 0.0, learner_time: 0.0 }
    }

    pub fn current(&self) -> &Arc<DrafterSnapshot> {
        &self.current
    }

    /// Total simulated learner compute so far.
    pub fn learner_time(&self) -> f64 {
        self.learner_time
    }

    pub fn feed(&mut self, samples: Vec<RolloutSample>) -> Result<()> {
        match &mut self.backend {
            Backend::Inline(learner) => samples.into_iter().for_each(|s| learner.push(s)),
            Backend::Thread { feed, .. } => {
                for s in samples {
                    feed.send(LearnerMsg::Sample(Box::new(s))).map_err(|_| Error::LearnerGone)?;
                }
            }
        }
        Ok(())
    }

    /// Ends an RL iteration at simulated time `now`.
    ///
    /// Returns the simulated time generation has to wait: the learner time
    /// in sync mode, zero in async mode.
    pub fn boundary(&mut self, now: f64) -> Result<f64> {
        self.boundaries += 1;
        match &mut self.backend {
            Backend::Inline(learner) => match learner.on_boundary()? {
                Some(update) => {
                    let spent = self.tm.learner_time(update.tokens_used);
                    self.learner_time += spent;
                    self.current = update.snapshot;
                    Ok(spent)
                }
                None => Ok(0.0),
            },
            Backend::Thread { feed, .. } => {
                feed.send(LearnerMsg::Boundary).map_err(|_| Error::LearnerGone)?;
                self.pending.push_back(Pending { boundary: self.boundaries, time: now, resolved: None });
                Ok(0.0)
            }
        }
    }

    /// Stops the learner and returns it with its full history.
    pub fn finish(self) -> Result<Learner> {
        match self.backend {
            Backend::Inline(learner) => Ok(*learner),
            Backend::Thread { feed, handle, .. } => {
                // A dead receiver means the thread already stopped; join reports why.
                let _ = feed.send(LearnerMsg::Shutdown);
                handle.join().map_err(|_| Error::LearnerGone)?
            }
        }
    }
}

impl DrafterSource for LearnerDriver {
    fn drafter_at(&mut self, now: f64) -> Result<Arc<TabularModel>> {
        if let Backend::Thread { outlet, .. } = &self.backend {
            while let Some(front) = self.pending.front_mut() {
                if front.resolved.is_none() {
                    let publication = outlet.wait_for(front.boundary);
                    let visible_at = match &publication.snapshot {
                        Some(_) => {
                            let spent = self.tm.learner_time(publication.tokens_used);
                            self.learner_time += spent;
                            self.learner_free_at = self.learner_free_at.max(front.time) + spent;
                            self.learner_free_at
                        }
                        None => front.time,
                    };
                    front.resolved = Some((publication.snapshot, visible_at));
                }
                let (snapshot, visible_at) = front.resolved.as_ref().expect("resolved above");
                if *visible_at > now {
                    break;
                }
                if let Some(s) = snapshot {
                    self.current = Arc::clone(s);
                }
                self.pending.pop_front();
            }
        }
        Ok(Arc::clone(&self.current.model))
    }
}
