//! Lossless speculative sampling.
//!
//! A verification cycle drafts tokens with the cheap drafter `q`, scores them
//! with one batched target pass, and accepts each drafted token `x` with
//! probability `min(1, p(x) / q(x))`. At the first rejection a replacement is
//! drawn from the residual `norm(max(0, p - q))` and the cycle ends; if every
//! drafted token survives, one bonus token is drawn from the target.
//!
//! Tree mode generalises the chain with an `(s, t, n)` configuration: the
//! draft tree has `s` rounds of depth `n`, and the first position of every
//! round fans out into `t` i.i.d. candidates drawn from `q`. Siblings are
//! verified by recursive rejection: candidate `i` is tested against the
//! current residual target `p_i`, and each rejection replaces `p_i` with
//! `norm(max(0, p_i - q))`. With `t = 1` the tree is a chain of `s * n`
//! tokens and consumes randomness in exactly the same order as
//! [`spec_step_chain`].
//!
//! Every random choice goes through a [`DecisionSource`]. The RNG-backed
//! source spends one uniform per decision; [`enumerate::enumerate_outcomes`]
//! walks every branch of the same code with exact probabilities instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costsim::{CostLedger, EventKind, ForwardEvent, Role};
use crate::error::{Error, Result};
use crate::model::{CategoricalDist, TabularModel, Token};

/// Tolerance below which `p` and `q` are treated as identical.
pub const DEGENERATE_TOLERANCE: f64 = 1e-12;

/// Speculative decoding hyperparameters `(s, t, n)` plus an on/off switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SdConfig {
    /// Number of speculative rounds `s`.
    pub rounds: usize,
    /// Candidates per branch point `t`.
    pub branching: usize,
    /// Draft length per round `n`.
    pub draft_len: usize,
    pub enabled: bool,
}

impl SdConfig {
    pub fn new(rounds: usize, branching: usize, draft_len: usize) -> Result<Self> {
        if rounds == 0 || branching == 0 || draft_len == 0 {
            return Err(Error::InvalidConfig(format!(
                "s, t, n must be >= 1, got ({rounds}, {branching}, {draft_len})"
            )));
        }
        Ok(Self { rounds, branching, draft_len, enabled: true })
    }

    /// Plain chain drafting of `k` tokens.
    pub fn chain(k: usize) -> Result<Self> {
        Self::new(1, 1, k)
    }

    pub const fn disabled() -> Self {
        Self { rounds: 1, branching: 1, draft_len: 1, enabled: false }
    }

    /// Drafted positions along any root-to-leaf branch, `s * n`.
    pub fn depth(&self) -> usize {
        if self.enabled {
            self.rounds * self.draft_len
        } else {
            0
        }
    }

    /// Drafted nodes in a full tree, `n * sum_{r=1..s} t^r`.
    pub fn tree_size(&self) -> usize {
        if !self.enabled {
            return 0;
        }
        let mut width = 1;
        let mut total = 0;
        for _ in 0..self.rounds {
            width *= self.branching;
            total += width * self.draft_len;
        }
        total
    }

    /// Stable label such as `s2t1n4`, or `off`.
    pub fn label(&self) -> String {
        if self.enabled {
            format!("s{}t{}n{}", self.rounds, self.branching, self.draft_len)
        } else {
            "off".to_string()
        }
    }

    /// `s in {1,2,4}`, `t in {1,2}`, `n in {1,2,4}`.
    pub fn default_grid() -> Vec<SdConfig> {
        let mut grid = Vec::with_capacity(18);
        for rounds in [1, 2, 4] {
            for branching in [1, 2] {
                for draft_len in [1, 2, 4] {
                    grid.push(SdConfig { rounds, branching, draft_len, enabled: true });
                }
            }
        }
        grid
    }
}

impl std::fmt::Display for SdConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Acceptance probability of a drafted token, `min(1, p / q)`.
///
/// # Panics
///
/// When `q <= 0`; a drafted token always has positive drafter mass.
pub fn accept_prob(p: f64, q: f64) -> f64 {
    assert!(q > 0.0, "drafted token must have positive drafter probability, got q = {q}");
    (p / q).min(1.0)
}

/// `r(x) = max(0, p(x) - q(x)) / sum_y max(0, p(y) - q(y))`.
pub fn residual_dist(p: &CategoricalDist, q: &CategoricalDist) -> Result<CategoricalDist> {
    let positive: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = positive.iter().sum();
    if mass <= DEGENERATE_TOLERANCE {
        return Err(Error::DegenerateResidual);
    }
    CategoricalDist::from_weights(positive)
}

/// The accept/residual pair used during verification.
///
/// Production code always uses [`StandardRule`]; the trait exists so that the
/// losslessness oracles can be pointed at a deliberately broken rule.
pub trait AcceptanceRule {
    fn accept_prob(&self, p: f64, q: f64) -> f64;
    fn residual(&self, p: &CategoricalDist, q: &CategoricalDist) -> Result<CategoricalDist>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StandardRule;

impl AcceptanceRule for StandardRule {
    fn accept_prob(&self, p: f64, q: f64) -> f64 {
        accept_prob(p, q)
    }

    fn residual(&self, p: &CategoricalDist, q: &CategoricalDist) -> Result<CategoricalDist> {
        residual_dist(p, q)
    }
}

/// Source of every random choice made while decoding.
pub trait DecisionSource {
    /// Draws a token from `dist`.
    fn draw(&mut self, dist: &CategoricalDist) -> Token;
    /// Returns `true` with probability `p_true`.
    fn coin(&mut self, p_true: f64) -> bool;
}

/// One uniform variate per decision, taken from the wrapped RNG.
pub struct RngSource<'a, R: ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> DecisionSource for RngSource<'_, R> {
    fn draw(&mut self, dist: &CategoricalDist) -> Token {
        dist.sample_with_uniform(self.0.random::<f64>())
    }

    fn coin(&mut self, p_true: f64) -> bool {
        self.0.random::<f64>() < p_true
    }
}

/// Batched-forward footprint of a pass: widest sequence and total tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub positions: usize,
    pub batch_tokens: usize,
}

impl Slot {
    fn single(positions: usize) -> Self {
        Self { positions, batch_tokens: positions }
    }

    fn merge(&mut self, other: Slot) {
        self.positions = self.positions.max(other.positions);
        self.batch_tokens += other.batch_tokens;
    }
}

/// Forward passes needed by one decode cycle.
///
/// Costs of sequences decoding in lock-step merge slot by slot, so a batch
/// shares each drafter step and the verification pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleCost {
    pub draft: Vec<Slot>,
    pub verify: Option<Slot>,
    pub decode: Option<Slot>,
}

impl CycleCost {
    pub fn naive() -> Self {
        Self { draft: Vec::new(), verify: None, decode: Some(Slot::single(1)) }
    }

    pub fn merge(&mut self, other: &CycleCost) {
        if self.draft.len() < other.draft.len() {
            self.draft.resize(other.draft.len(), Slot::default());
        }
        for (mine, theirs) in self.draft.iter_mut().zip(&other.draft) {
            mine.merge(*theirs);
        }
        for (mine, theirs) in [(&mut self.verify, other.verify), (&mut self.decode, other.decode)] {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.merge(t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    /// Drafter steps first, then verification, then plain decode.
    pub fn events(&self) -> Vec<ForwardEvent> {
        let mut events: Vec<ForwardEvent> = self
            .draft
            .iter()
            .map(|s| ForwardEvent {
                role: Role::Drafter,
                kind: EventKind::Draft,
                positions: s.positions,
                batch_tokens: s.batch_tokens,
            })
            .collect();
        if let Some(s) = self.verify {
            events.push(ForwardEvent {
                role: Role::Target,
                kind: EventKind::Verify,
                positions: s.positions,
                batch_tokens: s.batch_tokens,
            });
        }
        if let Some(s) = self.decode {
            events.push(ForwardEvent {
                role: Role::Target,
                kind: EventKind::Decode,
                positions: s.positions,
                batch_tokens: s.batch_tokens,
            });
        }
        events
    }

    pub fn append_to(&self, ledger: &mut CostLedger) {
        for event in self.events() {
            ledger.push(event);
        }
    }
}

/// One emitted token with the alignment information the learner stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedToken {
    pub token: Token,
    /// Full target log-probability vector at this position.
    pub target_logprobs: Vec<f64>,
    /// Drafter log-probability of the emitted token, when the drafter was
    /// evaluated at this position.
    pub drafter_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    /// Accepted drafts followed by the bonus or replacement token.
    pub accepted_tokens: Vec<Token>,
    /// Drafted tokens accepted this cycle.
    pub accept_len: usize,
    /// Final target-sampled token. `None` only when an accepted draft was
    /// end-of-sequence, which terminates the cycle on the spot.
    pub bonus_token: Option<Token>,
    /// `(log q, log p)` for every drafted candidate that was tested.
    pub draft_target_logprobs: Vec<(f64, f64)>,
    pub emitted: Vec<EmittedToken>,
    /// Drafted depth offered for verification (0 for a plain decode step).
    pub offered: usize,
    pub cost: CycleCost,
}

impl VerifyOutcome {
    pub fn is_speculative(&self) -> bool {
        self.offered > 0
    }
}

fn context_with(prefix: &[Token], path: &[Token]) -> Vec<Token> {
    let mut ctx = Vec::with_capacity(prefix.len() + path.len());
    ctx.extend_from_slice(prefix);
    ctx.extend_from_slice(path);
    ctx
}

/// Chain speculative sampling with `k` drafted tokens.
pub fn spec_step_chain<R: Rng + ?Sized>(
    target: &TabularModel,
    drafter: &TabularModel,
    ctx: &[Token],
    k: usize,
    rng: &mut R,
) -> Result<VerifyOutcome> {
    spec_step_chain_with(&StandardRule, target, drafter, ctx, k, &mut RngSource(rng))
}

pub fn spec_step_chain_with<A: AcceptanceRule + ?Sized, S: DecisionSource + ?Sized>(
    rule: &A,
    target: &TabularModel,
    drafter: &TabularModel,
    ctx: &[Token],
    k: usize,
    src: &mut S,
) -> Result<VerifyOutcome> {
    if k == 0 {
        return Err(Error::InvalidConfig("chain draft length must be >= 1".into()));
    }
    let eos = target.eos();

    // Drafting: k sequential drafter steps, stopping early after a drafted EOS.
    let mut drafts = Vec::with_capacity(k);
    let mut draft_dists = Vec::with_capacity(k);
    let mut path = Vec::with_capacity(k);
    for _ in 0..k {
        let dctx = context_with(ctx, &path);
        let q = drafter.next_dist(&dctx);
        let token = src.draw(&q);
        draft_dists.push((q, drafter.log_probs(&dctx)));
        drafts.push(token);
        path.push(token);
        if token == eos {
            break;
        }
    }

    let mut outcome = VerifyOutcome {
        accepted_tokens: Vec::with_capacity(drafts.len() + 1),
        accept_len: 0,
        bonus_token: None,
        draft_target_logprobs: Vec::with_capacity(drafts.len()),
        emitted: Vec::with_capacity(drafts.len() + 1),
        offered: drafts.len(),
        cost: CycleCost {
            draft: vec![Slot::single(1); drafts.len()],
            verify: Some(Slot::single(drafts.len() + 1)),
            decode: None,
        },
    };

    for (i, &x) in drafts.iter().enumerate() {
        let tctx = context_with(ctx, &drafts[..i]);
        let logp = target.log_probs(&tctx);
        let p = target.next_dist(&tctx);
        let (q, logq) = &draft_dists[i];
        outcome.draft_target_logprobs.push((logq[x as usize], logp[x as usize]));
        if src.coin(rule.accept_prob(p.prob(x), q.prob(x))) {
            outcome.accept_len += 1;
            outcome.accepted_tokens.push(x);
            outcome.emitted.push(EmittedToken {
                token: x,
                target_logprobs: logp,
                drafter_logprob: Some(logq[x as usize]),
            });
            if x == eos {
                return Ok(outcome);
            }
        } else {
            let residual = match rule.residual(&p, q) {
                Ok(r) => r,
                // Only reachable through rounding when p == q.
                Err(Error::DegenerateResidual) => p,
                Err(e) => return Err(e),
            };
            let token = src.draw(&residual);
            outcome.accepted_tokens.push(token);
            outcome.bonus_token = Some(token);
            outcome.emitted.push(EmittedToken {
                token,
                target_logprobs: logp,
                drafter_logprob: Some(logq[token as usize]),
            });
            return Ok(outcome);
        }
    }

    let tctx = context_with(ctx, &drafts);
    let token = src.draw(&target.next_dist(&tctx));
    outcome.accepted_tokens.push(token);
    outcome.bonus_token = Some(token);
    outcome.emitted.push(EmittedToken { token, target_logprobs: target.log_probs(&tctx), drafter_logprob: None });
    Ok(outcome)
}

/// Tree speculative sampling for an enabled `(s, t, n)` configuration.
pub fn spec_step_tree<R: Rng + ?Sized>(
    target: &TabularModel,
    drafter: &TabularModel,
    ctx: &[Token],
    cfg: &SdConfig,
    rng: &mut R,
) -> Result<VerifyOutcome> {
    if !cfg.enabled {
        return Err(Error::InvalidConfig("tree step needs an enabled config".into()));
    }
    spec_step_tree_with(&StandardRule, target, drafter, ctx, cfg, cfg.depth(), &mut RngSource(rng))
}

struct DraftNode {
    token: Token,
    path: Vec<Token>,
    children: Vec<usize>,
    /// Drafter distribution and log-probs at this node, if it was expanded.
    drafter: Option<(CategoricalDist, Vec<f64>)>,
}

/// Tree step with the drafted depth capped at `max_depth` (`<= s * n`).
pub fn spec_step_tree_with<A: AcceptanceRule + ?Sized, S: DecisionSource + ?Sized>(
    rule: &A,
    target: &TabularModel,
    drafter: &TabularModel,
    ctx: &[Token],
    cfg: &SdConfig,
    max_depth: usize,
    src: &mut S,
) -> Result<VerifyOutcome> {
    let eos = target.eos();
    let depth_limit = max_depth.min(cfg.depth());
    if depth_limit == 0 {
        return Err(Error::InvalidConfig("tree step needs a positive drafted depth".into()));
    }

    let mut nodes = vec![DraftNode { token: 0, path: Vec::new(), children: Vec::new(), drafter: None }];
    let mut frontier = vec![0usize];
    let mut cost = CycleCost::default();
    let mut offered = 0;
    for depth in 0..depth_limit {
        let fan = if depth % cfg.draft_len == 0 { cfg.branching } else { 1 };
        let mut next = Vec::with_capacity(frontier.len() * fan);
        let mut expanded = 0;
        for &id in &frontier {
            if id != 0 && nodes[id].token == eos {
                continue;
            }
            let dctx = context_with(ctx, &nodes[id].path);
            let q = drafter.next_dist(&dctx);
            for _ in 0..fan {
                let token = src.draw(&q);
                let mut path = nodes[id].path.clone();
                path.push(token);
                let child = nodes.len();
                next.push(child);
                nodes[id].children.push(child);
                nodes.push(DraftNode { token, path, children: Vec::new(), drafter: None });
            }
            nodes[id].drafter = Some((q, drafter.log_probs(&dctx)));
            expanded += 1;
        }
        if expanded == 0 {
            break;
        }
        cost.draft.push(Slot::single(expanded));
        offered = depth + 1;
        frontier = next;
    }
    cost.verify = Some(Slot::single(nodes.len()));

    let mut outcome = VerifyOutcome {
        accepted_tokens: Vec::new(),
        accept_len: 0,
        bonus_token: None,
        draft_target_logprobs: Vec::new(),
        emitted: Vec::new(),
        offered,
        cost,
    };

    let mut current = 0usize;
    loop {
        let tctx = context_with(ctx, &nodes[current].path);
        let logp = target.log_probs(&tctx);
        let p = target.next_dist(&tctx);
        let Some((q, logq)) = nodes[current].drafter.as_ref() else {
            // Leaf of the draft tree: every drafted token on the path survived.
            let token = src.draw(&p);
            outcome.accepted_tokens.push(token);
            outcome.bonus_token = Some(token);
            outcome.emitted.push(EmittedToken { token, target_logprobs: logp, drafter_logprob: None });
            return Ok(outcome);
        };

        let mut residual_target = p.clone();
        let mut accepted = None;
        for &child in &nodes[current].children {
            let x = nodes[child].token;
            outcome.draft_target_logprobs.push((logq[x as usize], logp[x as usize]));
            if src.coin(rule.accept_prob(residual_target.prob(x), q.prob(x))) {
                accepted = Some(child);
                break;
            }
            residual_target = match rule.residual(&residual_target, q) {
                Ok(r) => r,
                Err(Error::DegenerateResidual) => residual_target,
                Err(e) => return Err(e),
            };
        }

        match accepted {
            Some(child) => {
                let x = nodes[child].token;
                outcome.accept_len += 1;
                outcome.accepted_tokens.push(x);
                outcome.emitted.push(EmittedToken {
                    token: x,
                    target_logprobs: logp,
                    drafter_logprob: Some(logq[x as usize]),
                });
                if x == eos {
                    return Ok(outcome);
                }
                current = child;
            }
            None => {
                let token = src.draw(&residual_target);
                outcome.accepted_tokens.push(token);
                outcome.bonus_token = Some(token);
                outcome.emitted.push(EmittedToken {
                    token,
                    target_logprobs: logp,
                    drafter_logprob: Some(logq[token as usize]),
                });
                return Ok(outcome);
            }
        }
    }
}

/// One plain target step.
pub fn naive_step<S: DecisionSource + ?Sized>(target: &TabularModel, ctx: &[Token], src: &mut S) -> VerifyOutcome {
    let token = src.draw(&target.next_dist(ctx));
    VerifyOutcome {
        accepted_tokens: vec![token],
        accept_len: 0,
        bonus_token: Some(token),
        draft_target_logprobs: Vec::new(),
        emitted: vec![EmittedToken { token, target_logprobs: target.log_probs(ctx), drafter_logprob: None }],
        offered: 0,
        cost: CycleCost::naive(),
    }
}

/// One decode cycle for a sequence with `remaining` tokens of budget.
///
/// The drafted depth is capped at `remaining - 1` so a cycle never overruns
/// the budget; with one token left, or with SD disabled, this is a plain step.
pub fn decode_cycle<A: AcceptanceRule + ?Sized, S: DecisionSource + ?Sized>(
    rule: &A,
    target: &TabularModel,
    drafter: &TabularModel,
    ctx: &[Token],
    cfg: &SdConfig,
    remaining: usize,
    src: &mut S,
) -> Result<VerifyOutcome> {
    assert!(remaining >= 1, "decode cycle needs a positive budget");
    let depth = cfg.depth().min(remaining - 1);
    if depth == 0 {
        Ok(naive_step(target, ctx, src))
    } else {
        spec_step_tree_with(rule, target, drafter, ctx, cfg, depth, src)
    }
}

/// A full trajectory decoded by a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Response tokens, excluding the prompt.
    pub tokens: Vec<Token>,
    pub steps: Vec<EmittedToken>,
    /// `accept_len` of every speculative cycle.
    pub accept_trace: Vec<usize>,
    /// `(log q, log p)` of every tested draft, cycle after cycle.
    pub draft_target_logprobs: Vec<(f64, f64)>,
    pub ledger: CostLedger,
    /// Pass shapes of every cycle, in order.
    pub cycle_costs: Vec<CycleCost>,
}

pub fn generate<R: Rng + ?Sized>(
    target: &TabularModel,
    drafter: &TabularModel,
    prompt: &[Token],
    cfg: &SdConfig,
    max_len: usize,
    rng: &mut R,
) -> Result<Generation> {
    generate_with(&StandardRule, target, drafter, prompt, cfg, max_len, &mut RngSource(rng))
}

pub fn generate_with<A: AcceptanceRule + ?Sized, S: DecisionSource + ?Sized>(
    rule: &A,
    target: &TabularModel,
    drafter: &TabularModel,
    prompt: &[Token],
    cfg: &SdConfig,
    max_len: usize,
    src: &mut S,
) -> Result<Generation> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be >= 1".into()));
    }
    let eos = target.eos();
    let mut ctx = prompt.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        steps: Vec::new(),
        accept_trace: Vec::new(),
        draft_target_logprobs: Vec::new(),
        ledger: CostLedger::new(),
        cycle_costs: Vec::new(),
    };
    while out.tokens.len() < max_len && out.tokens.last() != Some(&eos) {
        let cycle = decode_cycle(rule, target, drafter, &ctx, cfg, max_len - out.tokens.len(), src)?;
        if cycle.is_speculative() {
            out.accept_trace.push(cycle.accept_len);
        }
        cycle.cost.append_to(&mut out.ledger);
        out.cycle_costs.push(cycle.cost.clone());
        out.draft_target_logprobs.extend_from_slice(&cycle.draft_target_logprobs);
        ctx.extend_from_slice(&cycle.accepted_tokens);
        out.tokens.extend_from_slice(&cycle.accepted_tokens);
        out.steps.extend(cycle.emitted);
    }
    Ok(out)
}

/// Mean acceptance length over every cycle of every trace.
pub fn mean_accept_len<'a, I>(traces: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let (sum, count) = traces
        .into_iter()
        .flat_map(|t| t.iter())
        .fold((0usize, 0usize), |(s, c), &a| (s + a, c + 1));
    if count == 0 {
        return Err(Error::Empty("no verification cycles recorded"));
    }
    Ok(sum as f64 / count as f64)
}

pub mod enumerate {
    //! Exhaustive enumeration of a decision-driven computation.
    //!
    //! The computation is re-run once per branch of its decision tree. Each
    //! run follows a script of option indices and records the exact
    //! probability of the branch it took, so the returned outcomes carry
    //! weights that sum to one.

    use super::DecisionSource;
    use crate::model::{CategoricalDist, Token};

    #[derive(Debug, Default)]
    pub struct ScriptedSource {
        script: Vec<usize>,
        option_counts: Vec<usize>,
        cursor: usize,
        weight: f64,
    }

    impl ScriptedSource {
        fn choose(&mut self, n_options: usize) -> usize {
            let idx = if self.cursor < self.script.len() {
                self.script[self.cursor]
            } else {
                self.script.push(0);
                self.option_counts.push(n_options);
                0
            };
            debug_assert_eq!(self.option_counts[self.cursor], n_options, "nondeterministic replay");
            self.cursor += 1;
            idx
        }

        /// Moves to the next unexplored branch; `false` when none remain.
        fn advance(&mut self) -> bool {
            self.script.truncate(self.cursor);
            self.option_counts.truncate(self.cursor);
            while let Some(last) = self.script.pop() {
                let n = self.option_counts.pop().unwrap_or(0);
                if last + 1 < n {
                    self.script.push(last + 1);
                    self.option_counts.push(n);
                    return true;
                }
            }
            false
        }
    }

    impl DecisionSource for ScriptedSource {
        fn draw(&mut self, dist: &CategoricalDist) -> Token {
            let support: Vec<usize> = (0..dist.len()).filter(|&i| dist.probs()[i] > 0.0).collect();
            let pick = support[self.choose(support.len())];
            self.weight *= dist.probs()[pick];
            pick as Token
        }

        fn coin(&mut self, p_true: f64) -> bool {
            let p = p_true.clamp(0.0, 1.0);
            let mut options = Vec::with_capacity(2);
            if p > 0.0 {
                options.push(true);
            }
            if p < 1.0 {
                options.push(false);
            }
            let outcome = options[self.choose(options.len())];
            self.weight *= if outcome { p } else { 1.0 - p };
            outcome
        }
    }

    /// Runs `f` on every branch and returns `(outcome, probability)` pairs.
    pub fn enumerate_outcomes<T, F>(mut f: F) -> Vec<(T, f64)>
    where
        F: FnMut(&mut ScriptedSource) -> T,
    {
        let mut src = ScriptedSource::default();
        let mut results = Vec::new();
        loop {
            src.cursor = 0;
            src.weight = 1.0;
            let outcome = f(&mut src);
            results.push((outcome, src.weight));
            if !src.advance() {
                return results;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> CategoricalDist {
        CategoricalDist::new(p.to_vec()).unwrap()
    }

    fn order0(probs: &[f64]) -> TabularModel {
        let logits = probs.iter().map(|p| p.ln()).collect();
        TabularModel::new(Vocabulary::new(probs.len()).unwrap(), 0, 1.0, logits).unwrap()
    }

    #[test]
    fn accept_prob_worked_values() {
        assert_eq!(accept_prob(0.6, 0.3), 1.0);
        assert!((accept_prob(0.2, 0.4) - 0.5).abs() < 1e-15);
        for v in [0.01, 0.3, 1.0] {
            assert_eq!(accept_prob(v, v), 1.0);
        }
    }

    #[test]
    #[should_panic]
    fn accept_prob_rejects_zero_q() {
        accept_prob(0.5, 0.0);
    }

    #[test]
    fn residual_worked_values() {
        let r = residual_dist(&dist(&[0.5, 0.3, 0.2]), &dist(&[0.2, 0.5, 0.3])).unwrap();
        assert!(r.total_variation(&dist(&[1.0, 0.0, 0.0])) < 1e-12);
        let r = residual_dist(&dist(&[0.7, 0.3]), &dist(&[0.3, 0.7])).unwrap();
        assert!(r.total_variation(&dist(&[1.0, 0.0])) < 1e-12);
        let p = dist(&[0.25, 0.75]);
        assert!(matches!(residual_dist(&p, &p), Err(Error::DegenerateResidual)));
    }

    #[test]
    fn config_shapes() {
        let cfg = SdConfig::new(2, 2, 3).unwrap();
        assert_eq!(cfg.depth(), 6);
        assert_eq!(cfg.tree_size(), 3 * (2 + 4));
        assert_eq!(SdConfig::chain(4).unwrap().tree_size(), 4);
        assert_eq!(SdConfig::disabled().depth(), 0);
        assert!(SdConfig::new(0, 1, 1).is_err());
        assert_eq!(SdConfig::default_grid().len(), 18);
        assert_eq!(cfg.label(), "s2t2n3");
    }

    #[test]
    fn identical_models_accept_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = TabularModel::random(Vocabulary::new(6).unwrap(), 1, 1.0, 1.0, &mut rng).unwrap();
        // Remove EOS mass so drafted blocks never stop early.
        let mut logits = model.logits().to_vec();
        for row in logits.chunks_mut(6) {
            row[5] = f64::NEG_INFINITY;
        }
        let model = TabularModel::new(model.vocab(), 1, 1.0, logits).unwrap();
        for _ in 0..50 {
            let out = spec_step_chain(&model, &model, &[1, 2], 3, &mut rng).unwrap();
            assert_eq!(out.accept_len, 3);
            assert_eq!(out.accepted_tokens.len(), 4);
            let cfg = SdConfig::new(2, 2, 2).unwrap();
            let tree = spec_step_tree(&model, &model, &[1, 2], &cfg, &mut rng).unwrap();
            assert_eq!(tree.accept_len, 4);
            // First candidate at every position is accepted, so exactly one
            // test per drafted position.
            assert_eq!(tree.draft_target_logprobs.len(), 4);
        }
    }

    #[test]
    fn disjoint_point_masses_always_replace() {
        let drafter = TabularModel::new(Vocabulary::new(3).unwrap(), 0, 1.0, vec![0.0, -1e300, -1e300]).unwrap();
        let target = TabularModel::new(Vocabulary::new(3).unwrap(), 0, 1.0, vec![-1e300, 0.0, -1e300]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = spec_step_chain(&target, &drafter, &[], 3, &mut rng).unwrap();
            assert_eq!(out.accept_len, 0);
            assert_eq!(out.accepted_tokens, vec![1]);
            assert_eq!(out.bonus_token, Some(1));
        }
    }

    #[test]
    fn tree_with_one_branch_replays_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vocab = Vocabulary::new(5).unwrap();
        let target = TabularModel::random(vocab, 2, 1.0, 1.5, &mut rng).unwrap();
        let drafter = TabularModel::random(vocab, 1, 1.0, 1.5, &mut rng).unwrap();
        for seed in 0..200 {
            let chain = spec_step_chain(&target, &drafter, &[0, 3], 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cfg = SdConfig::new(2, 1, 2).unwrap();
            let tree = spec_step_tree(&target, &drafter, &[0, 3], &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(chain, tree);
        }
    }

    #[test]
    fn recorded_pairs_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let vocab = Vocabulary::new(6).unwrap();
        let target = TabularModel::random(vocab, 2, 0.9, 2.0, &mut rng).unwrap();
        let drafter = TabularModel::random(vocab, 1, 0.9, 2.0, &mut rng).unwrap();
        let prompt = [1, 4];
        let cfg = SdConfig::chain(3).unwrap();
        let g = generate(&target, &drafter, &prompt, &cfg, 30, &mut rng).unwrap();
        let mut ctx = prompt.to_vec();
        for step in &g.steps {
            let recomputed = target.log_probs(&ctx);
            for (a, b) in step.target_logprobs.iter().zip(&recomputed) {
                assert!((a - b).abs() <= 1e-12);
            }
            if let Some(lq) = step.drafter_logprob {
                assert!((lq - drafter.logprob(&ctx, step.token)).abs() <= 1e-12);
            }
            ctx.push(step.token);
        }
        assert_eq!(g.steps.len(), g.tokens.len());
    }

    #[test]
    fn generate_stops_at_eos_and_budget() {
        let always_eos = order0(&[1e-300, 1e-300, 1.0 - 2e-300]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [SdConfig::disabled(), SdConfig::chain(3).unwrap()] {
            let g = generate(&always_eos, &always_eos, &[0], &cfg, 10, &mut rng).unwrap();
            assert_eq!(g.tokens, vec![2]);
        }
        let never_eos = order0(&[0.5, 0.5 - 1e-300, 1e-300]);
        let g = generate(&never_eos, &never_eos, &[0], &SdConfig::chain(4).unwrap(), 7, &mut rng).unwrap();
        assert_eq!(g.tokens.len(), 7);
    }

    #[test]
    fn mean_accept_len_values() {
        let traces = [vec![0usize, 1, 2]];
        assert_eq!(mean_accept_len(traces.iter().map(|t| t.as_slice())).unwrap(), 1.0);
        assert!(mean_accept_len(std::iter::empty::<&[usize]>()).is_err());
        let all_k = [vec![3usize; 5], vec![3usize; 2]];
        assert_eq!(mean_accept_len(all_k.iter().map(|t| t.as_slice())).unwrap(), 3.0);
    }

    #[test]
    fn enumeration_weights_sum_to_one() {
        let target = order0(&[0.1, 0.2, 0.3, 0.4]);
        let drafter = order0(&[0.4, 0.3, 0.2, 0.1]);
        let outcomes = enumerate::enumerate_outcomes(|src| {
            spec_step_chain_with(&StandardRule, &target, &drafter, &[], 2, src).unwrap().accepted_tokens
        });
        let total: f64 = outcomes.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_merge_is_slotwise() {
        let mut a = CycleCost { draft: vec![Slot::single(1), Slot::single(2)], verify: Some(Slot::single(4)), decode: None };
        let b = CycleCost { draft: vec![Slot::single(1)], verify: Some(Slot::single(2)), decode: None };
        a.merge(&b);
        assert_eq!(a.draft, vec![Slot { positions: 1, batch_tokens: 2 }, Slot { positions: 2, batch_tokens: 2 }]);
        assert_eq!(a.verify, Some(Slot { positions: 4, batch_tokens: 6 }));
        a.merge(&CycleCost::naive());
        assert_eq!(a.events().len(), 4);
    }
}
