//! Cost accounting for speculative decoding.
//!
//! Two views live here. The analytical one is the expected cost per accepted
//! token `(C_q + C_p / alpha) / r` together with the variance of the
//! importance ratio `prod p/q` over independent steps. The simulated one is a
//! saturating-linear [`TimingModel`]: a forward pass costs a fixed floor plus a
//! per-token price, but tokens below the saturation point are free. That
//! shape is what makes speculative decoding pay off at small batch sizes and
//! lose at large ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CategoricalDist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Drafter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Plain one-token-per-sequence target step.
    Decode,
    /// Drafter proposal step.
    Draft,
    /// Target verification of a drafted block or tree.
    Verify,
    /// Drafter pass over full contexts when a batch is promoted to spec mode.
    Prefill,
}

/// One batched forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardEvent {
    pub role: Role,
    pub kind: EventKind,
    /// Largest per-sequence number of positions evaluated in this pass.
    pub positions: usize,
    /// Tokens processed by the pass across every sequence sharing it.
    pub batch_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    events: Vec<ForwardEvent>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: ForwardEvent) {
        debug_assert!(event.positions >= 1 && event.batch_tokens >= 1);
        self.events.push(event);
    }

    pub fn extend(&mut self, other: &CostLedger) {
        self.events.extend_from_slice(&other.events);
    }

    pub fn events(&self) -> &[ForwardEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, role: Role, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.role == role && e.kind == kind).count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleCost {
    /// Time per token once the pass is past saturation.
    pub unit_cost: f64,
    /// Tokens a pass can absorb at no marginal cost.
    pub saturation_tokens: usize,
    /// Fixed per-pass overhead.
    pub latency_floor: f64,
}

impl RoleCost {
    pub fn validate(&self) -> Result<()> {
        if !(self.unit_cost > 0.0) || self.saturation_tokens < 1 || !(self.latency_floor >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid role cost {self:?}")));
        }
        Ok(())
    }

    pub fn forward_time(&self, total_tokens: usize) -> f64 {
        self.latency_floor + self.unit_cost * total_tokens.max(self.saturation_tokens) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub target: RoleCost,
    pub drafter: RoleCost,
    /// Drafter-pass equivalents charged per distilled token (forward + backward).
    #[serde(default = "default_learner_passes")]
    pub learner_passes: f64,
}

fn default_learner_passes() -> f64 {
    3.0
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            target: RoleCost { unit_cost: 1.0, saturation_tokens: 32, latency_floor: 2.0 },
            drafter: RoleCost { unit_cost: 0.1, saturation_tokens: 32, latency_floor: 0.4 },
            learner_passes: default_learner_passes(),
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.drafter.validate()?;
        if !(self.learner_passes >= 0.0) {
            return Err(Error::InvalidConfig("learner_passes must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn role(&self, role: Role) -> &RoleCost {
        match role {
            Role::Target => &self.target,
            Role::Drafter => &self.drafter,
        }
    }

    /// `f + c * max(total_tokens, T_sat)` for the given role.
    pub fn forward_time(&self, role: Role, total_tokens: usize) -> f64 {
        assert!(total_tokens >= 1, "a forward pass processes at least one token");
        self.role(role).forward_time(total_tokens)
    }

    pub fn event_time(&self, event: &ForwardEvent) -> f64 {
        self.forward_time(event.role, event.batch_tokens)
    }

    pub fn ledger_time(&self, ledger: &CostLedger) -> f64 {
        ledger.events().iter().map(|e| self.event_time(e)).sum()
    }

    /// Simulated cost of one distillation update over `tokens` positions.
    pub fn learner_time(&self, tokens: usize) -> f64 {
        if tokens == 0 {
            return 0.0;
        }
        self.learner_passes * self.drafter.forward_time(tokens)
    }
}

/// `sum_x p(x)^2 / q(x) - 1`.
pub fn chi2_divergence(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    let mut total = 0.0;
    for (x, (&px, &qx)) in p.probs().iter().zip(q.probs()).enumerate() {
        if px > 0.0 {
            if qx <= 0.0 {
                return Err(Error::UnboundedDivergence { token: x });
            }
            total += px * px / qx;
        }
    }
    Ok(total - 1.0)
}

/// Variance under `q` of the importance ratio `prod_t p_t / q_t` for
/// independent steps: `prod_t (1 + chi2(p_t || q_t)) - 1`.
///
/// Only valid when the steps are independent (context-free models); for
/// autoregressive steps the product identity does not hold.
pub fn accept_ratio_variance(steps: &[(CategoricalDist, CategoricalDist)]) -> Result<f64> {
    let mut product = 1.0;
    for (p, q) in steps {
        product *= 1.0 + chi2_divergence(p, q)?;
    }
    Ok(product - 1.0)
}

/// Expected cost per accepted token, `(C_q + C_p / alpha) / r`.
pub fn expected_cost_per_token(drafter_cost: f64, target_cost: f64, alpha: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidRate(rate));
    }
    if !(drafter_cost >= 0.0 && target_cost > 0.0 && alpha >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "cost model needs C_q >= 0, C_p > 0, alpha >= 1; got ({drafter_cost}, {target_cost}, {alpha})"
        )));
    }
    Ok((drafter_cost + target_cost / alpha) / rate)
}
