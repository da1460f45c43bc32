//! Runtime oracle checks.
//!
//! Each check compares the implementation against an independent reference:
//! plain autoregressive enumeration for losslessness, brute-force sequence
//! enumeration for the ratio variance, and central finite differences for
//! both gradients. The losslessness checks take the acceptance rule as a
//! parameter so a deliberately broken rule can be shown to fail them.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use specrl_core::costsim::{accept_ratio_variance, expected_cost_per_token};
use specrl_core::learner::{kd_gradient, kd_loss};
use specrl_core::model::{CategoricalDist, TabularModel, Token, Vocabulary};
use specrl_core::rl::{policy_gradient, policy_objective, RolloutSample};
use specrl_core::specdec::enumerate::enumerate_outcomes;
use specrl_core::specdec::{generate_with, residual_dist, spec_step_tree_with, AcceptanceRule, SdConfig, StandardRule};
use specrl_core::Result as CoreResult;

pub const CLOSED_FORM_TOLERANCE: f64 = 1e-12;
pub const ENUMERATION_TV_TOLERANCE: f64 = 1e-9;
pub const VARIANCE_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_REL_TOLERANCE: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub max_error: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub seconds: f64,
}

/// Acceptance rule that over-accepts by a fixed epsilon; a test fixture.
#[derive(Debug, Clone, Copy)]
pub struct OverAcceptingRule {
    pub epsilon: f64,
}

impl AcceptanceRule for OverAcceptingRule {
    fn accept_prob(&self, p: f64, q: f64) -> f64 {
        ((p / q).min(1.0) + self.epsilon).min(1.0)
    }

    fn residual(&self, p: &CategoricalDist, q: &CategoricalDist) -> CoreResult<CategoricalDist> {
        residual_dist(p, q)
    }
}

fn timed<F: FnOnce() -> (f64, usize)>(name: &str, tolerance: f64, f: F) -> CheckResult {
    let start = Instant::now();
    let (max_error, instances) = f();
    CheckResult {
        name: name.to_string(),
        passed: max_error <= tolerance,
        max_error,
        tolerance,
        instances,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_dist<R: Rng>(v: usize, rng: &mut R) -> CategoricalDist {
    CategoricalDist::from_weights((0..v).map(|_| rng.random_range(0.01..1.0)).collect()).expect("positive weights")
}

fn random_model<R: Rng>(v: usize, order: usize, rng: &mut R) -> TabularModel {
    TabularModel::random(Vocabulary::new(v).expect("v >= 2"), order, 1.0, 1.5, rng).expect("valid shape")
}

/// Sequence distribution of plain sampling from `target`, by direct enumeration.
pub fn naive_sequences(target: &TabularModel, prompt: &[Token], max_len: usize) -> BTreeMap<Vec<Token>, f64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![(prompt.to_vec(), 1.0)];
    while let Some((ctx, prob)) = stack.pop() {
        let generated = &ctx[prompt.len()..];
        if generated.len() == max_len || generated.last() == Some(&target.eos()) {
            *out.entry(generated.to_vec()).or_insert(0.0) += prob;
            continue;
        }
        for (x, &px) in target.next_dist(&ctx).probs().iter().enumerate() {
            if px > 0.0 {
                let mut next = ctx.clone();
                next.push(x as Token);
                stack.push((next, prob * px));
            }
        }
    }
    out
}

fn total_variation<K: Ord + Clone>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut keys: Vec<&K> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys.iter().map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs()).sum::<f64>()
}

fn collect<K: Ord>(pairs: Vec<(K, f64)>) -> BTreeMap<K, f64> {
    let mut out = BTreeMap::new();
    for (k, w) in pairs {
        *out.entry(k).or_insert(0.0) += w;
    }
    out
}

/// Induced one-step distribution `q a + (sum q (1 - a)) r` against `p`.
pub fn check_single_step(rule: &dyn AcceptanceRule, trials: usize, seed: u64) -> CheckResult {
    timed("single-step closed form", CLOSED_FORM_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let v = 2 + trial % 7;
            let p = random_dist(v, &mut rng);
            let q = random_dist(v, &mut rng);
            let a: Vec<f64> = (0..v).map(|x| rule.accept_prob(p.probs()[x], q.probs()[x])).collect();
            let reject: f64 = (0..v).map(|x| q.probs()[x] * (1.0 - a[x])).sum();
            let r = match rule.residual(&p, &q) {
                Ok(r) => r.probs().to_vec(),
                Err(_) => vec![0.0; v],
            };
            for x in 0..v {
                let induced = q.probs()[x] * a[x] + reject * r[x];
                worst = worst.max((induced - p.probs()[x]).abs());
            }
        }
        (worst, trials)
    })
}

/// Whole output of chain SD (V=4, k=3, context-free models) over one block.
pub fn check_chain_block(rule: &dyn AcceptanceRule, instances: usize, seed: u64) -> CheckResult {
    timed("chain block enumeration", ENUMERATION_TV_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SdConfig::chain(3).expect("k > 0");
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let target = random_model(4, 0, &mut rng);
            let drafter = random_model(4, 0, &mut rng);
            let sd = collect(enumerate_outcomes(|src| {
                generate_with(rule, &target, &drafter, &[], &cfg, 4, src).expect("valid inputs").tokens
            }));
            worst = worst.max(total_variation(&sd, &naive_sequences(&target, &[], 4)));
        }
        (worst, instances)
    })
}

/// First emitted token of a single-round tree with up to three siblings.
pub fn check_tree_position(rule: &dyn AcceptanceRule, instances: usize, seed: u64) -> CheckResult {
    timed("tree single position enumeration", ENUMERATION_TV_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for branching in 1..=3 {
            let cfg = SdConfig::new(1, branching, 1).expect("positive shape");
            for _ in 0..instances {
                let target = random_model(4, 0, &mut rng);
                let drafter = random_model(4, 0, &mut rng);
                let first = collect(enumerate_outcomes(|src| {
                    spec_step_tree_with(rule, &target, &drafter, &[], &cfg, 1, src).expect("valid inputs").accepted_tokens
                        [0]
                }));
                let reference: BTreeMap<Token, f64> =
                    target.next_dist(&[]).probs().iter().enumerate().map(|(x, &p)| (x as Token, p)).collect();
                worst = worst.max(total_variation(&first, &reference));
                count += 1;
            }
        }
        (worst, count)
    })
}

/// `Var(prod p/q)` under `q` by enumerating every drafted sequence.
pub fn brute_force_ratio_variance(steps: &[(CategoricalDist, CategoricalDist)]) -> f64 {
    let mut second_moment = 0.0;
    let mut first_moment = 0.0;
    let sizes: Vec<usize> = steps.iter().map(|(p, _)| p.len()).collect();
    let mut idx = vec![0usize; steps.len()];
    loop {
        let mut prob = 1.0;
        let mut ratio = 1.0;
        for (t, &x) in idx.iter().enumerate() {
            let (p, q) = &steps[t];
            prob *= q.probs()[x];
            ratio *= p.probs()[x] / q.probs()[x];
        }
        first_moment += prob * ratio;
        second_moment += prob * ratio * ratio;
        // Odometer increment over all sequences.
        let mut t = 0;
        while t < idx.len() {
            idx[t] += 1;
            if idx[t] < sizes[t] {
                break;
            }
            idx[t] = 0;
            t += 1;
        }
        if t == idx.len() {
            break;
        }
    }
    second_moment - first_moment * first_moment
}

pub fn check_ratio_variance(instances: usize, seed: u64) -> CheckResult {
    timed("ratio variance identity", VARIANCE_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let v = rng.random_range(2..=4);
            let len = rng.random_range(1..=4);
            let steps: Vec<_> = (0..len).map(|_| (random_dist(v, &mut rng), random_dist(v, &mut rng))).collect();
            let analytic = accept_ratio_variance(&steps).expect("full-support drafter");
            let brute = brute_force_ratio_variance(&steps);
            worst = worst.max((analytic - brute).abs());
        }
        // Worked value: chi-square 0.1 per step over two steps gives 0.21.
        let p = CategoricalDist::new(vec![0.5 + 0.5 * 0.1f64.sqrt(), 0.5 - 0.5 * 0.1f64.sqrt()]).expect("valid");
        let q = CategoricalDist::uniform(2);
        let worked = accept_ratio_variance(&[(p.clone(), q.clone()), (p, q)]).expect("full support");
        worst = worst.max((worked - 0.21).abs());
        (worst, instances + 1)
    })
}

pub fn check_cost_worked_value() -> CheckResult {
    timed("expected cost worked value", 1e-12, || {
        let cost = expected_cost_per_token(1.0, 10.0, 5.0, 0.8).expect("valid rate");
        ((cost - 3.75).abs(), 1)
    })
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn random_sample<R: Rng>(target: &TabularModel, rng: &mut R, actor_version: u64) -> RolloutSample {
    let v = target.vocab_size() as Token;
    let prompt: Vec<Token> = (0..2).map(|_| rng.random_range(0..v - 1)).collect();
    let len = rng.random_range(1..=5);
    let mut ctx = prompt.clone();
    let mut response = Vec::with_capacity(len);
    let mut target_logprobs = Vec::with_capacity(len);
    for _ in 0..len {
        target_logprobs.push(target.log_probs(&ctx));
        let y = rng.random_range(0..v);
        ctx.push(y);
        response.push(y);
    }
    RolloutSample {
        prompt,
        drafter_logprobs: vec![None; response.len()],
        response,
        target_logprobs,
        reward: rng.random(),
        actor_version,
    }
}

fn directional_check<L, G>(model: &TabularModel, rng: &mut ChaCha8Rng, loss: L, grad: G) -> f64
where
    L: Fn(&TabularModel) -> f64,
    G: Fn(&TabularModel) -> Vec<f64>,
{
    let direction: Vec<f64> = (0..model.logits().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shifted = |sign: f64| {
        let logits = model.logits().iter().zip(&direction).map(|(z, d)| z + sign * FD_STEP * d).collect();
        TabularModel::new(model.vocab(), model.order(), model.temperature(), logits).expect("same shape")
    };
    let numeric = (loss(&shifted(1.0)) - loss(&shifted(-1.0))) / (2.0 * FD_STEP);
    let analytic: f64 = grad(model).iter().zip(&direction).map(|(g, d)| g * d).sum();
    relative_error(numeric, analytic)
}

pub fn check_kd_gradient(instances: usize, seed: u64) -> CheckResult {
    timed("distillation gradient", GRADIENT_REL_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let v = rng.random_range(3..=6);
            let target = random_model(v, 2, &mut rng);
            let tau = rng.random_range(0.5..2.0);
            let base = random_model(v, 1, &mut rng);
            let drafter = TabularModel::new(base.vocab(), 1, tau, base.logits().to_vec()).expect("same shape");
            let n = rng.random_range(1..=4);
            let samples: Vec<RolloutSample> = (0..n).map(|_| random_sample(&target, &mut rng, 0)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let loss = |m: &TabularModel| {
                samples.iter().zip(&weights).map(|(s, &w)| kd_loss(m, s, w).expect("softmax drafter")).sum()
            };
            let grad = |m: &TabularModel| {
                let weighted: Vec<(&RolloutSample, f64)> = samples.iter().zip(weights.iter().copied()).collect();
                kd_gradient(m, &weighted).expect("softmax drafter")
            };
            worst = worst.max(directional_check(&drafter, &mut rng, loss, grad));
        }
        (worst, instances)
    })
}

pub fn check_policy_gradient(instances: usize, seed: u64) -> CheckResult {
    timed("policy gradient", GRADIENT_REL_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let v = rng.random_range(3..=6);
            let tau = rng.random_range(0.5..2.0);
            let base = random_model(v, 2, &mut rng);
            let actor = TabularModel::new(base.vocab(), 2, tau, base.logits().to_vec()).expect("same shape");
            let n = rng.random_range(2..=6);
            let samples: Vec<(RolloutSample, f64)> = (0..n)
                .map(|_| (random_sample(&actor, &mut rng, actor.version()), rng.random_range(-2.0..2.0)))
                .collect();
            let objective = |m: &TabularModel| policy_objective(m, &samples);
            let grad = |m: &TabularModel| policy_gradient(m, &samples).expect("on-policy samples");
            worst = worst.max(directional_check(&actor, &mut rng, objective, grad));
        }
        (worst, instances)
    })
}

/// Losslessness checks against the given acceptance rule.
pub fn losslessness_checks(rule: &dyn AcceptanceRule, seed: u64) -> Vec<CheckResult> {
    vec![
        check_single_step(rule, 1000, seed),
        check_chain_block(rule, 10, seed.wrapping_add(1)),
        check_tree_position(rule, 5, seed.wrapping_add(2)),
    ]
}

/// Every oracle check with the standard rule.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = losslessness_checks(&StandardRule, seed);
    out.push(check_ratio_variance(100, seed.wrapping_add(3)));
    out.push(check_cost_worked_value());
    out.push(check_kd_gradient(50, seed.wrapping_add(4)));
    out.push(check_policy_gradient(50, seed.wrapping_add(5)));
    out
}
