//! Cost model checks against independent oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrl_core::costsim::{accept_ratio_variance, expected_cost_per_token, Role, RoleCost, TimingModel};
use specrl_core::model::{CategoricalDist, TabularModel, Token, Vocabulary};
use specrl_core::rl::marginal_drafter;
use specrl_core::server::profile;
use specrl_core::specdec::{generate, SdConfig};

fn dist_from(weights: Vec<f64>) -> CategoricalDist {
    CategoricalDist::from_weights(weights).unwrap()
}

/// Variance of `prod p/q` under `q`, summed over every sequence.
fn brute_force_variance(steps: &[(CategoricalDist, CategoricalDist)]) -> f64 {
    let v = steps[0].0.len();
    let total = v.pow(steps.len() as u32);
    let (mut first, mut second) = (0.0, 0.0);
    for code in 0..total {
        let (mut qprob, mut ratio, mut c) = (1.0, 1.0, code);
        for (p, q) in steps {
            let x = c % v;
            c /= v;
            qprob *= q.prob(x as Token);
            ratio *= p.prob(x as Token) / q.prob(x as Token);
        }
        first += qprob * ratio;
        second += qprob * ratio * ratio;
    }
    second - first * first
}

#[test]
fn variance_identity_three_steps_three_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let steps: Vec<_> = (0..3)
            .map(|_| {
                let p = dist_from((0..3).map(|_| rng.random_range(0.01..1.0)).collect());
                let q = dist_from((0..3).map(|_| rng.random_range(0.01..1.0)).collect());
                (p, q)
            })
            .collect();
        let identity = accept_ratio_variance(&steps).unwrap();
        let brute = brute_force_variance(&steps);
        assert!((identity - brute).abs() < 1e-12 * (1.0 + brute.abs()), "{identity} vs {brute}");
    }
}

proptest! {
    #[test]
    fn variance_identity_small_alphabets(
        v in 2usize..=4,
        len in 1usize..=4,
        raw in prop::collection::vec(0.01f64..1.0, 32),
    ) {
        let mut it = raw.iter().copied().cycle();
        let steps: Vec<_> = (0..len)
            .map(|_| {
                let p = dist_from((0..v).map(|_| it.next().unwrap()).collect());
                let q = dist_from((0..v).map(|_| it.next().unwrap() * 0.7 + 0.05).collect());
                (p, q)
            })
            .collect();
        let identity = accept_ratio_variance(&steps).unwrap();
        let brute = brute_force_variance(&steps);
        prop_assert!((identity - brute).abs() < 1e-12 * (1.0 + brute.abs()));
    }

    #[test]
    fn speedup_above_one_iff_rate_clears_threshold(
        cq in 0.01f64..5.0,
        cp in 0.1f64..50.0,
        alpha in 1.0f64..16.0,
        rate in 0.01f64..=1.0,
    ) {
        let cost = expected_cost_per_token(cq, cp, alpha, rate).unwrap();
        let threshold = (cq + cp / alpha) / cp;
        prop_assume!((rate - threshold).abs() > 1e-9);
        prop_assert_eq!(cp / cost > 1.0, rate > threshold);
    }

    #[test]
    fn doubling_in_linear_regime_less_than_doubles_iff_floor(
        floor in prop_oneof![Just(0.0), 0.01f64..10.0],
        unit in 0.01f64..5.0,
        sat in 1usize..64,
        extra in 0usize..1000,
    ) {
        let cost = RoleCost { unit_cost: unit, saturation_tokens: sat, latency_floor: floor };
        let tokens = sat + extra;
        let ratio = cost.forward_time(2 * tokens) / cost.forward_time(tokens);
        if floor > 0.0 {
            prop_assert!(ratio < 2.0);
        } else {
            prop_assert!((ratio - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_time_is_nondecreasing(a in 1usize..5000, b in 1usize..5000) {
        let tm = TimingModel::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(tm.target.forward_time(lo) <= tm.target.forward_time(hi));
        prop_assert!(tm.drafter.forward_time(lo) <= tm.drafter.forward_time(hi));
    }
}

/// A drafter identical to the target with EOS made unreachable.
fn eos_free_model(v: usize, seed: u64) -> TabularModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TabularModel::random(Vocabulary::new(v).unwrap(), 1, 1.0, 1.0, &mut rng).unwrap();
    let mut logits = model.logits().to_vec();
    for row in logits.chunks_mut(v) {
        row[v - 1] = f64::NEG_INFINITY;
    }
    model.with_logits(logits).unwrap()
}

#[test]
fn certain_acceptance_chain_matches_closed_form() {
    let tm = TimingModel::default();
    let model = eos_free_model(6, 5);
    let k = 4;
    let len = 10 * (k + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = generate(&model, &model, &[0], &SdConfig::chain(k).unwrap(), len, &mut rng).unwrap();
    let naive = generate(&model, &model, &[0], &SdConfig::disabled(), len, &mut rng).unwrap();
    assert_eq!(spec.tokens.len(), len);
    assert!(spec.accept_trace.iter().all(|&a| a == k));

    let target_pass = tm.forward_time(Role::Target, k + 1);
    let drafter_pass = tm.forward_time(Role::Drafter, 1);
    let share = drafter_pass / target_pass;
    let closed_form = (k + 1) as f64 / (1.0 + k as f64 * share);
    let measured = tm.ledger_time(&naive.ledger) / tm.ledger_time(&spec.ledger);
    assert!((measured - closed_form).abs() < 1e-9, "{measured} vs {closed_form}");
}

#[test]
fn speedup_shrinks_as_batch_grows() {
    let tm = TimingModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let target = TabularModel::random(Vocabulary::new(8).unwrap(), 2, 1.0, 1.0, &mut rng).unwrap();
    let drafter = marginal_drafter(&target, 1).unwrap();
    let prompts: Vec<Vec<Token>> = (0..8).map(|i| vec![i % 7, (3 * i + 1) % 7]).collect();
    let buckets = [1, 2, 4, 8, 16, 32, 64];
    let table = profile(&target, &drafter, &SdConfig::default_grid(), &buckets, &prompts, 24, &tm, &mut rng).unwrap();
    for cfg in SdConfig::default_grid() {
        let speedups: Vec<f64> = buckets.iter().map(|&b| table.entry(b, &cfg).unwrap().speedup).collect();
        for w in speedups.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{cfg}: {speedups:?}");
        }
    }
}
