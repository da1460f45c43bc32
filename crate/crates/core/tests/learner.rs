//! Drafter distillation: loss oracle, buffer hygiene, schedules and the
//! learner thread.

use std::sync::mpsc;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrl_core::costsim::TimingModel;
use specrl_core::learner::{
    kd_loss, run_async, KdPolicy, Learner, LearnerMsg, SnapshotOutlet, UpdateMode, WeightMode,
};
use specrl_core::model::{TabularModel, Token, Vocabulary};
use specrl_core::rl::{marginal_drafter, reward, train_loop, RolloutSample, TrainSettings, WorkloadSpec};
use specrl_core::server::ServePolicy;
use specrl_core::specdec::{generate, SdConfig};

fn models(seed: u64) -> (TabularModel, TabularModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::new(5).unwrap();
    let target = TabularModel::random(vocab, 2, 1.0, 1.5, &mut rng).unwrap();
    let drafter = TabularModel::random(vocab, 1, 1.0, 1.0, &mut rng).unwrap();
    (target, drafter)
}

fn samples(target: &TabularModel, n: usize, seed: u64) -> Vec<RolloutSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = specrl_core::rl::RewardSpec { golden: (1, 2), eos: target.eos() };
    (0..n)
        .map(|_| {
            let prompt: Vec<Token> = vec![rng.random_range(0..4), rng.random_range(0..4)];
            let g = generate(target, target, &prompt, &SdConfig::disabled(), 10, &mut rng).unwrap();
            let mut s = RolloutSample::from_steps(prompt, g.steps, target.version());
            s.reward = reward(&s.response, &spec);
            s
        })
        .collect()
}

/// `w * sum_t sum_x p log(p/q)`, with both distributions rebuilt from raw logits.
fn reference_loss(target: &TabularModel, drafter: &TabularModel, sample: &RolloutSample, w: f64) -> f64 {
    let v = target.vocab_size();
    let softmax_row = |m: &TabularModel, ctx: &[Token]| -> Vec<f64> {
        let mut row = 0usize;
        for i in 0..m.order() {
            let tok = if ctx.len() + i >= m.order() { ctx[ctx.len() + i - m.order()] as usize } else { 0 };
            row = row * v + tok;
        }
        let z: Vec<f64> = m.row(row).iter().map(|l| l / m.temperature()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|l| (l - max).exp()).sum();
        z.iter().map(|l| (l - max).exp() / total).collect()
    };
    let mut ctx = sample.prompt.clone();
    let mut loss = 0.0;
    for &tok in &sample.response {
        let p = softmax_row(target, &ctx);
        let q = softmax_row(drafter, &ctx);
        for x in 0..v {
            if p[x] > 0.0 {
                loss += p[x] * (p[x] / q[x]).ln();
            }
        }
        ctx.push(tok);
    }
    w * loss
}

#[test]
fn loss_matches_double_sum_reference() {
    for seed in 0..10 {
        let (target, drafter) = models(seed);
        for (i, s) in samples(&target, 8, seed).iter().enumerate() {
            let w = 0.25 * i as f64;
            let got = kd_loss(&drafter, s, w).unwrap();
            let want = reference_loss(&target, &drafter, s, w);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn buffer_is_cleared_exactly_at_updates(
        interval in 1u64..5,
        feeds in prop::collection::vec(0usize..6, 1..12),
        seed in 0u64..100,
    ) {
        let (target, drafter) = models(seed);
        let pool = samples(&target, feeds.iter().sum::<usize>().max(1), seed);
        let policy = KdPolicy { interval, weight_mode: WeightMode::Uniform, ..KdPolicy::default() };
        let mut learner = Learner::new(drafter, policy, 4096, seed).unwrap();
        let mut next = pool.into_iter();
        let mut held = 0;
        for (i, &n) in feeds.iter().enumerate() {
            for s in next.by_ref().take(n) {
                learner.push(s);
            }
            held += n;
            let before = learner.drafter().version;
            let update = learner.on_boundary().unwrap();
            let scheduled = (i as u64 + 1).is_multiple_of(interval);
            match update {
                Some(u) => {
                    prop_assert!(scheduled);
                    prop_assert_eq!(u.samples_used, held.div_ceil(interval as usize));
                    prop_assert_eq!(learner.drafter().version, before + 1);
                    prop_assert!(learner.buffer().is_empty());
                    held = 0;
                }
                None => {
                    prop_assert!(!scheduled || held == 0);
                    prop_assert_eq!(learner.drafter().version, before);
                    prop_assert_eq!(learner.buffer().len(), held);
                }
            }
        }
    }
}

#[test]
fn thread_and_inline_learners_agree_bit_for_bit() {
    for interval in [1, 3] {
        let (target, drafter) = models(4);
        let policy = KdPolicy { interval, ..KdPolicy::default() };
        let batches: Vec<Vec<RolloutSample>> = (0..7).map(|i| samples(&target, 6, 50 + i)).collect();

        let mut inline = Learner::new(drafter.clone(), policy, 4096, 8).unwrap();
        for batch in &batches {
            batch.iter().cloned().for_each(|s| inline.push(s));
            inline.on_boundary().unwrap();
        }

        let threaded = Learner::new(drafter, policy, 4096, 8).unwrap();
        let outlet = Arc::new(SnapshotOutlet::new(Arc::clone(threaded.drafter())));
        let (tx, rx) = mpsc::channel();
        let handle = run_async(threaded, rx, Arc::clone(&outlet));
        for batch in &batches {
            for s in batch {
                tx.send(LearnerMsg::Sample(Box::new(s.clone()))).unwrap();
            }
            tx.send(LearnerMsg::Boundary).unwrap();
        }
        tx.send(LearnerMsg::Shutdown).unwrap();
        let threaded = handle.join().unwrap().unwrap();

        assert_eq!(inline.metrics(), threaded.metrics());
        assert_eq!(inline.drafter().model.logits(), threaded.drafter().model.logits());
        assert_eq!(outlet.latest().version, inline.drafter().version);
        let versions: Vec<u64> = outlet.publications().iter().map(|p| p.boundary).collect();
        assert_eq!(versions, (1..=7).collect::<Vec<u64>>());
    }
}

#[test]
fn shutdown_drains_queued_samples_without_updating() {
    let (target, drafter) = models(2);
    let learner = Learner::new(drafter, KdPolicy::default(), 4096, 0).unwrap();
    let outlet = Arc::new(SnapshotOutlet::new(Arc::clone(learner.drafter())));
    let (tx, rx) = mpsc::channel();
    let handle = run_async(learner, rx, outlet);
    for s in samples(&target, 5, 3) {
        tx.send(LearnerMsg::Sample(Box::new(s))).unwrap();
    }
    tx.send(LearnerMsg::Shutdown).unwrap();
    let learner = handle.join().unwrap().unwrap();
    assert_eq!(learner.buffer().len(), 5);
    assert!(learner.metrics().is_empty());
    assert_eq!(learner.drafter().version, 0);
}

fn short_run(policy: KdPolicy, mode: UpdateMode, steps: usize) -> specrl_core::rl::TrainReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = WorkloadSpec { num_prompts: 4, group_size: 4, max_len: 16, ..WorkloadSpec::default() };
    let (task, actor) = spec.build(&mut rng).unwrap();
    let learner = Learner::new(marginal_drafter(&actor, 1).unwrap(), policy, 4096, 6).unwrap();
    let serve = ServePolicy::Fixed(SdConfig::new(1, 1, 4).unwrap());
    let settings = TrainSettings { steps, lr: 0.02, update_mode: mode };
    train_loop(actor, learner, &task, &serve, &TimingModel::default(), &settings, 7).unwrap()
}

#[test]
fn never_interval_matches_frozen_drafter() {
    for mode in [UpdateMode::Sync, UpdateMode::Async] {
        let never = short_run(KdPolicy { interval: u64::MAX, ..KdPolicy::default() }, mode, 12);
        let frozen = short_run(KdPolicy { weight_mode: WeightMode::Frozen, ..KdPolicy::default() }, mode, 12);
        assert_eq!(never.steps, frozen.steps);
        assert!(never.learner.is_empty() && frozen.learner.is_empty());
        assert_eq!(never.drafter, frozen.drafter);
    }
}

#[test]
fn drafter_versions_advance_and_time_is_accounted() {
    for mode in [UpdateMode::Sync, UpdateMode::Async] {
        let report = short_run(KdPolicy::default(), mode, 15);
        let versions: Vec<u64> = report.steps.iter().map(|s| s.drafter_version).collect();
        assert!(versions.windows(2).all(|w| w[0] <= w[1]), "{versions:?}");
        assert!(*versions.last().unwrap() > 0);
        let waits: f64 = report.steps.iter().map(|s| s.learner_wait).sum();
        match mode {
            UpdateMode::Sync => assert!((waits - report.learner_time).abs() < 1e-9),
            UpdateMode::Async => assert_eq!(waits, 0.0),
        }
        let total: f64 = report.steps.iter().map(|s| s.sim_time).sum();
        assert!((total - report.total_time).abs() < 1e-6 * report.total_time);
    }
}

#[test]
fn async_runs_are_reproducible() {
    let a = short_run(KdPolicy { interval: 2, ..KdPolicy::default() }, UpdateMode::Async, 10);
    let b = short_run(KdPolicy { interval: 2, ..KdPolicy::default() }, UpdateMode::Async, 10);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.learner, b.learner);
    assert_eq!(a.drafter, b.drafter);
}
