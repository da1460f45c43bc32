//! Training loop behavior on the synthetic task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specrl_core::costsim::TimingModel;
use specrl_core::learner::{KdPolicy, Learner, UpdateMode, WeightMode};
use specrl_core::rl::{marginal_drafter, train_loop, TrainReport, TrainSettings, WorkloadSpec};
use specrl_core::server::ServePolicy;
use specrl_core::specdec::SdConfig;

fn run(spec: &WorkloadSpec, serve: &ServePolicy, steps: usize, lr: f64, seed: u64) -> (TrainReport, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (task, actor) = spec.build(&mut rng).unwrap();
    let initial = actor.logits().to_vec();
    let policy = KdPolicy { weight_mode: WeightMode::Frozen, ..KdPolicy::default() };
    let learner = Learner::new(marginal_drafter(&actor, 1).unwrap(), policy, 4096, seed).unwrap();
    let settings = TrainSettings { steps, lr, update_mode: UpdateMode::Sync };
    let report = train_loop(actor, learner, &task, serve, &TimingModel::default(), &settings, seed + 1).unwrap();
    (report, initial)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_error(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64 / xs.len() as f64).sqrt()
}

#[test]
fn zero_learning_rate_keeps_the_actor_and_reward_flat() {
    let spec = WorkloadSpec::default();
    let (report, initial) = run(&spec, &ServePolicy::NonSpec, 60, 0.0, 3);
    assert_eq!(report.actor.logits(), &initial[..]);
    let rewards: Vec<f64> = report.steps.iter().map(|s| s.mean_reward).collect();
    let (early, late) = rewards.split_at(30);
    let se = (std_error(early).powi(2) + std_error(late).powi(2)).sqrt();
    assert!((mean(early) - mean(late)).abs() < 4.0 * se, "{} vs {} (se {se})", mean(early), mean(late));
}

#[test]
fn every_update_consumes_samples_of_the_current_actor() {
    let spec = WorkloadSpec { num_prompts: 4, group_size: 4, ..WorkloadSpec::default() };
    let serve = ServePolicy::Fixed(SdConfig::new(2, 2, 2).unwrap());
    let (report, _) = run(&spec, &serve, 10, 0.05, 1);
    for (i, s) in report.steps.iter().enumerate() {
        assert_eq!(s.actor_version, i as u64);
    }
    assert_eq!(report.actor.version(), 10);
}

#[test]
fn long_tailed_hazard_skews_the_active_batch() {
    let (report, _) = run(&WorkloadSpec::default(), &ServePolicy::NonSpec, 1, 0.0, 0);
    let cycles = report.first_step_cycles.len() as f64;
    let n = report.first_step_finish.len() as f64;
    let early = report.first_step_finish.iter().filter(|&&c| (c as f64) < cycles / 3.0).count() as f64 / n;
    let late = report.first_step_finish.iter().filter(|&&c| (c as f64) >= 2.0 * cycles / 3.0).count() as f64 / n;
    assert!(early >= 0.5, "early fraction {early}");
    assert!(late >= 0.05, "late fraction {late}");
}
