//! Cross-module properties checked on random inputs.

use crate::diffusion::{make_schedule, ScheduleKind};
use crate::envs::{Dataset, EnvRng, EnvSpec, Quality, RewardMode};
use crate::policy::{Action, SoftmaxHead};
use crate::rl::{clipped_surrogate, gae, pretrain, Actor, ActorConfig, PretrainConfig};
use crate::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `A_t` as the explicit double sum over TD residuals, cut at terminals.
fn gae_double_sum(r: &[f64], v: &[f64], d: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if d[t] { 0.0 } else { gamma * v[t + 1] } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for l in 0..n - t {
                total += w * delta[t + l];
                if d[t + l] {
                    break;
                }
                w *= gamma * lambda;
            }
            total
        })
        .collect()
}

fn episode() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..=20).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n + 1),
            prop::collection::vec(prop::bool::weighted(0.2), n),
        )
    })
}

fn actor(steps: usize, seed: u64) -> Actor {
    let cfg = ActorConfig {
        hidden_width: 16,
        num_layers: 2,
        steps,
        x0_clip: Some(1.0),
        ..Default::default()
    };
    cfg.build(true, &EnvSpec::point_mass(RewardMode::Dense), 1, seed)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gae_matches_double_sum((r, v, d) in episode(), gamma in 0.0..=1.0f64, lambda in 0.0..=1.0f64) {
        let (adv, ret) = gae(&r, &v, &d, gamma, lambda).unwrap();
        let want = gae_double_sum(&r, &v, &d, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - want[t]).abs() <= 1e-10 * (1.0 + want[t].abs()), "t {t}: {} vs {}", adv[t], want[t]);
            prop_assert_eq!(ret[t], adv[t] + v[t]);
        }
    }

    #[test]
    fn eta_is_identity_at_one_and_monotone_above_zero(
        k in 1usize..=20,
        lo in 1e-4..0.05f64,
        span in 0.0..0.45f64,
        eta in 0.01..3.0f64,
    ) {
        let s = make_schedule(k, ScheduleKind::Linear { beta_min: lo, beta_max: lo + span }).unwrap();
        let same = s.apply_eta(1.0).unwrap();
        prop_assert_eq!(same.betas(), s.betas());
        let t = s.apply_eta(eta).unwrap();
        for i in 0..k {
            for j in 0..k {
                if s.betas()[i] < s.betas()[j] {
                    prop_assert!(t.betas()[i] < t.betas()[j]);
                }
            }
        }
    }

    #[test]
    fn temperature_never_moves_the_argmax(
        agents in 1usize..4,
        actions in 2usize..6,
        inv_t in 1e-2..1e2f64,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..agents * actions).map(|_| rng.random_range(-3.0..3.0)).collect();
        let head = SoftmaxHead::new(agents, actions, inv_t).unwrap();
        for (a, row) in head.probabilities(&logits).iter().enumerate() {
            let seg = &logits[a * actions..(a + 1) * actions];
            let by_logit = (0..actions).max_by(|&i, &j| seg[i].total_cmp(&seg[j])).unwrap();
            let by_prob = (0..actions).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            prop_assert_eq!(by_logit, by_prob);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clipped_term_is_bounded(ratio in 0.05..5.0f64, adv in -5.0..5.0f64, eps in 0.05..0.5f64) {
        let mut tape = Tape::new();
        let lp = tape.leaf(Tensor::matrix(1, 1, vec![ratio.ln()]));
        let (loss, _) = clipped_surrogate(&mut tape, lp, &[0.0], &[adv], eps).unwrap();
        let term = -tape.value(loss).item();
        let r = ratio.ln().exp();
        prop_assert!(term <= r * adv + 1e-12);
        prop_assert!(term <= (1.0 + eps) * adv.abs() + 1e-12);
        let adverse = (r > 1.0 + eps && adv > 0.0) || (r < 1.0 - eps && adv < 0.0);
        if adverse {
            prop_assert_eq!(tape.backward(loss).unwrap().get(lp).item(), 0.0);
        }
    }

    #[test]
    fn point_mass_rewards_and_replay(seed in any::<u64>(), sparse in any::<bool>()) {
        let mode = if sparse { RewardMode::Sparse } else { RewardMode::Dense };
        let spec = EnvSpec::point_mass(mode).with_horizon(40);
        let mut env = spec.build().unwrap();
        let mut rng = EnvRng::seed_from_u64(seed);
        env.reset(&mut rng);
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        loop {
            let a = Action::Continuous(vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]);
            let step = env.step(&a).unwrap();
            if sparse {
                prop_assert!(step.reward == 0.0 || step.reward == 1.0);
            } else {
                prop_assert!(step.reward <= 0.0);
            }
            actions.push(a);
            rewards.push(step.reward);
            if step.done {
                break;
            }
        }
        let mut again = spec.build().unwrap();
        again.reset(&mut EnvRng::seed_from_u64(seed));
        for (a, r) in actions.iter().zip(&rewards) {
            prop_assert_eq!(again.step(a).unwrap().reward, *r);
        }
    }

    #[test]
    fn grid_episode_return_is_success(seed in any::<u64>()) {
        let mut env = EnvSpec::grid_coord().build().unwrap();
        let mut rng = EnvRng::seed_from_u64(seed);
        env.reset(&mut rng);
        let mut total = 0.0;
        loop {
            let step = env.step(&Action::Discrete((0..3).map(|_| rng.random_range(0..3)).collect())).unwrap();
            total += step.reward;
            if step.done {
                prop_assert!(total == 0.0 || total == 1.0);
                prop_assert_eq!(total == 1.0, step.success);
                break;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chain_is_a_pure_function_of_state_and_noise(steps in 1usize..=8, seed in any::<u64>(), rows in 1usize..6) {
        let a = actor(steps, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let states: Vec<Vec<f64>> = (0..rows).map(|_| (0..a.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let noises: Vec<_> = (0..rows).map(|_| a.sample_noise(&mut rng)).collect();
        let refs: Vec<_> = noises.iter().collect();
        let batch = Tensor::from_rows(&states).unwrap();
        let first = a.forward_values(&batch, &refs).unwrap();
        let second = a.forward_values(&batch, &refs).unwrap();
        prop_assert_eq!(first.data(), second.data());
        for i in 0..rows {
            let single = a.forward_values(&Tensor::from_rows(&states[i..=i]).unwrap(), &refs[i..=i]).unwrap();
            prop_assert_eq!(single.data(), &first.data()[i * 2..(i + 1) * 2]);
        }
    }
}

/// Behavior cloning on a two-mode action set keeps both modes: a histogram of
/// 1000 chain samples at the shared state puts at least a quarter on each.
#[test]
fn cloning_recovers_both_modes() {
    let spec = EnvSpec::lqr();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 1000;
    let obs = vec![0.0, 0.0];
    let actions: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![if i % 2 == 0 { 0.6 } else { -0.6 } + rng.random_range(-0.05..0.05)])
        .collect();
    let data = Dataset {
        env: spec.clone(),
        quality: Quality::Mixture,
        chunk: 1,
        obs_dim: 2,
        action_dim: 1,
        observations: vec![obs.clone(); n],
        actions,
        episode_returns: Vec::new(),
        episode_successes: Vec::new(),
    };
    let cfg = ActorConfig {
        hidden_width: 64,
        num_layers: 3,
        steps: 10,
        x0_clip: Some(1.0),
        ..Default::default()
    };
    let mut a = cfg.build(true, &spec, 1, 3).unwrap();
    let pc = PretrainConfig {
        max_epochs: 150,
        batch_size: 128,
        lr: 1e-3,
        patience: 150,
        ..Default::default()
    };
    pretrain(&mut a, &data, &pc, 4).unwrap();

    let noises: Vec<_> = (0..n).map(|_| a.sample_noise(&mut rng)).collect();
    let refs: Vec<_> = noises.iter().collect();
    let out = a
        .forward_values(&Tensor::from_rows(&vec![obs; n]).unwrap(), &refs)
        .unwrap();
    let near = |m: f64| out.data().iter().filter(|x| (*x - m).abs() < 0.25).count();
    let (hi, lo) = (near(0.6), near(-0.6));
    assert!(hi >= n / 4 && lo >= n / 4, "+0.6: {hi}, -0.6: {lo}");
}
