mod common;

use common::{dims, peng_direct, short_episodes};
use crossing_core::baselines::{gae_advantages, masked_probs};
use crossing_core::env::{
    rollout, EnvConfig, Episode, IntersectionEnv, RandomPolicy, Record, N_ACTIONS,
};
use crossing_core::numcore::{checkpoint, InitScheme, Matrix, ParamStore};
use crossing_core::qmix::{
    nets, peng_targets, EpsilonSchedule, Learner, MixerKind, NetShape, QmixConfig,
};
use crossing_core::sim::ScenarioConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random hypernetwork parameters with non-zero biases.
fn mixer_params(n_agents: usize, obs_dim: usize, embed: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let d = crossing_core::qmix::Dims {
        n_agents,
        obs_dim,
        n_actions: 3,
        shape: NetShape { hidden: 4, embed },
    };
    let mut p = nets::init_params(&d, MixerKind::Qmix, InitScheme::XavierOrthogonal, rng).unwrap();
    for (_, m) in p.iter_mut() {
        if m.rows() == 1 {
            m.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
    p
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn mixing_is_monotone_in_every_agent(seed in any::<u64>(), agent in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = mixer_params(4, 10, 8, &mut rng);
        let state = uniform(1, 40, 1.0, &mut rng);
        let q = uniform(1, 4, 5.0, &mut rng);
        let mut bumped = q.clone();
        bumped.set(0, agent, q.get(0, agent) + 0.5);
        let before = nets::mix_plain(MixerKind::Qmix, &p, &q, &state).unwrap().get(0, 0);
        let after = nets::mix_plain(MixerKind::Qmix, &p, &bumped, &state).unwrap().get(0, 0);
        prop_assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn joint_greedy_equals_per_agent_greedy(seed in any::<u64>(), n in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = mixer_params(n, 2, 4, &mut rng);
        let state = uniform(1, 2 * n, 1.0, &mut rng);
        let table = uniform(n, 3, 3.0, &mut rng);
        let joints: Vec<Vec<usize>> = (0..3usize.pow(n as u32))
            .map(|mut k| (0..n).map(|_| { let a = k % 3; k /= 3; a }).collect())
            .collect();
        let q_of = |joint: &[usize]| {
            let row: Vec<f64> = joint.iter().enumerate().map(|(i, &a)| table.get(i, a)).collect();
            nets::mix_plain(MixerKind::Qmix, &p, &Matrix::row_vector(&row), &state).unwrap().get(0, 0)
        };
        let best = joints.iter().map(|j| q_of(j)).fold(f64::NEG_INFINITY, f64::max);
        let greedy: Vec<usize> = (0..n)
            .map(|i| (0..3).max_by(|&a, &b| table.get(i, a).total_cmp(&table.get(i, b))).unwrap())
            .collect();
        prop_assert!(q_of(&greedy) >= best - 1e-12);
    }

    #[test]
    fn q_lambda_recursion_matches_direct_sum(
        rewards in prop::collection::vec(-5.0f64..10.0, 1..=10),
        seed in any::<u64>(),
        gamma in 0.5f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = rewards.iter().map(|_| rng.random_range(-20.0..20.0)).collect();
        let rec = peng_targets(&rewards, &values, true, gamma, lambda).unwrap();
        let direct = peng_direct(&rewards, &values, gamma, lambda);
        for (a, b) in rec.iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gae_matches_discounted_td_errors(
        rewards in prop::collection::vec(-5.0f64..10.0, 1..=12),
        seed in any::<u64>(),
        gamma in 0.5f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..=rewards.len()).map(|_| rng.random_range(-20.0..20.0)).collect();
        let adv = gae_advantages(&rewards, &values, gamma, lambda).unwrap();
        for t in 0..rewards.len() {
            let direct: f64 = (t..rewards.len())
                .map(|k| (gamma * lambda).powi((k - t) as i32) * (rewards[k] + gamma * values[k + 1] - values[k]))
                .sum();
            prop_assert!((adv[t] - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_distribution_is_a_distribution(
        logits in prop::array::uniform7(-30.0f64..30.0),
        mask in prop::array::uniform7(any::<bool>()),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let p = masked_probs(&logits, &mask).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..N_ACTIONS {
            prop_assert!(p[i] >= 0.0);
            if !mask[i] {
                prop_assert_eq!(p[i], 0.0);
            }
            for j in 0..N_ACTIONS {
                if mask[i] && mask[j] && logits[i] > logits[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn epsilon_decays_monotonically(a in 0u64..300_000, b in 0u64..300_000) {
        let s = EpsilonSchedule::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(s.value(lo) >= s.value(hi));
        prop_assert!((0.05..=1.0).contains(&s.value(a)));
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), layers in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for i in 0..layers {
            let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
            p.insert(format!("layer{i}.w"), uniform(r, c, 1e3, &mut rng));
        }
        let bytes = checkpoint::to_bytes(&p);
        let back = checkpoint::read_from(&bytes[..]).unwrap();
        // arrays are stored in single precision
        for (name, m) in p.iter() {
            let got = back.get(name).unwrap();
            prop_assert_eq!(got.shape(), m.shape());
            for (a, b) in got.data().iter().zip(m.data()) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
        prop_assert_eq!(checkpoint::to_bytes(&back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(8) })]

    #[test]
    fn rewards_stay_in_range(seed in any::<u64>(), two_road in any::<bool>()) {
        let sc = if two_road { ScenarioConfig::two_road() } else { ScenarioConfig::default() };
        let mut env = IntersectionEnv::new(sc, EnvConfig::default()).unwrap();
        let mut policy = RandomPolicy::new(seed);
        let ep = rollout(&mut env, &mut policy, seed, 0, Record { episode: true, trajectory: false })
            .unwrap()
            .episode
            .unwrap();
        for r in &ep.rewards {
            prop_assert!((-5.0..=10.0).contains(r), "{r}");
        }
    }
}

#[test]
fn q_lambda_limits_are_exact() {
    let rewards = [1.0, -2.0, 0.5, 3.0];
    let values = [10.0, -4.0, 7.0, 99.0];
    let g = 0.9;
    let one_step = peng_targets(&rewards, &values, true, g, 0.0).unwrap();
    assert_eq!(
        one_step,
        vec![1.0 + g * 10.0, -2.0 + g * -4.0, 0.5 + g * 7.0, 3.0]
    );
    let full = peng_targets(&rewards, &values, true, g, 1.0).unwrap();
    let mut ret = 0.0;
    for t in (0..4).rev() {
        ret = rewards[t] + g * ret;
        assert_eq!(full[t], ret);
    }
}

#[test]
fn target_network_refreshes_on_schedule() {
    let config = QmixConfig {
        target_update: 3,
        batch_size: 2,
        net: NetShape {
            hidden: 8,
            embed: 4,
        },
        ..QmixConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut l = Learner::init(dims(4, config.net), config, &mut rng).unwrap();
    let eps = short_episodes(5, 2, 4);
    let refs: Vec<&Episode> = eps.iter().collect();
    let initial = l.target.clone();
    for step in 1..=5 {
        l.train_step(&refs).unwrap();
        assert_ne!(l.params, initial);
        if step < 3 {
            assert_eq!(l.target, initial, "target moved after {step} steps");
        } else if step == 3 {
            assert_eq!(l.target, l.params);
        } else {
            assert_ne!(l.target, l.params);
        }
    }
}
