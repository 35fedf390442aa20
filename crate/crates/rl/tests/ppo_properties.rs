use doublewell_core::env::ToyConfig;
use doublewell_core::{Episodic, InvertedOscillator, Transition};
use doublewell_rl::checkpoint::FORMAT_VERSION;
use doublewell_rl::gae::{compute_gae, normalize_advantages};
use doublewell_rl::network::operator_norm;
use doublewell_rl::policy::{log_prob, sample_action, unsquash, ACTION_SCALE};
use doublewell_rl::{
    evaluate, ppo_loss, ActorCritic, Checkpoint, NetworkShape, PpoConfig, RlError, RolloutBatch, Trainer,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn micro_shape() -> NetworkShape {
    NetworkShape {
        input: 2,
        shared: 2,
        actor: vec![1],
        critic: vec![],
    }
}

fn toy_envs(n: usize) -> Vec<InvertedOscillator> {
    (0..n).map(|_| InvertedOscillator::new(ToyConfig::default()).unwrap()).collect()
}

fn small_toy_shape() -> NetworkShape {
    NetworkShape {
        input: 2,
        shared: 16,
        actor: vec![16],
        critic: vec![16],
    }
}

/// Batch whose stored log-probabilities come from a perturbed policy, so
/// ratios spread over both sides of the clip window.
fn synthetic_batch(net: &ActorCritic, n: usize, rng: &mut ChaCha8Rng) -> RolloutBatch {
    let mut b = RolloutBatch {
        obs_dim: net.shape().input,
        ..Default::default()
    };
    for _ in 0..n {
        let obs: Vec<f64> = (0..b.obs_dim).map(|_| rng.sample(StandardNormal)).collect();
        let (mean, log_std, _) = net.forward(&obs).unwrap();
        let s = sample_action(mean, log_std, false, rng);
        let shift: f64 = rng.random_range(-0.6..0.6);
        b.obs.extend(obs);
        b.pre_squash.push(s.pre_squash);
        b.amplitude.push(s.amplitude);
        b.log_prob_old.push(s.log_prob + shift);
        b.reward.push(0.0);
        b.value_old.push(0.0);
        b.advantage.push(rng.sample(StandardNormal));
        b.return_target.push(rng.sample::<f64, _>(StandardNormal) * 2.0);
    }
    b
}

fn random_net(shape: NetworkShape, seed: u64) -> ActorCritic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.param_count();
    let params = (0..n).map(|_| 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut net = ActorCritic::from_params(shape, params).unwrap();
    net.set_log_std(-0.3);
    net
}

#[test]
fn loss_gradient_matches_central_differences() {
    let net = random_net(micro_shape(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = synthetic_batch(&net, 40, &mut rng);
    let cfg = PpoConfig {
        entropy_coef: 0.01,
        ..Default::default()
    };
    let idx: Vec<usize> = (0..batch.len()).collect();
    let report = ppo_loss(&net, &batch, &idx, &cfg).unwrap();
    assert!(report.clip_fraction > 0.0 && report.clip_fraction < 1.0);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..net.params().len() {
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let fd = (ppo_loss(&plus, &batch, &idx, &cfg).unwrap().total - ppo_loss(&minus, &batch, &idx, &cfg).unwrap().total)
            / (2.0 * h);
        let g = report.grad[k];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn first_minibatch_is_unclipped_and_follows_plain_surrogate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = ActorCritic::init(small_toy_shape(), 0.0, &mut rng).unwrap();
    let cfg = PpoConfig {
        n_envs: 2,
        horizon: 100,
        minibatch: 50,
        epochs: 2,
        lr: 3e-4,
        value_coef: 0.0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(net.clone(), toy_envs(2), cfg.clone(), 3).unwrap();
    let mut batch = trainer.collect_rollout().unwrap();
    let mut normalized = batch.clone();
    normalize_advantages(&mut normalized.advantage);

    // θ = θ_old: every ratio is 1 and the loss gradient is that of −mean(r Â)
    let idx: Vec<usize> = (0..50).collect();
    let report = ppo_loss(&net, &normalized, &idx, &cfg).unwrap();
    assert_eq!(report.clip_fraction, 0.0);
    let surrogate = |n: &ActorCritic| {
        let cache = n.forward_batch(&normalized.obs_matrix(&idx)).unwrap();
        -idx.iter()
            .enumerate()
            .map(|(k, &i)| {
                let r = (log_prob(normalized.pre_squash[i], cache.mean[k], n.log_std()) - normalized.log_prob_old[i]).exp();
                r * normalized.advantage[i]
            })
            .sum::<f64>()
            / idx.len() as f64
    };
    let h = 1e-6;
    for k in (0..net.params().len()).step_by(7) {
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let fd = (surrogate(&plus) - surrogate(&minus)) / (2.0 * h);
        let g = report.grad[k];
        assert!((g - fd).abs() <= 1e-6 * g.abs().max(fd.abs()).max(1.0), "param {k}: {g} vs {fd}");
    }

    let stats = trainer.update(&mut batch).unwrap();
    assert_eq!(stats.first_clip_fraction, 0.0);
    assert_eq!(stats.minibatches, 2 * 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gae_lambda_one_telescopes(
        rewards in proptest::collection::vec(-5.0f64..5.0, 1..40),
        seed in any::<u64>(),
        discount in 0.5f64..1.0,
    ) {
        let n = rewards.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        let (adv, ret) = compute_gae(&rewards, &values, &dones, 123.0, discount, 1.0).unwrap();
        for t in 0..n {
            let g: f64 = (t..n).map(|k| discount.powi((k - t) as i32) * rewards[k]).sum();
            prop_assert!((adv[t] - (g - values[t])).abs() <= 1e-9 * (1.0 + g.abs()));
            prop_assert!((ret[t] - adv[t] - values[t]).abs() <= 1e-12);
        }
    }

    #[test]
    fn advantages_normalize(adv in proptest::collection::vec(-100.0f64..100.0, 2..300)) {
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-9);
        let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - adv.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!((std - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn ratios_stay_positive(u in -30.0f64..30.0, mean in -30.0f64..30.0, log_std in -5.0f64..2.0, old in -500.0f64..50.0) {
        let r = (log_prob(u, mean, log_std) - old).exp();
        prop_assert!(r > 0.0 || (log_prob(u, mean, log_std) - old) < -700.0);
        prop_assert!(log_prob(u, mean, log_std).is_finite());
    }

    #[test]
    fn sampled_amplitudes_inside_bound(mean in -50.0f64..50.0, log_std in -5.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = sample_action(mean, log_std, false, &mut rng);
        prop_assert!(a.amplitude.abs() <= ACTION_SCALE);
        prop_assert!(a.log_prob.is_finite());
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), iteration in any::<u32>()) {
        let net = random_net(micro_shape(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trainer_ckpt = Checkpoint {
            shape: net.shape().clone(),
            params: net.params().to_vec(),
            adam: doublewell_rl::optim::Adam {
                m: net.params().iter().map(|_| rng.sample(StandardNormal)).collect(),
                v: net.params().iter().map(|_| rng.random::<f64>()).collect(),
                t: iteration as u64 * 3,
                ..doublewell_rl::optim::Adam::new(net.params().len(), 1e-4)
            },
            config: PpoConfig::default(),
            iteration: iteration as u64,
            env_steps: iteration as u64 * 17,
            lr_halved: seed % 2 == 0,
            rng: doublewell_rl::checkpoint::RngState::capture(&rng),
        };
        let back = Checkpoint::from_bytes(&trainer_ckpt.to_bytes()).unwrap();
        prop_assert_eq!(&back, &trainer_ckpt);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.params), bits(&trainer_ckpt.params));
    }
}

#[test]
fn squashed_density_integrates_to_one() {
    let (mean, log_std) = (0.4, -0.2);
    let n = 200_000;
    let h = 2.0 * ACTION_SCALE / n as f64;
    let mass: f64 = (0..n)
        .map(|k| {
            let a = -ACTION_SCALE + (k as f64 + 0.5) * h;
            log_prob(unsquash(a), mean, log_std).exp() * h
        })
        .sum();
    assert!((mass - 1.0).abs() < 1e-2, "{mass}");
}

#[test]
fn forward_is_lipschitz_in_the_observation() {
    let net = random_net(NetworkShape::standard(2), 8);
    let w = net.weight_matrices();
    let na = net.shape().actor.len();
    let actor_bound: f64 = w[..=na + 1].iter().map(operator_norm).product();
    let critic_bound: f64 = std::iter::once(&w[0]).chain(&w[na + 2..]).map(operator_norm).product();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let d: Vec<f64> = (0..2).map(|_| 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let dn = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let (m0, _, v0) = net.forward(&x).unwrap();
        let (m1, _, v1) = net.forward(&y).unwrap();
        assert!((m1 - m0).abs() <= actor_bound * dn * (1.0 + 1e-9));
        assert!((v1 - v0).abs() <= critic_bound * dn * (1.0 + 1e-9));
    }
    assert_eq!(net.forward(&[0.3, 0.1]).unwrap(), net.forward(&[0.3, 0.1]).unwrap());
}

#[test]
fn identical_seeds_give_identical_metric_streams() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = ActorCritic::init(small_toy_shape(), 0.0, &mut rng).unwrap();
        let cfg = PpoConfig {
            n_envs: 3,
            horizon: 120,
            minibatch: 60,
            epochs: 3,
            lr: 1e-3,
            ..Default::default()
        };
        let mut t = Trainer::new(net, toy_envs(3), cfg, 99).unwrap();
        let m = t.train(4, None, None).unwrap();
        (m, t.network().params().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(pa, pb);
}

#[test]
fn metrics_csv_and_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = ActorCritic::init(small_toy_shape(), 0.0, &mut rng).unwrap();
    let cfg = PpoConfig {
        n_envs: 2,
        horizon: 50,
        minibatch: 50,
        epochs: 1,
        ..Default::default()
    };
    let mut t = Trainer::new(net, toy_envs(2), cfg, 1).unwrap();
    let metrics_path = dir.path().join("metrics.csv");
    let ckpt_path = dir.path().join("policy.ckpt");
    let mut w = doublewell_rl::MetricsWriter::open(&metrics_path).unwrap();
    t.train(3, Some(&mut w), Some((&ckpt_path, 2))).unwrap();
    drop(w);
    let text = std::fs::read_to_string(&metrics_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], doublewell_rl::trainer::METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,100,"));
    let ck = Checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(ck.iteration, 2);

    // resuming continues the counters and the optimizer state
    let resumed = Trainer::resume(ck.clone(), toy_envs(2), 1).unwrap();
    assert_eq!(resumed.iteration(), 2);
    assert_eq!(resumed.checkpoint(), ck);
}

#[test]
fn checkpoint_failures_are_distinct() {
    let net = random_net(micro_shape(), 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let t = Trainer::new(
        net,
        vec![FixedEnv::default()],
        PpoConfig {
            n_envs: 1,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let ck = t.checkpoint();
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
        Err(RlError::CorruptCheckpoint(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(RlError::BadMagic)));
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(RlError::UnsupportedVersion { found, .. }) if found == FORMAT_VERSION + 1
    ));
    let mut bad = bytes.clone();
    // widen the shared layer in the shape table
    bad[16..20].copy_from_slice(&3u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(RlError::CheckpointShape(_))));
    assert!(matches!(Checkpoint::from_bytes(&[]), Err(RlError::BadMagic)));
    assert!(ck.check_observation_dim(2).is_ok());
    assert!(matches!(ck.check_observation_dim(3), Err(RlError::CheckpointShape(_))));
}

#[test]
fn evaluation_emits_one_row_per_episode() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = ActorCritic::init(small_toy_shape(), 0.0, &mut rng).unwrap();
    let mut env = InvertedOscillator::new(ToyConfig::default()).unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let rows = evaluate(&net, &mut env, &seeds, true, &mut rng).unwrap();
    assert_eq!(rows.len(), 10);
    let again = evaluate(&net, &mut env, &seeds, true, &mut rng).unwrap();
    assert_eq!(rows, again);

    let wide = ActorCritic::zeros(NetworkShape::standard(3)).unwrap();
    assert!(matches!(
        evaluate(&wide, &mut env, &seeds, true, &mut rng),
        Err(RlError::ShapeMismatch { .. })
    ));
}

#[test]
fn entropy_does_not_grow_while_learning_the_toy_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = NetworkShape {
        input: 2,
        shared: 64,
        actor: vec![64],
        critic: vec![64],
    };
    let net = ActorCritic::init(shape, 0.0, &mut rng).unwrap();
    let cfg = PpoConfig {
        lr: 3e-4,
        horizon: 500,
        ..Default::default()
    };
    let mut t = Trainer::new(net, toy_envs(8), cfg, 1).unwrap();
    let m = t.train(50, None, None).unwrap();
    let early: f64 = m[..10].iter().map(|r| r.entropy).sum::<f64>() / 10.0;
    let late: f64 = m[40..].iter().map(|r| r.entropy).sum::<f64>() / 10.0;
    assert!(late <= early + 0.02, "entropy {early} -> {late}");
}

/// Environment that emits a non-finite reward on every step.
#[derive(Default)]
struct FixedEnv {
    steps: usize,
    poisoned: bool,
}

impl Episodic for FixedEnv {
    fn observation_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, _seed: u64) -> doublewell_core::Result<Vec<f64>> {
        self.steps = 0;
        Ok(vec![0.1, -0.2])
    }

    fn step(&mut self, action: f64) -> doublewell_core::Result<Transition> {
        self.steps += 1;
        Ok(Transition {
            observation: vec![action / 5.0, 0.3],
            reward: if self.poisoned { f64::NAN } else { 1.0 },
            done: self.steps >= 10,
            fidelity: None,
        })
    }
}

#[test]
fn non_finite_loss_halves_lr_once_then_aborts() {
    let net = random_net(micro_shape(), 2);
    let cfg = PpoConfig {
        n_envs: 1,
        horizon: 20,
        minibatch: 10,
        epochs: 1,
        lr: 1e-3,
        ..Default::default()
    };
    let env = FixedEnv {
        steps: 0,
        poisoned: true,
    };
    let mut t = Trainer::new(net.clone(), vec![env], cfg, 0).unwrap();
    let m = t.step_iteration().unwrap();
    assert!(m.policy_loss.is_nan());
    assert_eq!(t.learning_rate(), 5e-4);
    assert_eq!(t.network(), &net);
    assert!(matches!(t.step_iteration(), Err(RlError::NonFiniteLoss { .. })));
}
