use hcmvp_core::dqn_agent::{
    self, batch_loss, greedy, learn_step, random_valid, select_action, td_targets, AgentParams, DqnConfig, Experience,
    ReplayBuffer,
};
use hcmvp_core::road_network::{Turn, TurnMask};
use hcmvp_core::selfcheck::{jitter, random_agent_state, toy_qnet};
use hcmvp_nn::checkpoint::to_bytes;
use hcmvp_nn::layers::zero_layer;
use hcmvp_nn::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn experience(rng: &mut ChaCha8Rng, terminal: bool) -> Experience {
    Experience {
        state: random_agent_state(rng, 4, 3, 2, 1),
        action: Turn::from_index(rng.gen_range(0..3)).unwrap(),
        reward: rng.gen_range(-2.0..2.0),
        next_state: random_agent_state(rng, 4, 3, 2, 1),
        next_mask: TurnMask::ALL,
        terminal,
    }
}

fn agent(seed: u64) -> AgentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = toy_qnet().init(&mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.2);
    AgentParams::new(store)
}

#[test]
fn terminal_sample_without_bootstrap_has_unit_loss() {
    let net = toy_qnet();
    let mut params = agent(1);
    zero_layer(&mut params.primary, "head", 1).unwrap();
    params.target = params.primary.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut e = experience(&mut rng, true);
    e.reward = 1.0;
    let cfg = DqnConfig {
        gamma: 0.0,
        ..DqnConfig::default()
    };
    let loss = learn_step(&net, &mut params, &[&e], &cfg).unwrap();
    assert_eq!(loss, 1.0);
}

#[test]
fn duplicated_batch_gives_identical_loss_and_step() {
    let net = toy_qnet();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<Experience> = (0..4).map(|i| experience(&mut rng, i == 0)).collect();
    let once: Vec<&Experience> = batch.iter().collect();
    let thrice: Vec<&Experience> = batch.iter().chain(&batch).chain(&batch).collect();
    let cfg = DqnConfig::default();
    let mut a = agent(4);
    let mut b = a.clone();
    let la = learn_step(&net, &mut a, &once, &cfg).unwrap();
    let lb = learn_step(&net, &mut b, &thrice, &cfg).unwrap();
    assert!((la - lb).abs() <= 1e-12 * la.max(1.0));
    for (name, t) in a.primary.iter() {
        let u = b.primary.get(name).unwrap();
        for (x, y) in t.data().iter().zip(u.data()) {
            assert!((x - y).abs() <= 1e-6, "{name}");
        }
    }
}

#[test]
fn terminal_loss_is_invariant_to_gamma() {
    let net = toy_qnet();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<Experience> = (0..5).map(|_| experience(&mut rng, true)).collect();
    let refs: Vec<&Experience> = batch.iter().collect();
    let params = agent(6);
    let loss_at = |gamma: f64| {
        let targets = td_targets(&net, &params.target, &refs, gamma).unwrap();
        let mut tape = Tape::new();
        let l = batch_loss(&net, &mut tape, &params.primary, &refs, &targets).unwrap();
        tape.scalar(l)
    };
    assert_eq!(loss_at(0.0), loss_at(0.5));
    assert_eq!(loss_at(0.0), loss_at(0.99));

    let live: Vec<Experience> = (0..5).map(|_| experience(&mut rng, false)).collect();
    let refs: Vec<&Experience> = live.iter().collect();
    let a = td_targets(&net, &params.target, &refs, 0.0).unwrap();
    let b = td_targets(&net, &params.target, &refs, 0.9).unwrap();
    assert_ne!(a, b);
}

#[test]
fn sync_makes_target_identical_to_primary() {
    let net = toy_qnet();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch: Vec<Experience> = (0..4).map(|_| experience(&mut rng, false)).collect();
    let refs: Vec<&Experience> = batch.iter().collect();
    let cfg = DqnConfig {
        target_sync: 3,
        lr: 0.01,
        ..DqnConfig::default()
    };
    let mut params = agent(8);
    for k in 1..=3 {
        learn_step(&net, &mut params, &refs, &cfg).unwrap();
        if k < 3 {
            assert_ne!(to_bytes(&params.primary).unwrap(), to_bytes(&params.target).unwrap());
        }
    }
    assert_eq!(to_bytes(&params.primary).unwrap(), to_bytes(&params.target).unwrap());
    for _ in 0..50 {
        let evaders = rng.gen_range(0..3);
        let s = random_agent_state(&mut rng, 4, 3, 2, evaders);
        let mask = TurnMask([rng.gen_bool(0.5), rng.gen_bool(0.5), true]);
        let a = greedy(&net.q_values(&params.primary, &s).unwrap(), mask);
        let b = greedy(&net.q_values(&params.target, &s).unwrap(), mask);
        assert_eq!(a, b);
    }
}

#[test]
fn loss_is_non_increasing_on_a_repeated_batch() {
    let net = toy_qnet();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<Experience> = (0..6).map(|i| experience(&mut rng, i % 2 == 0)).collect();
    let refs: Vec<&Experience> = batch.iter().collect();
    let cfg = DqnConfig {
        lr: 0.001,
        target_sync: 1_000_000,
        ..DqnConfig::default()
    };
    let mut params = agent(10);
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let loss = learn_step(&net, &mut params, &refs, &cfg).unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= last + 1e-12, "step {step}: {loss} > {last}");
        last = loss;
    }
}

#[test]
fn exploration_is_uniform_over_valid_actions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 3];
    let n = 30_000;
    for _ in 0..n {
        counts[select_action(&[3.0, 2.0, 1.0], TurnMask::ALL, 1.0, &mut rng).unwrap().index()] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
    }
    let mask = TurnMask([false, true, true]);
    for _ in 0..1000 {
        assert_ne!(select_action(&[9.0, 0.0, 0.0], mask, 1.0, &mut rng).unwrap(), Turn::Left);
    }
}

#[test]
fn replay_sampling_is_uniform_without_replacement() {
    let mut buf = ReplayBuffer::new(50);
    for i in 0..50usize {
        buf.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut counts = vec![0usize; 50];
    let draws = 100_000 / 10;
    for _ in 0..draws {
        let batch = buf.sample(10, &mut rng).unwrap();
        let mut seen = batch.iter().map(|&&i| i).collect::<Vec<_>>();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        for &&i in &batch {
            counts[i] += 1;
        }
    }
    let expected = (draws * 10) as f64 / 50.0;
    for c in counts {
        assert!((c as f64 - expected).abs() / expected < 0.1, "{c} vs {expected}");
    }
    let total: usize = 100_000;
    let mut per = [0usize; 50];
    for _ in 0..total {
        per[*buf.sample(1, &mut rng).unwrap()[0]] += 1;
    }
    let e = total as f64 / 50.0;
    let chi2: f64 = per.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 49 degrees of freedom; 99.9th percentile is about 85.
    assert!(chi2 < 85.0, "chi2 {chi2}");
    let all = buf.sample(50, &mut rng).unwrap();
    let mut v: Vec<usize> = all.into_iter().copied().collect();
    v.sort();
    assert_eq!(v, (0..50).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn greedy_respects_mask_and_ties(q in prop::array::uniform3(-3i32..3), m in prop::array::uniform3(any::<bool>())) {
        let q = q.map(f64::from);
        let mask = TurnMask(m);
        match greedy(&q, mask) {
            None => prop_assert!(mask.is_empty()),
            Some(t) => {
                prop_assert!(mask.allows(t));
                for i in 0..3 {
                    if m[i] {
                        prop_assert!(q[i] <= q[t.index()]);
                        if q[i] == q[t.index()] {
                            prop_assert!(i >= t.index());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn random_valid_stays_in_mask(m in prop::array::uniform3(any::<bool>()), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = TurnMask(m);
        match random_valid(mask, &mut rng) {
            None => prop_assert!(mask.is_empty()),
            Some(t) => prop_assert!(mask.allows(t)),
        }
    }

    #[test]
    fn replay_never_exceeds_capacity(cap in 1usize..20, n in 0usize..60) {
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..n {
            buf.push(i);
        }
        prop_assert_eq!(buf.len(), n.min(cap));
        let kept: Vec<usize> = buf.iter().copied().collect();
        let expect: Vec<usize> = (n.saturating_sub(cap)..n).collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn epsilon_schedule_is_monotone_and_bounded(total in 1usize..500, frac in 0.0f64..1.0) {
        let cfg = DqnConfig { epsilon_decay: true, decay_fraction: frac, ..DqnConfig::default() };
        let mut last = f64::INFINITY;
        for e in 0..total {
            let eps = cfg.epsilon_at(e, total);
            prop_assert!(eps <= last);
            prop_assert!((cfg.epsilon..=cfg.epsilon_start).contains(&eps));
            last = eps;
        }
    }
}

#[test]
fn q_values_are_deterministic() {
    let net = toy_qnet();
    let params = agent(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = random_agent_state(&mut rng, 4, 3, 2, 2);
    let a = net.q_values(&params.primary, &s).unwrap();
    let b = net.q_values(&params.primary, &s).unwrap();
    assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    let _ = dqn_agent::max_valid(&a, TurnMask::ALL).unwrap();
}
