use hcmvp_core::config::{RunConfig, Variant};
use hcmvp_core::dqn_agent::greedy;
use hcmvp_core::harness::{build_simulator, Learner};
use hcmvp_core::road_network::TurnMask;
use hcmvp_core::selfcheck::{jitter, random_agent_state};
use hcmvp_core::state_codec::encode_agent_state;
use hcmvp_nn::checkpoint::to_bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;

fn trained_like(variant: Variant) -> (RunConfig, Learner) {
    let cfg = RunConfig {
        variant,
        ..RunConfig::default()
    };
    let mut learner = Learner::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for a in &mut learner.agents {
        jitter(&mut a.primary, &mut rng, 0.05);
        jitter(&mut a.target, &mut rng, 0.05);
    }
    if let Some(c) = &mut learner.coordinator {
        jitter(&mut c.params, &mut rng, 0.05);
    }
    (cfg, learner)
}

#[test]
fn reloaded_agents_act_identically() {
    for variant in Variant::ALL {
        let (cfg, learner) = trained_like(variant);
        let tmp = tempfile::tempdir().unwrap();
        learner.save(&cfg, tmp.path()).unwrap();
        let (cfg2, back) = Learner::load(tmp.path()).unwrap();
        assert_eq!(cfg2, cfg);

        let sim = build_simulator(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = 2 * cfg.grid.intersections_per_side;
        for k in 0..50 {
            // Half from the simulator, half synthetic.
            let (m, state) = if k % 2 == 0 {
                let st = sim.reset(k);
                let m = rng.gen_range(0..cfg.sim.pursuers);
                (m, encode_agent_state(&sim, &st, m).unwrap())
            } else {
                let m = rng.gen_range(0..cfg.sim.pursuers);
                let s = random_agent_state(&mut rng, rows, cfg.grid.cells_per_channel, cfg.sim.pursuers - 1, cfg.sim.evaders);
                (m, s)
            };
            let mask = TurnMask([rng.gen_bool(0.7), rng.gen_bool(0.7), true]);
            let qa = learner.qnet.q_values(&learner.agents[m].primary, &state).unwrap();
            let qb = back.qnet.q_values(&back.agents[m].primary, &state).unwrap();
            assert_eq!(qa.map(f64::to_bits), qb.map(f64::to_bits));
            assert_eq!(greedy(&qa, mask), greedy(&qb, mask));
        }
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let (cfg, learner) = trained_like(Variant::GqrlIese);
    let a = tempfile::tempdir().unwrap();
    learner.save(&cfg, a.path()).unwrap();
    let (_, back) = Learner::load(a.path()).unwrap();
    let b = tempfile::tempdir().unwrap();
    back.save(&cfg, b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2 * cfg.sim.pursuers + 2);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
    assert_eq!(
        to_bytes(&learner.coordinator.as_ref().unwrap().params).unwrap(),
        to_bytes(&back.coordinator.as_ref().unwrap().params).unwrap()
    );
}

#[test]
fn mismatched_architecture_is_rejected() {
    let (cfg, learner) = trained_like(Variant::IeseDqn);
    let tmp = tempfile::tempdir().unwrap();
    learner.save(&cfg, tmp.path()).unwrap();
    let mut other = cfg.clone();
    other.iese.output_dim += 8;
    assert!(Learner::load_with(&other, tmp.path()).is_err());
    fs::write(tmp.path().join("agent1.params"), b"not parameters").unwrap();
    let err = Learner::load(tmp.path()).err().expect("corrupt file must fail").to_string();
    assert!(err.contains("agent1.params"), "{err}");
}
