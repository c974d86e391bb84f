//! Acceptance run: one PASS/FAIL/WARN line per criterion.
//!
//! `HCMVP_ACCEPTANCE=1,2,6` restricts the run to the listed criteria.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use hcmvp_core::config::{RunConfig, Variant};
use hcmvp_core::dqn_agent::greedy;
use hcmvp_core::harness::{build_simulator, evaluate, train, Learner, Policy};
use hcmvp_core::road_network::Turn;
use hcmvp_core::selfcheck::{self, CheckResult, Sizes};
use hcmvp_core::state_codec::encode_agent_state;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean total timestep of the uniform random policy on the 20 evaluation
/// seeds of `fixtures/smoke.toml`.
const RANDOM_BASELINE: f64 = 49.15;
const SPEEDUP: f64 = 0.7;

#[derive(PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Warn,
}

struct Line {
    id: usize,
    name: &'static str,
    verdict: Verdict,
    seconds: f64,
    detail: String,
}

impl Line {
    fn print(&self) {
        let v = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Warn => "WARN",
        };
        println!("{v} criterion {}: {} ({:.1}s) {}", self.id, self.name, self.seconds, self.detail);
    }
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn smoke_config() -> RunConfig {
    RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/smoke.toml")).expect("smoke fixture")
}

fn from_checks(id: usize, name: &'static str, checks: &[&CheckResult], budget: f64) -> Line {
    let seconds: f64 = checks.iter().map(|c| c.seconds).sum();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let ok = failed.is_empty() && seconds < budget;
    let detail = if failed.is_empty() {
        format!("{} checks within {budget:.0}s budget", checks.len())
    } else {
        failed.join("; ")
    };
    Line {
        id,
        name,
        verdict: verdict(ok),
        seconds,
        detail,
    }
}

struct Trained {
    cfg: RunConfig,
    learner: Learner,
    mean_timestep: f64,
}

fn train_and_eval(cfg: &RunConfig) -> Trained {
    let out = train(cfg, None, None).expect("training runs");
    let learner = out.trainer.learner;
    let eval = evaluate(cfg, &Policy::Learned(&learner), cfg.train.eval_episodes, cfg.train.eval_seed).expect("eval");
    Trained {
        cfg: cfg.clone(),
        learner,
        mean_timestep: eval.aggregate.total_timestep.mean,
    }
}

fn learning_smoke(cached: &mut Option<Trained>) -> Line {
    let start = Instant::now();
    let cfg = smoke_config();
    let n = cfg.train.eval_episodes;
    let random = evaluate(&cfg, &Policy::Random, n, cfg.train.eval_seed).expect("random eval");
    let baseline = random.aggregate.total_timestep.mean;
    if (baseline - RANDOM_BASELINE).abs() > 1e-9 {
        return Line {
            id: 4,
            name: "learning smoke test",
            verdict: Verdict::Fail,
            seconds: start.elapsed().as_secs_f64(),
            detail: format!("random baseline {baseline} no longer matches the recorded {RANDOM_BASELINE}"),
        };
    }
    let trained = train_and_eval(&cfg);
    let eval = evaluate(&cfg, &Policy::Learned(&trained.learner), n, cfg.train.eval_seed).expect("eval");
    let t = eval.aggregate.total_timestep.mean;
    let avg = eval.aggregate.average_reward.mean;
    let seconds = start.elapsed().as_secs_f64();
    let ok = t <= SPEEDUP * baseline && avg > 0.0 && seconds <= 900.0;
    *cached = Some(trained);
    Line {
        id: 4,
        name: "learning smoke test",
        verdict: verdict(ok),
        seconds,
        detail: format!(
            "mean timestep {t:.2} vs limit {:.2} (random {baseline:.2}), mean average reward {avg:.3}",
            SPEEDUP * baseline
        ),
    }
}

fn ablation(cached: &Option<Trained>) -> Line {
    let start = Instant::now();
    let base = smoke_config();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for k in 0..3u64 {
        let mut cfg = base.clone();
        cfg.train.seed = base.train.seed + k;
        let full = match cached {
            Some(t) if t.cfg == cfg => t.mean_timestep,
            _ => train_and_eval(&cfg).mean_timestep,
        };
        cfg.variant = Variant::Dqn;
        let plain = train_and_eval(&cfg).mean_timestep;
        if full <= plain {
            wins += 1;
        }
        pairs.push(format!("seed {}: {full:.2} vs {plain:.2}", cfg.train.seed));
    }
    let seconds = start.elapsed().as_secs_f64();
    let ok = wins >= 2 && seconds <= 45.0 * 60.0;
    Line {
        id: 5,
        name: "ablation direction (non-blocking)",
        verdict: if ok { Verdict::Pass } else { Verdict::Warn },
        seconds,
        detail: format!("gqrl_iese <= dqn in {wins}/3 seeds [{}]", pairs.join(", ")),
    }
}

fn persistence(cached: &Option<Trained>) -> Line {
    let start = Instant::now();
    let fallback;
    let (cfg, learner) = match cached {
        Some(t) => (&t.cfg, &t.learner),
        None => {
            let cfg = smoke_config();
            let mut learner = Learner::init(&cfg).expect("init");
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            for a in &mut learner.agents {
                selfcheck::jitter(&mut a.primary, &mut rng, 0.05);
            }
            fallback = (cfg, learner);
            (&fallback.0, &fallback.1)
        }
    };
    let dir = tempfile::tempdir().expect("tempdir");
    learner.save(cfg, dir.path()).expect("save");
    let (_, back) = Learner::load(dir.path()).expect("load");

    // Fifty states along seeded random trajectories, pursuers in turn.
    let sim = build_simulator(cfg).expect("sim");
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut mismatches = 0;
    let mut seen = 0;
    let mut episode = 0;
    while seen < 50 {
        let mut state = sim.reset(500 + episode);
        episode += 1;
        while !state.done && seen < 50 {
            let m = seen % cfg.sim.pursuers;
            let s = encode_agent_state(&sim, &state, m).expect("encode");
            let mask = sim.decision_mask(&state, m).expect("mask");
            let qa = learner.qnet.q_values(&learner.agents[m].primary, &s).expect("q");
            let qb = back.qnet.q_values(&back.agents[m].primary, &s).expect("q");
            if qa.map(f64::to_bits) != qb.map(f64::to_bits) || greedy(&qa, mask) != greedy(&qb, mask) {
                mismatches += 1;
            }
            seen += 1;
            let actions: Vec<Turn> = (0..state.pursuers)
                .map(|k| {
                    let mask = sim.decision_mask(&state, k).expect("mask");
                    hcmvp_core::dqn_agent::random_valid(mask, &mut rng).expect("non-empty")
                })
                .collect();
            sim.step(&mut state, &actions).expect("step");
        }
    }
    let a = evaluate(cfg, &Policy::Learned(learner), 5, cfg.train.eval_seed).expect("eval");
    let b = evaluate(cfg, &Policy::Learned(&back), 5, cfg.train.eval_seed).expect("eval");
    let same_eval = a.episodes == b.episodes;
    Line {
        id: 6,
        name: "checkpoint persistence",
        verdict: verdict(mismatches == 0 && same_eval),
        seconds: start.elapsed().as_secs_f64(),
        detail: format!("{seen} states, {mismatches} mismatches, evaluation identical: {same_eval}"),
    }
}

fn main() -> ExitCode {
    let selected: Vec<usize> = match std::env::var("HCMVP_ACCEPTANCE") {
        Ok(s) => s.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        Err(_) => (1..=6).collect(),
    };
    let wants = |k: usize| selected.contains(&k);
    let mut lines = Vec::new();

    if wants(1) || wants(2) || wants(3) {
        let report = selfcheck::run(Sizes::FULL);
        let pick = |f: &dyn Fn(&str) -> bool| report.checks.iter().filter(|c| f(&c.name)).collect::<Vec<_>>();
        if wants(1) {
            let checks = pick(&|n| !n.starts_with("coordinator") && !n.starts_with("simulator"));
            lines.push(from_checks(1, "invariant suite", &checks, 60.0));
        }
        if wants(2) {
            lines.push(from_checks(2, "coordinator properties", &pick(&|n| n.starts_with("coordinator")), 30.0));
        }
        if wants(3) {
            lines.push(from_checks(3, "simulator determinism and safety", &pick(&|n| n.starts_with("simulator")), 60.0));
        }
        for l in &lines {
            l.print();
        }
    }
    let mut cached = None;
    if wants(4) {
        let l = learning_smoke(&mut cached);
        l.print();
        lines.push(l);
    }
    if wants(5) {
        let l = ablation(&cached);
        l.print();
        lines.push(l);
    }
    if wants(6) {
        let l = persistence(&cached);
        l.print();
        lines.push(l);
    }
    if lines.iter().any(|l| l.verdict == Verdict::Fail) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
