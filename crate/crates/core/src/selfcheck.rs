//! Built-in verification suite: gradient checks and property sweeps over
//! the simulator, codec, rewards and coordinator.

use std::time::Instant;

use hcmvp_nn::gradcheck::{check_gradients, check_param_gradients, GradCheckReport};
use hcmvp_nn::{ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::coordinator::{optimize_joint, CoordinatorNet, QMatrix};
use crate::dqn_agent::{random_valid, QNetwork};
use crate::error::Result;
use crate::iese::{Divisors, Encoder, IeseSpec};
use crate::rewards::{global_reward, individual_reward, RewardConfig};
use crate::road_network::{Direction, GridSpec, LaneId, RoadId, RoadNetwork, Turn, TurnMask};
use crate::state_codec::{encode_agent_state, encode_env_info, AgentState, CountMatrix, EnvInfo};
use crate::traffic_sim::{EpisodeState, SimConfig, Simulator};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Scalar readout depending on every entry of `y`.
fn readout(tape: &mut Tape, y: hcmvp_nn::Var, seed: u64) -> hcmvp_nn::Result<hcmvp_nn::Var> {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let flat = tape.reshape(y, vec![n])?;
    let t = tape.leaf_f64(vec![n], target)?;
    tape.mse(flat, t)
}

fn summarize(r: &GradCheckReport) -> (bool, String) {
    (
        r.max_rel_error < GRAD_TOL && r.checked > 0,
        format!(
            "max rel err {:.2e} over {} probes ({} kink probes skipped)",
            r.max_rel_error, r.checked, r.skipped_kinks
        ),
    )
}

pub fn grad_dense(trials: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut total = GradCheckReport::default();
    for trial in 0..trials as u64 {
        let inputs = vec![
            random_input(&mut rng, &[2, 4]),
            random_input(&mut rng, &[5, 4]),
            random_input(&mut rng, &[5]),
            random_input(&mut rng, &[3, 5]),
            random_input(&mut rng, &[3]),
        ];
        let r = check_gradients(&inputs, FD_STEP, None, &mut rng, |t, v| {
            let h = t.dense(v[0], v[1], v[2])?;
            let h = t.relu(h)?;
            let y = t.dense(h, v[3], v[4])?;
            readout(t, y, trial)
        })?;
        total.merge(&r);
    }
    Ok(total)
}

pub fn grad_conv(trials: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut total = GradCheckReport::default();
    for trial in 0..trials as u64 {
        let inputs = vec![
            random_input(&mut rng, &[2, 4, 3]),
            random_input(&mut rng, &[3, 2, 3, 3]),
            random_input(&mut rng, &[3]),
        ];
        let r = check_gradients(&inputs, FD_STEP, None, &mut rng, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            let y = t.relu(y)?;
            let pooled = t.mean_pool(y)?;
            let tokens = t.tokens(y)?;
            let tokens = t.reshape(tokens, vec![36])?;
            let both = t.concat(&[pooled, tokens])?;
            readout(t, both, trial)
        })?;
        total.merge(&r);
    }
    Ok(total)
}

pub fn grad_attention(trials: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut total = GradCheckReport::default();
    for trial in 0..trials as u64 {
        let t_len = 1 + (trial as usize % 6);
        let inputs = vec![
            random_input(&mut rng, &[t_len, 4]),
            random_input(&mut rng, &[t_len, 3]),
            random_input(&mut rng, &[4]),
        ];
        let r = check_gradients(&inputs, FD_STEP, None, &mut rng, |t, v| {
            let y = t.attention(v[0], v[1], v[2])?;
            readout(t, y, trial)
        })?;
        total.merge(&r);
    }
    Ok(total)
}

/// Toy pipeline: 4x3 matrices, small channel counts.
pub fn toy_qnet() -> QNetwork {
    QNetwork {
        encoder: Encoder::Iese(IeseSpec {
            conv_channels: vec![3, 3],
            kernel: 3,
            attention_dim: 4,
            output_dim: 6,
        }),
        head_hidden: 5,
        divisors: Divisors::for_counts(3, 2),
        rows: 4,
        cols: 3,
    }
}

/// Random counts with exactly one ego cell.
pub fn random_agent_state(rng: &mut ChaCha8Rng, rows: usize, cols: usize, others: usize, evaders: usize) -> AgentState {
    let mut sf = CountMatrix::zeros(rows, cols);
    sf.increment(rng.gen_range(0..rows), rng.gen_range(0..cols));
    let mut sp_other = CountMatrix::zeros(rows, cols);
    for _ in 0..others {
        sp_other.increment(rng.gen_range(0..rows), rng.gen_range(0..cols));
    }
    let mut se = CountMatrix::zeros(rows, cols);
    for _ in 0..evaders {
        se.increment(rng.gen_range(0..rows), rng.gen_range(0..cols));
    }
    AgentState { sf, sp_other, se }
}

/// Moves every parameter off its initial value so no ReLU input sits at zero.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f32) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed").data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// Finite differences through encoder and Q-head with respect to every
/// parameter.
pub fn grad_pipeline(trials: usize) -> Result<GradCheckReport> {
    let net = toy_qnet();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut total = GradCheckReport::default();
    for trial in 0..trials {
        let mut store = net.init(&mut rng)?;
        jitter(&mut store, &mut rng, 0.2);
        let state = random_agent_state(&mut rng, 4, 3, 2, 1 + trial % 2);
        let action = trial % 3;
        let target = rng.gen_range(-1.0..1.0);
        let r = check_param_gradients(&store, FD_STEP, None, &mut rng, |t, s| {
            let (q, _) = net.forward(t, s, &state).map_err(|e| match e {
                crate::error::Error::Nn(n) => n,
                other => hcmvp_nn::NnError::Layers(other.to_string()),
            })?;
            let p = t.pick(q, action)?;
            let y = t.leaf_f64(vec![1], vec![target])?;
            t.mse(p, y)
        })?;
        total.merge(&r);
    }
    Ok(total)
}

/// Attention-weight normalization over random encoder inputs.
pub fn attention_normalization(cases: usize) -> Result<f64> {
    let net = toy_qnet();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let store = net.init(&mut rng)?;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let k = rng.gen_range(1..4);
        let s = random_agent_state(&mut rng, 4, 3, 2, k);
        let (_, w) = net.q_values_with_attention(&store, &s)?;
        let sum: f64 = w.expect("evaders present").iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(worst)
}

pub fn default_sim(cfg: &RunConfig) -> Result<Simulator> {
    crate::harness::build_simulator(cfg)
}

fn random_actions(sim: &Simulator, state: &EpisodeState, rng: &mut ChaCha8Rng) -> Result<Vec<Turn>> {
    (0..state.pursuers)
        .map(|m| Ok(random_valid(sim.decision_mask(state, m)?, rng).expect("non-empty mask")))
        .collect()
}

/// Conservation of the position matrices over `n` random simulator states.
pub fn codec_conservation(n: usize) -> Result<(usize, Vec<String>)> {
    let cfg = RunConfig::default();
    let sim = default_sim(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut failures = Vec::new();
    let mut seen = 0;
    let mut episode = 0u64;
    while seen < n {
        let mut state = sim.reset(episode);
        episode += 1;
        // Sample states along the trajectory, not just the spawn.
        for _ in 0..rng.gen_range(1..60) {
            if state.done {
                break;
            }
            let a = random_actions(&sim, &state, &mut rng)?;
            sim.step(&mut state, &a)?;
        }
        let alive = state.alive_evader_count() as u64;
        let env = encode_env_info(&sim, &state);
        let mut rebuilt = vec![0u64; env.sp.data().len()];
        for m in 0..state.pursuers {
            let s = encode_agent_state(&sim, &state, m)?;
            let ok = s.sf.total() == 1
                && s.sp_other.total() == state.pursuers as u64 - 1
                && s.se.total() == alive
                && s.se == env.se;
            if !ok {
                failures.push(format!("episode {} clock {} pursuer {m}", episode - 1, state.clock));
            }
            for (i, (&a, &b)) in s.sf.data().iter().zip(s.sp_other.data()).enumerate() {
                if m == 0 {
                    rebuilt[i] = (a + b) as u64;
                } else if rebuilt[i] != (a + b) as u64 {
                    failures.push(format!("episode {} clock {}: SF+SPother differs across agents", episode - 1, state.clock));
                }
            }
        }
        let sp: Vec<u64> = env.sp.data().iter().map(|&c| c as u64).collect();
        if sp != rebuilt || env.sp.total() != state.pursuers as u64 {
            failures.push(format!("episode {} clock {}: SP mismatch", episode - 1, state.clock));
        }
        if env.bn.iter().map(|&c| c as usize).sum::<usize>() != cfg.sim.background {
            failures.push(format!("episode {} clock {}: BN total", episode - 1, state.clock));
        }
        seen += 1;
    }
    Ok((seen, failures))
}

/// `R_t = sum_m r_t^m` and `total = parts` over `n` random steps.
pub fn reward_identity(n: usize) -> Result<(usize, Vec<String>)> {
    let cfg = RunConfig::default();
    let sim = default_sim(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut failures = Vec::new();
    let mut steps = 0;
    let mut episode = 0u64;
    while steps < n {
        let mut state = sim.reset(1000 + episode);
        episode += 1;
        let mut sum_r = 0.0;
        let mut per_agent = vec![0.0; state.pursuers];
        while !state.done && steps < n {
            let a = random_actions(&sim, &state, &mut rng)?;
            let ev = sim.step(&mut state, &a)?;
            let rs: Vec<_> = (0..state.pursuers).map(|m| individual_reward(m, &ev, &cfg.reward)).collect();
            let totals: Vec<f64> = rs.iter().map(|r| r.total).collect();
            let big_r = global_reward(&totals);
            let mut oracle = 0.0f64;
            for r in &rs {
                oracle += r.step_penalty + r.capture_share + r.shaping;
            }
            if big_r != oracle {
                failures.push(format!("episode {} step {}: {big_r} vs {oracle}", episode - 1, state.clock));
            }
            sum_r += big_r;
            for (acc, t) in per_agent.iter_mut().zip(&totals) {
                *acc += t;
            }
            steps += 1;
        }
        let agents: f64 = per_agent.iter().sum();
        if (agents - sum_r).abs() > 1e-9 * sum_r.abs().max(1.0) {
            failures.push(format!("episode {}: episode totals {sum_r} vs {agents}", episode - 1));
        }
    }
    Ok((steps, failures))
}

/// Places `g` pursuers next to a lone evader and checks the bonus adds up
/// to exactly `c2`.
pub fn capture_payout(g: usize) -> Result<(f64, Vec<f64>)> {
    let net = RoadNetwork::build(&GridSpec::default())?;
    let sim = Simulator::new(
        net,
        SimConfig {
            pursuers: 4,
            evaders: 1,
            background: 0,
            ..SimConfig::default()
        },
    )?;
    let reward = RewardConfig::default();
    let mut state = sim.reset(5);
    // South edge, eastbound on road 0; evader at 500 m, the capturing
    // pursuers a few metres behind it, the rest on the far north edge.
    let south = LaneId {
        road: RoadId(0),
        dir: Direction::Forward,
    };
    let north = LaneId {
        road: RoadId(sim.network().roads().len() / 2 - 1),
        dir: Direction::Forward,
    };
    let evader = state.pursuers;
    state.vehicles[evader].lane = south;
    state.vehicles[evader].offset = 500.0;
    state.vehicles[evader].speed = 0.0;
    for m in 0..state.pursuers {
        let v = &mut state.vehicles[m];
        v.speed = 0.0;
        if m < g {
            v.lane = south;
            v.offset = 489.0 - 11.0 * m as f64;
        } else {
            v.lane = north;
            v.offset = 100.0 + 200.0 * m as f64;
        }
    }
    let actions: Vec<Turn> = (0..state.pursuers)
        .map(|m| sim.decision_mask(&state, m).map(|k| k.turns().next().expect("non-empty")))
        .collect::<std::result::Result<_, _>>()?;
    let ev = sim.step(&mut state, &actions)?;
    let shares: Vec<f64> = (0..state.pursuers)
        .map(|m| individual_reward(m, &ev, &reward).capture_share)
        .collect();
    let paid = shares.iter().sum();
    let g_seen = ev.captures.first().map_or(0, |c| c.pursuers.len());
    if g_seen != g {
        return Err(crate::error::Error::Contract(format!("expected g={g}, simulator reported {g_seen}")));
    }
    Ok((paid, shares))
}

pub fn random_env(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lanes: usize, m: usize, n: usize, b: usize) -> EnvInfo {
    let mut sp = CountMatrix::zeros(rows, cols);
    for _ in 0..m {
        sp.increment(rng.gen_range(0..rows), rng.gen_range(0..cols));
    }
    let mut se = CountMatrix::zeros(rows, cols);
    for _ in 0..n {
        se.increment(rng.gen_range(0..rows), rng.gen_range(0..cols));
    }
    let mut bn = vec![0u32; lanes];
    for _ in 0..b {
        bn[rng.gen_range(0..lanes)] += 1;
    }
    EnvInfo { sp, se, bn }
}

pub fn random_qmatrix(rng: &mut ChaCha8Rng, m: usize) -> QMatrix {
    let rows = (0..m)
        .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        .collect();
    let masks = (0..m)
        .map(|_| loop {
            let mask = TurnMask([rng.gen_bool(0.7), rng.gen_bool(0.7), rng.gen_bool(0.7)]);
            if !mask.is_empty() {
                break mask;
            }
        })
        .collect();
    QMatrix::new(rows, masks).expect("well-formed")
}

/// Independent replay of the greedy sweep on raw arrays.
pub fn greedy_sweep_oracle(score: &dyn Fn(&[[f64; 3]]) -> f64, rows: &[[f64; 3]], masks: &[[bool; 3]]) -> (Vec<[f64; 3]>, f64) {
    let argmax = |row: &[f64; 3], mask: &[bool; 3]| {
        let mut best = usize::MAX;
        for i in 0..3 {
            if mask[i] && (best == usize::MAX || row[i] > row[best]) {
                best = i;
            }
        }
        best
    };
    let mut cur: Vec<[f64; 3]> = rows.to_vec();
    let mut cur_score = score(&cur);
    for m in 0..rows.len() {
        let first = argmax(&cur[m], &masks[m]);
        for a in (0..3).filter(|&a| masks[m][a] && a != first) {
            let mut cand = cur.clone();
            let top = argmax(&cand[m], &masks[m]);
            let (va, vt) = (cand[m][a], cand[m][top]);
            cand[m][a] = vt;
            cand[m][top] = va;
            let s = score(&cand);
            if s > cur_score {
                cur = cand;
                cur_score = s;
            }
        }
    }
    (cur, cur_score)
}

/// Properties of the joint-action search over `n` random triples with `m`
/// pursuers. Returns violations.
pub fn coordinator_properties(n: usize, m: usize, seed: u64) -> Result<Vec<String>> {
    let (rows, cols, lanes) = (4, 3, 8);
    let net = CoordinatorNet {
        hidden: vec![16, 8],
        cells: rows * cols,
        lanes,
        pursuers: m,
        evaders: 2,
        background: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..n {
        let mut store = net.init(&mut rng)?;
        jitter(&mut store, &mut rng, 0.3);
        let x = random_env(&mut rng, rows, cols, lanes, m, 2, 5);
        let qm = random_qmatrix(&mut rng, m);
        let out = optimize_joint(&net, &store, &x, &qm)?;
        let initial = net.q_tot(&store, &x, &qm)?;
        if out.score < initial {
            failures.push(format!("triple {i}: score {} < initial {initial}", out.score));
        }
        for (r, (a, b)) in out.qm.rows.iter().zip(&qm.rows).enumerate() {
            let mut a = *a;
            let mut b = *b;
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            if a != b {
                failures.push(format!("triple {i}: row {r} is not a permutation"));
            }
        }
        if out.evaluations > 1 + 2 * m {
            failures.push(format!("triple {i}: {} evaluations", out.evaluations));
        }
        if out.actions != crate::coordinator::actions_from(&out.qm) {
            failures.push(format!("triple {i}: actions disagree with the returned matrix"));
        }
        if m <= 3 {
            let masks: Vec<[bool; 3]> = qm.masks.iter().map(|k| k.0).collect();
            let score = |rows: &[[f64; 3]]| {
                let q = QMatrix::new(rows.to_vec(), qm.masks.clone()).expect("well-formed");
                net.q_tot(&store, &x, &q).expect("shapes match")
            };
            let (rows_o, score_o) = greedy_sweep_oracle(&score, &qm.rows, &masks);
            if rows_o != out.qm.rows || score_o != out.score {
                failures.push(format!("triple {i}: oracle disagrees"));
            }
        }
    }
    Ok(failures)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SimSweep {
    pub episodes: usize,
    pub steps: usize,
    pub nondeterministic: usize,
    pub overlap_violations: usize,
    pub speed_violations: usize,
    pub accel_violations: usize,
    pub off_lane: usize,
    pub done_flag_errors: usize,
}

fn run_random_episode(sim: &Simulator, seed: u64, sweep: &mut SimSweep) -> Result<Vec<(usize, u64)>> {
    let mut state = sim.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut trace = Vec::new();
    let cap = sim.config().episode_cap;
    while !state.done {
        let before = state.clone();
        let a = random_actions(sim, &state, &mut rng)?;
        sim.step(&mut state, &a)?;
        let audit = sim.audit(&before, &state);
        sweep.overlap_violations += audit.overlap_violations;
        sweep.speed_violations += audit.speed_violations;
        sweep.accel_violations += audit.accel_violations;
        sweep.off_lane += audit.off_lane;
        let expected = state.alive_evader_count() == 0 || state.clock >= cap;
        if state.done != expected || state.clock > cap {
            sweep.done_flag_errors += 1;
        }
        sweep.steps += 1;
        let fingerprint = state
            .vehicles
            .iter()
            .fold(0u64, |h, v| h.rotate_left(5) ^ v.offset.to_bits() ^ v.speed.to_bits().rotate_left(17) ^ v.lane.index() as u64);
        trace.push((state.clock, fingerprint));
    }
    Ok(trace)
}

/// Seeded random-action episodes, each run twice.
pub fn simulator_sweep(cfg: &RunConfig, episodes: usize) -> Result<SimSweep> {
    let sim = default_sim(cfg)?;
    let mut sweep = SimSweep::default();
    for e in 0..episodes as u64 {
        let a = run_random_episode(&sim, e, &mut sweep)?;
        let mut scratch = SimSweep::default();
        let b = run_random_episode(&sim, e, &mut scratch)?;
        if a != b {
            sweep.nondeterministic += 1;
        }
        sweep.episodes += 1;
    }
    Ok(sweep)
}

impl SimSweep {
    pub fn clean(&self) -> bool {
        self.nondeterministic == 0
            && self.overlap_violations == 0
            && self.speed_violations == 0
            && self.accel_violations == 0
            && self.off_lane == 0
            && self.done_flag_errors == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Sizes {
    pub grad_trials: usize,
    pub pipeline_trials: usize,
    pub states: usize,
    pub steps: usize,
    pub coordinator_triples: usize,
    pub sim_episodes: usize,
}

impl Sizes {
    pub const FULL: Sizes = Sizes {
        grad_trials: 100,
        pipeline_trials: 10,
        states: 1000,
        steps: 1000,
        coordinator_triples: 500,
        sim_episodes: 100,
    };
    pub const QUICK: Sizes = Sizes {
        grad_trials: 10,
        pipeline_trials: 2,
        states: 100,
        steps: 100,
        coordinator_triples: 50,
        sim_episodes: 3,
    };
}

pub fn run(sizes: Sizes) -> SelfCheckReport {
    let mut checks = Vec::new();
    checks.push(timed("gradient: dense", || Ok(summarize(&grad_dense(sizes.grad_trials)?))));
    checks.push(timed("gradient: conv2d", || Ok(summarize(&grad_conv(sizes.grad_trials)?))));
    checks.push(timed("gradient: attention", || Ok(summarize(&grad_attention(sizes.grad_trials)?))));
    checks.push(timed("gradient: encoder + Q-head", || {
        Ok(summarize(&grad_pipeline(sizes.pipeline_trials)?))
    }));
    checks.push(timed("attention weights sum to 1", || {
        let worst = attention_normalization(sizes.grad_trials)?;
        Ok((worst <= 1e-6, format!("worst deviation {worst:.2e}")))
    }));
    checks.push(timed("position-matrix conservation", || {
        let (n, f) = codec_conservation(sizes.states)?;
        Ok((f.is_empty(), format!("{n} states, {} failures {:?}", f.len(), f.first())))
    }));
    checks.push(timed("reward identity", || {
        let (n, f) = reward_identity(sizes.steps)?;
        Ok((f.is_empty(), format!("{n} steps, {} failures {:?}", f.len(), f.first())))
    }));
    checks.push(timed("capture payout", || {
        let c2 = RewardConfig::default().c2;
        let mut detail = Vec::new();
        let mut ok = true;
        for g in 1..=4 {
            let (paid, _) = capture_payout(g)?;
            ok &= paid == c2;
            detail.push(format!("g={g}: {paid}"));
        }
        Ok((ok, detail.join(", ")))
    }));
    checks.push(timed("coordinator search properties", || {
        let mut f = coordinator_properties(sizes.coordinator_triples, 4, 201)?;
        f.extend(coordinator_properties(sizes.coordinator_triples / 5, 3, 202)?);
        f.extend(coordinator_properties(sizes.coordinator_triples / 5, 2, 203)?);
        Ok((f.is_empty(), format!("{} failures {:?}", f.len(), f.first())))
    }));
    checks.push(timed("simulator determinism and safety", || {
        let s = simulator_sweep(&RunConfig::default(), sizes.sim_episodes)?;
        Ok((s.clean(), format!("{s:?}")))
    }));
    SelfCheckReport { checks }
}
