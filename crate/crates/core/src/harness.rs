//! Episode loop, training schedule, evaluation and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use hcmvp_nn::{load_params, save_params, NnError, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::coordinator::{self, actions_from, optimize_joint, CoordinatorNet, GlobalExperience, QMatrix};
use crate::dqn_agent::{self, random_valid, AgentParams, Experience, QNetwork, ReplayBuffer};
use crate::error::{ConfigError, Error, Result};
use crate::iese::{Divisors, Encoder};
use crate::report;
use crate::rewards::{global_reward, individual_reward, RewardBreakdown};
use crate::road_network::{RoadNetwork, Turn, TurnMask};
use crate::seeds::{derive_seed, stream};
use crate::state_codec::{encode_agent_state, encode_env_info, AgentState, EnvInfo};
use crate::traffic_sim::{CaptureEvent, EpisodeState, Simulator, StepEvents};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub seed: u64,
    pub total_timestep: usize,
    pub total_reward: f64,
    pub average_reward: f64,
    pub captures: Vec<CaptureEvent>,
    pub agent_rewards: Vec<f64>,
    pub epsilon: f64,
    /// Mean loss per agent over the episode's learn calls.
    pub agent_loss: Vec<Option<f64>>,
    pub coordinator_loss: Option<f64>,
    /// Accepted coordinator swaps over the episode.
    pub improvements: usize,
    pub clamp_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub t: usize,
    pub actions: Vec<Turn>,
    pub rewards: Vec<RewardBreakdown>,
    pub global_reward: f64,
    pub q_tot_initial: Option<f64>,
    pub q_tot_final: Option<f64>,
    pub improvements: usize,
    pub captures: Vec<CaptureEvent>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attention: Option<Vec<Option<Vec<f64>>>>,
}

pub fn build_simulator(cfg: &RunConfig) -> Result<Simulator> {
    let net = RoadNetwork::build(&cfg.grid)?;
    Ok(Simulator::new(net, cfg.sim.clone())?)
}

pub struct CoordinatorState {
    pub net: CoordinatorNet,
    pub params: ParamStore,
}

/// Everything a policy needs to act: per-agent networks and, for the
/// coordinated variants, the global scorer.
pub struct Learner {
    pub variant: Variant,
    pub qnet: QNetwork,
    pub agents: Vec<AgentParams>,
    pub coordinator: Option<CoordinatorState>,
}

/// Outcome of one joint decision.
pub struct Decision {
    /// Per-agent Q lists as produced.
    pub qm: QMatrix,
    /// Matrix whose argmax is executed (after coordination).
    pub chosen: QMatrix,
    pub actions: Vec<Turn>,
    pub q_tot_initial: Option<f64>,
    pub q_tot_final: Option<f64>,
    pub improvements: usize,
    pub attention: Vec<Option<Vec<f64>>>,
}

impl Learner {
    pub fn qnet(cfg: &RunConfig) -> QNetwork {
        let layout_rows = 2 * cfg.grid.intersections_per_side;
        let encoder = if cfg.variant.uses_iese() {
            Encoder::Iese(cfg.iese.clone())
        } else {
            Encoder::Flat {
                width: cfg.iese.output_dim,
            }
        };
        QNetwork {
            encoder,
            head_hidden: cfg.dqn.head_hidden,
            divisors: Divisors::for_counts(cfg.sim.pursuers, cfg.sim.evaders),
            rows: layout_rows,
            cols: cfg.grid.cells_per_channel,
        }
    }

    pub fn coordinator_net(cfg: &RunConfig) -> CoordinatorNet {
        let rows = 2 * cfg.grid.intersections_per_side;
        CoordinatorNet {
            hidden: cfg.coordinator.hidden.clone(),
            cells: rows * cfg.grid.cells_per_channel,
            lanes: 2 * cfg.grid.road_count(),
            pursuers: cfg.sim.pursuers,
            evaders: cfg.sim.evaders,
            background: cfg.sim.background,
        }
    }

    /// Fresh parameters; agent `m` draws from init stream `m`, the
    /// coordinator from its own stream.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let qnet = Self::qnet(cfg);
        let mut agents = Vec::with_capacity(cfg.sim.pursuers);
        for m in 0..cfg.sim.pursuers {
            let mut rng = stream(cfg.train.seed, "init", m as u64);
            let mut store = qnet.init(&mut rng)?;
            store.set_meta("variant", cfg.variant.name());
            store.set_meta("seed", derive_seed(cfg.train.seed, "init", m as u64));
            agents.push(AgentParams::new(store));
        }
        let coordinator = if cfg.variant.uses_coordinator() {
            let net = Self::coordinator_net(cfg);
            let mut rng = stream(cfg.train.seed, "init-coordinator", 0);
            let mut params = net.init(&mut rng)?;
            params.set_meta("seed", derive_seed(cfg.train.seed, "init-coordinator", 0));
            Some(CoordinatorState { net, params })
        } else {
            None
        };
        Ok(Self {
            variant: cfg.variant,
            qnet,
            agents,
            coordinator,
        })
    }

    pub fn decide(
        &self,
        states: &[AgentState],
        masks: &[TurnMask],
        env: Option<&EnvInfo>,
        want_attention: bool,
    ) -> Result<Decision> {
        let mut rows = Vec::with_capacity(states.len());
        let mut attention = Vec::with_capacity(states.len());
        for (m, s) in states.iter().enumerate() {
            let store = &self.agents[m].primary;
            if want_attention {
                let (q, w) = self.qnet.q_values_with_attention(store, s)?;
                rows.push(q);
                attention.push(w);
            } else {
                rows.push(self.qnet.q_values(store, s)?);
            }
        }
        let qm = QMatrix::new(rows, masks.to_vec())?;
        match (&self.coordinator, env) {
            (Some(c), Some(env)) => {
                let choice = optimize_joint(&c.net, &c.params, env, &qm)?;
                Ok(Decision {
                    qm,
                    chosen: choice.qm,
                    actions: choice.actions,
                    q_tot_initial: Some(choice.initial_score),
                    q_tot_final: Some(choice.score),
                    improvements: choice.improvements,
                    attention,
                })
            }
            (Some(_), None) => Err(Error::Contract("coordinated variant needs traffic information".into())),
            (None, _) => Ok(Decision {
                actions: actions_from(&qm),
                chosen: qm.clone(),
                qm,
                q_tot_initial: None,
                q_tot_final: None,
                improvements: 0,
                attention,
            }),
        }
    }

    /// Writes parameters (primary and target per agent, coordinator) and
    /// the configuration that produced them.
    pub fn save(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        for (m, a) in self.agents.iter().enumerate() {
            save_params(&a.primary, dir.join(format!("agent{m}.params"))).map_err(|e| nn_file(e, dir))?;
            save_params(&a.target, dir.join(format!("agent{m}.target.params"))).map_err(|e| nn_file(e, dir))?;
        }
        if let Some(c) = &self.coordinator {
            save_params(&c.params, dir.join("coordinator.params")).map_err(|e| nn_file(e, dir))?;
        }
        Ok(())
    }

    /// Loads a checkpoint directory written by [`Learner::save`].
    pub fn load(dir: &Path) -> Result<(RunConfig, Self)> {
        let cfg = RunConfig::load(dir.join("config.toml"))?;
        let learner = Self::load_with(&cfg, dir)?;
        Ok((cfg, learner))
    }

    /// Loads parameters from `dir` for an externally supplied configuration,
    /// which must describe the same architecture.
    pub fn load_with(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let mut learner = Self::init_shapes(cfg)?;
        for (m, a) in learner.agents.iter_mut().enumerate() {
            let p = dir.join(format!("agent{m}.params"));
            let primary = load_params(&p).map_err(|e| nn_file(e, &p))?;
            a.primary.same_layout(&primary).map_err(|e| format_err(&p, e))?;
            let t = dir.join(format!("agent{m}.target.params"));
            let target = if t.exists() {
                let target = load_params(&t).map_err(|e| nn_file(e, &t))?;
                a.primary.same_layout(&target).map_err(|e| format_err(&t, e))?;
                target
            } else {
                primary.clone()
            };
            a.primary = primary;
            a.target = target;
        }
        if let Some(c) = &mut learner.coordinator {
            let p = dir.join("coordinator.params");
            let params = load_params(&p).map_err(|e| nn_file(e, &p))?;
            c.params.same_layout(&params).map_err(|e| format_err(&p, e))?;
            c.params = params;
        }
        Ok(learner)
    }

    fn init_shapes(cfg: &RunConfig) -> Result<Self> {
        // Shapes only; the values are replaced right away.
        Self::init(cfg)
    }
}

fn nn_file(e: NnError, path: &Path) -> Error {
    match e {
        NnError::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.display().to_string(),
            reason: other.to_string(),
        },
    }
}

fn format_err(path: &Path, e: NnError) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: format!("parameters do not match the configuration: {e}"),
    }
}

fn non_finite(e: Error, what: String, episode: usize, step: usize) -> Error {
    match e {
        Error::Nn(NnError::NonFinite { .. }) => Error::NonFinite { what, episode, step },
        other => other,
    }
}

fn observe(sim: &Simulator, state: &EpisodeState) -> Result<(Vec<AgentState>, Vec<TurnMask>)> {
    let mut states = Vec::with_capacity(state.pursuers);
    let mut masks = Vec::with_capacity(state.pursuers);
    for m in 0..state.pursuers {
        states.push(encode_agent_state(sim, state, m)?);
        masks.push(sim.decision_mask(state, m)?);
    }
    Ok((states, masks))
}

/// Turn whose far intersection lies closest to the nearest alive evader.
pub fn chaser_action(sim: &Simulator, state: &EpisodeState, m: usize) -> Result<Turn> {
    let net = sim.network();
    let p = state.pursuer(m);
    let node = net.lane_end(p.lane);
    let heading = net.lane_heading(p.lane);
    let evaders: Vec<(f64, f64)> = state.alive_evaders().map(|(_, e)| sim.point(e)).collect();
    let mask = sim.decision_mask(state, m)?;
    let mut best: Option<(Turn, f64)> = None;
    for t in mask.turns() {
        let lane = net.resolve_turn(node, heading, t).expect("mask is valid");
        let (x, y) = net.intersection_point(net.lane_end(lane));
        let d = evaders
            .iter()
            .map(|&(ex, ey)| (ex - x).hypot(ey - y))
            .fold(f64::INFINITY, f64::min);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((t, d));
        }
    }
    Ok(best.expect("masks are non-empty").0)
}

pub enum Policy<'a> {
    Learned(&'a Learner),
    /// Uniform over valid turns.
    Random,
    /// Heads for the intersection nearest the closest evader.
    Chaser,
}

impl Policy<'_> {
    pub fn name(&self) -> String {
        match self {
            Policy::Learned(l) => l.variant.name().to_string(),
            Policy::Random => "random".into(),
            Policy::Chaser => "chaser".into(),
        }
    }
}

struct Tally {
    total_reward: f64,
    agent_rewards: Vec<f64>,
    improvements: usize,
}

impl Tally {
    fn new(m: usize) -> Self {
        Self {
            total_reward: 0.0,
            agent_rewards: vec![0.0; m],
            improvements: 0,
        }
    }

    fn add(&mut self, rewards: &[RewardBreakdown]) -> f64 {
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        for (acc, r) in self.agent_rewards.iter_mut().zip(&totals) {
            *acc += r;
        }
        let big_r = global_reward(&totals);
        self.total_reward += big_r;
        big_r
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        episode: usize,
        seed: u64,
        state: &EpisodeState,
        epsilon: f64,
        agent_loss: Vec<Option<f64>>,
        coordinator_loss: Option<f64>,
    ) -> EpisodeMetrics {
        let t = state.clock;
        EpisodeMetrics {
            episode,
            seed,
            total_timestep: t,
            total_reward: self.total_reward,
            average_reward: if t == 0 { 0.0 } else { self.total_reward / t as f64 },
            captures: state.capture_log.clone(),
            agent_rewards: self.agent_rewards,
            epsilon,
            agent_loss,
            coordinator_loss,
            improvements: self.improvements,
            clamp_events: state.clamp_events,
        }
    }
}

/// Greedy episode from a prepared state: no exploration, storage or learning.
#[allow(clippy::too_many_arguments)]
pub fn run_eval_from(
    sim: &Simulator,
    cfg: &RunConfig,
    policy: &Policy,
    state: EpisodeState,
    rng: &mut ChaCha8Rng,
    episode: usize,
    seed: u64,
    record: bool,
) -> Result<(EpisodeMetrics, Vec<StepRecord>)> {
    run_eval_traced(sim, cfg, policy, state, rng, episode, seed, record, &mut |_, _, _| {})
}

/// As [`run_eval_from`], calling `trace` after every step with the new
/// state, the executed actions and the step events.
#[allow(clippy::too_many_arguments)]
pub fn run_eval_traced(
    sim: &Simulator,
    cfg: &RunConfig,
    policy: &Policy,
    mut state: EpisodeState,
    rng: &mut ChaCha8Rng,
    episode: usize,
    seed: u64,
    record: bool,
    trace: &mut dyn FnMut(&EpisodeState, &[Turn], &StepEvents),
) -> Result<(EpisodeMetrics, Vec<StepRecord>)> {
    let mut tally = Tally::new(state.pursuers);
    let mut records = Vec::new();
    let want_attention = record && cfg.output.attention_dump;
    while !state.done {
        let t = state.clock;
        let (actions, q0, q1, improvements, attention) = match policy {
            Policy::Learned(learner) => {
                let (states, masks) = observe(sim, &state)?;
                let env = learner.coordinator.as_ref().map(|_| encode_env_info(sim, &state));
                let d = learner.decide(&states, &masks, env.as_ref(), want_attention)?;
                (d.actions, d.q_tot_initial, d.q_tot_final, d.improvements, d.attention)
            }
            Policy::Random => {
                let mut actions = Vec::with_capacity(state.pursuers);
                for m in 0..state.pursuers {
                    let mask = sim.decision_mask(&state, m)?;
                    actions.push(random_valid(mask, rng).expect("non-empty mask"));
                }
                (actions, None, None, 0, Vec::new())
            }
            Policy::Chaser => {
                let actions = (0..state.pursuers)
                    .map(|m| chaser_action(sim, &state, m))
                    .collect::<Result<Vec<_>>>()?;
                (actions, None, None, 0, Vec::new())
            }
        };
        tally.improvements += improvements;
        let events = sim.step(&mut state, &actions)?;
        trace(&state, &actions, &events);
        let rewards: Vec<RewardBreakdown> = (0..state.pursuers)
            .map(|m| individual_reward(m, &events, &cfg.reward))
            .collect();
        let big_r = tally.add(&rewards);
        if record {
            records.push(StepRecord {
                episode,
                t,
                actions,
                rewards,
                global_reward: big_r,
                q_tot_initial: q0,
                q_tot_final: q1,
                improvements,
                captures: events.captures,
                attention: want_attention.then_some(attention),
            });
        }
    }
    Ok((tally.finish(episode, seed, &state, 0.0, Vec::new(), None), records))
}

pub fn eval_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, "eval-sim", i as u64)
}

pub fn run_eval_episode(
    sim: &Simulator,
    cfg: &RunConfig,
    policy: &Policy,
    master: u64,
    i: usize,
    record: bool,
) -> Result<(EpisodeMetrics, Vec<StepRecord>)> {
    let seed = eval_seed(master, i);
    let mut rng = stream(master, "eval-policy", i as u64);
    run_eval_from(sim, cfg, policy, sim.reset(seed), &mut rng, i, seed, record)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: 0.0, min: 0.0, max: 0.0 };
        }
        Stat {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub total_timestep: Stat,
    pub total_reward: Stat,
    pub average_reward: Stat,
    /// Fraction of episodes in which every evader was captured.
    pub success_rate: f64,
}

impl Aggregate {
    pub fn of(metrics: &[EpisodeMetrics], evaders: usize) -> Aggregate {
        let col = |f: fn(&EpisodeMetrics) -> f64| metrics.iter().map(f).collect::<Vec<_>>();
        let successes = metrics.iter().filter(|m| m.captures.len() == evaders).count();
        Aggregate {
            episodes: metrics.len(),
            total_timestep: Stat::of(&col(|m| m.total_timestep as f64)),
            total_reward: Stat::of(&col(|m| m.total_reward)),
            average_reward: Stat::of(&col(|m| m.average_reward)),
            success_rate: if metrics.is_empty() {
                0.0
            } else {
                successes as f64 / metrics.len() as f64
            },
        }
    }
}

pub struct Evaluation {
    pub episodes: Vec<EpisodeMetrics>,
    pub steps: Vec<StepRecord>,
    pub aggregate: Aggregate,
}

/// `n` greedy episodes on seeds derived from `master`, optionally spread
/// over `cfg.train.eval_threads` workers. Results are in episode order.
pub fn evaluate(cfg: &RunConfig, policy: &Policy, n: usize, master: u64) -> Result<Evaluation> {
    let sim = build_simulator(cfg)?;
    let record = cfg.output.step_records;
    let run = |i: usize| run_eval_episode(&sim, cfg, policy, master, i, record);
    let results: Vec<Result<(EpisodeMetrics, Vec<StepRecord>)>> = if cfg.train.eval_threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.train.eval_threads)
            .build()
            .map_err(|e| Error::Contract(format!("cannot start evaluation workers: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(run).collect())
    } else {
        (0..n).map(run).collect()
    };
    let mut episodes = Vec::with_capacity(n);
    let mut steps = Vec::new();
    for r in results {
        let (m, s) = r?;
        episodes.push(m);
        steps.extend(s);
    }
    let aggregate = Aggregate::of(&episodes, cfg.sim.evaders);
    Ok(Evaluation {
        episodes,
        steps,
        aggregate,
    })
}

/// Mutable training state: parameters, replay memories and progress.
pub struct Trainer {
    pub cfg: RunConfig,
    pub sim: Simulator,
    pub learner: Learner,
    pub replay: Vec<ReplayBuffer<Experience>>,
    pub global_replay: Option<ReplayBuffer<GlobalExperience>>,
    pub episodes_done: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    episodes_done: usize,
    learn_counts: Vec<usize>,
    replay: Vec<ReplayBuffer<Experience>>,
    global_replay: Option<ReplayBuffer<GlobalExperience>>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let sim = build_simulator(&cfg)?;
        let learner = Learner::init(&cfg)?;
        let replay = (0..cfg.sim.pursuers)
            .map(|_| ReplayBuffer::new(cfg.dqn.buffer_capacity))
            .collect();
        let global_replay = cfg
            .variant
            .uses_coordinator()
            .then(|| ReplayBuffer::new(cfg.coordinator.buffer_capacity));
        Ok(Self {
            cfg,
            sim,
            learner,
            replay,
            global_replay,
            episodes_done: 0,
        })
    }

    pub fn train_seed(&self, episode: usize) -> u64 {
        derive_seed(self.cfg.train.seed, "train-sim", episode as u64)
    }

    /// Runs the next training episode.
    pub fn run_episode(&mut self, record: bool) -> Result<(EpisodeMetrics, Vec<StepRecord>)> {
        let episode = self.episodes_done;
        let master = self.cfg.train.seed;
        let seed = self.train_seed(episode);
        let mut eps_rng = stream(master, "train-eps", episode as u64);
        let mut replay_rng = stream(master, "train-replay", episode as u64);
        let epsilon = self.cfg.dqn.epsilon_at(episode, self.cfg.train.episodes);
        let dqn_cfg = self.cfg.dqn.clone();
        let coord_cfg = self.cfg.coordinator.clone();
        let reward_cfg = self.cfg.reward.clone();
        let want_attention = record && self.cfg.output.attention_dump;

        let sim = &self.sim;
        let mut state = sim.reset(seed);
        let m_count = state.pursuers;
        let mut tally = Tally::new(m_count);
        let mut losses: Vec<Vec<f64>> = vec![Vec::new(); m_count];
        let mut coord_losses = Vec::new();
        let mut records = Vec::new();
        let (mut states, mut masks) = observe(sim, &state)?;

        while !state.done {
            let t = state.clock;
            let env = self.learner.coordinator.as_ref().map(|_| encode_env_info(sim, &state));
            let d = self
                .learner
                .decide(&states, &masks, env.as_ref(), want_attention)
                .map_err(|e| non_finite(e, "Q values".into(), episode, t))?;
            let mut chosen = d.chosen;
            let mut actions = d.actions;
            for m in 0..m_count {
                if eps_rng.gen::<f64>() < epsilon {
                    let a = random_valid(masks[m], &mut eps_rng).expect("non-empty mask");
                    if a != actions[m] {
                        chosen.promote(m, a);
                        actions[m] = a;
                    }
                }
            }
            tally.improvements += d.improvements;

            let events = sim.step(&mut state, &actions)?;
            let rewards: Vec<RewardBreakdown> = (0..m_count)
                .map(|m| individual_reward(m, &events, &reward_cfg))
                .collect();
            let big_r = tally.add(&rewards);
            let (next_states, next_masks) = observe(sim, &state)?;
            let terminal = state.alive_evader_count() == 0;

            for m in 0..m_count {
                self.replay[m].push(Experience {
                    state: states[m].clone(),
                    action: actions[m],
                    reward: rewards[m].total,
                    next_state: next_states[m].clone(),
                    next_mask: next_masks[m],
                    terminal,
                });
            }
            if let (Some(buf), Some(env)) = (&mut self.global_replay, env) {
                buf.push(GlobalExperience {
                    env,
                    qm: chosen,
                    reward: big_r,
                });
            }

            let step = state.clock;
            if step % dqn_cfg.learn_every == 0 {
                for m in 0..m_count {
                    if let Some(batch) = self.replay[m].sample(dqn_cfg.batch_size, &mut replay_rng) {
                        let loss = dqn_agent::learn_step(&self.learner.qnet, &mut self.learner.agents[m], &batch, &dqn_cfg)
                            .map_err(|e| non_finite(e, format!("agent {m} loss"), episode, step))?;
                        losses[m].push(loss);
                    }
                }
            }
            if let (Some(c), Some(buf)) = (&mut self.learner.coordinator, &self.global_replay) {
                if step % coord_cfg.learn_every == 0 {
                    if let Some(batch) = buf.sample(coord_cfg.batch_size, &mut replay_rng) {
                        let loss = coordinator::learn_step(&c.net, &mut c.params, &batch, &coord_cfg)
                            .map_err(|e| non_finite(e, "coordinator loss".into(), episode, step))?;
                        coord_losses.push(loss);
                    }
                }
            }

            if record {
                records.push(StepRecord {
                    episode,
                    t,
                    actions,
                    rewards,
                    global_reward: big_r,
                    q_tot_initial: d.q_tot_initial,
                    q_tot_final: d.q_tot_final,
                    improvements: d.improvements,
                    captures: events.captures,
                    attention: want_attention.then_some(d.attention),
                });
            }
            states = next_states;
            masks = next_masks;
        }

        self.episodes_done += 1;
        let agent_loss = losses.iter().map(|l| mean(l)).collect();
        let metrics = tally.finish(episode, seed, &state, epsilon, agent_loss, mean(&coord_losses));
        Ok((metrics, records))
    }

    /// Full resumable checkpoint: parameters plus replay memories.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.learner.save(&self.cfg, dir)?;
        let st = TrainerState {
            episodes_done: self.episodes_done,
            learn_counts: self.learner.agents.iter().map(|a| a.learn_count).collect(),
            replay: self.replay.clone(),
            global_replay: self.global_replay.clone(),
        };
        let path = dir.join("trainer.json");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &st).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let (cfg, learner) = Learner::load(dir)?;
        let path = dir.join("trainer.json");
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let st: TrainerState =
            serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let mut t = Trainer::new(cfg)?;
        if st.learn_counts.len() != t.learner.agents.len() || st.replay.len() != t.learner.agents.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "agent count does not match the configuration".into(),
            });
        }
        t.learner = learner;
        for (a, c) in t.learner.agents.iter_mut().zip(&st.learn_counts) {
            a.learn_count = *c;
        }
        t.replay = st.replay;
        t.global_replay = st.global_replay;
        t.episodes_done = st.episodes_done;
        Ok(t)
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<EpisodeMetrics>,
}

pub fn checkpoint_dir(out: &Path, episodes_done: usize) -> PathBuf {
    out.join("checkpoints").join(format!("episode-{episodes_done:06}"))
}

/// Runs the configured number of training episodes. With `out`, metrics,
/// checkpoints and the final parameters are written there; `resume`
/// continues from a checkpoint directory instead of fresh parameters.
pub fn train(cfg: &RunConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(dir) => {
            let t = Trainer::resume(dir)?;
            if !t.cfg.same_architecture(cfg) {
                return Err(ConfigError::invalid(
                    "variant",
                    format!("checkpoint {} was trained with a different architecture", dir.display()),
                )
                .into());
            }
            let mut t = t;
            t.cfg = cfg.clone();
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let mut writer = match out {
        Some(dir) => Some(report::MetricsWriter::open(dir, trainer.episodes_done, cfg.output.step_records)?),
        None => None,
    };
    let mut history = Vec::new();
    while trainer.episodes_done < cfg.train.episodes {
        let (metrics, steps) = trainer.run_episode(cfg.output.step_records)?;
        if let Some(w) = &mut writer {
            w.append(&metrics, &steps)?;
        }
        history.push(metrics);
        let k = trainer.episodes_done;
        if let Some(dir) = out {
            if cfg.train.checkpoint_every > 0 && k % cfg.train.checkpoint_every == 0 && k < cfg.train.episodes {
                trainer.save(&checkpoint_dir(dir, k))?;
            }
        }
    }
    if let Some(dir) = out {
        if let Some(w) = &mut writer {
            w.flush()?;
        }
        trainer.save(&dir.join("final"))?;
        if cfg.output.svg {
            let rewards: Vec<f64> = report::read_metrics(&dir.join("metrics.jsonl"))?
                .iter()
                .map(|m| m.total_reward)
                .collect();
            report::write_reward_svg(&dir.join("reward_curve.svg"), &rewards)?;
        }
    }
    Ok(TrainOutcome { trainer, history })
}
