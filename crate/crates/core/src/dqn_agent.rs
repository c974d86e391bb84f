//! Per-pursuer deep Q-learning: Q-head over the encoded state, masked
//! epsilon-greedy selection, replay and primary/target stores.

use hcmvp_nn::layers::{forward_stack, init_stack};
use hcmvp_nn::{sync_copy, Activation, LayerSpec, ParamStore, Tape, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error, Result};
use crate::iese::{Divisors, Encoder};
use crate::road_network::{Turn, TurnMask};
use crate::state_codec::AgentState;

/// Action values ordered `[left, right, straight]`.
pub type QList = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub gamma: f64,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Learn calls between target-store refreshes.
    pub target_sync: usize,
    pub head_hidden: usize,
    pub epsilon: f64,
    /// Linear decay from `epsilon_start` to `epsilon` over the first
    /// `decay_fraction` of training episodes.
    pub epsilon_decay: bool,
    pub epsilon_start: f64,
    pub decay_fraction: f64,
    /// Timesteps between learn calls once the buffer is ready.
    pub learn_every: usize,
    /// Rescale gradients whose global norm exceeds this; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lr: 0.001,
            buffer_capacity: 10_000,
            batch_size: 32,
            target_sync: 100,
            head_hidden: 64,
            epsilon: 0.01,
            epsilon_decay: false,
            epsilon_start: 1.0,
            decay_fraction: 0.3,
            learn_every: 1,
            max_grad_norm: 0.0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let unit = |k: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::invalid(k, "must lie in [0, 1]"))
            }
        };
        unit("dqn.gamma", self.gamma)?;
        unit("dqn.epsilon", self.epsilon)?;
        unit("dqn.epsilon_start", self.epsilon_start)?;
        unit("dqn.decay_fraction", self.decay_fraction)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::invalid("dqn.lr", "must be positive"));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(ConfigError::invalid("dqn.max_grad_norm", "must be >= 0"));
        }
        for (k, v) in [
            ("dqn.buffer_capacity", self.buffer_capacity),
            ("dqn.batch_size", self.batch_size),
            ("dqn.target_sync", self.target_sync),
            ("dqn.head_hidden", self.head_hidden),
            ("dqn.learn_every", self.learn_every),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(k, "must be positive"));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(ConfigError::invalid("dqn.batch_size", "exceeds buffer capacity"));
        }
        Ok(())
    }

    /// Exploration rate for training episode `episode` of `total`.
    pub fn epsilon_at(&self, episode: usize, total: usize) -> f64 {
        if !self.epsilon_decay {
            return self.epsilon;
        }
        let horizon = (self.decay_fraction * total as f64).round().max(1.0);
        let frac = episode as f64 / horizon;
        if frac >= 1.0 {
            return self.epsilon;
        }
        self.epsilon_start + (self.epsilon - self.epsilon_start) * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: AgentState,
    pub action: Turn,
    pub reward: f64,
    pub next_state: AgentState,
    /// Valid actions in `next_state`, for the masked bootstrap.
    pub next_mask: TurnMask,
    pub terminal: bool,
}

/// Fixed-capacity FIFO store with uniform batch sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    /// Slot overwritten by the next push once full.
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `None` until at least `batch` items are stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&T>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(sample(rng, self.items.len(), batch).into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Encoder plus the `d_s -> hidden -> 3` Q-head.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    pub encoder: Encoder,
    pub head_hidden: usize,
    pub divisors: Divisors,
    pub rows: usize,
    pub cols: usize,
}

const HEAD: &str = "head";

impl QNetwork {
    fn head(&self) -> [LayerSpec; 2] {
        [
            LayerSpec::dense(self.encoder.output_dim(), self.head_hidden, Activation::Relu),
            LayerSpec::dense(self.head_hidden, 3, Activation::Identity),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, self.rows, self.cols, rng)?;
        init_stack(&mut store, HEAD, &self.head(), rng)?;
        self.divisors.record(&mut store);
        Ok(store)
    }

    /// Returns the `[3]` Q node and the attention node, if any.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, s: &AgentState) -> Result<(Var, Option<Var>)> {
        if s.sf.rows() != self.rows || s.sf.cols() != self.cols {
            return Err(Error::Contract(format!(
                "state is {}x{}, network expects {}x{}",
                s.sf.rows(),
                s.sf.cols(),
                self.rows,
                self.cols
            )));
        }
        let enc = self.encoder.forward(tape, store, &self.divisors, s)?;
        let q = forward_stack(tape, store, HEAD, &self.head(), enc.state)?;
        Ok((q, enc.attention))
    }

    pub fn q_values(&self, store: &ParamStore, s: &AgentState) -> Result<QList> {
        let mut tape = Tape::new();
        let (q, _) = self.forward(&mut tape, store, s)?;
        let v = tape.value(q);
        Ok([v[0], v[1], v[2]])
    }

    /// Q values plus the attention weights over evader cells.
    pub fn q_values_with_attention(&self, store: &ParamStore, s: &AgentState) -> Result<(QList, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (q, att) = self.forward(&mut tape, store, s)?;
        let v = tape.value(q);
        let weights = att.and_then(|a| tape.attention_weights(a)).map(<[f64]>::to_vec);
        Ok(([v[0], v[1], v[2]], weights))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams {
    pub primary: ParamStore,
    pub target: ParamStore,
    pub learn_count: usize,
}

impl AgentParams {
    pub fn new(primary: ParamStore) -> Self {
        Self {
            target: primary.clone(),
            primary,
            learn_count: 0,
        }
    }
}

/// Argmax over valid entries; ties go to the lowest index.
pub fn greedy(q: &QList, mask: TurnMask) -> Option<Turn> {
    let mut best: Option<Turn> = None;
    for t in mask.turns() {
        if best.map_or(true, |b| q[t.index()] > q[b.index()]) {
            best = Some(t);
        }
    }
    best
}

pub fn max_valid(q: &QList, mask: TurnMask) -> Option<f64> {
    greedy(q, mask).map(|t| q[t.index()])
}

pub fn random_valid<R: Rng + ?Sized>(mask: TurnMask, rng: &mut R) -> Option<Turn> {
    let valid: Vec<Turn> = mask.turns().collect();
    if valid.is_empty() {
        None
    } else {
        Some(valid[rng.gen_range(0..valid.len())])
    }
}

pub fn select_action<R: Rng + ?Sized>(q: &QList, mask: TurnMask, epsilon: f64, rng: &mut R) -> Result<Turn> {
    if mask.is_empty() {
        return Err(Error::Contract("action mask has no valid entry".into()));
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(random_valid(mask, rng).expect("mask checked"));
    }
    Ok(greedy(q, mask).expect("mask checked"))
}

/// Bootstrapped regression targets computed with the target store.
pub fn td_targets(net: &QNetwork, target: &ParamStore, batch: &[&Experience], gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|e| {
            if e.terminal {
                return Ok(e.reward);
            }
            let q = net.q_values(target, &e.next_state)?;
            let best = max_valid(&q, e.next_mask)
                .ok_or_else(|| Error::Contract("stored next mask is empty".into()))?;
            Ok(e.reward + gamma * best)
        })
        .collect()
}

/// Loss on the tape for a batch with fixed targets.
pub fn batch_loss(
    net: &QNetwork,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &[&Experience],
    targets: &[f64],
) -> Result<Var> {
    let mut picks = Vec::with_capacity(batch.len());
    for e in batch {
        let (q, _) = net.forward(tape, store, &e.state)?;
        picks.push(tape.pick(q, e.action.index())?);
    }
    let pred = tape.concat(&picks)?;
    let y = tape.leaf_f64(vec![targets.len()], targets.to_vec())?;
    Ok(tape.mse(pred, y)?)
}

/// One SGD step on the primary store. Returns the loss before the step.
pub fn learn_step(net: &QNetwork, params: &mut AgentParams, batch: &[&Experience], cfg: &DqnConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty learning batch".into()));
    }
    let targets = td_targets(net, &params.target, batch, cfg.gamma)?;
    let mut tape = Tape::new();
    let loss = batch_loss(net, &mut tape, &params.primary, batch, &targets)?;
    let value = tape.scalar(loss);
    tape.backward(loss)?;
    params.primary.zero_grad();
    tape.accumulate_grads(&mut params.primary)?;
    if cfg.max_grad_norm > 0.0 {
        let norm = params.primary.grad_norm();
        if norm > cfg.max_grad_norm {
            params.primary.scale_grads(cfg.max_grad_norm / norm);
        }
    }
    params.primary.sgd_step(cfg.lr)?;
    params.learn_count += 1;
    if params.learn_count % cfg.target_sync == 0 {
        sync_copy(&params.primary, &mut params.target)?;
    }
    Ok(value)
}
