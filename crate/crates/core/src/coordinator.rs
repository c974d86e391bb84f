//! Global scorer over (traffic information, Q-matrix) pairs and the greedy
//! row-swap search for a joint action.

use hcmvp_nn::layers::{forward_stack, init_stack};
use hcmvp_nn::{Activation, LayerSpec, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dqn_agent::{greedy, QList};
use crate::error::{ConfigError, Error, Result};
use crate::road_network::{Turn, TurnMask};
use crate::state_codec::EnvInfo;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordinatorConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub learn_every: usize,
    /// Rescale gradients whose global norm exceeds this; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            lr: 0.001,
            buffer_capacity: 10_000,
            batch_size: 32,
            learn_every: 1,
            max_grad_norm: 0.0,
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if self.hidden.contains(&0) {
            return Err(ConfigError::invalid("coordinator.hidden", "zero-width layer"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::invalid("coordinator.lr", "must be positive"));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(ConfigError::invalid("coordinator.max_grad_norm", "must be >= 0"));
        }
        for (k, v) in [
            ("coordinator.buffer_capacity", self.buffer_capacity),
            ("coordinator.batch_size", self.batch_size),
            ("coordinator.learn_every", self.learn_every),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(k, "must be positive"));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(ConfigError::invalid("coordinator.batch_size", "exceeds buffer capacity"));
        }
        Ok(())
    }
}

/// One Q-list per pursuer with its validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    pub rows: Vec<QList>,
    pub masks: Vec<TurnMask>,
}

impl QMatrix {
    pub fn new(rows: Vec<QList>, masks: Vec<TurnMask>) -> Result<Self> {
        if rows.len() != masks.len() {
            return Err(Error::Contract(format!("{} Q rows but {} masks", rows.len(), masks.len())));
        }
        if masks.iter().any(|m| m.is_empty()) {
            return Err(Error::Contract("Q-matrix row without a valid action".into()));
        }
        if rows.iter().flatten().any(|q| !q.is_finite()) {
            return Err(Error::Contract("non-finite Q value".into()));
        }
        Ok(Self { rows, masks })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn argmax(&self, m: usize) -> Turn {
        greedy(&self.rows[m], self.masks[m]).expect("mask rows are non-empty")
    }

    /// Exchanges the values of `turn` and the current argmax in row `m`.
    pub fn promote(&mut self, m: usize, turn: Turn) {
        let best = self.argmax(m);
        self.rows[m].swap(best.index(), turn.index());
    }

    /// Swaps two entries of row `m`.
    pub fn swap_entries(&mut self, m: usize, a: Turn, b: Turn) {
        self.rows[m].swap(a.index(), b.index());
    }
}

/// Per-row masked argmax with lowest-index ties.
pub fn actions_from(qm: &QMatrix) -> Vec<Turn> {
    (0..qm.len()).map(|m| qm.argmax(m)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinatorNet {
    pub hidden: Vec<usize>,
    pub cells: usize,
    pub lanes: usize,
    pub pursuers: usize,
    pub evaders: usize,
    pub background: usize,
}

const PREFIX: &str = "coord";

thread_local! {
    static CONSTRUCTED: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
    static PASSES: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Coordinator stores initialized and forward passes made on this thread.
pub fn coordinator_calls() -> (usize, usize) {
    (CONSTRUCTED.with(|c| c.get()), PASSES.with(|c| c.get()))
}

impl CoordinatorNet {
    pub fn input_len(&self) -> usize {
        2 * self.cells + self.lanes + 3 * self.pursuers
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut width = self.input_len();
        for &h in &self.hidden {
            layers.push(LayerSpec::dense(width, h, Activation::Relu));
            width = h;
        }
        layers.push(LayerSpec::dense(width, 1, Activation::Identity));
        layers
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        CONSTRUCTED.with(|c| c.set(c.get() + 1));
        let mut store = ParamStore::new();
        init_stack(&mut store, PREFIX, &self.layers(), rng)?;
        let (sp, se, bn) = self.divisors();
        store.set_meta("divisor.sp", sp);
        store.set_meta("divisor.se", se);
        store.set_meta("divisor.bn", bn);
        Ok(store)
    }

    /// Index of the output layer, for fixtures that zero it.
    pub fn output_layer(&self) -> usize {
        self.hidden.len()
    }

    pub fn prefix(&self) -> &'static str {
        PREFIX
    }

    fn divisors(&self) -> (f64, f64, f64) {
        (
            self.pursuers.max(1) as f64,
            self.evaders.max(1) as f64,
            self.background.max(1) as f64,
        )
    }

    /// `[SP/M, SE/N, BN/B, QM]` flattened.
    pub fn features(&self, x: &EnvInfo, qm: &QMatrix) -> Result<Vec<f64>> {
        if x.sp.data().len() != self.cells || x.se.data().len() != self.cells || x.bn.len() != self.lanes {
            return Err(Error::Contract("traffic information does not match the coordinator".into()));
        }
        if qm.len() != self.pursuers {
            return Err(Error::Contract(format!(
                "Q-matrix has {} rows, expected {}",
                qm.len(),
                self.pursuers
            )));
        }
        let (sp, se, bn) = self.divisors();
        let mut f = Vec::with_capacity(self.input_len());
        f.extend(x.sp.scaled(sp));
        f.extend(x.se.scaled(se));
        f.extend(x.bn.iter().map(|&c| c as f64 / bn));
        f.extend(qm.rows.iter().flatten());
        Ok(f)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &EnvInfo, qm: &QMatrix) -> Result<Var> {
        PASSES.with(|c| c.set(c.get() + 1));
        let f = self.features(x, qm)?;
        let input = tape.leaf_f64(vec![f.len()], f)?;
        Ok(forward_stack(tape, store, PREFIX, &self.layers(), input)?)
    }

    pub fn q_tot(&self, store: &ParamStore, x: &EnvInfo, qm: &QMatrix) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, x, qm)?;
        Ok(tape.value(out)[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointChoice {
    pub qm: QMatrix,
    pub actions: Vec<Turn>,
    pub score: f64,
    pub initial_score: f64,
    pub evaluations: usize,
    pub improvements: usize,
}

/// Single greedy sweep over pursuers. For each row, every valid action
/// other than the row's argmax at the start of that row is promoted in
/// turn; a candidate replaces the incumbent only if it scores strictly
/// higher.
pub fn optimize_joint(net: &CoordinatorNet, store: &ParamStore, x: &EnvInfo, qm: &QMatrix) -> Result<JointChoice> {
    let initial_score = net.q_tot(store, x, qm)?;
    let mut best = qm.clone();
    let mut score = initial_score;
    let mut evaluations = 1;
    let mut improvements = 0;
    for m in 0..qm.len() {
        let start = best.argmax(m);
        let alternatives: Vec<Turn> = best.masks[m].turns().filter(|&t| t != start).collect();
        for a in alternatives {
            let mut candidate = best.clone();
            candidate.promote(m, a);
            let s = net.q_tot(store, x, &candidate)?;
            evaluations += 1;
            if s > score {
                best = candidate;
                score = s;
                improvements += 1;
            }
        }
    }
    Ok(JointChoice {
        actions: actions_from(&best),
        qm: best,
        score,
        initial_score,
        evaluations,
        improvements,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalExperience {
    pub env: EnvInfo,
    /// The matrix whose per-row argmax was executed.
    pub qm: QMatrix,
    pub reward: f64,
}

/// One SGD step regressing `Q_tot` on the global reward. Returns the loss
/// before the step.
pub fn learn_step(
    net: &CoordinatorNet,
    store: &mut ParamStore,
    batch: &[&GlobalExperience],
    cfg: &CoordinatorConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty learning batch".into()));
    }
    let mut tape = Tape::new();
    let mut preds = Vec::with_capacity(batch.len());
    for e in batch {
        preds.push(net.forward(&mut tape, store, &e.env, &e.qm)?);
    }
    let pred = tape.concat(&preds)?;
    let target = tape.leaf_f64(vec![batch.len()], batch.iter().map(|e| e.reward).collect())?;
    let loss = tape.mse(pred, target)?;
    let value = tape.scalar(loss);
    tape.backward(loss)?;
    store.zero_grad();
    tape.accumulate_grads(store)?;
    if cfg.max_grad_norm > 0.0 {
        let norm = store.grad_norm();
        if norm > cfg.max_grad_norm {
            store.scale_grads(cfg.max_grad_norm / norm);
        }
    }
    store.sgd_step(cfg.lr)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_codec::CountMatrix;
    use hcmvp_nn::layers::zero_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(pursuers: usize) -> (CoordinatorNet, EnvInfo) {
        let net = CoordinatorNet {
            hidden: vec![16, 8],
            cells: 6,
            lanes: 4,
            pursuers,
            evaders: 1,
            background: 2,
        };
        let mut sp = CountMatrix::zeros(2, 3);
        sp.increment(0, 0);
        let mut se = CountMatrix::zeros(2, 3);
        se.increment(1, 2);
        let env = EnvInfo {
            sp,
            se,
            bn: vec![1, 0, 1, 0],
        };
        (net, env)
    }

    #[test]
    fn argmax_examples() {
        let all = TurnMask::ALL;
        let qm = QMatrix::new(
            vec![[0.1, 0.9, 0.3], [0.9, 0.9, 0.1], [0.9, 0.5, 0.1]],
            vec![all, all, TurnMask([false, true, true])],
        )
        .unwrap();
        assert_eq!(actions_from(&qm), vec![Turn::Right, Turn::Left, Turn::Right]);
    }

    #[test]
    fn zero_output_layer_never_improves() {
        let (net, env) = fixture(3);
        let mut store = net.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        zero_layer(&mut store, PREFIX, net.output_layer()).unwrap();
        let qm = QMatrix::new(vec![[0.3, 0.1, 0.2]; 3], vec![TurnMask::ALL; 3]).unwrap();
        let out = optimize_joint(&net, &store, &env, &qm).unwrap();
        assert_eq!(out.score, 0.0);
        assert_eq!(out.qm, qm);
        assert_eq!(out.actions, vec![Turn::Left; 3]);
        assert_eq!(out.evaluations, 7);
        assert_eq!(out.improvements, 0);
    }

    #[test]
    fn single_agent_search_is_exhaustive() {
        let (net, env) = fixture(1);
        for seed in 0..20 {
            let store = net.init(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let qm = QMatrix::new(vec![[0.5, -0.2, 0.1]], vec![TurnMask::ALL]).unwrap();
            let out = optimize_joint(&net, &store, &env, &qm).unwrap();
            // Replay the sweep: each accepted candidate becomes the base.
            let mut base = qm.clone();
            let mut best = net.q_tot(&store, &env, &qm).unwrap();
            for a in [Turn::Right, Turn::Straight] {
                let mut c = base.clone();
                c.promote(0, a);
                let s = net.q_tot(&store, &env, &c).unwrap();
                if s > best {
                    best = s;
                    base = c;
                }
            }
            assert_eq!(out.score, best);
        }
    }

    #[test]
    fn learning_on_an_exact_fit_is_a_no_op() {
        let (net, env) = fixture(2);
        let mut store = net.init(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let qm = QMatrix::new(vec![[0.0; 3]; 2], vec![TurnMask::ALL; 2]).unwrap();
        let reward = net.q_tot(&store, &env, &qm).unwrap();
        let e = GlobalExperience { env, qm, reward };
        let before = store.clone();
        let loss = learn_step(&net, &mut store, &[&e, &e], &CoordinatorConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        for (name, t) in before.iter() {
            assert_eq!(store.get(name).unwrap(), t);
        }
    }

    #[test]
    fn malformed_inputs_are_contract_errors() {
        assert!(QMatrix::new(vec![[0.0; 3]], vec![TurnMask([false; 3])]).is_err());
        assert!(QMatrix::new(vec![[f64::NAN, 0.0, 0.0]], vec![TurnMask::ALL]).is_err());
        let (net, env) = fixture(2);
        let store = net.init(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let qm = QMatrix::new(vec![[0.0; 3]], vec![TurnMask::ALL]).unwrap();
        assert!(net.q_tot(&store, &env, &qm).is_err());
    }
}
