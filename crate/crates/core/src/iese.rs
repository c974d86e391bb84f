//! State encoders feeding the per-agent Q-head.
//!
//! The information-enhanced encoder runs one small convolution stack per
//! position matrix, attends from the ego pursuer's pooled features over
//! every cell of the evader feature map, and fuses the pooled ego/other
//! features with the attention output through two dense layers. The flat
//! encoder used by the ablation variants replaces all of that with a single
//! dense layer over the concatenated matrices.

use hcmvp_nn::layers::{forward_stack, init_stack};
use hcmvp_nn::{Activation, LayerSpec, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::state_codec::AgentState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IeseSpec {
    /// Output channels of each convolution in a branch.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Key/value/query width `d`.
    pub attention_dim: usize,
    /// Encoded state width `d_s`.
    pub output_dim: usize,
}

impl Default for IeseSpec {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 8],
            kernel: 3,
            attention_dim: 32,
            output_dim: 128,
        }
    }
}

impl IeseSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(ConfigError::invalid("iese.conv_channels", "need at least one non-zero layer"));
        }
        if self.kernel % 2 == 0 {
            return Err(ConfigError::invalid("iese.kernel", "must be odd"));
        }
        if self.attention_dim == 0 {
            return Err(ConfigError::invalid("iese.attention_dim", "must be positive"));
        }
        if self.output_dim == 0 {
            return Err(ConfigError::invalid("iese.output_dim", "must be positive"));
        }
        Ok(())
    }

    fn branch(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut c_in = 1;
        for &c in &self.conv_channels {
            layers.push(LayerSpec::conv(c_in, c, self.kernel, Activation::Relu));
            c_in = c;
        }
        layers
    }

    fn features(&self) -> usize {
        *self.conv_channels.last().expect("validated")
    }

    fn fuse(&self) -> [LayerSpec; 2] {
        let width = 2 * self.features() + self.attention_dim;
        [
            LayerSpec::dense(width, self.output_dim, Activation::Relu),
            LayerSpec::dense(self.output_dim, self.output_dim, Activation::Relu),
        ]
    }
}

/// Input scaling applied before the first layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divisors {
    pub sf: f64,
    pub sp_other: f64,
    pub se: f64,
}

impl Divisors {
    pub fn for_counts(pursuers: usize, evaders: usize) -> Self {
        Self {
            sf: 1.0,
            sp_other: pursuers.saturating_sub(1).max(1) as f64,
            se: evaders.max(1) as f64,
        }
    }

    pub fn record(&self, store: &mut ParamStore) {
        store.set_meta("divisor.sf", self.sf);
        store.set_meta("divisor.sp_other", self.sp_other);
        store.set_meta("divisor.se", self.se);
    }

    pub fn from_store(store: &ParamStore) -> Option<Self> {
        let read = |k: &str| store.meta(k).and_then(|v| v.parse().ok());
        Some(Self {
            sf: read("divisor.sf")?,
            sp_other: read("divisor.sp_other")?,
            se: read("divisor.se")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Iese(IeseSpec),
    /// Dense `3·rows·cols -> width` + ReLU.
    Flat { width: usize },
}

/// Result of one encoder pass.
pub struct Encoded {
    pub state: Var,
    /// Attention node, absent for the flat encoder or when no evader is alive.
    pub attention: Option<Var>,
}

const PREFIX: &str = "enc";

thread_local! {
    static IESE_PASSES: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Information-enhanced encoder passes made on this thread so far.
pub fn iese_passes() -> usize {
    IESE_PASSES.with(|c| c.get())
}

impl Encoder {
    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Iese(spec) => spec.output_dim,
            Encoder::Flat { width } => *width,
        }
    }

    pub fn is_iese(&self) -> bool {
        matches!(self, Encoder::Iese(_))
    }

    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> hcmvp_nn::Result<()> {
        match self {
            Encoder::Iese(spec) => {
                let branch = spec.branch();
                for name in ["sf", "sp", "se"] {
                    init_stack(store, &format!("{PREFIX}.{name}"), &branch, rng)?;
                }
                let f = spec.features();
                let proj = [LayerSpec::dense(f, spec.attention_dim, Activation::Identity)];
                init_stack(store, &format!("{PREFIX}.key"), &proj, rng)?;
                init_stack(store, &format!("{PREFIX}.query"), &proj, rng)?;
                init_stack(store, &format!("{PREFIX}.fuse"), &spec.fuse(), rng)?;
            }
            Encoder::Flat { width } => {
                let layer = [LayerSpec::dense(3 * rows * cols, *width, Activation::Relu)];
                init_stack(store, &format!("{PREFIX}.flat"), &layer, rng)?;
            }
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        div: &Divisors,
        s: &AgentState,
    ) -> hcmvp_nn::Result<Encoded> {
        let (rows, cols) = (s.sf.rows(), s.sf.cols());
        match self {
            Encoder::Flat { width } => {
                let mut x = s.sf.scaled(div.sf);
                x.extend(s.sp_other.scaled(div.sp_other));
                x.extend(s.se.scaled(div.se));
                let x = tape.leaf_f64(vec![x.len()], x)?;
                let layer = [LayerSpec::dense(3 * rows * cols, *width, Activation::Relu)];
                let state = forward_stack(tape, store, &format!("{PREFIX}.flat"), &layer, x)?;
                Ok(Encoded { state, attention: None })
            }
            Encoder::Iese(spec) => {
                IESE_PASSES.with(|c| c.set(c.get() + 1));
                let branch = spec.branch();
                let run = |tape: &mut Tape, name: &str, values: Vec<f64>| {
                    let x = tape.leaf_f64(vec![1, rows, cols], values)?;
                    forward_stack(tape, store, &format!("{PREFIX}.{name}"), &branch, x)
                };
                let f_sf = run(tape, "sf", s.sf.scaled(div.sf))?;
                let f_sp = run(tape, "sp", s.sp_other.scaled(div.sp_other))?;
                let f_se = run(tape, "se", s.se.scaled(div.se))?;
                let pooled_sf = tape.mean_pool(f_sf)?;
                let pooled_sp = tape.mean_pool(f_sp)?;

                let (target, attention) = if s.se.is_zero() {
                    (tape.leaf_f64(vec![spec.attention_dim], vec![0.0; spec.attention_dim])?, None)
                } else {
                    let f = spec.features();
                    let proj = [LayerSpec::dense(f, spec.attention_dim, Activation::Identity)];
                    let tokens = tape.tokens(f_se)?;
                    let keys = forward_stack(tape, store, &format!("{PREFIX}.key"), &proj, tokens)?;
                    let query = forward_stack(tape, store, &format!("{PREFIX}.query"), &proj, pooled_sf)?;
                    let out = tape.attention(keys, keys, query)?;
                    (out, Some(out))
                };
                let joined = tape.concat(&[pooled_sf, pooled_sp, target])?;
                let state = forward_stack(tape, store, &format!("{PREFIX}.fuse"), &spec.fuse(), joined)?;
                Ok(Encoded { state, attention })
            }
        }
    }
}
