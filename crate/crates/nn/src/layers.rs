//! Declarative layer stacks built on top of the tape.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::{glorot_uniform, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    /// Same-size convolution with a square kernel.
    Conv2d { kernel: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            activation,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv2d { kernel },
            fan_in: in_channels,
            fan_out: out_channels,
            activation,
        }
    }
}

pub fn validate_stack(layers: &[LayerSpec]) -> Result<()> {
    for pair in layers.windows(2) {
        if pair[0].fan_out != pair[1].fan_in {
            return Err(NnError::Layers(format!(
                "{} outputs feed a layer expecting {}",
                pair[0].fan_out, pair[1].fan_in
            )));
        }
    }
    for l in layers {
        if let LayerKind::Conv2d { kernel } = l.kind {
            if kernel % 2 == 0 {
                return Err(NnError::Layers(format!("even kernel size {kernel}")));
            }
        }
        if l.fan_in == 0 || l.fan_out == 0 {
            return Err(NnError::Layers("zero-width layer".into()));
        }
    }
    Ok(())
}

fn weight_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.{i}.w")
}

fn bias_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.{i}.b")
}

/// Registers `prefix.{i}.w` / `prefix.{i}.b` for every layer. Biases start at zero.
pub fn init_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    layers: &[LayerSpec],
    rng: &mut R,
) -> Result<()> {
    validate_stack(layers)?;
    for (i, l) in layers.iter().enumerate() {
        let (shape, fan_in, fan_out) = match l.kind {
            LayerKind::Dense => (vec![l.fan_out, l.fan_in], l.fan_in, l.fan_out),
            LayerKind::Conv2d { kernel } => (
                vec![l.fan_out, l.fan_in, kernel, kernel],
                l.fan_in * kernel * kernel,
                l.fan_out * kernel * kernel,
            ),
        };
        store.insert(weight_name(prefix, i), glorot_uniform(shape, fan_in, fan_out, rng))?;
        store.insert(bias_name(prefix, i), Tensor::zeros(vec![l.fan_out]))?;
    }
    Ok(())
}

pub fn forward_stack(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    layers: &[LayerSpec],
    mut x: Var,
) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        let w = tape.param(store, &weight_name(prefix, i))?;
        let b = tape.param(store, &bias_name(prefix, i))?;
        x = match l.kind {
            LayerKind::Dense => tape.dense(x, w, b)?,
            LayerKind::Conv2d { .. } => tape.conv2d(x, w, b)?,
        };
        if l.activation == Activation::Relu {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Zeroes the weights and bias of layer `index` (used for fixtures).
pub fn zero_layer(store: &mut ParamStore, prefix: &str, index: usize) -> Result<()> {
    for name in [weight_name(prefix, index), bias_name(prefix, index)] {
        let t = store
            .get_mut(&name)
            .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mismatched_stack_is_rejected() {
        let layers = [
            LayerSpec::dense(4, 8, Activation::Relu),
            LayerSpec::dense(7, 1, Activation::Identity),
        ];
        assert!(validate_stack(&layers).is_err());
    }

    #[test]
    fn stack_forward_has_expected_width() {
        let layers = [
            LayerSpec::dense(4, 8, Activation::Relu),
            LayerSpec::dense(8, 2, Activation::Identity),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_stack(&mut store, "mlp", &layers, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf_f64(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = forward_stack(&mut tape, &store, "mlp", &layers, x).unwrap();
        assert_eq!(tape.shape(y), &[2]);
    }

    #[test]
    fn zeroed_last_layer_outputs_zero() {
        let layers = [
            LayerSpec::dense(3, 5, Activation::Relu),
            LayerSpec::dense(5, 1, Activation::Identity),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_stack(&mut store, "m", &layers, &mut rng).unwrap();
        zero_layer(&mut store, "m", 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf_f64(vec![3], vec![3.0, -1.0, 2.0]).unwrap();
        let y = forward_stack(&mut tape, &store, "m", &layers, x).unwrap();
        assert_eq!(tape.scalar(y), 0.0);
    }
}
