use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named, ordered parameter collection with a gradient slot per parameter
/// and free-form string metadata (input divisors, creation seed, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        let grad = vec![0.0; value.len()];
        self.entries.push(Entry { name, value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.entries[i].grad.as_slice())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(|s| s.as_str())
    }

    pub(crate) fn add_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let slot = &mut self.entries[i].grad;
        if slot.len() != grad.len() {
            return Err(shape_err("add_grad", format!("`{name}`: {} vs {}", slot.len(), grad.len())));
        }
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Plain SGD, `p <- p - lr * grad`. Gradient slots are cleared afterwards.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        for e in &mut self.entries {
            for (p, g) in e.value.data_mut().iter_mut().zip(&e.grad) {
                let next = *p as f64 - lr * g;
                if !next.is_finite() {
                    return Err(NnError::NonFinite { op: "sgd_step" });
                }
                *p = next as f32;
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Checks that both stores carry the same names and shapes, in order.
    pub fn same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(NnError::StoreMismatch(format!(
                "{} vs {} parameters",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(NnError::StoreMismatch(a.name.clone()));
            }
        }
        Ok(())
    }
}

/// Makes every parameter of `dst` bitwise equal to the one in `src`.
/// Metadata is copied too; gradient slots of `dst` are cleared.
pub fn sync_copy(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    src.same_layout(dst)?;
    for (d, s) in dst.entries.iter_mut().zip(&src.entries) {
        d.value.data_mut().copy_from_slice(s.value.data());
        d.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    dst.metadata = src.metadata.clone();
    Ok(())
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("glorot shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_moves_a_scalar_parameter_by_the_hand_derivative() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let target = tape.leaf_f64(vec![1], vec![0.0]).unwrap();
        let loss = tape.mse(p, target).unwrap();
        assert_eq!(tape.scalar(loss), 4.0);
        tape.backward(loss).unwrap();
        tape.accumulate_grads(&mut store).unwrap();
        store.sgd_step(0.001).unwrap();
        let moved = store.get("p").unwrap().data()[0] as f64 - 2.0;
        assert!((moved + 0.004).abs() < 1e-6, "moved by {moved}");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            store.insert("w", Tensor::zeros(vec![2])),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn sync_copy_requires_matching_layout() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(vec![2])).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(vec![3])).unwrap();
        assert!(sync_copy(&a, &mut b).is_err());
    }

    #[test]
    fn glorot_respects_its_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = glorot_uniform(vec![10, 20], 20, 10, &mut rng);
        let limit = (6.0f32 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
    }
}
