use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store; optimizer state is indexed the same way.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by an optimizer.
    Trainable,
    /// Persistent state that is not learned by gradient (running statistics).
    Buffer,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-b, b) with b = 1/sqrt(fan_in); the usual default for conv and
    /// linear layers.
    FanInUniform {
        fan_in: usize,
    },
    /// N(0, 2/fan_in), for ReLU networks.
    KaimingNormal {
        fan_in: usize,
    },
}

#[derive(Clone, Debug)]
struct Entry<S> {
    name: String,
    kind: ParamKind,
    value: Tensor<S>,
}

/// Every tensor a network owns, addressed by [`ParamId`]. Layers hold ids,
/// not tensors, so a network definition is immutable and shareable while
/// the store is what optimizers and checkpoints operate on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| S::of(dist.sample(rng))).collect()
            }
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| S::of(dist.sample(rng))).collect()
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.into(),
            kind,
            value: Tensor::from_vec(shape, data).expect("shape matches generated data"),
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every entry.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Replaces every value from `(name, tensor)` pairs in store order.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<S>)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Consistency(format!(
                "checkpoint has {} tensors, network expects {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(values) {
            if entry.name != name || entry.value.shape() != value.shape() {
                return Err(Error::Consistency(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = value;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradient accumulators parallel to a [`ParamStore`], allocated lazily.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn for_store(store: &ParamStore<S>) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    /// Mutable accumulator for `id`, zero-initialized on first use.
    pub fn slot(&mut self, id: ParamId, shape: &[usize]) -> &mut [S] {
        self.slots[id.0]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.slots[id.0].as_ref()
    }

    pub fn zero(&mut self) {
        for s in self.slots.iter_mut().flatten() {
            s.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let id = store.add(
            "w",
            &[2, 3],
            ParamKind::Trainable,
            Init::FanInUniform { fan_in: 3 },
            &mut rng,
        );
        let before = store.checksum();
        assert_eq!(before, store.clone().checksum());
        store.get_mut(id).data_mut()[0] += 1.0;
        assert_ne!(before, store.checksum());
    }

    #[test]
    fn load_values_rejects_wrong_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[2], ParamKind::Trainable, Init::Zeros, &mut rng);
        let bad = vec![("v".to_string(), Tensor::zeros(&[2]))];
        assert!(store.load_values(bad).is_err());
    }
}
