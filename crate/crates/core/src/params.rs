//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint format.
//!
//! Parameters live outside the tape; each training step injects the ones it
//! touches as leaves and reads their gradients back after `backward`.
//! Buffers (batch-norm running statistics) are read and written directly
//! and never appear on the tape.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tape, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Optimized by the training loop and injected as a tape leaf.
    Trainable,
    /// Persistent state (running statistics); never on the tape.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct Slot<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub kind: SlotKind,
}

/// Flat, name-indexed store of parameters and buffers.
pub struct ParamStore<S: Scalar> {
    slots: Vec<Slot<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            slots: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<S>,
        kind: SlotKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "param",
                format!("{name}: shape {shape:?} vs {} values", data.len()),
            ));
        }
        let id = self.slots.len();
        self.by_name.insert(name.clone(), id);
        self.slots.push(Slot {
            name,
            shape,
            data,
            kind,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, id: ParamId) -> &Slot<S> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut Slot<S> {
        &mut self.slots[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Slot<S>)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    /// Total element count of trainable slots.
    pub fn trainable_numel(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind == SlotKind::Trainable)
            .map(|s| s.data.len())
            .sum()
    }
}

/// He-style fan-in normal initialization: `N(0, sqrt(2 / fan_in))`.
pub fn he_init<S: Scalar>(rng: &mut ChaCha8Rng, numel: usize, fan_in: usize) -> Vec<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..numel).map(|_| cast(dist.sample(rng))).collect()
}

/// Per-forward-pass map from parameters to tape leaves, created lazily so a
/// graph only references the parameters it actually uses.
pub struct Leaves {
    ids: Vec<Option<TensorId>>,
    with_grad: bool,
}

impl Leaves {
    pub fn new<S: Scalar>(ps: &ParamStore<S>, with_grad: bool) -> Self {
        Leaves {
            ids: vec![None; ps.len()],
            with_grad,
        }
    }

    pub fn get<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        ps: &ParamStore<S>,
        p: ParamId,
    ) -> TensorId {
        if let Some(id) = self.ids[p.0] {
            return id;
        }
        let slot = &ps.slot(p);
        debug_assert_eq!(slot.kind, SlotKind::Trainable, "buffers never join the tape");
        let id = tape
            .leaf(&slot.shape, slot.data.clone(), self.with_grad)
            .expect("store slot is internally consistent");
        self.ids[p.0] = Some(id);
        id
    }

    /// Parameters referenced by the graph built so far.
    pub fn used(&self) -> Vec<(ParamId, TensorId)> {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.map(|t| (ParamId(i), t)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("a.weight", vec![2], vec![0.0; 2], SlotKind::Trainable)
            .unwrap();
        assert!(ps
            .add("a.weight", vec![2], vec![0.0; 2], SlotKind::Trainable)
            .is_err());
    }

    #[test]
    fn he_init_scale_tracks_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = he_init(&mut rng, 20_000, 50);
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 0.04).abs() < 0.004, "sample variance {var}");
    }

    #[test]
    fn leaves_are_lazy_and_cached() {
        let mut ps = ParamStore::<f32>::new();
        let a = ps
            .add("a", vec![1], vec![1.0], SlotKind::Trainable)
            .unwrap();
        let b = ps
            .add("b", vec![1], vec![2.0], SlotKind::Trainable)
            .unwrap();
        let mut tape = Tape::<f32>::new();
        let mut lv = Leaves::new(&ps, true);
        let ia = lv.get(&mut tape, &ps, a);
        let ia2 = lv.get(&mut tape, &ps, a);
        assert_eq!(ia, ia2);
        assert_eq!(tape.len(), 1);
        assert_eq!(lv.used().len(), 1);
        let _ = b;
    }
}
