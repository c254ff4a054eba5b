//! Named parameter and buffer storage plus initialization schemes.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable; receives gradients.
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor,
}

/// Flat, insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, kind: EntryKind, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry { name: name.to_string(), kind, value });
        ParamId(id)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, EntryKind::Param, value)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, EntryKind::Buffer, value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.entries[id.0].kind
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == EntryKind::Param)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Param).map(|e| e.value.len()).sum()
    }

    /// Trainable scalar count over entries whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Overwrites an existing entry; shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), String> {
        let id = self.id(name).ok_or_else(|| format!("unknown parameter {name}"))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// He/Kaiming normal for ReLU networks: std = sqrt(2 / fan_in).
    KaimingNormal { fan_in: usize },
    /// Zero-mean normal with explicit std.
    Normal { std: f64 },
    /// Glorot normal: std = sqrt(2 / (fan_in + fan_out)).
    XavierNormal { fan_in: usize, fan_out: usize },
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let std = match self {
            Init::Zeros => return Tensor::zeros(shape),
            Init::Constant(c) => return Tensor::full(shape, c),
            Init::KaimingNormal { fan_in } => (2.0 / fan_in.max(1) as f64).sqrt(),
            Init::Normal { std } => std,
            Init::XavierNormal { fan_in, fan_out } => (2.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
        };
        sample_normal(shape, std, rng)
    }
}

pub fn sample_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}
