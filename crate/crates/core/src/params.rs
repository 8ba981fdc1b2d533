//! Named parameter storage shared by every module of the network.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the optimizer treats an entry.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics (batch norm); updated by forward passes in training mode.
    Buffer,
    /// Fixed forever (SRM residual filters).
    Frozen,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Trainable => "param",
            ParamKind::Buffer => "buffer",
            ParamKind::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "param" => Some(ParamKind::Trainable),
            "buffer" => Some(ParamKind::Buffer),
            "frozen" => Some(ParamKind::Frozen),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

/// Parameters keyed by module path (e.g. `decoder.stage3.block.conv.weight`).
/// Iteration order is the lexicographic key order, which fixes the layout of
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Gradients of trainable parameters, keyed like [`ParamStore`].
pub type Gradients = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry { kind, value: Arc::new(value) });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.value)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let e = self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        Ok(Arc::make_mut(&mut e.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self, kind: ParamKind) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| e.kind == kind).map(|(k, _)| k.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Round every stored value to the nearest `f32`, so that a checkpoint
    /// (which stores `f32`) reproduces the in-memory model exactly.
    pub fn quantize_f32(&mut self) {
        for e in self.entries.values_mut() {
            Arc::make_mut(&mut e.value).mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// SHA-256 over names, shapes and value bits of the entries of `kind`.
    pub fn digest(&self, kind: ParamKind) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter().filter(|(_, e)| e.kind == kind) {
            h.update(name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// He (fan-in) normal initialization for a (out, in, k, k) kernel.
pub fn he_kernel<R: Rng + ?Sized>(rng: &mut R, cout: usize, cin: usize, k: usize) -> Tensor {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_shape_simple_fn((cout, cin, k, k), || normal.sample(rng))
}

/// Per-channel vector stored as (1, C, 1, 1).
pub fn channel_vec(c: usize, v: f64) -> Tensor {
    Tensor::from_elem((1, c, 1, 1), v)
}
