//! Named parameter tensors, Adam/SGD updates, and checkpoints.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot<S> {
    value: Tensor<S>,
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Parameters keyed by unique name, in insertion order, with per-parameter
/// optimizer moments and a shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    slots: IndexMap<String, Slot<S>>,
    grads: GradBuffer<S>,
    step: u64,
    optimizer: Optimizer,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::with_optimizer(Optimizer::default())
    }

    pub fn with_optimizer(optimizer: Optimizer) -> Self {
        Self { slots: IndexMap::new(), grads: GradBuffer::default(), step: 0, optimizer }
    }

    pub fn optimizer(&self) -> Optimizer {
        self.optimizer
    }

    pub fn set_optimizer(&mut self, optimizer: Optimizer) {
        self.optimizer = optimizer;
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        self.grads.tensors.push(Tensor::zeros(r, c));
        self.slots.insert(name, Slot { value, m: Tensor::zeros(r, c), v: Tensor::zeros(r, c) });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.get_index_of(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn value_at(&self, idx: usize) -> &Tensor<S> {
        &self.slots[idx].value
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.slots[idx].value
    }

    pub fn name_at(&self, idx: usize) -> &str {
        self.slots.get_index(idx).map(|(k, _)| k.as_str()).expect("parameter index in range")
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// A zeroed gradient buffer aligned with this store.
    pub fn grad_buffer(&self) -> GradBuffer<S> {
        GradBuffer { tensors: self.slots.values().map(|s| Tensor::zeros(s.value.rows(), s.value.cols())).collect() }
    }

    /// The store's own accumulated gradients.
    pub fn grads(&self) -> &GradBuffer<S> {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut GradBuffer<S> {
        &mut self.grads
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.grads.tensors[i])
    }

    /// Adds `scale · buf` into the store's gradients.
    pub fn accumulate(&mut self, buf: &GradBuffer<S>, scale: S) -> Result<()> {
        self.grads.add_scaled(buf, scale)
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    /// One optimizer step that descends the stored gradient, then zeroes it.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn apply(&mut self, lr: S) -> Result<()> {
        for (i, g) in self.grads.tensors.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(self.name_at(i).to_string()));
            }
        }
        self.step += 1;
        match self.optimizer {
            Optimizer::Sgd => {
                for (slot, g) in self.slots.values_mut().zip(&self.grads.tensors) {
                    for (p, &gv) in slot.value.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (S::c(beta1), S::c(beta2), S::c(eps));
                let t = self.step as i32;
                let bc1 = S::one() - b1.powi(t);
                let bc2 = S::one() - b2.powi(t);
                for (slot, g) in self.slots.values_mut().zip(&self.grads.tensors) {
                    let Slot { value, m, v } = slot;
                    for (((p, mv), vv), &gv) in
                        value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
                    {
                        *mv = b1 * *mv + (S::one() - b1) * gv;
                        *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        self.grads.zero();
        Ok(())
    }

    /// Flattens all parameter values in insertion order.
    pub fn flat_values(&self) -> Vec<S> {
        self.slots.values().flat_map(|s| s.value.data().iter().copied()).collect()
    }
}

/// Adam update with the standard constants.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, lr: S) -> Result<()> {
    store.set_optimizer(Optimizer::default());
    store.apply(lr)
}

/// Gradient tensors aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradBuffer<S> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> GradBuffer<S> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<S> {
        &self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub(crate) fn add_at(&mut self, idx: usize, g: &Tensor<S>) {
        self.tensors[idx].add_assign(g);
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(S::zero()));
    }

    pub fn add_scaled(&mut self, other: &GradBuffer<S>, scale: S) -> Result<()> {
        if other.tensors.len() != self.tensors.len() {
            return Err(Error::Argument("gradient buffers are not aligned".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Argument("gradient buffers are not aligned".into()));
            }
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: S) {
        self.tensors.iter_mut().for_each(|t| t.scale_assign(s));
    }

    pub fn flat(&self) -> Vec<S> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn norm(&self) -> S {
        self.tensors.iter().flat_map(|t| t.data()).fold(S::zero(), |s, &v| s + v * v).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset of the value block; moments follow as `m` then `v`.
    pub offset: u64,
}

/// Text half of a checkpoint. The blob stores, per parameter in manifest
/// order, the value, first moment and second moment as little-endian f64.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub step: u64,
    pub optimizer: Optimizer,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub const CHECKPOINT_FORMAT: &str = "apg-params-v1";

impl<S: Scalar> ParamStore<S> {
    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let entries = self
            .slots
            .iter()
            .map(|(name, s)| {
                let e = ManifestEntry { name: name.clone(), shape: [s.value.rows(), s.value.cols()], offset };
                offset += 3 * 8 * s.value.len() as u64;
                e
            })
            .collect();
        Manifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: "f64-le".into(),
            step: self.step,
            optimizer: self.optimizer,
            entries,
            meta: Default::default(),
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 24);
        for s in self.slots.values() {
            for t in [&s.value, &s.m, &s.v] {
                for &x in t.data() {
                    out.extend_from_slice(&x.f64().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_parts(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f64-le" {
            return Err(Error::Checkpoint(format!("unsupported format {}/{}", manifest.format, manifest.dtype)));
        }
        let mut store = Self::with_optimizer(manifest.optimizer);
        store.step = manifest.step;
        for e in &manifest.entries {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 24 * n;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("blob too short for `{}`", e.name)));
            }
            let read = |k: usize| {
                let data = (0..n)
                    .map(|i| {
                        let at = start + 8 * (k * n + i);
                        S::c(f64::from_le_bytes(blob[at..at + 8].try_into().expect("8 bytes")))
                    })
                    .collect();
                Tensor::from_vec(e.shape[0], e.shape[1], data)
            };
            store.insert(e.name.clone(), read(0)).map_err(|err| Error::Checkpoint(err.to_string()))?;
            let slot = store.slots.get_mut(&e.name).expect("just inserted");
            slot.m = read(1);
            slot.v = read(2);
        }
        Ok(store)
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path, meta: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        let mut manifest = self.manifest();
        manifest.meta = meta;
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(stem.with_extension("json"), json).map_err(io)?;
        fs::write(stem.with_extension("bin"), self.to_blob()).map_err(io)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(Self, Manifest)> {
        let io = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", stem.display()));
        let text = fs::read_to_string(stem.with_extension("json")).map_err(io)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let blob = fs::read(stem.with_extension("bin")).map_err(io)?;
        Ok((Self::from_parts(&manifest, &blob)?, manifest))
    }
}
