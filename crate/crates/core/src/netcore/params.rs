use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Named parameter tensors, iterated in path order.
///
/// Every set carries a process-unique id and a version counter that is bumped
/// on each mutation, so a [`Tape`](super::Tape) can detect that it was
/// recorded against different values. Cloning yields a new identity.
#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    version: u64,
    frozen: bool,
    entries: BTreeMap<String, Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            version: 0,
            frozen: self.frozen,
            entries: self.entries.clone(),
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            version: 0,
            frozen: false,
            entries: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Deep copy that rejects mutation.
    pub fn frozen_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = true;
        copy
    }

    /// Deep copy that accepts mutation.
    pub fn thawed_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }

    fn check_mutable(&self, path: &str) -> Result<()> {
        if self.frozen {
            Err(Error::Frozen(path.to_string()))
        } else {
            Ok(())
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        self.check_mutable(&path)?;
        if self.entries.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        self.entries.insert(path, value);
        self.version += 1;
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Replaces the value at `path`, which must already exist with the same shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        self.check_mutable(path)?;
        let slot = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                path,
                format!("set {:?} over {:?}", value.shape(), slot.shape()),
            ));
        }
        *slot = value;
        self.version += 1;
        Ok(())
    }

    /// Applies `f` to every tensor in path order as one mutation.
    pub fn update<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(&str, &mut Tensor) -> Result<()>,
    {
        self.check_mutable("*")?;
        for (path, t) in self.entries.iter_mut() {
            f(path, t)?;
        }
        self.version += 1;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Zero-valued set with identical paths and shapes.
    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::new();
        for (k, v) in &self.entries {
            out.entries.insert(k.clone(), Tensor::zeros(v.shape()));
        }
        out
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape("params", "parameter layouts differ"))
        }
    }

    /// `self += other`, used to accumulate gradients across micro-batches.
    pub fn accumulate(&mut self, other: &ParamSet) -> Result<()> {
        self.accumulate_scaled(1.0, other)
    }

    pub fn accumulate_scaled(&mut self, scale: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        self.check_mutable("*")?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.scaled_add_assign(scale, b);
        }
        self.version += 1;
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) -> Result<()> {
        self.update(|_, t| {
            t.scale(factor);
            Ok(())
        })
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sq_norm).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// Flat scalar view: `(path, index within tensor)` for the k-th scalar.
    pub fn locate(&self, mut k: usize) -> Option<(&str, usize)> {
        for (path, t) in &self.entries {
            if k < t.numel() {
                return Some((path, k));
            }
            k -= t.numel();
        }
        None
    }

    pub(crate) fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.check_mutable(path)?;
        self.version += 1;
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub(crate) fn scalar_mut(&mut self, path: &str, index: usize) -> Result<&mut f64> {
        self.check_mutable(path)?;
        self.version += 1;
        let t = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))?;
        Ok(&mut t.data_mut()[index])
    }

    /// SHA-256 over paths, shapes and little-endian values; first 16 hex digits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            for e in v.shape() {
                h.update((*e as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex16(&h.finalize())
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}
