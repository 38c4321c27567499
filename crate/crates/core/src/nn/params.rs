//! Parameter storage, gradient accumulation, Adam and checkpoints.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "CMSCCKPT"
//! version      u32      1
//! count        u32      number of entries
//! per entry:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   kind       u8       0 = trainable parameter, 1 = buffer (e.g. BN running stats)
//!   ndim       u32
//!   dims       ndim x u64
//!   data       prod(dims) x f64
//! ```
//!
//! Optimizer moments and freeze flags are not persisted.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};

const MAGIC: &[u8; 8] = b"CMSCCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-optimized state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub frozen: bool,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Param {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }
}

/// Named parameter tensors with freeze flags and Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let n = value.numel();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
            frozen: false,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn contains(&self, id: ParamId) -> bool {
        id.0 < self.params.len()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.frozen || p.kind == ParamKind::Buffer
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Sets the freeze flag on every entry whose name starts with `prefix`.
    /// Returns the number of entries touched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    /// True when every trainable entry under `prefix` is frozen.
    pub fn prefix_frozen(&self, prefix: &str) -> bool {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix) && p.kind == ParamKind::Trainable)
            .all(|p| p.frozen)
    }

    /// Bit patterns of every entry under `prefix`, for exact freeze checks.
    pub fn snapshot_prefix(&self, prefix: &str) -> Vec<(String, Vec<u64>)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    /// Resets Adam moments (used between training stages).
    pub fn reset_optimizer_state(&mut self) {
        for p in &mut self.params {
            p.first_moment.iter_mut().for_each(|v| *v = 0.0);
            p.second_moment.iter_mut().for_each(|v| *v = 0.0);
            p.step = 0;
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[match p.kind {
                ParamKind::Trainable => 0u8,
                ParamKind::Buffer => 1u8,
            }])?;
            w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads values into an already-built store. Every stored entry must exist
    /// with an identical shape, and every entry of `self` must be present.
    pub fn load_into<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut seen = vec![false; self.params.len()];
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected entry {name}")))?;
            if self.params[id.0].value.shape() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: stored {dims:?}, model {:?}",
                    self.params[id.0].value.shape()
                )));
            }
            self.params[id.0].value = Tensor::new(&dims, data)?;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing entry {}",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradient accumulator keyed by parameter id.
///
/// Built with [`Grads::for_store`], it skips frozen entries so layers can
/// avoid computing parameter gradients nobody will use.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    entries: BTreeMap<ParamId, Tensor>,
    wanted: Option<Vec<bool>>,
}

impl Grads {
    /// Accumulates gradients for every parameter.
    pub fn all() -> Self {
        Self::default()
    }

    /// Accumulates gradients only for unfrozen trainable parameters.
    pub fn for_store(store: &ParamStore) -> Self {
        Grads {
            entries: BTreeMap::new(),
            wanted: Some(
                (0..store.len())
                    .map(|i| !store.is_frozen(ParamId(i)))
                    .collect(),
            ),
        }
    }

    pub fn wants(&self, id: ParamId) -> bool {
        match &self.wanted {
            None => true,
            Some(w) => w.get(id.0).copied().unwrap_or(false),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor) {
        if !self.wants(id) {
            return;
        }
        match self.entries.get_mut(&id) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.entries.insert(id, g);
            }
        }
    }

    /// Accumulates through a closure that writes into the gradient buffer,
    /// allocating it on first use.
    pub fn accumulate_with(&mut self, id: ParamId, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        if !self.wants(id) {
            return;
        }
        let entry = self
            .entries
            .entry(id)
            .or_insert_with(|| Tensor::zeros(shape));
        f(entry.data_mut());
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.entries.insert(id, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.entries.values_mut() {
            g.scale(s);
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (id, g) in other.entries {
            self.accumulate(id, g);
        }
    }
}

/// Adam with the usual defaults (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every unfrozen trainable parameter present in
    /// `grads`. Frozen parameters and buffers are left bit-identical.
    pub fn step(&self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        for (id, g) in grads.iter() {
            if !store.contains(id) {
                return Err(Error::Usage(format!(
                    "gradient for unknown parameter {}",
                    id.0
                )));
            }
            if store.is_frozen(id) {
                continue;
            }
            let p = &mut store.params[id.0];
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    format!("adam({})", p.name),
                    p.value.shape(),
                    g.shape(),
                ));
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let values = p.value.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let m = self.beta1 * p.first_moment[i] + (1.0 - self.beta1) * gi;
                let v = self.beta2 * p.second_moment[i] + (1.0 - self.beta2) * gi * gi;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
