//! Named parameter tables and the binary checkpoint format.

use super::Tensor;
use crate::scalar::Scalar;
use std::collections::HashMap;
use std::io::{Read, Write};
use thiserror::Error;

pub type ParamId = usize;

/// Ordered map name -> tensor with stable integer ids. Iteration order is
/// insertion order, which fixes checkpoint layout and init sequences.
#[derive(Debug, Clone)]
pub struct ParamTable<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamTable<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamTable<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push((name, tensor));
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Replace values from another table matched by name. Every name and
    /// shape must match on both sides.
    pub fn load_from(&mut self, other: &ParamTable<S>) -> Result<(), CheckpointError> {
        if other.len() != self.len() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (_, name, tensor) in other.iter() {
            let id = self
                .id_of(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unexpected parameter {name:?}")))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "shape mismatch for {name:?}: {:?} vs {:?}",
                    self.get(id).shape(),
                    tensor.shape()
                )));
            }
            *self.get_mut(id) = tensor.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulators, parallel to a [`ParamTable`].
#[derive(Debug, Clone)]
pub struct GradTable<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradTable<S> {
    pub fn zeros_like(params: &ParamTable<S>) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<S>) {
        match &mut self.grads[id] {
            Some(existing) => existing.accumulate(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradTable<S>) {
        for (slot, g) in self.grads.iter_mut().zip(other.grads.iter()) {
            if let Some(g) = g {
                match slot {
                    Some(existing) => existing.accumulate(g),
                    empty => *empty = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads[id].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

const MAGIC: &[u8; 4] = b"HDGT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary layout: magic "HDGT", version u32, entry count u32, then per
/// entry: name length u32 + UTF-8 name, rank u32, dims u64 each, raw
/// little-endian f32 values.
pub fn save_checkpoint<S: Scalar, W: Write>(
    params: &ParamTable<S>,
    w: &mut W,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, tensor) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&(Scalar::to_f64(*v) as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<S: Scalar, R: Read>(r: &mut R) -> Result<ParamTable<S>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(r)? as usize;
    let mut table = ParamTable::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 1 << 20 {
            return Err(CheckpointError::Corrupt("oversized name".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(CheckpointError::Corrupt("oversized tensor".into()));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            data.push(S::from_f64(f32::from_le_bytes(b) as f64));
        }
        if table.id_of(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate name {name:?}")));
        }
        table.insert(name, Tensor::from_vec(&shape, data));
    }
    Ok(table)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact_for_f32() {
        let mut t = ParamTable::<f32>::new();
        t.insert("a.w", Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, 3.0, 4.5, -0.125]));
        t.insert("a.b", Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]));
        let mut buf = Vec::new();
        save_checkpoint(&t, &mut buf).unwrap();
        let loaded: ParamTable<f32> = load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get(loaded.id_of("a.w").unwrap()), t.get(0));
        assert_eq!(loaded.get(loaded.id_of("a.b").unwrap()), t.get(1));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        match load_checkpoint::<f32, _>(&mut buf.as_slice()) {
            Err(CheckpointError::BadMagic) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let mut t = ParamTable::<f32>::new();
        t.insert("w", Tensor::from_vec(&[2, 2], vec![1.0; 4]));
        let mut buf = Vec::new();
        save_checkpoint(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(load_checkpoint::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn load_from_rejects_shape_mismatch() {
        let mut a = ParamTable::<f32>::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamTable::<f32>::new();
        b.insert("w", Tensor::zeros(&[2, 3]));
        assert!(a.load_from(&b).is_err());
    }
}
