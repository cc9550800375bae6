//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "TAFCKPT1"                     8-byte magic
//! u32 entry count
//! per entry:
//!   u32 name length, name bytes (UTF-8)
//!   u8  kind (0 = trainable parameter, 1 = buffer)
//!   u32 ndim, ndim × u32 dims
//!   f64 × numel payload
//! [u8; 32] SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{NnError, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAFCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Tensor,
    grad: Tensor,
    frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            value,
            grad,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, ParamKind::Buffer)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "{}: cannot assign {:?} to {:?}",
                e.name,
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.entries[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Receives gradients and optimizer updates.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Trainable && !e.frozen
    }

    /// Freezes or unfreezes every entry whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    /// Number of scalar trainable parameters (frozen or not) under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and values of every entry under `prefix`,
    /// in insertion order. Buffers are included.
    pub fn section_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update((e.name.len() as u32).to_le_bytes());
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(NnError::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(NnError::Format("checkpoint hash mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let n = r.u32()? as usize;
        let mut ps = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NnError::Format("entry name is not UTF-8".into()))?;
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(NnError::Format(format!("unknown entry kind {k}"))),
            };
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            ps.insert(&name, Tensor::from_vec(&shape, data)?, kind);
        }
        if r.pos != body.len() {
            return Err(NnError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(ps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies every entry of `other` whose name starts with `prefix` into the
    /// identically named entry of `self`.
    pub fn copy_section_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in other.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let id = self
                .find(&e.name)
                .ok_or_else(|| NnError::Format(format!("checkpoint entry {} has no counterpart", e.name)))?;
            self.set(id, e.value.clone())?;
            copied += 1;
        }
        Ok(copied)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("encoder.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 1e-300]).unwrap());
        ps.add_buffer("encoder.rm", Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap());
        ps.add("head.b", Tensor::from_vec(&[1], vec![3.0]).unwrap());
        ps
    }

    #[test]
    fn bytes_roundtrip_preserves_everything() {
        let ps = store();
        let back = ParamStore::from_bytes(&ps.to_bytes()).unwrap();
        assert_eq!(back.len(), 3);
        for id in ps.ids() {
            assert_eq!(ps.name(id), back.name(id));
            assert_eq!(ps.kind(id), back.kind(id));
            assert_eq!(ps.get(id), back.get(id));
        }
        assert_eq!(ps.section_hash(""), back.section_hash(""));
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let mut bytes = store().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(ParamStore::from_bytes(&bytes), Err(NnError::Format(_))));
        let mut bad = store().to_bytes();
        bad[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bad), Err(NnError::Format(_))));
    }

    #[test]
    fn section_hash_tracks_only_its_prefix() {
        let mut ps = store();
        let enc = ps.section_hash("encoder.");
        let id = ps.find("head.b").unwrap();
        ps.get_mut(id).data_mut()[0] = 4.0;
        assert_eq!(enc, ps.section_hash("encoder."));
        let id = ps.find("encoder.rm").unwrap();
        ps.get_mut(id).data_mut()[0] = 0.3;
        assert_ne!(enc, ps.section_hash("encoder."));
    }

    #[test]
    fn counts_exclude_buffers() {
        let ps = store();
        assert_eq!(ps.count("encoder."), 4);
        assert_eq!(ps.count(""), 5);
    }
}
