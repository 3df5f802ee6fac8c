//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "PFCKPT01"
//! header    u32 length + JSON {"config": ModelConfig, "prune_mask": [bool]}
//! tensors   u32 count, then per tensor:
//!           u32 name length, name, u32 rank, rank x u64 dims, f64 values
//! checksum  u64 FNV-1a over every preceding byte
//! ```
//!
//! Tensors appear in [`ModelState::named_tensors`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelState, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PFCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    prune_mask: Vec<bool>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn write_checkpoint(model: &ModelState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        prune_mask: model.prune_mask.clone(),
    })
    .expect("header serializes");
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let tensors = model.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let bad = |m: String| ModelError::Checkpoint(m);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(bad("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
    let mut model = ModelState::new(header.config.clone())?;
    if header.prune_mask.len() != model.n_layers() {
        return Err(bad(format!(
            "prune mask has {} entries for {} layers",
            header.prune_mask.len(),
            model.n_layers()
        )));
    }
    let count = r.u32()? as usize;
    let mut slots = model.named_tensors_mut();
    if count != slots.len() {
        return Err(bad(format!("{} tensors, expected {}", count, slots.len())));
    }
    for (expected, slot) in slots.iter_mut() {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| bad(e.to_string()))?;
        if name != expected {
            return Err(bad(format!("tensor '{name}' where '{expected}' was expected")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(bad(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                shape,
                slot.shape()
            )));
        }
        let data = r
            .take(slot.len() * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        **slot = Tensor::new(shape, data)?;
    }
    drop(slots);
    if r.pos != body.len() {
        return Err(bad("trailing bytes after tensors".into()));
    }
    model.prune_mask = header.prune_mask;
    Ok(model)
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(&fs::read(path)?)
}
