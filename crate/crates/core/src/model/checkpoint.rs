//! Binary checkpoint format.
//!
//! ```text
//! "SALATTN1"
//! repeated until EOF, in parameter order:
//!   u32 LE name length, UTF-8 name bytes
//!   u32 LE rank, rank x u64 LE extents
//!   product(extents) x f64 LE values
//! ```

use std::path::Path;

use super::params::{param_shapes, ModelParams};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SALATTN1";

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.param_count() * 8 + 64 * ModelParams::NAMES.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and validates it against the manifest for `channels`.
pub fn decode_checkpoint(bytes: &[u8], channels: usize) -> Result<ModelParams> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing SALATTN1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 8 };
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", r.pos)))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("extent overflow".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        entries.push((name, t));
    }

    let expected = param_shapes(channels);
    let mut problems = Vec::new();
    for (i, (name, shape)) in expected.iter().enumerate() {
        match entries.get(i) {
            Some((n, t)) if n == name && t.shape() == shape.as_slice() => {}
            Some((n, t)) => problems.push(format!("{name}: found {n} {:?}, expected {:?}", t.shape(), shape)),
            None => problems.push(format!("{name}: missing")),
        }
    }
    for (n, _) in entries.iter().skip(ModelParams::NAMES.len()) {
        problems.push(format!("{n}: unexpected tensor"));
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!("shape manifest mismatch: {}", problems.join("; "))));
    }
    Ok(ModelParams::from_ordered(entries.into_iter().map(|(_, t)| t).collect()).expect("count checked"))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path, channels: usize) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, channels)
}
