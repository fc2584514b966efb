//! Binary checkpoint format.
//!
//! ```text
//! "SSL2DCKPT"            9 bytes magic
//! version                u32
//! meta length, meta      u32 + UTF-8 JSON (model spec and run settings)
//! n params, records      u32 + n × record
//! n buffers, records     u32 + n × record
//! step                   u64
//! n moments, records     u32 + n × (name, m record payload, v record payload)
//! crc32                  u32 over every preceding byte
//! record = name len u32, name bytes, rank u32, extents u32 × rank, f32 payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::params::{Buffer, Param, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"SSL2DCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParamStore<f32>, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_name(&mut out, meta);
    put_u32(&mut out, store.params.len() as u32);
    for p in &store.params {
        put_name(&mut out, &p.name);
        put_tensor(&mut out, &p.value);
    }
    put_u32(&mut out, store.buffers.len() as u32);
    for b in &store.buffers {
        put_name(&mut out, &b.name);
        put_tensor(&mut out, &b.value);
    }
    out.extend_from_slice(&store.step.to_le_bytes());
    put_u32(&mut out, store.params.len() as u32);
    for p in &store.params {
        put_name(&mut out, &p.name);
        put_tensor(&mut out, &p.m);
        put_tensor(&mut out, &p.v);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed {
            what: "checkpoint".into(),
            line: 0,
            reason: "name is not UTF-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Malformed {
                what: "checkpoint".into(),
                line: 0,
                reason: format!("rank {rank}"),
            });
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&shape, data)
    }
}

/// Parses a checkpoint image into its metadata and parameter store.
pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore<f32>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Truncated);
    }
    let body_end = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: r.pos,
    };
    let parsed = (|| -> Result<(String, ParamStore<f32>)> {
        let meta = r.string()?;
        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let value = r.tensor()?;
            store.params.push(Param {
                name,
                m: Tensor::zeros(value.shape()),
                v: Tensor::zeros(value.shape()),
                value,
            });
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let value = r.tensor()?;
            store.buffers.push(Buffer { name, value });
        }
        store.step = r.u64()?;
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            let p = store
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::shape(format!("moments of {name}"), p.value.shape(), m.shape()));
            }
            p.m = m;
            p.v = v;
        }
        Ok((meta, store))
    })();
    // A short read usually means the file was cut, so the checksum (read
    // from the wrong place) is not meaningful in that case.
    let (meta, store) = parsed?;
    if r.pos != body_end {
        return Err(Error::Malformed {
            what: "checkpoint".into(),
            line: 0,
            reason: "trailing bytes before checksum".into(),
        });
    }
    if crc32fast::hash(&bytes[..body_end]) != stored_crc {
        return Err(Error::ChecksumMismatch);
    }
    Ok((meta, store))
}

pub fn save_checkpoint(store: &ParamStore<f32>, meta: &str, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
