//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "FRLCKPT\0"
//! version  u32
//! headers  u32 count, then (u32 len, utf-8 key, u32 len, utf-8 value)*
//! step     u64      optimizer step counter
//! params   u32 count, then per parameter:
//!            u32 len, utf-8 name
//!            u32 ndim, u64 dims[ndim]
//!            f64 value[n], f64 m[n], f64 v[n]
//! ```
//! All integers and reals are little-endian.

use std::collections::BTreeMap;

use super::{Array, NumericError, ParamStore};

pub const MAGIC: &[u8; 8] = b"FRLCKPT\0";
pub const VERSION: u32 = 1;

/// Free-form string metadata stored ahead of the parameter blocks.
pub type Header = BTreeMap<String, String>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_reals(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(store: &ParamStore, header: &Header) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * 24);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    for (k, v) in header {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.extend_from_slice(&store.step.to_le_bytes());
    put_u32(&mut out, store.len() as u32);
    for p in store.params() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.shape().len() as u32);
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        put_reals(&mut out, p.value.data());
        put_reals(&mut out, p.m.data());
        put_reals(&mut out, p.v.data());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericError> {
        if self.pos + n > self.buf.len() {
            return Err(NumericError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NumericError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, NumericError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| NumericError::Checkpoint(format!("invalid utf-8: {e}")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>, NumericError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| NumericError::Checkpoint("parameter size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(ParamStore, Header), NumericError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NumericError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumericError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut header = Header::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        header.insert(k, v);
    }
    let step = r.u64()?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let value = Array::new(shape.clone(), r.reals(n)?)?;
        let m = Array::new(shape.clone(), r.reals(n)?)?;
        let v = Array::new(shape, r.reals(n)?)?;
        store.insert(&name, value)?;
        let p = store.params_mut().last_mut().expect("just inserted");
        p.m = m;
        p.v = v;
    }
    if r.pos != buf.len() {
        return Err(NumericError::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    store.step = step;
    Ok((store, header))
}

pub fn save(path: &std::path::Path, store: &ParamStore, header: &Header) -> Result<(), NumericError> {
    std::fs::write(path, to_bytes(store, header))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<(ParamStore, Header), NumericError> {
    from_bytes(&std::fs::read(path)?)
}
