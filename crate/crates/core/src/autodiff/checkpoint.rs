//! Binary checkpoint format.
//!
//! Layout (little-endian): the magic `CLPFCKPT`, a `u32` version, a `u32`
//! length followed by a JSON metadata block, a `u32` parameter count, then per
//! parameter a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u64`
//! dimensions and the `f64` values. The optimiser state follows: the `u64`
//! Adam step count and the first and second moment values of every parameter
//! in the same order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::params::Param;
use super::{Array, ParamStore};

pub const MAGIC: &[u8; 8] = b"CLPFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises parameters, optimiser state and metadata to bytes.
pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + store.numel() * 24);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let meta = serde_json::to_vec(meta).expect("json values always serialise");
    put_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(&meta);
    put_u32(&mut buf, store.params.len() as u32);
    for p in &store.params {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, 2);
        put_u64(&mut buf, p.value.rows() as u64);
        put_u64(&mut buf, p.value.cols() as u64);
        put_f64s(&mut buf, p.value.data());
    }
    put_u64(&mut buf, store.step);
    for p in &store.params {
        put_f64s(&mut buf, p.m.data());
        put_f64s(&mut buf, p.v.data());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n as usize),
            [a, b] => (*a as usize, *b as usize),
            _ => return Err(CheckpointError::Malformed(format!("`{name}` has rank {rank}"))),
        };
        let data = r.f64s(rows.saturating_mul(cols), "values")?;
        store
            .add(name, Array::from_vec(rows, cols, data))
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    store.step = r.u64("adam step")?;
    for Param { value, m, v, .. } in store.params.iter_mut() {
        let [rows, cols] = value.shape();
        *m = Array::from_vec(rows, cols, r.f64s(rows * cols, "first moment")?);
        *v = Array::from_vec(rows, cols, r.f64s(rows * cols, "second moment")?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((store, meta))
}

/// Writes a checkpoint through a temporary file renamed into place.
pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("ckpt.tmp");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(store, meta))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::AdamConfig;
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("enc.w", Array::from_vec(2, 3, vec![1.0, -2.5, 1e-300, f64::MIN_POSITIVE, 0.1, -0.0]))
            .unwrap();
        s.add("b", Array::row(&[std::f64::consts::PI])).unwrap();
        s.adam_step(
            &[Array::full(2, 3, 0.3), Array::scalar(-1.7)],
            &AdamConfig::default(),
        )
        .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_store();
        let meta = serde_json::json!({"variant": "clpf", "latent_dim": 2});
        let (back, meta_back) = decode(&encode(&s, &meta)).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.step(), 1);
        for (a, b) in s.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            for (x, y) in [(&a.value, &b.value), (&a.m, &b.m), (&a.v, &b.v)] {
                assert_eq!(x.shape(), y.shape());
                let bits = |arr: &Array| arr.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(x), bits(y));
            }
        }
    }

    #[test]
    fn header_fields() {
        let bytes = encode(&sample_store(), &serde_json::Value::Null);
        assert_eq!(&bytes[..8], b"CLPFCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode(&sample_store(), &serde_json::Value::Null);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(CheckpointError::BadMagic)));
        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(matches!(decode(&bad_version), Err(CheckpointError::Version(9))));
        assert!(matches!(decode(&good[..good.len() - 3]), Err(CheckpointError::Truncated(_))));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode(&trailing), Err(CheckpointError::Malformed(_))));
        assert!(matches!(decode(b"CLP"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = sample_store();
        save(&path, &s, &serde_json::json!({"k": 1})).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back, s);
        assert!(!dir.path().join("model.ckpt.tmp").exists());
        assert!(matches!(load(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
    }
}
