//! Self-describing key/value checkpoint container.
//!
//! Layout (all little-endian): magic "GGDRCKPT", u32 version, u64 entry
//! count, then entries sorted by key. Each entry: u32 key length, key bytes,
//! u8 tag, payload. Tags: 0 f64 array (u8 ndim, u64 dims, f64 data),
//! 1 u64, 2 i64, 3 f64 scalar, 4 string, 5 raw bytes. Sorted keys and exact
//! bit-level f64 encoding make save -> load -> save byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GGDRCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Array { shape: Vec<usize>, data: Vec<f64> },
    U64(u64),
    I64(i64),
    F64(f64),
    Str(String),
    Bytes(Vec<u8>),
}

/// An ordered key/value archive of checkpoint entries.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn put_tensor(&mut self, key: &str, t: &Tensor) {
        self.entries.insert(
            key.to_string(),
            Entry::Array {
                shape: t.shape().to_vec(),
                data: t.iter().copied().collect(),
            },
        );
    }

    pub fn put_u64(&mut self, key: &str, v: u64) {
        self.entries.insert(key.to_string(), Entry::U64(v));
    }

    pub fn put_i64(&mut self, key: &str, v: i64) {
        self.entries.insert(key.to_string(), Entry::I64(v));
    }

    pub fn put_f64(&mut self, key: &str, v: f64) {
        self.entries.insert(key.to_string(), Entry::F64(v));
    }

    pub fn put_str(&mut self, key: &str, v: &str) {
        self.entries
            .insert(key.to_string(), Entry::Str(v.to_string()));
    }

    pub fn put_bytes(&mut self, key: &str, v: &[u8]) {
        self.entries
            .insert(key.to_string(), Entry::Bytes(v.to_vec()));
    }

    fn get(&self, key: &str) -> Result<&Entry> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{key}'")))
    }

    pub fn tensor(&self, key: &str) -> Result<Tensor> {
        match self.get(key)? {
            Entry::Array { shape, data } => {
                Tensor::from_shape_vec(IxDyn(shape), data.clone()).map_err(|e| {
                    Error::Checkpoint(format!("entry '{key}': bad array shape: {e}"))
                })
            }
            other => Err(Error::Checkpoint(format!(
                "entry '{key}' is {other:?}, expected array"
            ))),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        match self.get(key)? {
            Entry::U64(v) => Ok(*v),
            other => Err(Error::Checkpoint(format!(
                "entry '{key}' is {other:?}, expected u64"
            ))),
        }
    }

    pub fn i64(&self, key: &str) -> Result<i64> {
        match self.get(key)? {
            Entry::I64(v) => Ok(*v),
            other => Err(Error::Checkpoint(format!(
                "entry '{key}' is {other:?}, expected i64"
            ))),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            Entry::F64(v) => Ok(*v),
            other => Err(Error::Checkpoint(format!(
                "entry '{key}' is {other:?}, expected f64"
            ))),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        match self.get(key)? {
            Entry::Str(v) => Ok(v),
            other => Err(Error::Checkpoint(format!(
                "entry '{key}' is {other:?}, expected string"
            ))),
        }
    }

    pub fn bytes(&self, key: &str) -> Result<&[u8]> {
        match self.get(key)? {
            Entry::Bytes(v) => Ok(v),
            other => Err(Error::Checkpoint(format!(
                "entry '{key}' is {other:?}, expected bytes"
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (key, entry) in &self.entries {
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            match entry {
                Entry::Array { shape, data } => {
                    buf.push(0);
                    buf.push(shape.len() as u8);
                    for &d in shape {
                        buf.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in data {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(v) => {
                    buf.push(1);
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                Entry::I64(v) => {
                    buf.push(2);
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                Entry::F64(v) => {
                    buf.push(3);
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                Entry::Str(v) => {
                    buf.push(4);
                    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    buf.extend_from_slice(v.as_bytes());
                }
                Entry::Bytes(v) => {
                    buf.push(5);
                    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    buf.extend_from_slice(v);
                }
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic, not a checkpoint",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u64()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let klen = r.u32()? as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 key".into()))?;
            let tag = r.u8()?;
            let entry = match tag {
                0 => {
                    let ndim = r.u8()? as usize;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(r.u64()? as usize);
                    }
                    let n: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        data.push(r.f64()?);
                    }
                    Entry::Array { shape, data }
                }
                1 => Entry::U64(r.u64()?),
                2 => Entry::I64(r.i64()?),
                3 => Entry::F64(r.f64()?),
                4 => {
                    let n = r.u64()? as usize;
                    Entry::Str(
                        String::from_utf8(r.take(n)?.to_vec())
                            .map_err(|_| Error::Checkpoint("non-utf8 string entry".into()))?,
                    )
                }
                5 => {
                    let n = r.u64()? as usize;
                    Entry::Bytes(r.take(n)?.to_vec())
                }
                t => {
                    return Err(Error::Checkpoint(format!(
                        "entry '{key}': unknown tag {t}"
                    )))
                }
            };
            entries.insert(key, entry);
        }
        Ok(Archive { entries })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = std::env::temp_dir().join("ggdr_test_ckpt");
        fs::create_dir_all(&dir).unwrap();
        let mut a = Archive::new();
        a.put_u64("step", 42);
        a.put_f64("lr", 2e-3);
        a.put_str("tag", "abc");
        a.put_bytes("rng", &[1, 2, 3, 255]);
        a.put_tensor(
            "w",
            &Tensor::from_shape_vec(IxDyn(&[2, 2]), vec![1.5, -0.25, 1e-300, f64::MIN]).unwrap(),
        );
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        a.save(&p1).unwrap();
        let b = Archive::load(&p1).unwrap();
        b.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(b.u64("step").unwrap(), 42);
        assert_eq!(b.tensor("w").unwrap()[[1, 0]], 1e-300);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_file_reports_diagnostics() {
        let dir = std::env::temp_dir().join("ggdr_test_ckpt2");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.ckpt");
        fs::write(&p, b"not a checkpoint").unwrap();
        let err = Archive::load(&p).unwrap_err();
        assert!(format!("{err}").contains("bad magic"));

        let mut a = Archive::new();
        a.put_u64("x", 7);
        a.save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, &bytes).unwrap();
        let err = Archive::load(&p).unwrap_err();
        assert!(format!("{err}").contains("truncated"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn typed_getters_reject_wrong_types() {
        let mut a = Archive::new();
        a.put_u64("x", 7);
        assert!(a.f64("x").is_err());
        assert!(a.tensor("x").is_err());
        assert!(a.u64("missing").is_err());
    }
}
