//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ACTD"                      4 bytes
//! version                     u32
//! manifest length             u32, then UTF-8 `key=value\n` lines
//! tensor count                u64
//! per tensor:
//!   name length               u32, then UTF-8 name
//!   dtype                     u8   (0 = f64)
//!   rank                      u32
//!   extents                   rank × u64
//!   payload                   Π extents × f64, row-major
//! checksum                    u64, first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IntegrityKind, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACTD";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub manifest: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::integrity(
                IntegrityKind::Truncated,
                format!("need {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos),
            ));
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::integrity(IntegrityKind::Malformed, "invalid UTF-8"))
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.manifest.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::integrity(IntegrityKind::Malformed, format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn insert_module<M: Module + ?Sized>(&mut self, m: &M) -> Result<()> {
        let mut res = Ok(());
        m.visit(&mut |n, t| {
            if res.is_ok() {
                res = self.insert(n, t.clone().frozen());
            }
        });
        res
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::integrity(IntegrityKind::MissingTensor, format!("tensor {name} not in container")))
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    /// Overwrites every parameter of `m` from the container; names must
    /// exist and shapes must match.
    pub fn load_module<M: Module + ?Sized>(&self, m: &mut M) -> Result<()> {
        let mut res = Ok(());
        m.visit_mut(&mut |n, t| {
            if res.is_err() {
                return;
            }
            match self.get(n) {
                None => res = Err(Error::integrity(IntegrityKind::MissingTensor, format!("tensor {n} not in container"))),
                Some(src) if src.shape() != t.shape() => {
                    res = Err(Error::shape(
                        "load_checkpoint",
                        format!("tensor {n}: stored {:?}, model expects {:?}", src.shape(), t.shape()),
                    ))
                }
                Some(src) => t.data_mut().copy_from_slice(src.data()),
            }
        });
        res
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest: String = self.manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            if bytes.len() < 4 && MAGIC.starts_with(bytes) {
                return Err(Error::integrity(IntegrityKind::Truncated, "file shorter than magic"));
            }
            return Err(Error::integrity(IntegrityKind::BadMagic, "missing ACTD magic"));
        }
        if bytes.len() < 8 {
            return Err(Error::integrity(IntegrityKind::Truncated, "file ends inside header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::integrity(IntegrityKind::BadVersion, format!("version {version}, expected {VERSION}")));
        }
        let sum_ok = bytes.len() >= 16 && {
            let (body, tail) = bytes.split_at(bytes.len() - 8);
            checksum(body) == u64::from_le_bytes(tail.try_into().unwrap())
        };
        let parsed = Self::parse(bytes);
        match (sum_ok, parsed) {
            (true, Ok(c)) => Ok(c),
            (true, Err(e)) => Err(Error::integrity(IntegrityKind::Malformed, e.to_string())),
            (false, Err(e @ Error::Integrity { kind: IntegrityKind::Truncated, .. })) => Err(e),
            (false, _) => Err(Error::integrity(IntegrityKind::Checksum, "checksum mismatch")),
        }
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 8 };
        let manifest_text = r.string()?;
        let mut manifest = BTreeMap::new();
        for line in manifest_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::integrity(IntegrityKind::Malformed, format!("manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(Error::integrity(IntegrityKind::Malformed, format!("duplicate tensor {name}")));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::integrity(IntegrityKind::Malformed, format!("dtype code {dtype}")));
            }
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::integrity(IntegrityKind::Malformed, format!("rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::integrity(IntegrityKind::Malformed, "extent overflow"))?;
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::integrity(IntegrityKind::Malformed, e.to_string()))?;
            tensors.push((name, t));
        }
        r.take(8)?;
        if r.pos != bytes.len() {
            return Err(Error::integrity(IntegrityKind::Malformed, "trailing bytes after checksum"));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Errors with [`IntegrityKind::HashMismatch`] unless `key` holds `expected`.
    pub fn expect_meta(&self, key: &str, expected: &str) -> Result<()> {
        match self.meta(key) {
            Some(v) if v == expected => Ok(()),
            other => Err(Error::integrity(
                IntegrityKind::HashMismatch,
                format!("{key}: found {other:?}, expected {expected}"),
            )),
        }
    }
}
