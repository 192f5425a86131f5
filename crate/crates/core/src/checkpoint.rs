//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LALNCKPT" | u32 version | u32 manifest_len | manifest JSON
//! u32 section_count | { u32 name_len | name | u32 rows | u32 cols | f32 × rows·cols }*
//! sha256 of every preceding byte
//! ```

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LALNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub sections: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(manifest: impl Serialize) -> Result<Self> {
        Ok(Self { manifest: serde_json::to_value(manifest)?, sections: Vec::new() })
    }

    pub fn manifest_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.manifest.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("manifest does not match expected schema: {e}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.sections.push((name.into(), t));
    }

    /// Adds every tensor of `params` as `prefix/name`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn section(&self, name: &str) -> Result<&Tensor> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing section '{name}'")))
    }

    /// Overwrites `params` from the `prefix/*` sections, checking names and shapes.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let mut tensors = Vec::with_capacity(params.len());
        for (name, want) in params.names().iter().zip(params.tensors()) {
            let t = self.section(&format!("{prefix}/{name}"))?;
            if t.shape() != want.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "section '{prefix}/{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            tensors.push(t.clone());
        }
        params.replace_all(tensors);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        put_u32(&mut out, manifest.len())?;
        out.extend_from_slice(&manifest);
        put_u32(&mut out, self.sections.len())?;
        for (name, t) in &self.sections {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows())?;
            put_u32(&mut out, t.cols())?;
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::IncompatibleCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint(format!("version {version}, expected {VERSION}")));
        }
        if bytes.len() < 12 + 32 {
            return Err(Error::CorruptCheckpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or modified)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let mlen = r.u32()?;
        let manifest = serde_json::from_slice(r.take(mlen)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
        let n = r.u32()?;
        let mut sections = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let nl = r.u32()?;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("section name is not utf-8".into()))?;
            let (rows, cols) = (r.u32()?, r.u32()?);
            let count = rows.checked_mul(cols).ok_or_else(|| Error::CorruptCheckpoint("section size overflow".into()))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("section size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            sections.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after sections".into()));
        }
        Ok(Self { manifest, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit the u32 checkpoint field")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::CorruptCheckpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}
