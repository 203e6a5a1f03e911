//! "SDNA" named-array container: a flat, language-neutral binary format for
//! f32 arrays keyed by name.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   4 bytes  "SDNA"
//! version u32      currently 1
//! count   u32      number of entries
//! entry   repeated count times:
//!   name_len u32, name UTF-8 bytes,
//!   dtype    u8   (0 = f32),
//!   rank     u32, dims rank x u64,
//!   payload  prod(dims) x 4 bytes (f32)
//! ```
//! Entries are written in sorted name order so equal contents produce equal
//! bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Real;

pub const MAGIC: &[u8; 4] = b"SDNA";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory view of a container file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedArrays {
    entries: BTreeMap<String, ArrayEntry>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Container(format!(
                "{name}: dims {dims:?} expect {numel} values, got {}",
                data.len()
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Container(format!("duplicate entry {name}")));
        }
        self.entries.insert(name.to_string(), ArrayEntry { dims, data });
        Ok(())
    }

    /// Insert from the crate scalar type (casts when built with `f64`).
    pub fn insert_real(&mut self, name: &str, dims: Vec<usize>, data: &[Real]) -> Result<()> {
        self.insert(name, dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayEntry> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayEntry> {
        self.get(name)
            .ok_or_else(|| Error::Container(format!("missing entry {name}")))
    }

    pub fn require_real(&self, name: &str) -> Result<Vec<Real>> {
        Ok(self.require(name)?.data.iter().map(|&v| v as Real).collect())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F32);
            buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Container(msg);
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(bad(format!("truncated at offset {pos}", pos = *pos)));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(bad("bad magic, expected SDNA".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut out = NamedArrays::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| bad("entry name is not UTF-8".into()))?;
            let dtype = take(&mut pos, 1)?[0];
            if dtype != DTYPE_F32 {
                return Err(bad(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(&name, dims, data)?;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(out)
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |e| Error::io(path.display().to_string(), e);
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        {
            let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
            f.write_all(&bytes).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Container(msg) => Error::Container(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
