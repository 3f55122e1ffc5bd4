//! Versioned binary checkpoints for a [`ParameterSet`] plus a text sidecar.
//!
//! Layout (integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `SPAUDCKP` |
//! | 4     | format version (1) |
//! | 4     | filters F |
//! | 4     | image side S |
//! | 4     | classes (10) |
//! | 8     | dropout rate (f64) |
//! | 4     | block count (4) |
//! | ...   | per block: rank u32, then rank x u32 dims |
//! | ...   | all parameters as f64, blocks in declared order |

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::KeyValues;
use crate::dataset::NUM_CLASSES;
use crate::model::{ModelConfig, ParameterSet};

pub const MAGIC: &[u8; 8] = b"SPAUDCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte offset {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
}

pub fn encode(theta: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * theta.values().len());
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        theta.filters() as u32,
        theta.side() as u32,
        NUM_CLASSES as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&theta.dropout_rate().to_le_bytes());
    let shapes = theta.block_shapes();
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for shape in &shapes {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in theta.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(format!("truncated: need {n} more bytes")))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParameterSet, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(8)? != MAGIC {
        cur.pos = 0;
        return Err(cur.err("bad magic"));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(cur.err(format!("unsupported format version {version}")));
    }
    let filters = cur.u32()? as usize;
    let side = cur.u32()? as usize;
    let classes = cur.u32()? as usize;
    let dropout_rate = cur.f64()?;
    let cfg = ModelConfig {
        filters,
        dropout_rate,
        classes,
        image_side: side,
    };
    let mut theta = ParameterSet::zeros(&cfg).map_err(|e| cur.err(e.to_string()))?;
    let blocks = cur.u32()? as usize;
    let expected = theta.block_shapes();
    if blocks != expected.len() {
        return Err(cur.err(format!("expected {} blocks, found {blocks}", expected.len())));
    }
    for shape in &expected {
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(cur.err(format!("block shape {dims:?} does not match {shape:?}")));
        }
    }
    for v in theta.values_mut() {
        *v = cur.f64()?;
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(theta)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    path.with_file_name(name)
}

/// Writes the binary checkpoint and its `<path>.meta` sidecar.
pub fn save(theta: &ParameterSet, path: &Path, meta: &KeyValues) -> Result<(), CheckpointError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CheckpointError::Io { path: p, source }
    };
    fs::write(path, encode(theta)).map_err(io(path))?;
    let side = sidecar_path(path);
    let mut meta = meta.clone();
    meta.insert("format_version", FORMAT_VERSION);
    meta.insert("model_id", model_id(path, &encode(theta)));
    fs::write(&side, meta.render()).map_err(io(&side))
}

pub fn load(path: &Path) -> Result<ParameterSet, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

/// Reads the sidecar if present.
pub fn load_meta(path: &Path) -> Option<KeyValues> {
    KeyValues::load(&sidecar_path(path)).ok()
}

/// `<file name>@<fnv1a-64 of contents>`.
pub fn model_id(path: &Path, bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{name}@{hash:016x}")
}
