//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CORRNET\0"            magic
//! u32                     schema version
//! u32, bytes              EncoderConfig as JSON
//! u32                     tensor count
//! repeated:
//!   u32, bytes            tensor name (UTF-8)
//!   u32, u32 * ndim       shape
//!   f32 * prod(shape)     row-major values
//! ```

use std::io::{self, ErrorKind};
use std::path::Path;

use super::{EncoderConfig, Model};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CORRNET\0";

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(io::Error::new(ErrorKind::UnexpectedEof, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let io_err = |e: io::Error| Error::io(path, e);
    let bad = |msg: String| Error::io(path, io::Error::new(ErrorKind::InvalidData, msg));
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len()).map_err(io_err)? != MAGIC {
        return Err(bad("not a corrnet checkpoint".into()));
    }
    let version = r.u32().map_err(io_err)?;
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let len = r.u32().map_err(io_err)? as usize;
    let config: EncoderConfig =
        serde_json::from_slice(r.take(len).map_err(io_err)?).map_err(|e| bad(format!("bad config: {e}")))?;
    let mut model = Model::zeroed(config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .parameters()
        .into_iter()
        .map(|p| (p.name, p.shape))
        .collect();
    let count = r.u32().map_err(io_err)? as usize;
    if count != expected.len() {
        return Err(bad(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut slots = model.parameter_values_mut();
    for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
        let name_len = r.u32().map_err(io_err)? as usize;
        let found = std::str::from_utf8(r.take(name_len).map_err(io_err)?)
            .map_err(|e| bad(format!("tensor name is not UTF-8: {e}")))?;
        if found != name {
            return Err(bad(format!("expected tensor {name}, found {found}")));
        }
        let ndim = r.u32().map_err(io_err)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32().map_err(io_err)? as usize);
        }
        if &dims != shape {
            return Err(bad(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4).map_err(io_err)?;
        for (v, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if r.at != bytes.len() {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
