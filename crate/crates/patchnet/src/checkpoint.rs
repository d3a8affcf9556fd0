//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! "PNET"                       magic
//! u32                          format version (1)
//! u32 u32 u32                  patch height, width, channels
//! u32                          tensor count
//! per tensor: u32 rank, rank x u32 dims
//! f32 x N                      parameters in manifest order
//! u64                          FNV-1a 64 of the parameter bytes
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use patchnet_core::{PatchDims, SubnetParams, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PNET";
pub const VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: [u32; 1] = [VERSION];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:02x?}, expected \"PNET\")")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found}; supported: {supported:?}")]
    UnsupportedVersion { found: u32, supported: Vec<u32> },
    #[error("checksum failure: {0}")]
    Checksum(String),
    #[error("layer manifest does not match patch dims: {0}")]
    Manifest(String),
}

fn payload_checksum(payload: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(payload);
    h.finish()
}

pub fn encode(params: &SubnetParams<f32>) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    let d = params.dims;
    for v in [
        VERSION,
        d.height as u32,
        d.width as u32,
        d.channels as u32,
        tensors.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in &tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &s in t.shape() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
    }
    let start = out.len();
    for t in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = payload_checksum(&out[start..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CheckpointError::Checksum(format!("file truncated at byte {} (needed {n} more)", self.bytes.len()))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<SubnetParams<f32>, CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let dims = PatchDims::new(h, w, c).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let expected = SubnetParams::<f32>::manifest(dims);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Manifest(format!(
            "{count} tensors, expected {}",
            expected.len()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for want in &expected {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if &shape != want {
            return Err(CheckpointError::Manifest(format!("shape {shape:?}, expected {want:?}")));
        }
        shapes.push(shape);
    }
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let payload = r.take(total * 4)?;
    let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let computed = payload_checksum(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum(format!(
            "stored {stored:016x}, computed {computed:016x}"
        )));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Checksum(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let tensors = shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, floats.by_ref().take(n).collect()).expect("length from shape")
        })
        .collect();
    SubnetParams::from_tensors(dims, tensors).map_err(|e| CheckpointError::Manifest(e.to_string()))
}

pub fn save_checkpoint(params: &SubnetParams<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    fs::write(path, encode(params)).map_err(crate::error::io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<SubnetParams<f32>> {
    let bytes = fs::read(path).map_err(crate::error::io_err(path))?;
    decode(&bytes).map_err(|source| Error::Checkpoint {
        path: path.into(),
        source,
    })
}
