//! Binary adapter dumps.
//!
//! Layout, all little-endian: `b"GAPL"`, version `u16`, layer count `u32`,
//! then per layer `layer_id, d_out, r, d_in` as `u32` followed by `A`
//! (`d_out × r`) and `B` (`r × d_in`) as row-major `f64`.

use std::path::Path;

use crate::error::CheckpointError;
use crate::lora::{LoraAdapter, LoraStack};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"GAPL";
pub const VERSION: u16 = 1;

/// Largest dimension accepted on load; guards allocation on corrupt input.
const MAX_DIM: u64 = 1 << 24;

pub fn encode(stack: &LoraStack) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(stack.num_layers() as u32).to_le_bytes());
    for ad in stack.adapters() {
        let (d_out, r) = ad.a.shape();
        let d_in = ad.b.cols();
        for v in [ad.layer_id, d_out, r, d_in] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in ad.a.as_slice().iter().chain(ad.b.as_slice()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

/// Decodes a checkpoint; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<LoraStack, CheckpointError> {
    let truncated = || CheckpointError::Truncated {
        path: path.to_path_buf(),
    };
    let dim = |reason: String| CheckpointError::Dimension {
        path: path.to_path_buf(),
        reason,
    };

    if bytes.len() < 4 {
        // Too short to tell; a prefix of the magic is a truncated checkpoint.
        return Err(if MAGIC.starts_with(bytes) {
            truncated()
        } else {
            CheckpointError::BadMagic {
                path: path.to_path_buf(),
            }
        });
    }
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4) != Some(&MAGIC[..]) {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = rd
        .take(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(truncated)?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let layers = rd.u32().ok_or_else(truncated)?;
    if layers == 0 {
        return Err(dim("checkpoint has zero layers".into()));
    }
    let mut adapters = Vec::new();
    let mut rank = None;
    let mut prev_out = None;
    for l in 0..layers {
        let mut h = [0u32; 4];
        for v in &mut h {
            *v = rd.u32().ok_or_else(truncated)?;
        }
        let [layer_id, d_out, r, d_in] = h;
        if layer_id != l {
            return Err(dim(format!("layer {l} recorded as layer {layer_id}")));
        }
        if [d_out, r, d_in]
            .iter()
            .any(|&d| d == 0 || d as u64 > MAX_DIM)
        {
            return Err(dim(format!("layer {l} has dimensions {d_out}×{r}×{d_in}")));
        }
        if *rank.get_or_insert(r) != r {
            return Err(dim(format!(
                "layer {l} has rank {r}, earlier layers {}",
                rank.unwrap()
            )));
        }
        if let Some(p) = prev_out {
            if p != d_in {
                return Err(dim(format!(
                    "layer {l} input {d_in} does not match previous output {p}"
                )));
            }
        }
        prev_out = Some(d_out);
        let (d_out, r, d_in) = (d_out as usize, r as usize, d_in as usize);
        let a = rd.f64s(d_out * r).ok_or_else(truncated)?;
        let b = rd.f64s(r * d_in).ok_or_else(truncated)?;
        adapters.push(LoraAdapter {
            layer_id: l as usize,
            a: Matrix::new(d_out, r, a).map_err(|e| dim(e.to_string()))?,
            b: Matrix::new(r, d_in, b).map_err(|e| dim(e.to_string()))?,
        });
    }
    if rd.pos != bytes.len() {
        return Err(dim(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    LoraStack::new(adapters).map_err(|e| dim(e.to_string()))
}

pub fn save_checkpoint(stack: &LoraStack, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(stack)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoraStack, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}
