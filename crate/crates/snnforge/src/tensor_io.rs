//! `.snnt` tensor files: magic `SNNT`, rank as u32, extents as u32 each,
//! then row-major f64 data. All integers and floats little-endian.

use std::fs;
use std::path::Path;

use snnforge_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"SNNT";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let take_u32 = |at: usize| -> std::result::Result<u32, String> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| "truncated header".to_string())
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let rank = take_u32(4)? as usize;
    if rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let shape: Vec<usize> =
        (0..rank).map(|i| take_u32(8 + 4 * i).map(|v| v as usize)).collect::<std::result::Result<_, _>>()?;
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let body = &bytes[start.min(bytes.len())..];
    if body.len() != 8 * n {
        return Err(format!("expected {} data bytes, found {}", 8 * n, body.len()));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn read(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(CliError::missing(path, "tensor file not found"));
    }
    let bytes = fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    decode(&bytes).map_err(|d| CliError::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let t = Tensor::from_fn(&[2, 1, 3], |i| i as f64 * -0.25);
        assert_eq!(decode(&encode(&t)).unwrap(), t);
        assert!(decode(b"NOPE").is_err());
        let mut bytes = encode(&t);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
