//! Final model file: "FLMD", u32 version, u64 dim, dim x f64, config digest.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ConfigDigest;
use crate::error::{Error, Result};
use crate::types::ParameterVector;

const MAGIC: &[u8; 4] = b"FLMD";
const VERSION: u32 = 1;

pub fn encode_model(params: &ParameterVector, digest: &ConfigDigest) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.dim() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dim() as u64).to_le_bytes());
    out.extend_from_slice(&params.to_le_bytes());
    out.extend_from_slice(&digest.0);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<(ParameterVector, ConfigDigest)> {
    let bad = |m: &str| Error::InvalidInput(format!("model file: {m}"));
    let mut r = bytes;
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dim = u64::from_le_bytes(head[8..16].try_into().unwrap());
    if r.len() as u64 != dim.saturating_mul(8).saturating_add(32) {
        return Err(bad("length does not match the declared dimension"));
    }
    let (values, digest) = r.split_at(dim as usize * 8);
    let params = values.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((ParameterVector::new(params)?, ConfigDigest(digest.try_into().unwrap())))
}

pub fn write_model(path: impl AsRef<Path>, params: &ParameterVector, digest: &ConfigDigest) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_model(params, digest))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(ParameterVector, ConfigDigest)> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let p = ParameterVector::new(vec![1.0, -0.5]).unwrap();
        let d = ConfigDigest([9; 32]);
        let bytes = encode_model(&p, &d);
        assert_eq!(&bytes[..8], b"FLMD\x01\x00\x00\x00");
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 16 + 32);
        assert_eq!(decode_model(&bytes).unwrap(), (p, d));
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
    }
}
