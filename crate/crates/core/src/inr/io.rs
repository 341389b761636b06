//! `INRW` weight files: magic, version, spec, then the flat `f32` parameter block.
//!
//! Values are written as `f32`; weights already rounded with
//! [`INRWeights::round_to_f32`] survive a round trip bitwise.

use std::path::Path;
use std::sync::Arc;

use crate::autodiff::ParamVector;
use crate::bytes::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::inr::{INRSpec, INRWeights};

const MAGIC: &[u8; 4] = b"INRW";
const VERSION: u32 = 1;

pub fn encode_weights(weights: &INRWeights) -> Result<Vec<u8>> {
    let spec = weights.spec();
    let params = weights.params().values();
    let mut out = Vec::with_capacity(32 + 4 * params.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [spec.in_features, spec.out_features, spec.hidden_layers, spec.hidden_width] {
        put_u32(&mut out, to_u32(v, "INR weights")?);
    }
    put_f32s(&mut out, [spec.first_omega as f32, spec.hidden_omega as f32]);
    put_f32s(&mut out, params.iter().map(|&v| v as f32));
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<INRWeights> {
    let mut r = Reader::new(bytes, "INR weights");
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("INR weights", format!("unsupported version {version}")));
    }
    let spec = INRSpec {
        in_features: r.u32()? as usize,
        out_features: r.u32()? as usize,
        hidden_layers: r.u32()? as usize,
        hidden_width: r.u32()? as usize,
        first_omega: r.f32()? as f64,
        hidden_omega: r.f32()? as f64,
    };
    spec.validate()
        .map_err(|e| Error::format("INR weights", e.to_string()))?;
    let layout = Arc::new(spec.layout());
    let values = r.f32s(layout.total_len())?.into_iter().map(f64::from).collect();
    r.finish()?;
    INRWeights::new(spec, ParamVector::from_values(layout, values)?)
}

pub fn save_weights(weights: &INRWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(weights)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<INRWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::init_finer;

    #[test]
    fn round_trip_is_bitwise() {
        let mut w = init_finer(&INRSpec::with_size(3, 8), 4).unwrap();
        w.round_to_f32();
        let back = decode_weights(&encode_weights(&w).unwrap()).unwrap();
        assert_eq!(back.spec(), w.spec());
        let same = back
            .params()
            .values()
            .iter()
            .zip(w.params().values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn header_layout() {
        let w = init_finer(&INRSpec::with_size(2, 4), 1).unwrap();
        let bytes = encode_weights(&w).unwrap();
        assert_eq!(&bytes[..4], b"INRW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 25.0);
        assert_eq!(bytes.len(), 32 + 4 * w.params().len());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let w = init_finer(&INRSpec::with_size(2, 4), 1).unwrap();
        let bytes = encode_weights(&w).unwrap();
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_weights(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_weights(&magic).is_err());
    }
}
