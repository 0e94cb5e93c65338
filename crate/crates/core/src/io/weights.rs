//! Binary weights file: `MFFD`, u32 version, u64 value count, then little-endian f32 values.
//!
//! Values follow node order. A convolution stores its weights `[out][in][ky][kx]`
//! then its bias; a batch norm stores gamma, beta, running mean and running variance.

use std::path::Path;

use crate::error::{Error, Result};
use crate::netgraph::{count_stored_values, NetworkSpec, WeightStore};

pub const MAGIC: &[u8; 4] = b"MFFD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_weights(store: &WeightStore<f32>) -> Vec<u8> {
    let count = store.stored_count();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for slice in store.all_slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Decode a weights file for `spec`, checking the header against the network.
pub fn decode_weights(bytes: &[u8], spec: &NetworkSpec) -> Result<WeightStore<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = &bytes[..bytes.len().min(4)];
        return Err(format_err(0, format!("bad magic {got:?}, expected \"MFFD\"")));
    }
    let version = bytes.get(4..8).ok_or_else(|| format_err(bytes.len(), "file ends inside the header"))?;
    let version = u32::from_le_bytes(version.try_into().unwrap());
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let count = bytes.get(8..16).ok_or_else(|| format_err(bytes.len(), "file ends inside the header"))?;
    let count = u64::from_le_bytes(count.try_into().unwrap());
    let expected = count_stored_values(spec);
    if count != expected {
        return Err(Error::Load(format!("weights file holds {count} values but the network needs {expected}")));
    }
    let body = &bytes[HEADER_LEN..];
    let needed = 4 * count as usize;
    if body.len() < needed {
        let offset = HEADER_LEN + body.len() / 4 * 4;
        return Err(format_err(offset, format!("file ends after {} of {count} values", body.len() / 4)));
    }
    if body.len() > needed {
        return Err(format_err(HEADER_LEN + needed, "trailing bytes after the last value"));
    }
    let mut store = WeightStore::zeros(spec);
    let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for slice in store.all_slices_mut() {
        for (dst, v) in slice.iter_mut().zip(values.by_ref()) {
            *dst = v;
        }
    }
    Ok(store)
}

pub fn save_weights(store: &WeightStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_weights(store))?)
}

pub fn load_weights(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<WeightStore<f32>> {
    decode_weights(&std::fs::read(path)?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_variant, Variant, VariantOptions};

    fn spec() -> NetworkSpec {
        build_variant(Variant::MffdB, &VariantOptions::default().with_width_divisor(16)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let spec = spec();
        let mut w = WeightStore::init(&spec, 5);
        w.bn_mut("Front.bn1").unwrap().running_var[0] = 0.123;
        let bytes = encode_weights(&w);
        assert_eq!(bytes.len(), 16 + 4 * count_stored_values(&spec) as usize);
        let back = decode_weights(&bytes, &spec).unwrap();
        assert_eq!(encode_weights(&back), bytes);
        assert_eq!(back, w);
    }

    #[test]
    fn header_and_truncation_errors() {
        let spec = spec();
        let bytes = encode_weights(&WeightStore::init(&spec, 1));
        assert!(matches!(decode_weights(b"MFFX", &spec), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_weights(&bytes[..10], &spec), Err(Error::Format { offset: 10, .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_weights(&v2, &spec), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_weights(&bytes[..bytes.len() - 3], &spec), Err(Error::Format { .. })));
        let other = build_variant(Variant::Reference, &VariantOptions::default().with_width_divisor(16)).unwrap();
        assert!(matches!(decode_weights(&bytes, &other), Err(Error::Load(_))));
    }
}
