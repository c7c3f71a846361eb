//! Weight files.
//!
//! Little-endian throughout:
//!
//! ```text
//! "RWCC"  u32 version  u64 fingerprint  u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, rank x u64 extents,
//!             product(extents) x f64
//! ```
//!
//! The fingerprint identifies the architecture. Loading infers the spec by
//! matching it against the six standard layouts; input size and dropout rate
//! are not part of the file and come back at their defaults.

use std::path::Path;

use reweight_core::network::{NamedTensor, NetworkSpec, NetworkWeights};
use reweight_core::Tensor;

use crate::error::{CliError, Result, WeightFileError};

pub const MAGIC: &[u8; 4] = b"RWCC";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(weights: &NetworkWeights) -> Vec<u8> {
    let mut b = Vec::with_capacity(24 + weights.parameter_count() * 8);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&weights.spec().fingerprint().to_le_bytes());
    b.extend_from_slice(&(weights.params().len() as u32).to_le_bytes());
    for p in weights.params() {
        b.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        b.extend_from_slice(p.name.as_bytes());
        b.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        if self.buf.len() < n {
            return Err(WeightFileError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WeightFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// The six layouts a weight file can describe.
pub fn standard_specs() -> Vec<NetworkSpec> {
    (1..=3)
        .flat_map(|h| [false, true].map(|c| NetworkSpec::new(h, c).expect("standard spec")))
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<NetworkWeights, WeightFileError> {
    let mut r = Reader { buf: bytes };
    if r.take(4).map_err(|_| WeightFileError::BadMagic)? != MAGIC {
        return Err(WeightFileError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(WeightFileError::UnsupportedVersion(version));
    }
    let fingerprint = r.u64()?;
    let spec = standard_specs()
        .into_iter()
        .find(|s| s.fingerprint() == fingerprint)
        .ok_or(WeightFileError::UnknownFingerprint(fingerprint))?;
    let layers = spec.layer_shapes();
    let count = r.u32()? as usize;
    if count != layers.len() {
        return Err(WeightFileError::Tensor {
            name: "<header>".into(),
            reason: format!("layout has {} tensors, file has {count}", layers.len()),
        });
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in &layers {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| WeightFileError::Tensor {
            name: name.clone(),
            reason: "name is not UTF-8".into(),
        })?;
        if got != name {
            return Err(WeightFileError::Tensor {
                name: name.clone(),
                reason: format!("found tensor {got:?} in its place"),
            });
        }
        let rank = r.u32()? as usize;
        let extents = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if extents != *shape {
            return Err(WeightFileError::Tensor {
                name: name.clone(),
                reason: format!("shape {extents:?}, expected {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(NamedTensor {
            name: name.clone(),
            tensor: Tensor::new(shape, data).expect("shape checked"),
        });
    }
    if !r.buf.is_empty() {
        return Err(WeightFileError::TrailingBytes(r.buf.len()));
    }
    Ok(NetworkWeights::from_parts(spec, params).expect("layout checked"))
}

pub fn save_weights(weights: &NetworkWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode(weights)).map_err(|e| CliError::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Loads a file and requires it to describe `spec`'s architecture. The
/// returned weights carry `spec`'s input size and dropout rate.
pub fn load_weights_for(path: &Path, spec: &NetworkSpec) -> Result<NetworkWeights> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let w = decode(&bytes)?;
    if w.spec().fingerprint() != spec.fingerprint() {
        return Err(WeightFileError::FingerprintMismatch {
            expected: spec.fingerprint(),
            found: w.spec().fingerprint(),
        }
        .into());
    }
    Ok(NetworkWeights::from_parts(spec.clone(), w.params().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use reweight_core::network::build_network;

    fn sample() -> NetworkWeights {
        build_network(&NetworkSpec::new(2, true).unwrap(), 3).unwrap()
    }

    #[test]
    fn fingerprints_are_distinct() {
        let mut f: Vec<u64> = standard_specs().iter().map(|s| s.fingerprint()).collect();
        f.sort();
        f.dedup();
        assert_eq!(f.len(), 6);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let w = sample();
        let bytes = encode(&w);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = encode(&sample());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(decode(&b), Err(WeightFileError::BadMagic));
        let mut b = bytes.clone();
        b[4] = 2;
        assert_eq!(decode(&b), Err(WeightFileError::UnsupportedVersion(2)));
        let mut b = bytes.clone();
        b[8] ^= 1;
        assert!(matches!(decode(&b), Err(WeightFileError::UnknownFingerprint(_))));
        assert_eq!(decode(&bytes[..bytes.len() - 1]), Err(WeightFileError::Truncated));
        assert_eq!(decode(&bytes[..10]), Err(WeightFileError::Truncated));
        let mut b = bytes.clone();
        b.push(0);
        assert_eq!(decode(&b), Err(WeightFileError::TrailingBytes(1)));
    }

    #[test]
    fn tampered_extent_is_a_shape_error() {
        let mut b = encode(&sample());
        // first record: u32 len, "rewu0.kernel", u32 rank, then extents
        let at = 20 + 4 + "rewu0.kernel".len() + 4;
        b[at] = 7;
        match decode(&b) {
            Err(WeightFileError::Tensor { name, reason }) => {
                assert_eq!(name, "rewu0.kernel");
                assert!(reason.contains("shape"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loading_against_another_spec_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        save_weights(&build_network(&NetworkSpec::new(2, false).unwrap(), 1).unwrap(), &p).unwrap();
        let err = load_weights_for(&p, &NetworkSpec::new(3, false).unwrap()).unwrap_err();
        assert!(matches!(err, CliError::Weights(WeightFileError::FingerprintMismatch { .. })));
        let spec = NetworkSpec::new(2, false).unwrap().with_input_size(32);
        assert_eq!(load_weights_for(&p, &spec).unwrap().spec().input_size, 32);
    }
}
