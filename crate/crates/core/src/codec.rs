//! Exact binary encodings for float arrays inside JSON documents.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PbipError, Result};

/// Little-endian `f64` buffer as base64.
pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| PbipError::Serde(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(PbipError::Serde("array byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Shape plus base64 payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedArray {
    pub fn new(shape: &[usize], values: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape: shape.to_vec(),
            data: encode_f64s(values),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let values = decode_f64s(&self.data)?;
        if values.len() != self.shape.iter().product::<usize>() {
            return Err(PbipError::Serde(format!(
                "array payload has {} values but shape {:?}",
                values.len(),
                self.shape
            )));
        }
        Ok(values)
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_arrays_round_trip_bit_exactly(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let decoded = decode_f64s(&encode_f64s(&values)).unwrap();
            prop_assert_eq!(
                decoded.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut a = EncodedArray::new(&[2], &[1.0, 2.0]);
        a.shape = vec![3];
        assert!(a.decode().is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(short_hash(b"abc"), "ba7816bf8f01cfea");
    }
}
