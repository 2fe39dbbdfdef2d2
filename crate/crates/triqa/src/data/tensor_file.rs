//! Binary tensor file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "TNSR"
//! version u8       1
//! dtype   u8       1 = f32
//! rank    u8       0..=8
//! reserved u8      0
//! dims    rank x u32
//! payload product(dims) x 4 bytes, row-major f32
//! mlen    u32
//! manifest mlen bytes of UTF-8 JSON
//! ```

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const MAX_RANK: usize = 8;

/// Serialize a tensor plus its JSON manifest.
pub fn encode_tensor(t: &Tensor<f32>, manifest: &serde_json::Value) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(Error::Config(format!(
            "tensor rank {} exceeds the format maximum {MAX_RANK}",
            t.rank()
        )));
    }
    let manifest_bytes = serde_json::to_vec(manifest)?;
    if manifest_bytes.len() > u32::MAX as usize {
        return Err(Error::Config("manifest too large".into()));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel() + 4 + manifest_bytes.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    out.push(0);
    for &d in t.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::Config(format!("dimension {d} exceeds u32 range")))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    Ok(out)
}

/// Parse bytes produced by [`encode_tensor`].
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor<f32>, serde_json::Value)> {
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > bytes.len() {
            Err(Error::Parse {
                offset: pos as u64,
                msg: format!("truncated while reading {what}"),
            })
        } else {
            Ok(())
        }
    };
    need(0, 8, "header")?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected \"TNSR\"",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported version {}", bytes[4]),
        });
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Parse {
            offset: 5,
            msg: format!("unsupported dtype {}", bytes[5]),
        });
    }
    let rank = bytes[6] as usize;
    if rank > MAX_RANK {
        return Err(Error::Parse {
            offset: 6,
            msg: format!("rank {rank} exceeds maximum {MAX_RANK}"),
        });
    }
    if bytes[7] != 0 {
        return Err(Error::Parse {
            offset: 7,
            msg: format!("reserved byte is {}, expected 0", bytes[7]),
        });
    }
    let mut pos = 8;
    let mut dims = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for i in 0..rank {
        need(pos, 4, "dims")?;
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as u64;
        numel = numel.checked_mul(d).ok_or(Error::Parse {
            offset: pos as u64,
            msg: format!("dims overflow at dimension {i}"),
        })?;
        dims.push(d as usize);
        pos += 4;
    }
    if numel > (u32::MAX as u64) / 4 {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("payload of {numel} elements exceeds the format's size budget"),
        });
    }
    let payload_len = numel as usize * 4;
    need(pos, payload_len, "payload")?;
    let mut data = Vec::with_capacity(numel as usize);
    for i in 0..numel as usize {
        let off = pos + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")));
    }
    pos += payload_len;
    need(pos, 4, "manifest length")?;
    let mlen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
    pos += 4;
    need(pos, mlen, "manifest")?;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[pos..pos + mlen])
        .map_err(|e| Error::Parse {
        offset: pos as u64,
        msg: format!("manifest is not valid JSON: {e}"),
    })?;
    let tensor = Tensor::new(dims, data)?;
    Ok((tensor, manifest))
}

pub fn write_tensor_file<P: AsRef<Path>>(
    path: P,
    t: &Tensor<f32>,
    manifest: &serde_json::Value,
) -> Result<()> {
    let bytes = encode_tensor(t, manifest)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor_file<P: AsRef<Path>>(path: P) -> Result<(Tensor<f32>, serde_json::Value)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| {
        Error::Config(format!(
            "cannot read tensor file {}: {e}",
            path.as_ref().display()
        ))
    })?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn two_by_three_layout_has_documented_size() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let manifest = json!({"source": "test"});
        let bytes = encode_tensor(&t, &manifest).unwrap();
        let mlen = serde_json::to_vec(&manifest).unwrap().len();
        assert_eq!(bytes.len(), 4 + 4 + 8 + 24 + 4 + mlen);
        let (back, m) = decode_tensor(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
        assert_eq!(m, manifest);
    }

    #[test]
    fn scalar_has_empty_dims_and_four_payload_bytes() {
        let t = Tensor::scalar(2.5f32);
        let t = t.reshaped(vec![]).unwrap();
        let bytes = encode_tensor(&t, &json!({})).unwrap();
        assert_eq!(bytes[6], 0); // rank
        assert_eq!(bytes.len(), 8 + 4 + 4 + 2); // header + payload + mlen + "{}"
        let (back, _) = decode_tensor(&bytes).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), &[2.5]);
    }

    #[test]
    fn corrupted_magic_fails_at_offset_zero() {
        let t = Tensor::<f32>::zeros(&[2]);
        let mut bytes = encode_tensor(&t, &json!({})).unwrap();
        bytes[3] = b'X';
        match decode_tensor(&bytes) {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("TNSX"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_parse_error() {
        let t = Tensor::<f32>::zeros(&[100]);
        let mut bytes = encode_tensor(&t, &json!({})).unwrap();
        bytes.truncate(60);
        assert!(matches!(decode_tensor(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn dims_overflow_is_rejected() {
        // header claiming 4 dims of u32::MAX each
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TNSR");
        bytes.extend_from_slice(&[1, 1, 4, 0]);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        match decode_tensor(&bytes) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("overflow"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32).sqrt()).collect()).unwrap();
        write_tensor_file(&path, &t, &json!({"k": [1, 2]})).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (back, m) = read_tensor_file(&path).unwrap();
        write_tensor_file(&path, &back, &m).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn round_trip_random_tensors(
            dims in proptest::collection::vec(1usize..6, 0..5),
            seedbits in any::<u64>(),
        ) {
            let numel: usize = dims.iter().product();
            let mut state = seedbits | 1;
            let data: Vec<f32> = (0..numel)
                .map(|_| {
                    // xorshift over the full bit pattern, squashed to finite values
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    ((state % 100_000) as f32 - 50_000.0) / 997.0
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let bytes = encode_tensor(&t, &serde_json::json!({"n": numel})).unwrap();
            let (back, _) = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
