//! Binary container for parameter vectors: an 8-byte magic, a version byte,
//! a little-endian u32 manifest length, the JSON manifest, then the float
//! blocks as little-endian f64 in the order the manifest lists them.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u8 = 1;
const HEADER: usize = 8 + 1 + 4;

pub fn encode<M: Serialize>(magic: &[u8; 8], manifest: &M, blocks: &[&[f64]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let n_floats: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(HEADER + json.len() + 8 * n_floats);
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for block in blocks {
        for v in *block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a container into its manifest and the raw float payload.
pub fn decode<M: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(M, Vec<f64>)> {
    if bytes.len() < HEADER {
        return Err(Error::Length {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[8] != FORMAT_VERSION {
        return Err(Error::Migration {
            found: bytes[8],
            supported: FORMAT_VERSION,
        });
    }
    let len = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    if bytes.len() < HEADER + len {
        return Err(Error::Length {
            expected: HEADER + len,
            found: bytes.len(),
        });
    }
    let manifest = serde_json::from_slice(&bytes[HEADER..HEADER + len])?;
    let payload = &bytes[HEADER + len..];
    if !payload.len().is_multiple_of(8) {
        return Err(Error::Length {
            expected: payload.len() / 8 * 8 + 8,
            found: payload.len(),
        });
    }
    let floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((manifest, floats))
}

/// Cuts `floats` into consecutive blocks of the given lengths, which must
/// cover it exactly.
pub fn split_blocks(floats: Vec<f64>, lengths: &[usize]) -> Result<Vec<Vec<f64>>> {
    let expected: usize = lengths.iter().sum();
    if floats.len() != expected {
        return Err(Error::Length {
            expected: expected * 8,
            found: floats.len() * 8,
        });
    }
    let mut out = Vec::with_capacity(lengths.len());
    let mut rest = floats.as_slice();
    for &n in lengths {
        let (head, tail) = rest.split_at(n);
        out.push(head.to_vec());
        rest = tail;
    }
    Ok(out)
}

/// Writes through a sibling temporary file so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTBLK\0";

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300];
        let b = vec![std::f64::consts::PI];
        let bytes = encode(MAGIC, &"hello", &[&a, &b]).unwrap();
        let (m, floats): (String, _) = decode(MAGIC, &bytes).unwrap();
        assert_eq!(m, "hello");
        let blocks = split_blocks(floats, &[4, 1]).unwrap();
        assert_eq!(
            blocks[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(blocks[1], b);
    }

    #[test]
    fn forced_failures() {
        let bytes = encode(MAGIC, &1u8, &[&[1.0, 2.0]]).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode::<u8>(MAGIC, cut),
            Err(Error::Length { .. })
        ));
        let (_, floats) = decode::<u8>(MAGIC, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            split_blocks(floats, &[2]),
            Err(Error::Length { .. })
        ));

        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(
            decode::<u8>(MAGIC, &wrong),
            Err(Error::Migration {
                found: 9,
                supported: 1
            })
        ));
        assert!(matches!(
            decode::<u8>(b"OTHERXX\0", &bytes),
            Err(Error::Format(_))
        ));
        assert!(decode::<u8>(MAGIC, &bytes[..5]).is_err());
    }
}
