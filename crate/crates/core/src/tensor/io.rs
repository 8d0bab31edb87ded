//! Raw tensor container (`DCQT`).
//!
//! ```text
//! offset  size          field
//! 0       4             magic "DCQT"
//! 4       2             version (u16, currently 1)
//! 6       4             image count m (u32)
//! 10      4             H (u32)
//! 14      4             W (u32)
//! 18      4             C (u32)
//! 22      4*m           labels (u32 each)
//! 22+4m   4*m*H*W*C     values (binary32), image after image
//! ```
//!
//! All multi-byte fields are little-endian.

use std::fs;
use std::path::Path;

use super::{DatasetBundle, ImageTensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"DCQT";
pub const TENSOR_VERSION: u16 = 1;
const FIXED_HEADER: usize = 22;

pub fn encode_tensor_file(bundle: &DatasetBundle) -> Vec<u8> {
    let (h, w, c) = bundle.dims();
    let mut out = Vec::with_capacity(FIXED_HEADER + bundle.len() * (4 + 4 * h * w * c));
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for label in bundle.labels() {
        out.extend_from_slice(&label.to_le_bytes());
    }
    for image in bundle.images() {
        for v in image.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn decode_tensor_file(bytes: &[u8]) -> Result<DatasetBundle> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Truncated {
            expected: FIXED_HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let count = u32_at(bytes, 6) as u64;
    let (h, w, c) = (
        u32_at(bytes, 10) as u64,
        u32_at(bytes, 14) as u64,
        u32_at(bytes, 18) as u64,
    );
    if count == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!(
            "empty dimensions: count {count}, shape {h}x{w}x{c}"
        )));
    }
    let per_image = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .filter(|&n| n <= usize::MAX as u64 / 4)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let expected = count
        .checked_mul(per_image)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FIXED_HEADER as u64 + 4 * count))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }
    let count = count as usize;
    let per_image = per_image as usize;
    let labels = (0..count)
        .map(|i| u32_at(bytes, FIXED_HEADER + 4 * i))
        .collect();
    let payload = &bytes[FIXED_HEADER + 4 * count..];
    let images = payload
        .chunks_exact(4 * per_image)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            ImageTensor::new(h as usize, w as usize, c as usize, values)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    DatasetBundle::new(images, labels)
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor_file(&bytes)
}

pub fn save_tensor_file(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor_file(bundle)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> DatasetBundle {
        let a = ImageTensor::new(2, 3, 2, (0..12).map(|i| i as f32 - 5.5).collect()).unwrap();
        let b = ImageTensor::new(2, 3, 2, (0..12).map(|i| (i as f32).sin()).collect()).unwrap();
        DatasetBundle::new(vec![a, b], vec![3, 9]).unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.dcqt");
        let b = bundle();
        save_tensor_file(&b, &path).unwrap();
        let back = load_tensor_file(&path).unwrap();
        assert_eq!(back, b);
        let bits: Vec<u32> = back.images()[1].values().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = b.images()[1].values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_tensor_file(&bundle());
        bytes[0] = b'X';
        assert!(matches!(decode_tensor_file(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let b = bundle();
        let images: Vec<_> = (0..9).map(|_| b.images()[0].clone()).collect();
        let nine = DatasetBundle::new(images, vec![0; 9]).unwrap();
        let mut bytes = encode_tensor_file(&nine);
        bytes[6..10].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(
            decode_tensor_file(&bytes),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn dimension_overflow() {
        let mut bytes = encode_tensor_file(&bundle());
        bytes[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[18..22].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_tensor_file(&bytes).is_err());
    }
}
