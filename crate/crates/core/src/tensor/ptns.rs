//! PTNS binary container.
//!
//! Layout: magic `PTNS`, version byte (1), dtype byte (1 = f32, 2 = u16
//! label), rank byte, `rank` little-endian u32 dims, then the little-endian
//! payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PTNS";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U16: u8 = 2;

/// Integer label array as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelArray {
    pub shape: Vec<usize>,
    pub data: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PtnsPayload {
    Real(Tensor),
    Label(LabelArray),
}

fn header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", shape.len())));
    }
    let mut out = Vec::with_capacity(7 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_F32, t.shape())?;
    out.reserve(4 * t.numel());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(labels: &LabelArray) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_U16, &labels.shape)?;
    out.reserve(2 * labels.data.len());
    for v in &labels.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(mut bytes: &[u8]) -> Result<PtnsPayload> {
    let mut fixed = [0u8; 7];
    bytes
        .read_exact(&mut fixed)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &fixed[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if fixed[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", fixed[4])));
    }
    let dtype = fixed[5];
    let rank = fixed[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        bytes
            .read_exact(&mut d)
            .map_err(|_| Error::Format("truncated dims".into()))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    match dtype {
        DTYPE_F32 => {
            if bytes.len() != 4 * numel {
                return Err(Error::Format(format!(
                    "payload of {} bytes for {numel} f32 values",
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(PtnsPayload::Real(Tensor::new(shape, data)?))
        }
        DTYPE_U16 => {
            if bytes.len() != 2 * numel {
                return Err(Error::Format(format!(
                    "payload of {} bytes for {numel} u16 values",
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            Ok(PtnsPayload::Label(LabelArray { shape, data }))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t)?)?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelArray) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_labels(labels)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<PtnsPayload> {
    decode(&fs::read(path)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    match read(path)? {
        PtnsPayload::Real(t) => Ok(t),
        PtnsPayload::Label(_) => Err(Error::Format("expected f32 payload, found labels".into())),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelArray> {
    match read(path)? {
        PtnsPayload::Label(l) => Ok(l),
        PtnsPayload::Real(_) => Err(Error::Format("expected label payload, found f32".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(&bytes[..4], b"PTNS");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::zeros(&[3]);
        let bytes = encode_tensor(&t).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn real_and_label_roundtrip(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            match decode(&encode_tensor(&t).unwrap()).unwrap() {
                PtnsPayload::Real(back) => {
                    prop_assert_eq!(back.shape(), t.shape());
                    let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same);
                }
                _ => prop_assert!(false),
            }
            let labels = LabelArray { shape: dims, data: (0..n).map(|i| (i as u16) ^ (seed as u16)).collect() };
            prop_assert_eq!(decode(&encode_labels(&labels).unwrap()).unwrap(), PtnsPayload::Label(labels));
        }
    }
}
