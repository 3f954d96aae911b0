//! Little-endian tensor container.
//!
//! Layout: magic `EDGT`, dtype code (`1` = f32, `2` = u16, `3` = i8), rank,
//! `rank` dimensions as u64, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EDGT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U16,
    I8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::U16 => 2,
            Dtype::I8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U16),
            3 => Ok(Dtype::I8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
            Dtype::I8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U16 => "u16",
            Dtype::I8 => "i8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    U16 { shape: Vec<usize>, data: Vec<u16> },
    I8 { shape: Vec<usize>, data: Vec<i8> },
}

impl StoredTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            StoredTensor::F32(_) => Dtype::F32,
            StoredTensor::U16 { .. } => Dtype::U16,
            StoredTensor::I8 { .. } => Dtype::I8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::U16 { shape, .. } | StoredTensor::I8 { shape, .. } => shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            StoredTensor::F32(t) => Ok(t),
            other => Err(Error::invalid(format!("expected f32 tensor, found {}", other.dtype().name()))),
        }
    }

    pub fn into_u16(self) -> Result<Vec<u16>> {
        match self {
            StoredTensor::U16 { data, .. } => Ok(data),
            other => Err(Error::invalid(format!("expected u16 tensor, found {}", other.dtype().name()))),
        }
    }

    pub fn into_i8(self) -> Result<(Vec<usize>, Vec<i8>)> {
        match self {
            StoredTensor::I8 { shape, data } => Ok((shape, data)),
            other => Err(Error::invalid(format!("expected i8 tensor, found {}", other.dtype().name()))),
        }
    }

    pub fn encoded_len(&self) -> usize {
        6 + 8 * self.shape().len() + self.shape().iter().product::<usize>() * self.dtype().size()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::U16 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::I8 { data, .. } => out.extend(data.iter().map(|&v| v as u8)),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::NotATensorFile);
        }
        let dtype = Dtype::from_code(bytes[4])?;
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(Error::PayloadLength {
                expected: header,
                found: bytes.len(),
            });
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::NotATensorFile)?;
        let payload = &bytes[header..];
        let expected = count.checked_mul(dtype.size()).ok_or(Error::NotATensorFile)?;
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        Ok(match dtype {
            Dtype::F32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect();
                StoredTensor::F32(Tensor::new(shape, data)?)
            }
            Dtype::U16 => StoredTensor::U16 {
                shape,
                data: payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            },
            Dtype::I8 => StoredTensor::I8 {
                shape,
                data: payload.iter().map(|&b| b as i8).collect(),
            },
        })
    }
}

impl From<Tensor<f32>> for StoredTensor {
    fn from(t: Tensor<f32>) -> Self {
        StoredTensor::F32(t)
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    StoredTensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_2x3_layout() {
        let bytes = StoredTensor::F32(Tensor::zeros(&[2, 3])).to_bytes();
        let mut expected = b"EDGT".to_vec();
        expected.extend_from_slice(&[1, 2]);
        expected.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[0; 24]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rank_zero_scalar() {
        let bytes = StoredTensor::F32(Tensor::scalar(7.0)).to_bytes();
        assert_eq!(&bytes[..6], &[b'E', b'D', b'G', b'T', 1, 0]);
        assert_eq!(&bytes[6..], &7.0f32.to_le_bytes());
        assert_eq!(
            StoredTensor::from_bytes(&bytes).unwrap(),
            StoredTensor::F32(Tensor::scalar(7.0))
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = StoredTensor::F32(Tensor::zeros(&[1])).to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = StoredTensor::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "not a tensor file");
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = StoredTensor::F32(Tensor::zeros(&[2, 2])).to_bytes();
        bytes.truncate(bytes.len() - 8);
        let err = StoredTensor::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("payload length mismatch"), "{err}");
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = StoredTensor::F32(Tensor::zeros(&[1])).to_bytes();
        bytes[4] = 9;
        assert!(matches!(StoredTensor::from_bytes(&bytes), Err(Error::UnknownDtype(9))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.edgt");
        let t = StoredTensor::U16 {
            shape: vec![3],
            data: vec![1, 65535, 7],
        };
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    fn stored() -> impl Strategy<Value = StoredTensor> {
        let shape = prop::collection::vec(0usize..5, 0..4);
        shape.prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>(), n)
                    .prop_map({
                        let shape = shape.clone();
                        move |bits| {
                            // arbitrary bit patterns, NaN payloads included
                            let data = bits.into_iter().map(f32::from_bits).collect();
                            StoredTensor::F32(Tensor::new(shape.clone(), data).unwrap())
                        }
                    }),
                prop::collection::vec(any::<u16>(), n).prop_map({
                    let shape = shape.clone();
                    move |data| StoredTensor::U16 { shape: shape.clone(), data }
                }),
                prop::collection::vec(any::<i8>(), n).prop_map({
                    let shape = shape.clone();
                    move |data| StoredTensor::I8 { shape: shape.clone(), data }
                }),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip_is_bit_identical(t in stored()) {
            let bytes = t.to_bytes();
            prop_assert_eq!(bytes.len(), t.encoded_len());
            let back = StoredTensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
