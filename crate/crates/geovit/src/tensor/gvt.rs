//! The `.gvt` single-tensor file format.
//!
//! Layout: 4-byte magic `GVT1`, 1 byte dtype code (0=f32, 1=f64, 2=i32,
//! 3=u8), 1 byte rank, 2 zero padding bytes, `rank` u32 little-endian
//! dimension sizes, then the row-major payload in little-endian order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GVT1";
const MAX_RANK: usize = 8;

/// A decoded tensor of any supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum GvtValue {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    I32(Vec<usize>, Vec<i32>),
    U8(Vec<usize>, Vec<u8>),
}

impl GvtValue {
    pub fn dtype(&self) -> Dtype {
        match self {
            GvtValue::F32(..) => Dtype::F32,
            GvtValue::F64(..) => Dtype::F64,
            GvtValue::I32(..) => Dtype::I32,
            GvtValue::U8(..) => Dtype::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            GvtValue::F32(s, _) => s,
            GvtValue::F64(s, _) => s,
            GvtValue::I32(s, _) => s,
            GvtValue::U8(s, _) => s,
        }
    }
}

fn encode_header(dtype: Dtype, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > MAX_RANK {
        return Err(Error::contract(format!(
            "tensor rank {} exceeds the format limit of {MAX_RANK}",
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in shape {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::contract(format!("dimension {d} exceeds u32 range")))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    Ok(out)
}

pub fn encode(value: &GvtValue) -> Result<Vec<u8>> {
    let mut out = encode_header(value.dtype(), value.shape())?;
    match value {
        GvtValue::F32(_, data) => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GvtValue::F64(_, data) => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GvtValue::I32(_, data) => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GvtValue::U8(_, data) => out.extend_from_slice(data),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<GvtValue> {
    let fail = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 8 {
        return Err(fail("shorter than the 8-byte header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not a GVT1 file"));
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or_else(|| fail(&format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if rank > MAX_RANK {
        return Err(fail(&format!("rank {rank} exceeds the format limit of {MAX_RANK}")));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(fail("nonzero padding bytes"));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail("zero-sized dimension"));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("element count overflows"))?;
    let expected = header
        + numel
            .checked_mul(dtype.size_bytes())
            .ok_or_else(|| fail("payload size overflows"))?;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload length mismatch: file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[header..];
    Ok(match dtype {
        Dtype::F32 => GvtValue::F32(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => GvtValue::F64(
            shape,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I32 => GvtValue::I32(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => GvtValue::U8(shape, payload.to_vec()),
    })
}

pub fn write_value(path: &Path, value: &GvtValue) -> Result<()> {
    let bytes = encode(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_value(path: &Path) -> Result<GvtValue> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

/// Writes a float tensor in its native element type.
pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut bytes = encode_header(T::DTYPE, t.shape())?;
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a float tensor, requiring the file's dtype to match `T` exactly.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let value = read_value(path)?;
    let (shape, data): (Vec<usize>, Vec<T>) = match (T::DTYPE, value) {
        (Dtype::F32, GvtValue::F32(s, d)) => (s, d.iter().map(|&v| T::from_f64(v as f64)).collect()),
        (Dtype::F64, GvtValue::F64(s, d)) => (s, d.iter().map(|&v| T::from_f64(v)).collect()),
        (want, got) => {
            return Err(Error::format(
                path.display().to_string(),
                format!("dtype mismatch: file holds {:?}, caller wants {:?}", got.dtype(), want),
            ))
        }
    };
    Tensor::from_vec(shape, data)
}

/// Writes a 0/1-valued mask tensor as u8.
pub fn write_mask<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let data: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            let f = v.as_f64();
            if f == 0.0 {
                Ok(0u8)
            } else if f == 1.0 {
                Ok(1u8)
            } else {
                Err(Error::contract(format!("mask values must be 0 or 1, got {f}")))
            }
        })
        .collect::<Result<_>>()?;
    write_value(path, &GvtValue::U8(t.shape().to_vec(), data))
}

/// Reads a u8 mask back as a float tensor of 0s and 1s.
pub fn read_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    match read_value(path)? {
        GvtValue::U8(shape, data) => {
            for &v in &data {
                if v > 1 {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("mask values must be 0 or 1, got {v}"),
                    ));
                }
            }
            Tensor::from_vec(shape, data.iter().map(|&v| T::from_f64(v as f64)).collect())
        }
        other => Err(Error::format(
            path.display().to_string(),
            format!("expected a u8 mask, file holds {:?}", other.dtype()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let v = GvtValue::F32(vec![2, 3], vec![0.0; 6]);
        let bytes = encode(&v).unwrap();
        assert_eq!(&bytes[0..4], b"GVT1");
        assert_eq!(bytes[4], 0); // f32
        assert_eq!(bytes[5], 2); // rank
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn round_trips_every_dtype() {
        let cases = vec![
            GvtValue::F32(vec![2, 2], vec![1.5, -2.5, 0.0, 3.25]),
            GvtValue::F64(vec![3], vec![1e-300, 0.1, -7.0]),
            GvtValue::I32(vec![2], vec![-5, 123456]),
            GvtValue::U8(vec![4], vec![0, 1, 254, 255]),
        ];
        for v in cases {
            let bytes = encode(&v).unwrap();
            let back = decode(&bytes, "test").unwrap();
            assert_eq!(v, back);
        }
    }

    #[test]
    fn rank_zero_round_trips() {
        let v = GvtValue::F64(vec![], vec![42.0]);
        let bytes = encode(&v).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode(&bytes, "test").unwrap(), v);
    }

    #[test]
    fn rejects_bad_magic() {
        let v = GvtValue::F32(vec![2], vec![1.0, 2.0]);
        let mut bytes = encode(&v).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes, "test").is_err());
    }

    #[test]
    fn rejects_truncation_and_trailing_garbage() {
        let v = GvtValue::F32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = encode(&v).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], "test").is_err());
        assert!(decode(&bytes[..7], "test").is_err());
        assert!(decode(&bytes[..8], "test").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, "test").is_err());
    }

    #[test]
    fn rejects_unknown_dtype_and_zero_dims() {
        let v = GvtValue::F32(vec![2], vec![1.0, 2.0]);
        let mut bytes = encode(&v).unwrap();
        bytes[4] = 9;
        assert!(decode(&bytes, "test").is_err());

        let mut zero_dim = encode(&v).unwrap();
        zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(decode(&zero_dim[..12], "test").is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gvt");
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_vec(), t.to_vec());
        // dtype mismatch is an error, not a silent cast
        assert!(read_tensor::<f64>(&path).is_err());
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gvt");
        let m = Tensor::<f32>::from_vec(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        write_mask(&path, &m).unwrap();
        let back: Tensor<f32> = read_mask(&path).unwrap();
        assert_eq!(back.to_vec(), m.to_vec());

        let bad = Tensor::<f32>::from_vec(vec![1], vec![0.5]).unwrap();
        assert!(write_mask(&path, &bad).is_err());
    }
}
