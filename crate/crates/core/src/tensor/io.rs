//! `PCTN` binary tensor files.
//!
//! Layout (little endian): magic `PCTN`, `u32` rank, `rank` x `u32` dims,
//! `u8` dtype code (0 = f32, 1 = f64), then the raw values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::array::{check_shape, numel, Tensor};
use super::error::{Result, TensorError};
use super::real::{DType, Real};

pub const MAGIC: &[u8; 4] = b"PCTN";

pub fn encode<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * tensor.rank() + tensor.numel() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.code());
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_to<T: Real, W: Write>(tensor: &Tensor<T>, mut w: W) -> Result<()> {
    w.write_all(&encode(tensor))?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| TensorError::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads one tensor record from `r`, leaving the reader positioned after it.
pub fn read_from<T: Real, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| TensorError::Format(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            "PCTN"
        )));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 16 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    check_shape(&shape).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)
        .map_err(|e| TensorError::Format(format!("truncated dtype: {e}")))?;
    let dtype =
        DType::from_code(code[0]).ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", code[0])))?;
    if dtype != T::DTYPE {
        return Err(TensorError::Format(format!(
            "stored dtype {dtype:?} does not match requested {:?}",
            T::DTYPE
        )));
    }
    let n = numel(&shape);
    let width = dtype.width();
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)
        .map_err(|e| TensorError::Format(format!("truncated payload: {e}")))?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cursor = bytes;
    let t = read_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after tensor",
            cursor.len()
        )));
    }
    Ok(t)
}

pub fn save<T: Real>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"PCTN");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], 0);
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[21..25], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 25);
    }

    #[test]
    fn f64_roundtrip_and_dtype_code() {
        let t = Tensor::<f64>::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes[12], 1);
        assert_eq!(decode::<f64>(&bytes).unwrap(), t);
        assert!(decode::<f32>(&bytes).is_err());
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let t = Tensor::<f32>::zeros(vec![2, 2]);
        let mut bytes = encode(&t);
        bytes[0] = b'X';
        match decode::<f32>(&bytes) {
            Err(TensorError::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::<f32>::ones(vec![4]);
        let bytes = encode(&t);
        assert!(matches!(
            decode::<f32>(&bytes[..bytes.len() - 1]),
            Err(TensorError::Format(_))
        ));
    }
}
