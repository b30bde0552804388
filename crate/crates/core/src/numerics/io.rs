//! Binary tensor format.
//!
//! Layout (all little-endian): magic `"ACTT"`, version `u32`, rank `u32`,
//! extents `u64[rank]`, precision `u8` (0 = single, 1 = double), then the raw
//! scalars (`f32` for single, `f64` for double) in row-major order.

use std::io::{Read, Write};

use crate::error::{ActError, Result};
use crate::numerics::tensor::{Precision, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"ACTT";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match t.precision() {
        Precision::Single => {
            w.write_all(&[0u8])?;
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Precision::Double => {
            w.write_all(&[1u8])?;
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(ActError::BadFormat(format!(
            "bad tensor magic {magic:?}"
        )));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(ActError::BadFormat(format!(
            "unsupported tensor version {version}"
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(ActError::BadFormat(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let n: usize = shape.iter().product();
    let (precision, data) = match tag[0] {
        0 => {
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            (Precision::Single, data)
        }
        1 => {
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            (Precision::Double, data)
        }
        other => {
            return Err(ActError::BadFormat(format!(
                "unknown precision tag {other}"
            )))
        }
    };
    Tensor::new(shape, data, precision)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_double() {
        let t = Tensor::new(
            vec![2, 3],
            vec![1.5, -2.25, 0.1, 1e-300, 3.0, -0.0],
            Precision::Double,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn round_trip_single() {
        let t = Tensor::new(vec![4], vec![0.1, 0.2, -7.0, 42.0], Precision::Single).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        write_tensor(
            &mut buf,
            &Tensor::new(vec![1], vec![1.0], Precision::Double).unwrap(),
        )
        .unwrap();
        buf[0] = b'X';
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_truncation() {
        let t = Tensor::new(vec![8], vec![1.0; 8], Precision::Double).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
