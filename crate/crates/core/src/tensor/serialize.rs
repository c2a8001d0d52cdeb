//! Binary tensor encoding: magic `DGT1`, `u32` rank, `u64` dims, `u8` dtype
//! code (0 = f32, 1 = f64), then raw little-endian data.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{numel, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"DGT1";

/// Largest element count accepted when decoding.
const MAX_ELEMENTS: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("tensor too large: shape {0:?}")]
    TooLarge(Vec<u64>),
    #[error("truncated input")]
    Truncated,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for DecodeError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            DecodeError::Truncated
        } else {
            DecodeError::Io(e)
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&x| buf.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, DecodeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(DecodeError::TooLarge(vec![rank as u64]));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u64(r)?);
    }
    let too_large = || DecodeError::TooLarge(dims.clone());
    let shape: Vec<usize> = dims
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| too_large()))
        .collect::<Result<_, _>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(too_large)?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let data = match code[0] {
        0 => {
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")) as f64)
                .collect()
        }
        1 => {
            let mut raw = vec![0u8; count * 8];
            r.read_exact(&mut raw)?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
                .collect()
        }
        other => return Err(DecodeError::BadDtype(other)),
    };
    debug_assert_eq!(numel(&shape), count);
    Ok(Tensor::new(shape, data).expect("decoded length matches shape"))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
