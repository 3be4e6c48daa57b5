//! Golden tensor container.
//!
//! Layout: `"LATT"`, version byte (1), dtype byte (0 = f32, 1 = f64), rank
//! byte, one zero byte of padding to reach 8 bytes, `rank` little-endian
//! `u64` extents, then the elements little-endian in C order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LATT";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

/// A tensor whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn to_scalar<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor_to<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    let rank = u8::try_from(tensor.ndim()).map_err(|_| Error::Format(format!("rank {} exceeds 255", tensor.ndim())))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * tensor.ndim() + T::DTYPE.size() * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE.code());
    buf.push(rank);
    buf.push(0);
    for &d in tensor.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_tensor<T: Scalar>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_from<R: Read>(mut input: R) -> Result<AnyTensor> {
    let mut header = [0u8; HEADER_LEN];
    input.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let dtype =
        DType::from_code(header[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", header[5])))?;
    let rank = header[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut word = [0u8; 8];
    for _ in 0..rank {
        input.read_exact(&mut word)?;
        let d =
            usize::try_from(u64::from_le_bytes(word)).map_err(|_| Error::Format("extent overflows usize".into()))?;
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let mut body = vec![0u8; count * dtype.size()];
    input.read_exact(&mut body)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(&dims, &body)?),
        DType::F64 => AnyTensor::F64(decode(&dims, &body)?),
    })
}

fn decode<T: Scalar>(dims: &[usize], body: &[u8]) -> Result<Tensor<T>> {
    let data = body.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_tensor_from(BufReader::new(File::open(path)?))
}
