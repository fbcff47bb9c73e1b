//! Flat binary tensor format:
//!
//! ```text
//! magic   [u8; 8]   "ULTENSR1"
//! rank    u32 LE
//! extents u32 LE × rank
//! dtype   u8        0 = f32, 1 = f64
//! payload rank-major little-endian elements
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{numel_of, DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 8] = *b"ULTENSR1";

pub fn write_tensor_to<T: Scalar, W: Write>(t: &Tensor<T>, w: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.rank() * 4 + t.len() * T::DTYPE.size());
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    buf.push(T::DTYPE as u8);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor record, converting the payload to `T` if the stored
/// dtype differs.
pub fn read_tensor_from<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype =
        DType::from_tag(tag[0]).ok_or_else(|| Error::Format(format!("dtype tag {}", tag[0])))?;
    let n = numel_of(&shape);
    let mut payload = vec![0u8; n * dtype.size()];
    r.read_exact(&mut payload)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(&shape, data)
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor_to(t, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor_from(&mut f)
}
