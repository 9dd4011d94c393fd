//! The shared binary tensor format.
//!
//! Layout: magic `MGT1`, u32 little-endian rank, rank u32 little-endian
//! extents, then the raw f32 little-endian payload. The on-disk payload is
//! always f32 regardless of the in-memory scalar type.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MGT1";

pub fn write_tensor_to<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<S: Scalar, R: Read>(r: &mut R, path: &str) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, path, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_string(),
            expected: "MGT1",
        });
    }
    let mut u32buf = [0u8; 4];
    read_exact(r, &mut u32buf, path, "rank")?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::ExtentMismatch {
            path: path.to_string(),
            detail: format!("rank {rank} outside supported range 1..=8"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        read_exact(r, &mut u32buf, path, &format!("extent {i}"))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|_| Error::TruncatedPayload {
        path: path.to_string(),
        detail: format!("declared extents {shape:?} need {n} f32 values"),
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(&shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::TruncatedPayload {
        path: path.to_string(),
        detail: format!("file ended while reading {what}"),
    })
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor_to(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor_from(&mut f, &path.display().to_string())
}
