//! Named-tensor checkpoints (`PRM1` files).
//!
//! Same container as embedding stores with magic `PRM1`; the header's
//! dimension field is 0 because shapes vary per record. Each record is a
//! name (u16 length + UTF-8), rank u8, `rank` dims as u32, then the binary32
//! values. Records are sorted by name byte order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::tensor::Tensor;
use crate::container::{self, ContainerError, Header, Reader};

pub const MAGIC: &[u8; 4] = b"PRM1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint: {0}")]
    Format(#[from] ContainerError),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameter `{0}` has an invalid shape")]
    BadShape(String),
    #[error("parameter name `{0}` is longer than 65535 bytes")]
    NameTooLong(String),
}

pub fn encode_checkpoint(params: &[(String, Tensor<f32>)]) -> Result<Vec<u8>, CheckpointError> {
    let mut sorted: Vec<&(String, Tensor<f32>)> = params.iter().collect();
    sorted.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(CheckpointError::DuplicateName(pair[0].0.clone()));
        }
    }
    let mut buf = Vec::new();
    container::write_header(
        &mut buf,
        MAGIC,
        Header {
            dimension: 0,
            count: sorted.len() as u64,
        },
    );
    for (name, t) in sorted {
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::NameTooLong(name.clone()));
        }
        if t.rank() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(CheckpointError::BadShape(name.clone()));
        }
        container::write_key(&mut buf, name);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        container::write_f32s(&mut buf, t.data());
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = Reader::new(bytes);
    let header = r.header(MAGIC)?;
    let mut out: Vec<(String, Tensor<f32>)> = Vec::new();
    for _ in 0..header.count {
        let name = r.key()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if rank == 0 || n == 0 {
            return Err(CheckpointError::BadShape(name));
        }
        let mut data = Vec::with_capacity(n.min(bytes.len() / 4));
        r.f32s(n, &mut data)?;
        if out
            .last()
            .is_some_and(|(prev, _)| prev.as_bytes() >= name.as_bytes())
        {
            return Err(CheckpointError::DuplicateName(name));
        }
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::BadShape(name.clone()))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    params: &[(String, Tensor<f32>)],
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
