//! Little-endian binary container shared by embedding stores and parameter
//! checkpoints.
//!
//! Header: 4-byte magic, format version u32, dimension u32, record count u64.
//! Record layout is up to the caller; [`Reader`] tracks byte offsets so that
//! truncation errors can name where the file ended.

use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Error, PartialEq)]
pub enum ContainerError {
    #[error("bad magic bytes {found:?} (expected {expected:?})")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid UTF-8 key at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("{count} trailing bytes after last record at byte offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dimension: u32,
    pub count: u64,
}

pub fn write_header(buf: &mut Vec<u8>, magic: &[u8; 4], header: Header) {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&header.dimension.to_le_bytes());
    buf.extend_from_slice(&header.count.to_le_bytes());
}

pub fn write_key(buf: &mut Vec<u8>, key: &str) {
    let len = u16::try_from(key.len()).expect("key length checked by caller");
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(key.as_bytes());
}

pub fn write_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(ContainerError::Truncated {
                offset: self.bytes.len(),
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ContainerError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn header(&mut self, magic: &[u8; 4]) -> Result<Header, ContainerError> {
        let found = self.array::<4>()?;
        if &found != magic {
            return Err(ContainerError::BadMagic {
                found,
                expected: *magic,
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        Ok(Header {
            dimension: self.u32()?,
            count: self.u64()?,
        })
    }

    pub fn key(&mut self) -> Result<String, ContainerError> {
        let len = self.u16()? as usize;
        let offset = self.pos;
        let raw = self.take(len)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| ContainerError::InvalidUtf8 { offset })
    }

    pub fn f32s(&mut self, n: usize, out: &mut Vec<f32>) -> Result<(), ContainerError> {
        let raw = self.take(n * 4)?;
        out.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))),
        );
        Ok(())
    }

    pub fn finish(&self) -> Result<(), ContainerError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(ContainerError::TrailingBytes {
                offset: self.pos,
                count: self.bytes.len() - self.pos,
            })
        }
    }
}
