//! Write-once, read-many store of per-image embedding vectors (`EMB1` files).
//!
//! Layout, little-endian: magic `EMB1`, version u32 (= 1), dimension u32,
//! record count u64, then `count` records of id length u16, UTF-8 id bytes
//! and `dimension` binary32 values. Records are sorted by id byte order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::container::{self, ContainerError, Header, Reader};

pub const MAGIC: &[u8; 4] = b"EMB1";
/// Width of a ViT-B/32 image embedding.
pub const DEFAULT_DIMENSION: usize = 512;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot access embedding store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid embedding store: {0}")]
    Format(#[from] ContainerError),
    #[error("embedding store dimension must be positive")]
    ZeroDimension,
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("records out of order at `{0}`: ids must be sorted by byte order")]
    Unsorted(String),
    #[error("image id `{0}` is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("non-finite value in embedding for `{0}`")]
    NonFinite(String),
    #[error("embedding for `{id}` has length {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown image id `{0}`")]
    UnknownId(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    /// Build an in-memory store, applying the same checks as [`write_store`].
    pub fn from_records(
        dimension: usize,
        records: impl IntoIterator<Item = (String, Vec<f32>)>,
    ) -> Result<Self, StoreError> {
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let mut records: Vec<(String, Vec<f32>)> = records.into_iter().collect();
        records.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
        let mut store = EmbeddingStore {
            dimension,
            ids: Vec::with_capacity(records.len()),
            index: HashMap::with_capacity(records.len()),
            data: Vec::with_capacity(records.len() * dimension),
        };
        for (id, v) in records {
            check_record(dimension, &id, &v)?;
            store.push(id, &v)?;
        }
        Ok(store)
    }

    fn push(&mut self, id: String, values: &[f32]) -> Result<(), StoreError> {
        if self.index.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in stored (byte-sorted) order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    pub fn get(&self, image_id: &str) -> Result<&[f32], StoreError> {
        let i = *self
            .index
            .get(image_id)
            .ok_or_else(|| StoreError::UnknownId(image_id.to_owned()))?;
        Ok(&self.data[i * self.dimension..(i + 1) * self.dimension])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dimension))
            .map(|(id, v)| (id.as_str(), v))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf =
            Vec::with_capacity(container::HEADER_LEN + self.len() * (2 + 16 + 4 * self.dimension));
        container::write_header(
            &mut buf,
            MAGIC,
            Header {
                dimension: self.dimension as u32,
                count: self.len() as u64,
            },
        );
        for (id, v) in self.iter() {
            container::write_key(&mut buf, id);
            container::write_f32s(&mut buf, v);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader::new(bytes);
        let header = r.header(MAGIC)?;
        let dimension = header.dimension as usize;
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        // Cap the preallocation: a corrupt count must not trigger a huge allocation.
        let capacity = (header.count as usize).min(bytes.len() / (2 + 4 * dimension) + 1);
        let mut store = EmbeddingStore {
            dimension,
            ids: Vec::with_capacity(capacity),
            index: HashMap::with_capacity(capacity),
            data: Vec::with_capacity(capacity * dimension),
        };
        let mut values = Vec::with_capacity(dimension);
        for _ in 0..header.count {
            let id = r.key()?;
            values.clear();
            r.f32s(dimension, &mut values)?;
            if values.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite(id));
            }
            if let Some(prev) = store.ids.last() {
                match prev.as_bytes().cmp(id.as_bytes()) {
                    std::cmp::Ordering::Less => {}
                    std::cmp::Ordering::Equal => return Err(StoreError::DuplicateId(id)),
                    std::cmp::Ordering::Greater => return Err(StoreError::Unsorted(id)),
                }
            }
            store.push(id, &values)?;
        }
        r.finish()?;
        Ok(store)
    }
}

fn check_record(dimension: usize, id: &str, v: &[f32]) -> Result<(), StoreError> {
    if id.len() > u16::MAX as usize {
        return Err(StoreError::IdTooLong(id.to_owned()));
    }
    if v.len() != dimension {
        return Err(StoreError::DimensionMismatch {
            id: id.to_owned(),
            expected: dimension,
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::NonFinite(id.to_owned()));
    }
    Ok(())
}

pub fn open_store(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingStore::decode(&bytes)
}

/// Validate and write `records`. Nothing is written if any record is rejected.
pub fn write_store(
    path: &Path,
    dimension: usize,
    records: impl IntoIterator<Item = (String, Vec<f32>)>,
) -> Result<(), StoreError> {
    let store = EmbeddingStore::from_records(dimension, records)?;
    save_store(path, &store)
}

pub fn save_store(path: &Path, store: &EmbeddingStore) -> Result<(), StoreError> {
    fs::write(path, store.encode()).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize, dim: usize) -> Vec<(String, Vec<f32>)> {
        (0..n)
            .map(|i| {
                (
                    format!("img{i:03}"),
                    (0..dim)
                        .map(|j| (i * dim + j) as f32 * 0.25 - 3.0)
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn write_open_get_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let recs = records(3, 8);
        write_store(&path, 8, recs.clone()).unwrap();
        let h = open_store(&path).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.dimension(), 8);
        for (id, v) in &recs {
            assert_eq!(h.get(id).unwrap(), v.as_slice());
        }
    }

    #[test]
    fn unknown_id() {
        let h = EmbeddingStore::from_records(4, records(2, 4)).unwrap();
        assert!(matches!(h.get("missing"), Err(StoreError::UnknownId(id)) if id == "missing"));
    }

    #[test]
    fn deterministic_bytes_regardless_of_input_order() {
        let recs = records(5, 4);
        let mut reversed = recs.clone();
        reversed.reverse();
        let a = EmbeddingStore::from_records(4, recs).unwrap().encode();
        let b = EmbeddingStore::from_records(4, reversed).unwrap().encode();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_header_layout() {
        let bytes = EmbeddingStore::from_records(2, vec![("ab".into(), vec![1.0, -2.5])])
            .unwrap()
            .encode();
        let mut expected = b"EMB1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn nan_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.emb");
        let mut recs = records(3, 4);
        recs[1].1[2] = f32::NAN;
        assert!(matches!(
            write_store(&path, 4, recs),
            Err(StoreError::NonFinite(id)) if id == "img001"
        ));
        assert!(!path.exists());
    }

    #[test]
    fn write_rejects_duplicates_and_bad_dimension() {
        let mut recs = records(2, 4);
        recs.push(recs[0].clone());
        assert!(matches!(
            EmbeddingStore::from_records(4, recs),
            Err(StoreError::DuplicateId(_))
        ));
        assert!(matches!(
            EmbeddingStore::from_records(5, records(1, 4)),
            Err(StoreError::DimensionMismatch {
                expected: 5,
                found: 4,
                ..
            })
        ));
        assert!(matches!(
            EmbeddingStore::from_records(0, Vec::new()),
            Err(StoreError::ZeroDimension)
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = EmbeddingStore::from_records(4, records(1, 4))
            .unwrap()
            .encode();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingStore::decode(&bytes),
            Err(StoreError::Format(ContainerError::BadMagic { .. }))
        ));
    }

    #[test]
    fn bad_version() {
        let mut bytes = EmbeddingStore::from_records(4, records(1, 4))
            .unwrap()
            .encode();
        bytes[4] = 9;
        assert!(matches!(
            EmbeddingStore::decode(&bytes),
            Err(StoreError::Format(ContainerError::UnsupportedVersion(9)))
        ));
    }

    #[test]
    fn truncated_mid_record_names_offset() {
        let bytes = EmbeddingStore::from_records(4, records(2, 4))
            .unwrap()
            .encode();
        let cut = bytes.len() - 5;
        let err = EmbeddingStore::decode(&bytes[..cut]).unwrap_err();
        match err {
            StoreError::Format(ContainerError::Truncated { offset, needed }) => {
                assert_eq!(offset, cut);
                assert_eq!(needed, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string(&bytes[..cut]).contains(&format!("offset {cut}")));
    }

    fn err_string(bytes: &[u8]) -> String {
        EmbeddingStore::decode(bytes).unwrap_err().to_string()
    }

    #[test]
    fn duplicate_and_unsorted_ids_on_read() {
        let mut buf = Vec::new();
        container::write_header(
            &mut buf,
            MAGIC,
            Header {
                dimension: 1,
                count: 2,
            },
        );
        for id in ["b", "a"] {
            container::write_key(&mut buf, id);
            container::write_f32s(&mut buf, &[0.0]);
        }
        assert!(matches!(
            EmbeddingStore::decode(&buf),
            Err(StoreError::Unsorted(_))
        ));

        let mut buf = Vec::new();
        container::write_header(
            &mut buf,
            MAGIC,
            Header {
                dimension: 1,
                count: 2,
            },
        );
        for id in ["a", "a"] {
            container::write_key(&mut buf, id);
            container::write_f32s(&mut buf, &[0.0]);
        }
        assert!(matches!(
            EmbeddingStore::decode(&buf),
            Err(StoreError::DuplicateId(_))
        ));
    }

    #[test]
    fn zero_dimension_and_trailing_bytes() {
        let mut buf = Vec::new();
        container::write_header(
            &mut buf,
            MAGIC,
            Header {
                dimension: 0,
                count: 0,
            },
        );
        assert!(matches!(
            EmbeddingStore::decode(&buf),
            Err(StoreError::ZeroDimension)
        ));

        let mut bytes = EmbeddingStore::from_records(2, records(1, 2))
            .unwrap()
            .encode();
        bytes.push(0);
        assert!(matches!(
            EmbeddingStore::decode(&bytes),
            Err(StoreError::Format(ContainerError::TrailingBytes {
                count: 1,
                ..
            }))
        ));
    }
}
