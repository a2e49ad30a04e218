//! Fixed-length, masked embedding sequences for one eating episode.

use thiserror::Error;

use crate::dataset::{EpisodeKey, EpisodeRecord, ImageRef, Responses};
use crate::store::{EmbeddingStore, StoreError};

pub const DEFAULT_MAX_LEN: usize = 100;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("sequence length must be positive")]
    ZeroLength,
    #[error("episode {episode}: image `{image_id}` is missing from the embedding store")]
    MissingImage {
        episode: EpisodeKey,
        image_id: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// `max_len × dim` embedding matrix whose first `true_len` rows are real
/// frames in chronological order; the remaining rows are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSequence {
    pub key: EpisodeKey,
    pub labels: Responses,
    max_len: usize,
    dim: usize,
    true_len: usize,
    embeddings: Vec<f32>,
}

impl EpisodeSequence {
    /// Build from already-ordered frame rows; rows beyond `max_len` are dropped.
    pub fn from_rows<'a>(
        key: EpisodeKey,
        labels: Responses,
        max_len: usize,
        dim: usize,
        rows: impl IntoIterator<Item = &'a [f32]>,
    ) -> Self {
        let mut embeddings = vec![0.0; max_len * dim];
        let mut true_len = 0;
        for (dst, row) in embeddings.chunks_exact_mut(dim).zip(rows) {
            assert_eq!(row.len(), dim, "frame row width");
            dst.copy_from_slice(row);
            true_len += 1;
        }
        Self {
            key,
            labels,
            max_len,
            dim,
            true_len,
            embeddings,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    /// Mutable access to the raw matrix. Callers may overwrite padded rows
    /// (e.g. to probe masking); the mask is defined by `true_len` alone.
    pub fn embeddings_mut(&mut self) -> &mut [f32] {
        &mut self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// 1 for real frames, 0 for padding.
    pub fn mask(&self) -> Vec<u8> {
        (0..self.max_len)
            .map(|i| u8::from(i < self.true_len))
            .collect()
    }
}

/// Images inside `[start_time, end_time]`, ordered by timestamp then image id bytes.
pub fn select_frames(e: &EpisodeRecord) -> Vec<&ImageRef> {
    let mut frames: Vec<&ImageRef> = e
        .images
        .iter()
        .filter(|img| img.timestamp >= e.start_time && img.timestamp <= e.end_time)
        .collect();
    frames.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.image_id.as_bytes().cmp(b.image_id.as_bytes()))
    });
    frames
}

/// Keep the first `max_len` chronological frames and zero-pad the rest.
pub fn build_sequence(
    e: &EpisodeRecord,
    store: &EmbeddingStore,
    max_len: usize,
) -> Result<EpisodeSequence, SequenceError> {
    if max_len == 0 {
        return Err(SequenceError::ZeroLength);
    }
    let frames = select_frames(e);
    let rows = frames
        .iter()
        .take(max_len)
        .map(|img| {
            store.get(&img.image_id).map_err(|err| match err {
                StoreError::UnknownId(image_id) => SequenceError::MissingImage {
                    episode: e.key(),
                    image_id,
                },
                other => other.into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EpisodeSequence::from_rows(
        e.key(),
        e.responses,
        max_len,
        store.dimension(),
        rows,
    ))
}
