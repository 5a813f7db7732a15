//! Cached per-video frame-embedding matrices.
//!
//! Videos are encoded once by a frozen image encoder; this module stores the
//! resulting `N x D` matrices in a single little-endian file with a sorted
//! index at the head, so any record can be read without touching the others.

mod cache;
mod synth;

use thiserror::Error;

pub use cache::{cache_stats, payload_bytes, read_cache, write_cache, write_cache_to, CacheReader, CacheStats, CACHE_VERSION, MAGIC};
pub use synth::{synth_generate, synth_similarity, SynthVideos, SyntheticVfmSpec};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a feature cache (bad magic bytes)")]
    BadMagic,
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u32),
    #[error("cache file is truncated: {0}")]
    Truncated(String),
    #[error("corrupt cache: {0}")]
    Corrupt(String),
    #[error("duplicate video id {0:?}")]
    DuplicateId(String),
    #[error("video {id:?} has dim {got}, expected {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("video {0:?} is not in the cache")]
    MissingId(String),
    #[error("invalid frame matrix for {id:?}: {reason}")]
    Invalid { id: String, reason: String },
}

/// Frame embeddings of one video, row-major `n_frames x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureMatrix {
    pub video_id: String,
    pub dim: usize,
    /// Source frame index of every row, strictly increasing.
    pub timestamps: Vec<u32>,
    pub data: Vec<f32>,
}

impl FrameFeatureMatrix {
    pub fn new(video_id: impl Into<String>, dim: usize, timestamps: Vec<u32>, data: Vec<f32>) -> Result<Self, CacheError> {
        let m = Self { video_id: video_id.into(), dim, timestamps, data };
        m.validate()?;
        Ok(m)
    }

    pub fn n_frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let bad = |reason: String| Err(CacheError::Invalid { id: self.video_id.clone(), reason });
        if self.timestamps.is_empty() {
            return bad("no frames".into());
        }
        if self.data.len() != self.timestamps.len() * self.dim {
            return bad(format!("{} values for {} x {}", self.data.len(), self.timestamps.len(), self.dim));
        }
        if self.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("timestamps not strictly increasing".into());
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(())
    }

    /// Rows whose timestamps appear in `keep` (which must be a subset).
    pub fn select_timestamps(&self, keep: &[u32]) -> Result<Self, CacheError> {
        let mut timestamps = Vec::with_capacity(keep.len());
        let mut data = Vec::with_capacity(keep.len() * self.dim);
        for t in keep {
            let row = self.timestamps.binary_search(t).map_err(|_| CacheError::Invalid {
                id: self.video_id.clone(),
                reason: format!("frame {t} is not cached"),
            })?;
            timestamps.push(*t);
            data.extend_from_slice(self.row(row));
        }
        Self::new(self.video_id.clone(), self.dim, timestamps, data)
    }
}
