//! Frame-selection policies: title-similarity ("semantic") resampling and
//! the uniform, random and mid-k baselines.
//!
//! All policies return strictly increasing frame indices in `[0, T)`.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::numkern::Prng;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("{0}")]
    Input(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn input<T>(msg: String) -> Result<T, ResampleError> {
    Err(ResampleError::Input(msg))
}

/// Precomputed frame-to-title similarity scores for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    pub video_id: String,
    pub candidate_indices: Vec<u32>,
    pub scores: Vec<f64>,
}

impl SimilarityTable {
    pub fn validate(&self) -> Result<(), ResampleError> {
        if self.candidate_indices.len() != self.scores.len() {
            return input(format!("{}: {} indices but {} scores", self.video_id, self.candidate_indices.len(), self.scores.len()));
        }
        if self.candidate_indices.windows(2).any(|w| w[0] >= w[1]) {
            return input(format!("{}: candidate indices not strictly increasing", self.video_id));
        }
        if self.scores.iter().any(|s| s.is_nan()) {
            return input(format!("{}: NaN score", self.video_id));
        }
        Ok(())
    }

    /// Keeps only the listed candidates, which must all be present.
    pub fn restrict(&self, keep: &[u32]) -> Result<SimilarityTable, ResampleError> {
        let mut scores = Vec::with_capacity(keep.len());
        for k in keep {
            match self.candidate_indices.binary_search(k) {
                Ok(i) => scores.push(self.scores[i]),
                Err(_) => return input(format!("{}: no score for frame {k}", self.video_id)),
            }
        }
        Ok(SimilarityTable { video_id: self.video_id.clone(), candidate_indices: keep.to_vec(), scores })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SamplePolicy {
    Semantic { n_select: usize, n_clips: usize },
    Uniform { n_select: usize },
    Random { n_select: usize, seed: u64 },
    MidK { k: usize },
}

pub const DEFAULT_CLIPS: usize = 100;
pub const DEFAULT_MID_K: usize = 5;

impl SamplePolicy {
    pub fn parse(kind: &str, n_select: usize, n_clips: usize, seed: u64) -> Result<Self, ResampleError> {
        let p = match kind {
            "semantic" => Self::Semantic { n_select, n_clips },
            "uniform" => Self::Uniform { n_select },
            "random" => Self::Random { n_select, seed },
            "mid_k" | "mid-k" => Self::MidK { k: n_select },
            // `mid5` and friends carry their own k
            other => match other.strip_prefix("mid").and_then(|k| k.parse().ok()) {
                Some(k) => Self::MidK { k },
                None => return input(format!("unknown policy {other:?} (semantic, uniform, random, mid_k, midN)")),
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ResampleError> {
        match *self {
            Self::Semantic { n_select, n_clips } if n_clips < n_select => {
                input(format!("n_clips ({n_clips}) must be at least n_select ({n_select})"))
            }
            Self::Semantic { n_select: 0, .. } | Self::Uniform { n_select: 0 } | Self::Random { n_select: 0, .. } | Self::MidK { k: 0 } => {
                input("must select at least one frame".into())
            }
            _ => Ok(()),
        }
    }

    /// Selection for one video. Semantic selection needs the video's table;
    /// the random policy derives its stream from the seed and video id so
    /// results do not depend on processing order.
    pub fn select(&self, frame_count: usize, table: Option<&SimilarityTable>, video_id: &str) -> Result<Vec<u32>, ResampleError> {
        self.validate()?;
        match *self {
            Self::Semantic { n_select, n_clips } => {
                let table = table.ok_or_else(|| ResampleError::Input(format!("{video_id}: no similarity table")))?;
                select_semantic_clips(table, frame_count, n_clips, n_select)
            }
            Self::Uniform { n_select } => select_uniform(frame_count, n_select),
            Self::Random { n_select, seed } => select_random(frame_count, n_select, Prng::new(seed).fork(video_id).seed()),
            Self::MidK { k } => select_mid_k(frame_count, k),
        }
    }
}

/// Middle frame of each of `min(n_clips, T)` equal clips, using
/// `floor((j + 0.5)·T / c)`.
pub fn partition_midpoints(frame_count: usize, n_clips: usize) -> Result<Vec<u32>, ResampleError> {
    if frame_count == 0 {
        return input("video has no frames".into());
    }
    if n_clips == 0 {
        return input("n_clips must be positive".into());
    }
    let c = n_clips.min(frame_count) as u64;
    let t = frame_count as u64;
    // (2j + 1)·T / (2c) is the exact floor of (j + 0.5)·T / c
    let mut out: Vec<u32> = (0..c).map(|j| ((2 * j + 1) * t / (2 * c)) as u32).collect();
    out.dedup();
    Ok(out)
}

/// Top-`n` candidates by score (earlier frame wins ties), in frame order.
pub fn select_semantic(table: &SimilarityTable, n_select: usize) -> Result<Vec<u32>, ResampleError> {
    table.validate()?;
    if n_select == 0 || n_select > table.scores.len() {
        return input(format!("{}: cannot select {n_select} of {} candidates", table.video_id, table.scores.len()));
    }
    let mut order: Vec<usize> = (0..table.scores.len()).collect();
    order.sort_by(|&a, &b| table.scores[b].total_cmp(&table.scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<u32> = order[..n_select].iter().map(|&i| table.candidate_indices[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Full semantic pipeline: split into clips, take each clip's middle frame,
/// keep the `n_select` best-scoring ones.
pub fn select_semantic_clips(table: &SimilarityTable, frame_count: usize, n_clips: usize, n_select: usize) -> Result<Vec<u32>, ResampleError> {
    let mids = partition_midpoints(frame_count, n_clips)?;
    select_semantic(&table.restrict(&mids)?, n_select)
}

pub fn select_uniform(frame_count: usize, n_select: usize) -> Result<Vec<u32>, ResampleError> {
    if n_select == 0 || n_select > frame_count {
        return input(format!("cannot select {n_select} of {frame_count} frames"));
    }
    partition_midpoints(frame_count, n_select)
}

pub fn select_random(frame_count: usize, n_select: usize, seed: u64) -> Result<Vec<u32>, ResampleError> {
    if n_select == 0 || n_select > frame_count {
        return input(format!("cannot select {n_select} of {frame_count} frames"));
    }
    let mut picked: Vec<u32> = Prng::new(seed).sample_distinct(frame_count, n_select).into_iter().map(|i| i as u32).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// `k` consecutive frames starting at `floor((T - k) / 2)`.
pub fn select_mid_k(frame_count: usize, k: usize) -> Result<Vec<u32>, ResampleError> {
    if k == 0 || k > frame_count {
        return input(format!("cannot take {k} middle frames of {frame_count}"));
    }
    let start = (frame_count - k) / 2;
    Ok((start..start + k).map(|i| i as u32).collect())
}

/// One line per video: `id<TAB>idx:score<TAB>idx:score...`.
pub fn write_similarity_tsv(tables: &[SimilarityTable]) -> String {
    let mut s = String::new();
    for t in tables {
        s.push_str(&t.video_id);
        for (i, sc) in t.candidate_indices.iter().zip(&t.scores) {
            let _ = write!(s, "\t{i}:{sc}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_similarity_tsv(text: &str) -> Result<Vec<SimilarityTable>, ResampleError> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |msg: String| ResampleError::Parse { line: line_no, msg };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(err("empty video id".into()));
        }
        if let Some(prev) = seen.insert(id.clone(), line_no) {
            return Err(err(format!("video {id:?} already listed on line {prev}")));
        }
        let mut t = SimilarityTable { video_id: id, candidate_indices: Vec::new(), scores: Vec::new() };
        for f in fields.filter(|f| !f.is_empty()) {
            let (i, s) = f.split_once(':').ok_or_else(|| err(format!("expected index:score, got {f:?}")))?;
            t.candidate_indices.push(i.trim().parse().map_err(|_| err(format!("bad frame index {i:?}")))?);
            t.scores.push(s.trim().parse().map_err(|_| err(format!("bad score {s:?}")))?);
        }
        t.validate().map_err(|e| err(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

/// One line per video: `id<TAB>idx<TAB>idx...`.
pub fn write_manifest(rows: &[(String, Vec<u32>)]) -> String {
    let mut s = String::new();
    for (id, idx) in rows {
        s.push_str(id);
        for i in idx {
            let _ = write!(s, "\t{i}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<(String, Vec<u32>)>, ResampleError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| ResampleError::Parse { line: n + 1, msg };
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(err("empty video id".into()));
        }
        let idx: Vec<u32> = fields
            .filter(|f| !f.is_empty())
            .map(|f| f.trim().parse().map_err(|_| err(format!("bad frame index {f:?}"))))
            .collect::<Result<_, _>>()?;
        if idx.is_empty() || idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err(format!("{id}: indices must be non-empty and strictly increasing")));
        }
        out.push((id, idx));
    }
    Ok(out)
}
