//! Interaction logs: parsing, cleaning into per-user sequences, dataset
//! statistics and a synthetic generator.

mod clean;
mod parse;
mod stats;
mod synth;

use thiserror::Error;

pub use clean::{clean, index_sequences, parse_sequences, to_records, write_sequences, UserSequence, MIN_USER_LEN};
pub use parse::{parse_log, parse_log_str, ParseOptions, ParsedLog};
pub use stats::{stats, DatasetStats};
pub use synth::{synth_interactions, write_log, SynthInteractionSpec};

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log has no header line")]
    MissingHeader,
    #[error("header lacks a {0} column")]
    MissingColumn(&'static str),
    #[error("{malformed} of {lines} lines malformed (cap {cap_pct}%); first at line {first_line}")]
    TooManyMalformed { malformed: usize, lines: usize, cap_pct: f64, first_line: usize },
    #[error("no data survives cleaning ({records} records from {users} users, {videos} videos)")]
    Empty { records: usize, users: usize, videos: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown video {0:?}")]
    UnknownVideo(String),
    #[error("invalid spec: {0}")]
    Spec(String),
}

/// One exposure of a user to a video.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InteractionRecord {
    pub user_id: String,
    pub video_id: String,
    /// Unix seconds.
    pub exposed_time: u64,
}

impl InteractionRecord {
    pub fn new(user: &str, video: &str, time: u64) -> Self {
        Self { user_id: user.into(), video_id: video.into(), exposed_time: time }
    }
}
