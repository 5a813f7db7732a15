//! Leave-two-out evaluation with HR@K and NDCG@K.
//!
//! Each case ranks one ground-truth item against a candidate list, either
//! popularity-sampled negatives or the whole catalog minus the user's
//! history. Ties are broken by item id: the lower id ranks first.

mod metrics;
mod sampling;
mod split;

use thiserror::Error;

pub use metrics::{evaluate, BucketMetrics, hit_at_k, ndcg_at_k, rank_of, EvalCase, EvalConfig, EvalReport, Metrics, Scorer, TableScorer};
pub use sampling::{popularity_buckets, popularity_counts, sample_negatives, Buckets};
pub use split::{split, Split, SplitUser};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("only {available} eligible negatives, {requested} requested")]
    PoolTooSmall { available: usize, requested: usize },
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("scorer returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error("non-finite score for case {0}")]
    NonFinite(usize),
}
