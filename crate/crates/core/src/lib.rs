//! Decoupled micro-video recommendation on cached frame embeddings.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`numkern`]: tensors, tape-based reverse-mode differentiation, AdamW
//! - [`featstore`]: binary cache of per-video frame-embedding matrices
//! - [`resample`]: key-frame selection policies
//! - [`aggregator`]: the compressed video aggregator and its baselines
//! - [`seqrec`]: causal sequential user encoder and dot-product scoring
//! - [`trainloop`]: in-batch sampled-softmax training
//! - [`evalkit`]: leave-two-out HR/NDCG evaluation
//! - [`dataprep`]: interaction-log ingestion and cleaning
//! - [`config`]: flat `section.key = value` run configuration
//! - [`pipeline`]: the steps above wired end to end
//! - [`gradsuite`]: finite-difference audit of every kernel

pub mod numkern;
pub mod featstore;
pub mod resample;
pub mod aggregator;
pub mod seqrec;
pub mod config;
pub mod evalkit;
pub mod trainloop;
pub mod dataprep;
pub mod gradsuite;
pub mod pipeline;
