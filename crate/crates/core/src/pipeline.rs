//! End-to-end wiring used by the command-line tool and the desk-scale
//! experiments: synthesize, select frames, index, train, evaluate.

use std::collections::HashMap;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataprep::{clean, index_sequences, synth_interactions, InteractionRecord, PrepError, UserSequence};
use crate::evalkit::{popularity_counts, split, EvalReport, Split};
use crate::featstore::{synth_generate, synth_similarity, CacheError, FrameFeatureMatrix, SynthVideos};
use crate::numkern::Real;
use crate::resample::{ResampleError, SamplePolicy, SimilarityTable};
use crate::trainloop::{evaluate_model, train, Model, Target, TrainData, TrainError, TrainStats};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Train(e) if e.is_numeric())
    }
}

pub struct SynthArtifacts {
    pub videos: SynthVideos,
    pub similarity: Vec<SimilarityTable>,
    pub log: Vec<InteractionRecord>,
}

pub fn synthesize(cfg: &RunConfig) -> Result<SynthArtifacts, PipelineError> {
    let s = &cfg.synth;
    let videos = synth_generate(&s.vfm, s.n_videos).map_err(PipelineError::Data)?;
    let similarity = synth_similarity(&videos, s.score_sigma, cfg.similarity_seed());
    let ids: Vec<String> = videos.matrices.iter().map(|m| m.video_id.clone()).collect();
    let log = synth_interactions(&s.interactions, &ids, &videos.topics, s.vfm.n_topics)?;
    Ok(SynthArtifacts { videos, similarity, log })
}

/// Frames chosen by `policy` for every video. A video's frame count is
/// taken as one past its last cached timestamp.
pub fn select_frames(
    matrices: &[FrameFeatureMatrix],
    tables: &[SimilarityTable],
    policy: &SamplePolicy,
) -> Result<Vec<(String, Vec<u32>)>, PipelineError> {
    let by_id: HashMap<&str, &SimilarityTable> = tables.iter().map(|t| (t.video_id.as_str(), t)).collect();
    matrices
        .iter()
        .map(|m| {
            let frames = *m.timestamps.last().expect("validated matrices are non-empty") as usize + 1;
            let picked = policy.select(frames, by_id.get(m.video_id.as_str()).copied(), &m.video_id)?;
            Ok((m.video_id.clone(), picked))
        })
        .collect()
}

/// Restricts each video to its manifest frames. Videos missing from the
/// manifest are dropped.
pub fn apply_selection(matrices: &[FrameFeatureMatrix], manifest: &[(String, Vec<u32>)]) -> Result<Vec<FrameFeatureMatrix>, PipelineError> {
    let by_id: HashMap<&str, &FrameFeatureMatrix> = matrices.iter().map(|m| (m.video_id.as_str(), m)).collect();
    manifest
        .iter()
        .map(|(id, keep)| {
            let m = by_id.get(id.as_str()).ok_or_else(|| PipelineError::Data(format!("video {id:?} is not in the cache")))?;
            Ok(m.select_timestamps(keep)?)
        })
        .collect()
}

/// Indexed interactions over a fixed catalog, split for training.
pub struct Dataset {
    /// Video ids, sorted; item `i` is `catalog[i]`.
    pub catalog: Vec<String>,
    pub features: Vec<FrameFeatureMatrix>,
    pub sequences: Vec<Vec<usize>>,
    pub split: Split,
    pub counts: Vec<u64>,
}

impl Dataset {
    pub fn new(mut features: Vec<FrameFeatureMatrix>, seqs: &[UserSequence], max_seq_len: usize) -> Result<Self, PipelineError> {
        features.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let catalog: Vec<String> = features.iter().map(|m| m.video_id.clone()).collect();
        let sequences = index_sequences(seqs, &catalog)?;
        let split = split(&sequences, max_seq_len);
        if split.users.is_empty() {
            return Err(PipelineError::Data("no user has the three interactions needed for evaluation".into()));
        }
        let counts = popularity_counts(&sequences, catalog.len());
        Ok(Self { catalog, features, sequences, split, counts })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData { features: &self.features, split: &self.split, counts: &self.counts }
    }
}

pub struct RunOutput<T> {
    pub final_model: Model<T>,
    pub best_model: Model<T>,
    pub stats: TrainStats,
    /// Test-target report of the best model.
    pub report: EvalReport,
}

/// Trains a fresh model on `data` and scores the test targets.
pub fn train_and_evaluate<T: Real>(
    data: &Dataset,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&crate::trainloop::EpochStats),
) -> Result<RunOutput<T>, PipelineError> {
    let mut model = Model::<T>::new(&cfg.model, cfg.init_seed())?;
    let td = data.train_data();
    let out = train(&mut model, &cfg.train, &cfg.eval, &td, on_epoch)?;
    let mut report = evaluate_model(&out.best, &td, Target::Test, &cfg.eval)?;
    report.echo = echo(cfg, &out.stats);
    Ok(RunOutput { final_model: model, best_model: out.best, stats: out.stats, report })
}

/// Every configuration key and value, for provenance.
pub fn config_echo(cfg: &RunConfig) -> Vec<(String, String)> {
    let kv = cfg.to_kv();
    kv.keys().map(|k| (k.to_string(), kv.raw(k).unwrap_or_default().to_string())).collect()
}

/// Provenance lines attached to reports.
pub fn echo(cfg: &RunConfig, stats: &TrainStats) -> Vec<(String, String)> {
    let mut v = config_echo(cfg);
    v.push(("params.total".into(), stats.param_count.to_string()));
    v.push(("params.aggregator".into(), stats.aggregator_params.to_string()));
    v.push(("train.best_epoch".into(), stats.best_epoch.to_string()));
    v
}

/// Synthesizes a benchmark and prepares it end to end, without touching disk.
pub fn synthetic_dataset(cfg: &RunConfig) -> Result<(SynthArtifacts, Dataset), PipelineError> {
    let art = synthesize(cfg)?;
    let manifest = select_frames(&art.videos.matrices, &art.similarity, &cfg.sample_policy()?)?;
    let features = apply_selection(&art.videos.matrices, &manifest)?;
    let seqs = clean(&art.log)?;
    let data = Dataset::new(features, &seqs, cfg.model.seq.max_seq_len)?;
    Ok((art, data))
}
