//! Browser demo over the core crate. Each export has a plain Rust twin that
//! the native tests call; the `#[wasm_bindgen]` wrappers only convert errors.

use cvarec_core::aggregator::{AggError, Cva, CvaConfig, FrameBatch};
use cvarec_core::evalkit::{hit_at_k, ndcg_at_k, rank_of};
use cvarec_core::featstore::{CacheError, FrameFeatureMatrix};
use cvarec_core::numkern::{Graph, ParamStore, Prng, Tensor};
use cvarec_core::resample::{ResampleError, SamplePolicy, SimilarityTable};
use wasm_bindgen::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Aggregator(#[from] AggError),
    #[error(transparent)]
    Features(#[from] CacheError),
    #[error("{0}")]
    Input(String),
}

fn js<T>(r: Result<T, DemoError>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Synthetic per-frame title similarity: a few relevant scenes on a noisy floor.
pub fn frame_scores_native(frame_count: usize, seed: u64) -> Vec<f64> {
    let mut rng = Prng::new(seed).fork("demo/scores");
    let scenes: Vec<(f64, f64)> = (0..3).map(|_| (rng.uniform() * frame_count as f64, 1.0 + rng.uniform() * frame_count as f64 / 20.0)).collect();
    (0..frame_count)
        .map(|t| {
            let bump: f64 = scenes.iter().map(|&(c, w)| (-((t as f64 - c) / w).powi(2)).exp()).sum();
            0.2 * rng.uniform() + bump.min(1.0)
        })
        .collect()
}

pub fn select_frames_native(policy: &str, frame_count: usize, n_select: usize, n_clips: usize, seed: u64) -> Result<Vec<u32>, DemoError> {
    if frame_count == 0 {
        return Err(DemoError::Input("a video needs at least one frame".into()));
    }
    let table = SimilarityTable {
        video_id: "demo".into(),
        candidate_indices: (0..frame_count as u32).collect(),
        scores: frame_scores_native(frame_count, seed),
    };
    let policy = SamplePolicy::parse(policy, n_select, n_clips, seed)?;
    Ok(policy.select(frame_count, Some(&table), "demo")?)
}

pub const LATENT_COUNTS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Aggregates the same random videos with every latent count and returns,
/// per count, the largest deviation from the single-latent embedding.
pub fn latent_invariance_native(n_frames: usize, seed: u64) -> Result<Vec<f64>, DemoError> {
    if n_frames == 0 {
        return Err(DemoError::Input("a video needs at least one frame".into()));
    }
    let dim = 16;
    let mut rng = Prng::new(seed).fork("demo/frames");
    let videos = (0..3)
        .map(|v| {
            let n = 1 + rng.below(n_frames);
            FrameFeatureMatrix::new(format!("v{v}"), dim, (0..n as u32).collect(), (0..n * dim).map(|_| rng.normal() as f32).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&FrameFeatureMatrix> = videos.iter().collect();
    let batch = FrameBatch::<f64>::new(&refs, None)?;
    let mut first: Option<Tensor<f64>> = None;
    let mut out = Vec::new();
    for k in LATENT_COUNTS {
        let cfg = CvaConfig { dim_in: dim, dim_latent: dim, n_latents: k, depth: 2, heads: 2, ffn_mult: 2.0 };
        let mut store = ParamStore::new();
        let cva = Cva::new(&mut store, "cva", &cfg, &mut Prng::new(seed).fork("demo/init"))?;
        let mut g = Graph::with_params(&store);
        let x = g.constant(batch.frames.clone());
        let y = cva.forward(&mut g, x, batch.segments.clone())?;
        let e = g.value(y).clone();
        out.push(first.as_ref().map_or(0.0, |f| f.max_abs_diff(&e)));
        first.get_or_insert(e);
    }
    Ok(out)
}

/// Hit rate then NDCG (both in percent) for cutoffs 1..=k_max, from a toy
/// scorer where the true item gets `signal` added to a unit normal score.
pub fn metric_curves_native(n_cases: usize, n_candidates: usize, signal: f64, k_max: usize, seed: u64) -> Result<Vec<f64>, DemoError> {
    if n_cases == 0 || n_candidates == 0 || k_max == 0 {
        return Err(DemoError::Input("cases, candidates and the cutoff must be positive".into()));
    }
    let mut rng = Prng::new(seed).fork("demo/ranks");
    let candidates: Vec<usize> = (0..n_candidates).collect();
    let ranks: Vec<usize> = (0..n_cases)
        .map(|_| {
            let truth = rng.below(n_candidates);
            let scores: Vec<f64> = candidates.iter().map(|&c| rng.normal() + if c == truth { signal } else { 0.0 }).collect();
            rank_of(&candidates, &scores, truth)
        })
        .collect();
    let mean = |f: fn(usize, usize) -> f64, k: usize| 100.0 * ranks.iter().map(|&r| f(r, k)).sum::<f64>() / n_cases as f64;
    Ok((1..=k_max).map(|k| mean(hit_at_k, k)).chain((1..=k_max).map(|k| mean(ndcg_at_k, k))).collect())
}

#[wasm_bindgen]
pub fn frame_scores(frame_count: u32, seed: u32) -> Vec<f64> {
    frame_scores_native(frame_count as usize, seed.into())
}

#[wasm_bindgen]
pub fn select_frames(policy: &str, frame_count: u32, n_select: u32, n_clips: u32, seed: u32) -> Result<Vec<u32>, JsError> {
    js(select_frames_native(policy, frame_count as usize, n_select as usize, n_clips as usize, seed.into()))
}

#[wasm_bindgen]
pub fn latent_invariance(n_frames: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    js(latent_invariance_native(n_frames as usize, seed.into()))
}

#[wasm_bindgen]
pub fn metric_curves(n_cases: u32, n_candidates: u32, signal: f64, k_max: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    js(metric_curves_native(n_cases as usize, n_candidates as usize, signal, k_max as usize, seed.into()))
}
