use crate::numkern::Prng;
use crate::resample::SimilarityTable;

use super::FrameFeatureMatrix;

/// Generator for synthetic frame embeddings standing in for a frozen
/// vision encoder. Each video belongs to one topic; its signal frames sit
/// near the topic centroid and its noise frames point anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVfmSpec {
    pub n_topics: usize,
    pub dim: usize,
    pub signal_frames_per_video: usize,
    pub noise_frames_per_video: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticVfmSpec {
    fn default() -> Self {
        Self { n_topics: 50, dim: 64, signal_frames_per_video: 6, noise_frames_per_video: 14, noise_sigma: 0.1, seed: 42 }
    }
}

impl SyntheticVfmSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_topics < 2 {
            return Err(format!("n_topics must be at least 2, got {}", self.n_topics));
        }
        if self.dim < 8 {
            return Err(format!("dim must be at least 8, got {}", self.dim));
        }
        if self.signal_frames_per_video + self.noise_frames_per_video == 0 {
            return Err("videos need at least one frame".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn frames_per_video(&self) -> usize {
        self.signal_frames_per_video + self.noise_frames_per_video
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideos {
    pub matrices: Vec<FrameFeatureMatrix>,
    pub topics: Vec<usize>,
    /// `signal[v][i]` is true when row `i` of video `v` is a signal frame.
    pub signal: Vec<Vec<bool>>,
    /// Unit-norm topic centroids.
    pub centroids: Vec<Vec<f64>>,
}

const CENTROID_MAX_COS: f64 = 0.5;
const CENTROID_ATTEMPTS: usize = 1000;

fn unit_gaussian(rng: &mut Prng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b)).max(1e-300)
}

/// Rejection sampler: redraws a centroid until its cosine with every earlier
/// one is below 0.5. In low dimension that may be impossible, so after a
/// fixed budget the least-correlated draw is kept.
fn sample_centroids(rng: &mut Prng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..CENTROID_ATTEMPTS {
            let c = unit_gaussian(rng, dim);
            let worst = out.iter().map(|o| cosine(o, &c)).fold(f64::NEG_INFINITY, f64::max);
            if worst < CENTROID_MAX_COS {
                best = Some((worst, c));
                break;
            }
            if best.as_ref().map_or(true, |(w, _)| worst < *w) {
                best = Some((worst, c));
            }
        }
        out.push(best.expect("at least one attempt").1);
    }
    out
}

/// Videos are named `v00000`, `v00001`, ... and each has frames at
/// timestamps `0..frames_per_video`, signal and noise rows shuffled in time.
pub fn synth_generate(spec: &SyntheticVfmSpec, n_videos: usize) -> Result<SynthVideos, String> {
    spec.validate()?;
    let root = Prng::new(spec.seed);
    let centroids = sample_centroids(&mut root.fork("centroids"), spec.n_topics, spec.dim);
    let mut rng = root.fork("videos");
    let n = spec.frames_per_video();
    let mut out = SynthVideos { matrices: Vec::new(), topics: Vec::new(), signal: Vec::new(), centroids };
    for v in 0..n_videos {
        let topic = rng.below(spec.n_topics);
        let mut flags: Vec<bool> = (0..n).map(|i| i < spec.signal_frames_per_video).collect();
        rng.shuffle(&mut flags);
        let mut data = Vec::with_capacity(n * spec.dim);
        for &is_signal in &flags {
            if is_signal {
                let c = &out.centroids[topic];
                data.extend(c.iter().map(|x| (x + spec.noise_sigma * rng.normal()) as f32));
            } else {
                data.extend(unit_gaussian(&mut rng, spec.dim).into_iter().map(|x| x as f32));
            }
        }
        let m = FrameFeatureMatrix::new(format!("v{v:05}"), spec.dim, (0..n as u32).collect(), data)
            .map_err(|e| e.to_string())?;
        out.matrices.push(m);
        out.topics.push(topic);
        out.signal.push(flags);
    }
    Ok(out)
}

/// Frame-to-title scores for synthetic videos: cosine of each frame with its
/// video's topic centroid plus Gaussian jitter of std `score_sigma`.
pub fn synth_similarity(videos: &SynthVideos, score_sigma: f64, seed: u64) -> Vec<SimilarityTable> {
    let mut rng = Prng::new(seed).fork("similarity");
    videos
        .matrices
        .iter()
        .zip(&videos.topics)
        .map(|(m, &topic)| {
            let c = &videos.centroids[topic];
            let scores = (0..m.n_frames())
                .map(|i| {
                    let row: Vec<f64> = m.row(i).iter().map(|&x| f64::from(x)).collect();
                    cosine(&row, c) + score_sigma * rng.normal()
                })
                .collect();
            SimilarityTable { video_id: m.video_id.clone(), candidate_indices: m.timestamps.clone(), scores }
        })
        .collect()
}
