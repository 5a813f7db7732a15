use crate::numkern::Prng;

use super::{InteractionRecord, PrepError};

/// Generator for topic-driven interaction logs over a synthetic catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInteractionSpec {
    pub n_users: usize,
    /// Log-odds bonus of videos from the user's preferred topic.
    pub sharpness: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthInteractionSpec {
    fn default() -> Self {
        Self { n_users: 500, sharpness: 5.0, min_len: 8, max_len: 20, seed: 42 }
    }
}

const START_TIME: u64 = 1_600_000_000;

/// Each user picks a preferred topic uniformly, then a session length in
/// `[min_len, max_len]`, then draws videos with probability proportional to
/// `exp(sharpness · [topic == preferred])`. Timestamps strictly increase.
/// An infinite sharpness restricts users to their topic.
pub fn synth_interactions(
    spec: &SynthInteractionSpec,
    video_ids: &[String],
    video_topics: &[usize],
    n_topics: usize,
) -> Result<Vec<InteractionRecord>, PrepError> {
    if video_ids.len() != video_topics.len() || video_ids.is_empty() {
        return Err(PrepError::Spec("need one topic per video and a non-empty catalog".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(PrepError::Spec(format!("bad length range [{}, {}]", spec.min_len, spec.max_len)));
    }
    if spec.sharpness.is_nan() || n_topics == 0 {
        return Err(PrepError::Spec("sharpness must be a number and n_topics positive".into()));
    }
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    for (v, &t) in video_topics.iter().enumerate() {
        by_topic.get_mut(t).ok_or_else(|| PrepError::Spec(format!("topic {t} out of range")))?.push(v);
    }
    let n = video_ids.len();
    let mut rng = Prng::new(spec.seed).fork("interactions");
    let mut out = Vec::new();
    for u in 0..spec.n_users {
        let topic = rng.below(n_topics);
        let len = rng.range_inclusive(spec.min_len, spec.max_len);
        let on = by_topic[topic].len();
        // chance that a draw lands in the preferred topic
        let p_on = if on == 0 {
            0.0
        } else if spec.sharpness == f64::INFINITY {
            1.0
        } else {
            let w = (on as f64) * spec.sharpness.exp();
            w / (w + (n - on) as f64)
        };
        let mut t = START_TIME + (u as u64) * 3600;
        let user = format!("u{u:05}");
        for _ in 0..len {
            let v = if rng.uniform() < p_on {
                by_topic[topic][rng.below(on)]
            } else {
                // uniform over the other topics' videos
                let mut k = rng.below(n - on);
                let mut pick = 0;
                for (v, &vt) in video_topics.iter().enumerate() {
                    if vt != topic {
                        if k == 0 {
                            pick = v;
                            break;
                        }
                        k -= 1;
                    }
                }
                pick
            };
            t += 1 + rng.below(600) as u64;
            out.push(InteractionRecord { user_id: user.clone(), video_id: video_ids[v].clone(), exposed_time: t });
        }
    }
    Ok(out)
}

/// Tab-separated log with a header, readable by the log parser.
pub fn write_log(records: &[InteractionRecord]) -> String {
    let mut s = String::from("user_id\tvideo_id\texposed_time\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\n", r.user_id, r.video_id, r.exposed_time));
    }
    s
}
