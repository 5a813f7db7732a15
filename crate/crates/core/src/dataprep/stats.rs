use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::InteractionRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub videos: usize,
    pub interactions: usize,
    /// Number of videos seen exactly `count` times, keyed by `count`.
    pub video_count_hist: BTreeMap<usize, usize>,
    /// Share of videos seen at most `k` times, for `k = 1..=5`.
    pub share_at_most: Vec<(usize, f64)>,
    pub mean_video_count: f64,
    pub mean_seq_len: f64,
    /// Nearest-rank minimum, quartiles and maximum of sequence lengths.
    pub seq_len_quantiles: [usize; 5],
}

/// 1-based nearest rank `ceil(p·n)` into sorted values.
fn nearest_rank(sorted: &[usize], p: f64) -> usize {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Statistics of a non-empty log. Independent of record order.
pub fn stats(records: &[InteractionRecord]) -> DatasetStats {
    let mut per_video: HashMap<&str, usize> = HashMap::new();
    let mut per_user: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *per_video.entry(&r.video_id).or_default() += 1;
        *per_user.entry(&r.user_id).or_default() += 1;
    }
    let mut hist = BTreeMap::new();
    for &c in per_video.values() {
        *hist.entry(c).or_default() += 1;
    }
    let videos = per_video.len();
    let share_at_most = (1..=5)
        .map(|k| (k, hist.range(..=k).map(|(_, n)| *n).sum::<usize>() as f64 / videos.max(1) as f64))
        .collect();
    let mut lens: Vec<usize> = per_user.values().copied().collect();
    lens.sort_unstable();
    let quantiles = if lens.is_empty() { [0; 5] } else { [0.0, 0.25, 0.5, 0.75, 1.0].map(|p| nearest_rank(&lens, p)) };
    DatasetStats {
        users: per_user.len(),
        videos,
        interactions: records.len(),
        video_count_hist: hist,
        share_at_most,
        mean_video_count: records.len() as f64 / videos.max(1) as f64,
        mean_seq_len: records.len() as f64 / per_user.len().max(1) as f64,
        seq_len_quantiles: quantiles,
    }
}

impl DatasetStats {
    /// `stat,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stat,value\n");
        let _ = writeln!(s, "users,{}", self.users);
        let _ = writeln!(s, "videos,{}", self.videos);
        let _ = writeln!(s, "interactions,{}", self.interactions);
        let _ = writeln!(s, "mean_video_count,{:.6}", self.mean_video_count);
        for (k, share) in &self.share_at_most {
            let _ = writeln!(s, "share_count_le_{k},{share:.6}");
        }
        let _ = writeln!(s, "mean_seq_len,{:.6}", self.mean_seq_len);
        for (name, q) in ["min", "q1", "median", "q3", "max"].iter().zip(self.seq_len_quantiles) {
            let _ = writeln!(s, "seq_len_{name},{q}");
        }
        for (c, n) in &self.video_count_hist {
            let _ = writeln!(s, "videos_with_count_{c},{n}");
        }
        s
    }
}
