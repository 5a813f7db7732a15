use std::collections::{BTreeMap, HashMap, HashSet};

use super::{InteractionRecord, PrepError};

/// Users with fewer interactions than this are dropped.
pub const MIN_USER_LEN: usize = 5;

/// A user's interactions in chronological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
    pub times: Vec<u64>,
}

/// Alternates two prunes until neither removes anything: drop every record
/// of a video seen at most once, then every user with fewer than five
/// records. Survivors are sorted by time (ties by video id); users are
/// returned in id order. Repeat views are kept.
pub fn clean(records: &[InteractionRecord]) -> Result<Vec<UserSequence>, PrepError> {
    let mut kept: Vec<&InteractionRecord> = records.iter().collect();
    loop {
        let before = kept.len();
        let mut videos: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *videos.entry(&r.video_id).or_default() += 1;
        }
        kept.retain(|r| videos[r.video_id.as_str()] >= 2);
        let mut users: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *users.entry(&r.user_id).or_default() += 1;
        }
        kept.retain(|r| users[r.user_id.as_str()] >= MIN_USER_LEN);
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        let users: HashSet<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
        let videos: HashSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
        return Err(PrepError::Empty { records: records.len(), users: users.len(), videos: videos.len() });
    }
    let mut by_user: BTreeMap<&str, Vec<(u64, &str)>> = BTreeMap::new();
    for r in kept {
        by_user.entry(&r.user_id).or_default().push((r.exposed_time, &r.video_id));
    }
    Ok(by_user
        .into_iter()
        .map(|(u, mut v)| {
            v.sort_unstable();
            UserSequence { user_id: u.into(), items: v.iter().map(|x| x.1.to_string()).collect(), times: v.iter().map(|x| x.0).collect() }
        })
        .collect())
}

pub fn to_records(seqs: &[UserSequence]) -> Vec<InteractionRecord> {
    seqs.iter()
        .flat_map(|s| s.items.iter().zip(&s.times).map(move |(v, &t)| InteractionRecord::new(&s.user_id, v, t)))
        .collect()
}

/// One line per user: `user_id<TAB>v1,v2,...`.
pub fn write_sequences(seqs: &[UserSequence]) -> String {
    seqs.iter().map(|s| format!("{}\t{}\n", s.user_id, s.items.join(","))).collect()
}

/// Reads the sequence file format. Times are not stored there, so they are
/// reconstructed as positions.
pub fn parse_sequences(text: &str) -> Result<Vec<UserSequence>, PrepError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| PrepError::Parse { line: n + 1, msg: msg.into() };
        let (u, items) = line.split_once('\t').ok_or_else(|| err("expected user_id<TAB>items"))?;
        let items: Vec<String> = items.split(',').map(|s| s.trim().to_string()).collect();
        if u.trim().is_empty() || items.iter().any(String::is_empty) {
            return Err(err("empty user or video id"));
        }
        let times = (0..items.len() as u64).collect();
        out.push(UserSequence { user_id: u.trim().into(), items, times });
    }
    Ok(out)
}

/// Maps video ids to positions in `catalog`.
pub fn index_sequences(seqs: &[UserSequence], catalog: &[String]) -> Result<Vec<Vec<usize>>, PrepError> {
    let pos: HashMap<&str, usize> = catalog.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    seqs.iter()
        .map(|s| s.items.iter().map(|v| pos.get(v.as_str()).copied().ok_or_else(|| PrepError::UnknownVideo(v.clone()))).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::Prng;
    use proptest::prelude::*;

    fn r(u: &str, v: &str, t: u64) -> InteractionRecord {
        InteractionRecord::new(u, v, t)
    }

    fn items(s: &UserSequence) -> Vec<&str> {
        s.items.iter().map(String::as_str).collect()
    }

    #[test]
    fn single_view_video_is_removed() {
        let mut recs: Vec<_> = (0..5).map(|i| r("a", &format!("v{i}"), i)).collect();
        recs.extend((0..5).map(|i| r("b", &format!("v{i}"), i)));
        recs.push(r("a", "once", 9));
        let out = clean(&recs).unwrap();
        assert!(out.iter().all(|s| !s.items.contains(&"once".to_string())));
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn user_left_with_four_is_removed() {
        let mut recs: Vec<_> = (0..5).map(|i| r("a", &format!("v{i}"), i)).collect();
        recs.extend((0..5).map(|i| r("b", &format!("v{i}"), i)));
        recs.extend((0..4).map(|i| r("c", &format!("v{i}"), i)));
        recs.push(r("c", "solo", 7));
        let out = clean(&recs).unwrap();
        assert_eq!(out.iter().map(|s| s.user_id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn cascading_prunes_reach_a_fixed_point() {
        // dropping user c leaves x with one view, which drops b below five
        let mut recs: Vec<_> = (0..5).map(|i| r("a", &format!("v{i}"), i)).collect();
        recs.extend((0..5).map(|i| r("d", &format!("v{i}"), i)));
        recs.extend([r("b", "v0", 0), r("b", "v1", 1), r("b", "v2", 2), r("b", "v3", 3), r("b", "x", 4)]);
        recs.extend([r("c", "x", 0), r("c", "y", 1)]);
        let out = clean(&recs).unwrap();
        assert_eq!(out.iter().map(|s| s.user_id.as_str()).collect::<Vec<_>>(), vec!["a", "d"]);
    }

    #[test]
    fn twelve_record_fixture() {
        let recs = vec![
            r("A", "v1", 10),
            r("A", "v2", 20),
            r("A", "v3", 30),
            r("A", "v4", 40),
            r("A", "v5", 50),
            r("A", "v9", 60),
            r("B", "v5", 5),
            r("B", "v4", 15),
            r("B", "v3", 15),
            r("B", "v2", 25),
            r("B", "v1", 35),
            r("C", "v8", 1),
        ];
        let out = clean(&recs).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(items(&out[0]), ["v1", "v2", "v3", "v4", "v5"]);
        assert_eq!(items(&out[1]), ["v5", "v3", "v4", "v2", "v1"]);
        assert_eq!(out[1].times, vec![5, 15, 15, 25, 35]);
    }

    #[test]
    fn nothing_left_is_an_error() {
        let recs = vec![r("a", "v", 1), r("b", "w", 2)];
        assert!(matches!(clean(&recs), Err(PrepError::Empty { records: 2, users: 2, videos: 2 })));
    }

    #[test]
    fn sequence_file_roundtrip() {
        let seqs = vec![UserSequence { user_id: "u1".into(), items: vec!["a".into(), "b".into()], times: vec![0, 1] }];
        assert_eq!(parse_sequences(&write_sequences(&seqs)).unwrap(), seqs);
        assert!(parse_sequences("u1 a,b\n").is_err());
        let idx = index_sequences(&seqs, &["b".into(), "a".into()]).unwrap();
        assert_eq!(idx, vec![vec![1, 0]]);
        assert!(matches!(index_sequences(&seqs, &["a".into()]), Err(PrepError::UnknownVideo(v)) if v == "b"));
    }

    fn random_log(seed: u64) -> Vec<InteractionRecord> {
        let mut rng = Prng::new(seed);
        let n = 20 + rng.below(200);
        let (users, videos) = (1 + rng.below(15), 1 + rng.below(30));
        (0..n).map(|_| r(&format!("u{}", rng.below(users)), &format!("v{}", rng.below(videos)), rng.below(50) as u64)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn clean_is_idempotent(seed in any::<u64>()) {
            let log = random_log(seed);
            if let Ok(once) = clean(&log) {
                prop_assert_eq!(clean(&to_records(&once)).unwrap(), once.clone());
                let mut counts: HashMap<&str, usize> = HashMap::new();
                for s in &once {
                    prop_assert!(s.items.len() >= MIN_USER_LEN);
                    prop_assert!(s.times.windows(2).all(|w| w[0] <= w[1]));
                    for v in &s.items {
                        *counts.entry(v).or_default() += 1;
                    }
                }
                prop_assert!(counts.values().all(|&c| c >= 2));
            }
        }
    }
}
