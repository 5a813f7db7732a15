use std::fs;

use cvarec_core::featstore::{read_cache, write_cache, CacheError, CacheReader, FrameFeatureMatrix};
use proptest::prelude::*;

fn arb_matrix(id: usize) -> impl Strategy<Value = FrameFeatureMatrix> {
    (1usize..6, 1usize..9).prop_flat_map(move |(n, dim)| {
        (
            proptest::collection::btree_set(any::<u32>(), n),
            // any finite bit pattern, including subnormals and -0.0
            proptest::collection::vec(any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite()), n * dim),
        )
            .prop_map(move |(ts, data)| FrameFeatureMatrix::new(format!("video-{id:04}"), dim, ts.into_iter().collect(), data).unwrap())
    })
}

fn sample() -> Vec<FrameFeatureMatrix> {
    let m = |id: &str, n: usize| FrameFeatureMatrix::new(id, 3, (0..n as u32).collect(), (0..n * 3).map(|i| i as f32 * 0.5).collect()).unwrap();
    vec![m("b", 2), m("a", 4)]
}

fn bits(m: &FrameFeatureMatrix) -> Vec<u32> {
    m.data.iter().map(|v| v.to_bits()).collect()
}

fn arb_cache() -> impl Strategy<Value = Vec<FrameFeatureMatrix>> {
    (1usize..9, 1usize..20).prop_flat_map(|(dim, count)| {
        (0..count)
            .map(|i| {
                (proptest::collection::btree_set(any::<u32>(), 1..5), proptest::collection::vec(any::<u32>(), 5 * dim)).prop_map(move |(ts, raw)| {
                    let n = ts.len();
                    let data = raw[..n * dim].iter().map(|&b| f32::from_bits(b)).map(|v| if v.is_finite() { v } else { -0.0 }).collect();
                    FrameFeatureMatrix::new(format!("m{i:03}"), dim, ts.into_iter().collect(), data).unwrap()
                })
            })
            .collect::<Vec<_>>()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn thousand_matrix_roundtrip_is_bit_exact(m in arb_matrix(7)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.cvaf");
        write_cache(&path, std::slice::from_ref(&m)).unwrap();
        let mut r = CacheReader::open(&path).unwrap();
        let back = r.read(&m.video_id).unwrap();
        prop_assert_eq!(bits(&back), bits(&m));
        prop_assert_eq!(back.timestamps, m.timestamps);
        prop_assert_eq!(back.dim, m.dim);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn multi_matrix_roundtrip(mats in arb_cache()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("many.cvaf");
        write_cache(&path, &mats).unwrap();
        let back = read_cache(&path, None).unwrap();
        prop_assert_eq!(back.len(), mats.len());
        for (a, b) in mats.iter().zip(&back) {
            prop_assert_eq!(&a.video_id, &b.video_id);
            prop_assert_eq!(&a.timestamps, &b.timestamps);
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn bad_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cvaf");
    write_cache(&path, &sample()).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(CacheReader::open(&path), Err(CacheError::BadMagic)));
    assert!(matches!(read_cache(&path, None), Err(CacheError::BadMagic)));
}

#[test]
fn truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cvaf");
    write_cache(&path, &sample()).unwrap();
    let full = fs::read(&path).unwrap();
    // every proper prefix past the magic is reported as truncated
    for cut in 4..full.len() {
        fs::write(&path, &full[..cut]).unwrap();
        match read_cache(&path, None) {
            Err(CacheError::Truncated(_)) => {}
            other => panic!("prefix of {cut} bytes: {other:?}"),
        }
    }
    fs::write(&path, &full[..2]).unwrap();
    assert!(read_cache(&path, None).is_err());
}

#[test]
fn unknown_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cvaf");
    write_cache(&path, &sample()).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(CacheReader::open(&path), Err(CacheError::UnsupportedVersion(9))));
}

#[test]
fn records_are_sorted_and_filtered_reads_work() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cvaf");
    write_cache(&path, &sample()).unwrap();
    let all = read_cache(&path, None).unwrap();
    assert_eq!(all.iter().map(|m| m.video_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    let one = read_cache(&path, Some(&["b".to_string()])).unwrap();
    assert_eq!(one, vec![sample()[0].clone()]);
    assert!(matches!(read_cache(&path, Some(&["zz".to_string()])), Err(CacheError::MissingId(_))));
}
