use std::collections::HashSet;

use crate::numkern::Prng;

use super::EvalError;

/// Occurrences of every item id below `n_items` across all sequences.
pub fn popularity_counts(sequences: &[Vec<usize>], n_items: usize) -> Vec<u64> {
    let mut c = vec![0u64; n_items];
    for s in sequences {
        for &i in s {
            c[i] += 1;
        }
    }
    c
}

/// Draws `n` distinct items with probability proportional to `count^alpha`,
/// never returning `truth` or anything in `exclude`. Items come back in draw
/// order. Uses the exponential-key method: the `n` largest `ln(u) / w` keys
/// form a sequential weighted sample without replacement.
pub fn sample_negatives(
    alpha: f64,
    n: usize,
    counts: &[u64],
    truth: usize,
    exclude: &HashSet<usize>,
    rng: &mut Prng,
) -> Result<Vec<usize>, EvalError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(EvalError::Config(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(counts.len());
    for (item, &c) in counts.iter().enumerate() {
        if item == truth || exclude.contains(&item) {
            continue;
        }
        // 0^0 = 1, so alpha = 0 makes even unseen items eligible
        let w = (c as f64).powf(alpha);
        if w > 0.0 {
            keyed.push((rng.uniform_open().ln() / w, item));
        }
    }
    if keyed.len() < n {
        return Err(EvalError::PoolTooSmall { available: keyed.len(), requested: n });
    }
    let by_key = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n < keyed.len() {
        keyed.select_nth_unstable_by(n, by_key);
        keyed.truncate(n);
    }
    keyed.sort_unstable_by(by_key);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Items split into popularity groups of near-equal size, least popular first.
#[derive(Clone, Debug, PartialEq)]
pub struct Buckets {
    pub of_item: Vec<usize>,
    pub n_buckets: usize,
    /// True when there were fewer items than requested buckets.
    pub reduced: bool,
}

impl Buckets {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_buckets];
        for &b in &self.of_item {
            s[b] += 1;
        }
        s
    }
}

/// Sorts items by `(count, id)` and cuts the order into `n_buckets` runs
/// whose sizes differ by at most one.
pub fn popularity_buckets(counts: &[u64], n_buckets: usize) -> Buckets {
    let n = counts.len();
    let nb = n_buckets.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (counts[i], i));
    let mut of_item = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        of_item[item] = pos * nb / n;
    }
    Buckets { of_item, n_buckets: nb, reduced: nb < n_buckets }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_every_occurrence() {
        assert_eq!(popularity_counts(&[vec![0, 2, 2], vec![2, 1]], 4), vec![1, 1, 3, 0]);
    }

    #[test]
    fn uniform_when_alpha_zero() {
        // 10 eligible items, one draw each; chi-square with 9 dof
        let counts = vec![5u64, 1, 0, 9, 2, 2, 7, 1, 3, 4, 8, 6];
        let exclude: HashSet<usize> = [11].into_iter().collect();
        let mut rng = Prng::new(4);
        let trials = 100_000;
        let mut hist = [0f64; 12];
        for _ in 0..trials {
            hist[sample_negatives(0.0, 1, &counts, 10, &exclude, &mut rng).unwrap()[0]] += 1.0;
        }
        assert_eq!((hist[10], hist[11]), (0.0, 0.0));
        let e = trials as f64 / 10.0;
        let chi2: f64 = hist[..10].iter().map(|o| (o - e).powi(2) / e).sum();
        // 0.99 quantile of chi-square(9)
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn first_draw_follows_popularity() {
        let counts = [3u64, 1];
        let mut rng = Prng::new(9);
        let trials = 20_000;
        let first = (0..trials)
            .filter(|_| sample_negatives(1.0, 2, &counts, 99, &HashSet::new(), &mut rng).unwrap()[0] == 0)
            .count();
        let p = first as f64 / trials as f64;
        let sd = (0.75 * 0.25 / trials as f64).sqrt();
        assert!((p - 0.75).abs() < 4.0 * sd, "p = {p}");
    }

    #[test]
    fn never_returns_truth_or_history() {
        let counts: Vec<u64> = (0..50).map(|i| 1 + i % 7).collect();
        let exclude: HashSet<usize> = [3, 4, 5].into_iter().collect();
        let mut rng = Prng::new(1);
        for _ in 0..200 {
            let s = sample_negatives(0.75, 40, &counts, 7, &exclude, &mut rng).unwrap();
            let uniq: HashSet<_> = s.iter().collect();
            assert_eq!(uniq.len(), 40);
            assert!(!s.contains(&7) && s.iter().all(|i| !exclude.contains(i)));
        }
    }

    #[test]
    fn small_pool_is_an_error() {
        let err = sample_negatives(1.0, 3, &[1, 1, 0, 1], 0, &HashSet::new(), &mut Prng::new(0)).unwrap_err();
        assert_eq!(err, EvalError::PoolTooSmall { available: 2, requested: 3 });
    }

    #[test]
    fn bucket_examples() {
        let counts: Vec<u64> = vec![50, 10, 30, 20, 40, 90, 60, 70, 80, 100];
        let b = popularity_buckets(&counts, 10);
        assert_eq!(b.of_item, vec![4, 0, 2, 1, 3, 8, 5, 6, 7, 9]);

        let flat = popularity_buckets(&[7; 6], 3);
        assert_eq!(flat.of_item, vec![0, 0, 1, 1, 2, 2]);

        let few = popularity_buckets(&[1, 2, 3], 10);
        assert!(few.reduced);
        assert_eq!(few.n_buckets, 3);

        let odd = popularity_buckets(&(0..23).collect::<Vec<u64>>(), 10);
        let sizes = odd.sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 23);
    }
}
