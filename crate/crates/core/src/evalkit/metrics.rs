use std::collections::HashSet;
use std::fmt::Write as _;

use crate::numkern::{Prng, Tensor};

use super::{popularity_buckets, sample_negatives, EvalError};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_negatives: usize,
    /// Popularity exponent of the negative sampler.
    pub alpha: f64,
    pub seed: u64,
    pub ks: Vec<usize>,
    /// Rank against every item outside the user's history instead of sampling.
    pub full_ranking: bool,
    pub n_buckets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_negatives: 999, alpha: 0.75, seed: 42, ks: vec![10, 20], full_ranking: false, n_buckets: 10 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(EvalError::Config("cutoffs must be positive".into()));
        }
        if !self.full_ranking && self.n_negatives == 0 {
            return Err(EvalError::Config("need at least one negative".into()));
        }
        if self.n_buckets == 0 {
            return Err(EvalError::Config("need at least one popularity bucket".into()));
        }
        Ok(())
    }
}

/// One ranking problem: the held-out item and the items the user has
/// already seen (never used as negatives).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub truth: usize,
    pub history: Vec<usize>,
}

pub trait Scorer {
    /// Scores of `candidates` for case `case`, in candidate order.
    fn score(&self, case: usize, candidates: &[usize]) -> Vec<f64>;
}

impl<F: Fn(usize, &[usize]) -> Vec<f64>> Scorer for F {
    fn score(&self, case: usize, candidates: &[usize]) -> Vec<f64> {
        self(case, candidates)
    }
}

/// Dot products between precomputed case vectors and item vectors.
pub struct TableScorer {
    pub cases: Tensor<f64>,
    pub items: Tensor<f64>,
}

impl Scorer for TableScorer {
    fn score(&self, case: usize, candidates: &[usize]) -> Vec<f64> {
        let u = self.cases.row(case);
        candidates.iter().map(|&c| u.iter().zip(self.items.row(c)).map(|(a, b)| a * b).sum()).collect()
    }
}

/// 1-based rank of `candidates[truth_pos]`: one plus the number of
/// candidates scoring higher, or equal with a lower id.
pub fn rank_of(candidates: &[usize], scores: &[f64], truth_pos: usize) -> usize {
    let (t, st) = (candidates[truth_pos], scores[truth_pos]);
    1 + candidates.iter().zip(scores).filter(|&(&c, &s)| s > st || (s == st && c < t)).count()
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Percentages aligned with the configured cutoffs.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketMetrics {
    pub bucket: usize,
    pub n_cases: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub n_cases: usize,
    pub overall: Metrics,
    /// Cases grouped by the popularity bucket of their ground-truth item.
    pub buckets: Vec<BucketMetrics>,
    pub ranks: Vec<usize>,
    /// Free-form `key, value` pairs copied into every output.
    pub echo: Vec<(String, String)>,
}

fn average(ranks: &[usize], ks: &[usize]) -> Metrics {
    let n = ranks.len().max(1) as f64;
    let mean = |f: fn(usize, usize) -> f64, k: usize| 100.0 * ranks.iter().map(|&r| f(r, k)).sum::<f64>() / n;
    Metrics { hr: ks.iter().map(|&k| mean(hit_at_k, k)).collect(), ndcg: ks.iter().map(|&k| mean(ndcg_at_k, k)).collect() }
}

impl EvalReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.overall.hr[i])
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.overall.ndcg[i])
    }

    /// `metric,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,name,value\n");
        let put = |s: &mut String, scope: &str, n: usize, m: &Metrics| {
            let _ = writeln!(s, "cases,{scope},{n}");
            // an empty scope has no average
            let v = |x: f64| if n == 0 { "null".to_string() } else { format!("{x:.6}") };
            for (i, k) in self.ks.iter().enumerate() {
                let _ = writeln!(s, "HR@{k},{scope},{}", v(m.hr[i]));
                let _ = writeln!(s, "NDCG@{k},{scope},{}", v(m.ndcg[i]));
            }
        };
        put(&mut s, "all", self.n_cases, &self.overall);
        for b in &self.buckets {
            put(&mut s, &format!("bucket{}", b.bucket), b.n_cases, &b.metrics);
        }
        for (k, v) in &self.echo {
            let _ = writeln!(s, "config,{k},{v}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}{:>7}", "scope", "cases");
        for k in &self.ks {
            let _ = write!(s, "{:>10}{:>10}", format!("HR@{k}"), format!("NDCG@{k}"));
        }
        s.push('\n');
        let row = |s: &mut String, scope: &str, n: usize, m: &Metrics| {
            let _ = write!(s, "{scope:<10}{n:>7}");
            for i in 0..self.ks.len() {
                if n == 0 {
                    let _ = write!(s, "{:>10}{:>10}", "-", "-");
                } else {
                    let _ = write!(s, "{:>10.3}{:>10.3}", m.hr[i], m.ndcg[i]);
                }
            }
            s.push('\n');
        };
        row(&mut s, "all", self.n_cases, &self.overall);
        for b in &self.buckets {
            row(&mut s, &format!("bucket{}", b.bucket), b.n_cases, &b.metrics);
        }
        for (k, v) in &self.echo {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s
    }
}

/// Ranks every case and averages HR/NDCG (as percentages). Negatives for
/// case `i` come from a stream derived from `(seed, i)`, so results do not
/// depend on evaluation order.
pub fn evaluate(scorer: &dyn Scorer, cases: &[EvalCase], counts: &[u64], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let root = Prng::new(cfg.seed);
    let mut ranks = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let exclude: HashSet<usize> = case.history.iter().copied().filter(|&h| h != case.truth).collect();
        let candidates: Vec<usize> = if cfg.full_ranking {
            (0..counts.len()).filter(|c| !exclude.contains(c)).collect()
        } else {
            let mut rng = root.fork(&format!("negatives/{i}"));
            let mut c = vec![case.truth];
            c.extend(sample_negatives(cfg.alpha, cfg.n_negatives, counts, case.truth, &exclude, &mut rng)?);
            c
        };
        let scores = scorer.score(i, &candidates);
        if scores.len() != candidates.len() {
            return Err(EvalError::ScoreCount { expected: candidates.len(), got: scores.len() });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite(i));
        }
        let truth_pos = candidates.iter().position(|&c| c == case.truth).expect("truth is a candidate");
        ranks.push(rank_of(&candidates, &scores, truth_pos));
    }
    let buckets = popularity_buckets(counts, cfg.n_buckets);
    let mut per_bucket: Vec<Vec<usize>> = vec![Vec::new(); buckets.n_buckets];
    for (case, &r) in cases.iter().zip(&ranks) {
        per_bucket[buckets.of_item[case.truth]].push(r);
    }
    Ok(EvalReport {
        ks: cfg.ks.clone(),
        n_cases: cases.len(),
        overall: average(&ranks, &cfg.ks),
        buckets: per_bucket
            .iter()
            .enumerate()
            .map(|(b, rs)| BucketMetrics { bucket: b, n_cases: rs.len(), metrics: average(rs, &cfg.ks) })
            .collect(),
        ranks,
        echo: Vec::new(),
    })
}
