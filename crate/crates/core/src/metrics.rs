//! Evaluation quantities.
//!
//! nDCG uses the exponential gain `2^rel - 1` and the `log2(i + 1)`
//! discount; a query with an all-zero ideal ranking scores 0.

use std::cmp::Ordering;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, DatasetSplit, QueryGroup};
use crate::ranker::LinearRanker;

pub const OFFLINE_CUTOFF: usize = 10;

fn dcg(relevances: impl Iterator<Item = u8>, k: usize) -> f64 {
    relevances
        .take(k)
        .enumerate()
        .map(|(i, rel)| ((1u64 << rel) - 1) as f64 / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k of a ranked label list against the ideal ordering of
/// `ideal_relevances` (any order; sorted internally).
pub fn ndcg_at_k(ranked_relevances: &[u8], ideal_relevances: &[u8], k: usize) -> f64 {
    assert!(k >= 1, "cutoff must be at least 1");
    let mut ideal = ideal_relevances.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter(), k);
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(ranked_relevances.iter().copied(), k) / idcg
}

/// nDCG@10 of the ranker's deterministic ranking on one query, against
/// `labels` (the query's own labels unless overridden).
pub fn query_ndcg(ranker: &LinearRanker, query: &QueryGroup, labels: &[u8], k: usize) -> f64 {
    let ranked: Vec<u8> = ranker.rank(query).into_iter().map(|d| labels[d]).collect();
    ndcg_at_k(&ranked, labels, k)
}

/// Mean nDCG@10 over a split, ranking by descending score.
pub fn offline_eval(ranker: &LinearRanker, split: &DatasetSplit) -> f64 {
    assert!(!split.is_empty(), "offline evaluation needs at least one query");
    let total: f64 = split
        .queries
        .iter()
        .map(|q| query_ndcg(ranker, q, &q.relevances(), OFFLINE_CUTOFF))
        .sum();
    total / split.len() as f64
}

/// `Σ_t value_t · γ^(t-1)`.
pub fn online_performance(values: &[f64], gamma: f64) -> f64 {
    assert!(gamma > 0.0 && gamma <= 1.0, "discount must lie in (0, 1]");
    let mut discount = 1.0;
    let mut total = 0.0;
    for v in values {
        total += v * discount;
        discount *= gamma;
    }
    total
}

pub fn l2_distance(a: &LinearRanker, b: &LinearRanker) -> f64 {
    assert_eq!(a.dim(), b.dim(), "models must have equal dimension");
    a.weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Relevance-reset queries of one or more target clients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelabeledSubset {
    /// (train query index, modified label per document)
    pub queries: Vec<(usize, Vec<u8>)>,
}

impl RelabeledSubset {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn extend(&mut self, other: RelabeledSubset) {
        self.queries.extend(other.queries);
    }
}

/// Cumulative band shares in percent and the label each band receives.
fn relabel_bands(relevance_levels: u8) -> &'static [(usize, u8)] {
    match relevance_levels {
        3 => &[(20, 2), (50, 1), (100, 0)],
        _ => &[(20, 4), (40, 3), (60, 2), (80, 1), (100, 0)],
    }
}

/// Labels by rank position: band `j` ends after `ceil(cum_j · n / 100)`
/// documents.
pub fn relabel_by_rank(n_docs: usize, relevance_levels: u8) -> Vec<u8> {
    let mut labels = Vec::with_capacity(n_docs);
    for &(cum, label) in relabel_bands(relevance_levels) {
        let end = (cum * n_docs).div_ceil(100);
        labels.resize(end.max(labels.len()), label);
    }
    labels
}

/// Selects the `top_k_percent` highest-loss queries of a client under its
/// local model and relabels their documents by that model's ranking.
///
/// Loss is `1 - nDCG@10` against the true labels; ties are broken by query
/// id. At least one query is selected.
pub fn relr_prepare(
    dataset: &Dataset,
    client_queries: &[usize],
    local_model: &LinearRanker,
    top_k_percent: f64,
) -> RelabeledSubset {
    assert!(!client_queries.is_empty(), "target client has no queries");
    let mut scored: Vec<(f64, usize)> = client_queries
        .iter()
        .map(|&qi| {
            let q = &dataset.train.queries[qi];
            (1.0 - query_ndcg(local_model, q, &q.relevances(), OFFLINE_CUTOFF), qi)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| {
            let (qa, qb) = (&dataset.train.queries[a.1], &dataset.train.queries[b.1]);
            qa.query_id.cmp(&qb.query_id)
        })
    });
    let take = ((top_k_percent / 100.0 * client_queries.len() as f64).ceil() as usize).clamp(1, client_queries.len());

    let queries = scored[..take]
        .iter()
        .map(|&(_, qi)| {
            let q = &dataset.train.queries[qi];
            let order = local_model.rank(q);
            let bands = relabel_by_rank(order.len(), dataset.relevance_levels);
            let mut labels = vec![0u8; order.len()];
            for (pos, doc) in order.into_iter().enumerate() {
                labels[doc] = bands[pos];
            }
            (qi, labels)
        })
        .collect();
    RelabeledSubset { queries }
}

/// Mean `1 - nDCG@10` of the model on the subset, against modified labels.
pub fn relr_loss(model: &LinearRanker, dataset: &Dataset, subset: &RelabeledSubset) -> f64 {
    assert!(!subset.is_empty(), "empty relabeled subset");
    let total: f64 = subset
        .queries
        .iter()
        .map(|(qi, labels)| 1.0 - query_ndcg(model, &dataset.train.queries[*qi], labels, OFFLINE_CUTOFF))
        .sum();
    total / subset.len() as f64
}

/// Loss increase on the relabeled subset; positive means the relabeled
/// knowledge was forgotten.
pub fn relr_diff(before: &LinearRanker, after: &LinearRanker, dataset: &Dataset, subset: &RelabeledSubset) -> f64 {
    relr_loss(after, dataset, subset) - relr_loss(before, dataset, subset)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
}

/// Two-sided paired Student's t-test on `a - b`.
///
/// With zero variance in the differences the p-value is 0 when the mean
/// difference is non-zero and 1 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> TTest {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    assert!(a.len() >= 2, "paired t-test needs at least two pairs");
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return match mean.partial_cmp(&0.0) {
            Some(Ordering::Equal) | None => TTest { t: 0.0, p: 1.0 },
            Some(Ordering::Greater) => TTest {
                t: f64::INFINITY,
                p: 0.0,
            },
            Some(Ordering::Less) => TTest {
                t: f64::NEG_INFINITY,
                p: 0.0,
            },
        };
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    TTest { t, p }
}
