//! Linear ranker trained with Pairwise Differentiable Gradient Descent.
//!
//! A SERP is drawn from the Plackett–Luce distribution induced by the
//! ranker's scores. Clicks on that SERP are turned into pairwise
//! preferences, and each pair contributes its score-difference gradient
//! weighted by ρ, the probability of the ranking with the pair swapped
//! relative to the original. Ranking probabilities are restricted to the
//! displayed prefix and evaluated in the log domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::QueryGroup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRanker {
    pub weights: Vec<f64>,
}

impl LinearRanker {
    pub fn new(weights: Vec<f64>) -> Self {
        LinearRanker { weights }
    }

    pub fn zeros(dim: usize) -> Self {
        LinearRanker {
            weights: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Dot product with a feature vector.
    ///
    /// Panics if the dimensions differ.
    pub fn score(&self, features: &[f64]) -> f64 {
        assert_eq!(
            self.weights.len(),
            features.len(),
            "ranker dimension does not match feature dimension"
        );
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum()
    }

    pub fn scores(&self, query: &QueryGroup) -> Vec<f64> {
        query.documents.iter().map(|d| self.score(&d.features)).collect()
    }

    /// Document indices sorted by descending score, ties kept in
    /// document order.
    pub fn rank(&self, query: &QueryGroup) -> Vec<usize> {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order
    }

    /// `self + scale * direction`.
    pub fn stepped(&self, direction: &[f64], scale: f64) -> LinearRanker {
        assert_eq!(self.dim(), direction.len());
        LinearRanker {
            weights: self.weights.iter().zip(direction).map(|(w, d)| w + scale * d).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerpEntry {
    /// Index into the query's documents.
    pub doc: usize,
    pub score: f64,
}

/// A displayed ranking, top position first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Serp {
    pub entries: Vec<SerpEntry>,
}

impl Serp {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn docs(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.doc).collect()
    }

    pub fn relevances(&self, query: &QueryGroup) -> Vec<u8> {
        self.entries.iter().map(|e| query.documents[e.doc].relevance).collect()
    }
}

/// Draws documents one at a time without replacement, each with
/// probability proportional to `exp(score)` among those left.
pub fn sample_ranking<R: Rng + ?Sized>(
    ranker: &LinearRanker,
    query: &QueryGroup,
    serp_len: usize,
    rng: &mut R,
) -> Serp {
    let scores = ranker.scores(query);
    let n = serp_len.min(scores.len());
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut entries = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(scores.len());
    for _ in 0..n {
        let max = remaining.iter().map(|&d| scores[d]).fold(f64::NEG_INFINITY, f64::max);
        weights.clear();
        weights.extend(remaining.iter().map(|&d| (scores[d] - max).exp()));
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let doc = remaining.remove(pick);
        entries.push(SerpEntry {
            doc,
            score: scores[doc],
        });
    }
    Serp { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub preferred: usize,
    pub dispreferred: usize,
}

/// Pairs are expressed as SERP positions; see [`infer_preferences`] for
/// document indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PositionPair {
    preferred: usize,
    dispreferred: usize,
}

fn position_pairs(clicks: &[bool]) -> Vec<PositionPair> {
    let mut pairs = Vec::new();
    for (k, _) in clicks.iter().enumerate().filter(|(_, &c)| c) {
        for l in (0..k).filter(|&l| !clicks[l]) {
            pairs.push(PositionPair {
                preferred: k,
                dispreferred: l,
            });
        }
        if let Some(l) = (k + 1..clicks.len()).find(|&l| !clicks[l]) {
            pairs.push(PositionPair {
                preferred: k,
                dispreferred: l,
            });
        }
    }
    pairs
}

/// Each clicked document is preferred over every unclicked document shown
/// above it and over the first unclicked document below it.
pub fn infer_preferences(serp: &Serp, clicks: &[bool]) -> Vec<PreferencePair> {
    assert_eq!(serp.len(), clicks.len(), "one click flag per SERP position");
    position_pairs(clicks)
        .into_iter()
        .map(|p| PreferencePair {
            preferred: serp.entries[p.preferred].doc,
            dispreferred: serp.entries[p.dispreferred].doc,
        })
        .collect()
}

/// `e^{s_k} e^{s_l} / (e^{s_k} + e^{s_l})^2`, the derivative of
/// `σ(s_k - s_l)` with respect to `s_k`.
pub fn pair_gradient_weight(s_k: f64, s_l: f64) -> f64 {
    let e = (-(s_k - s_l).abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-probability of drawing the given scores in this exact order under
/// Plackett–Luce restricted to these documents.
pub fn log_ranking_probability(ordered_scores: &[f64]) -> f64 {
    (0..ordered_scores.len())
        .map(|i| ordered_scores[i] - log_sum_exp(ordered_scores[i..].iter().copied()))
        .sum()
}

/// ρ for swapping SERP positions `a` and `b`: `P(R*) / (P(R) + P(R*))`.
pub fn debias_weight(ordered_scores: &[f64], a: usize, b: usize) -> f64 {
    let original = log_ranking_probability(ordered_scores);
    let mut swapped = ordered_scores.to_vec();
    swapped.swap(a, b);
    let swapped = log_ranking_probability(&swapped);
    // P(R*) / (P(R) + P(R*)) = sigmoid(log P(R*) - log P(R))
    1.0 / (1.0 + (original - swapped).exp())
}

/// Ascent direction of one PDGD step (learning rate 1).
pub fn pdgd_gradient(ranker: &LinearRanker, query: &QueryGroup, serp: &Serp, clicks: &[bool]) -> Vec<f64> {
    assert_eq!(serp.len(), clicks.len(), "one click flag per SERP position");
    let mut grad = vec![0.0; ranker.dim()];
    let pairs = position_pairs(clicks);
    if pairs.is_empty() {
        return grad;
    }
    let scores: Vec<f64> = serp
        .entries
        .iter()
        .map(|e| ranker.score(&query.documents[e.doc].features))
        .collect();
    for p in pairs {
        let rho = debias_weight(&scores, p.preferred, p.dispreferred);
        let w = rho * pair_gradient_weight(scores[p.preferred], scores[p.dispreferred]);
        let xk = &query.documents[serp.entries[p.preferred].doc].features;
        let xl = &query.documents[serp.entries[p.dispreferred].doc].features;
        for ((g, a), b) in grad.iter_mut().zip(xk).zip(xl) {
            *g += w * (a - b);
        }
    }
    grad
}

/// One PDGD step: `θ + lr · Σ ρ · σ'(s_k - s_l) · (x_k - x_l)`.
pub fn pdgd_update(ranker: &LinearRanker, query: &QueryGroup, serp: &Serp, clicks: &[bool], lr: f64) -> LinearRanker {
    debug_assert!(lr > 0.0, "learning rate must be positive");
    let grad = pdgd_gradient(ranker, query, serp, clicks);
    ranker.stepped(&grad, lr)
}
