//! Per-run metric logs.
//!
//! CSV columns: `round,phase,strategy,offline_ndcg10,online_increment`.
//! Round 0 is the initial model. `phase` is `train` or `unlearn`; rounds
//! keep counting across the phase boundary. Empty cells mean the value was
//! not measured that round (offline evaluation runs on a cadence; rounds
//! with no displayed SERP have no online value). Floats use the shortest
//! representation that round-trips.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "round,phase,strategy,offline_ndcg10,online_increment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Unlearn,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Unlearn => "unlearn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub phase: Phase,
    pub strategy: String,
    pub offline_ndcg10: Option<f64>,
    pub online_increment: Option<f64>,
}

pub fn format_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::with_capacity(rows.len() * 48));
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    let bytes = w.into_inner().expect("in-memory CSV flush");
    if rows.is_empty() {
        return format!("{CSV_HEADER}\n");
    }
    String::from_utf8(bytes).expect("CSV output is UTF-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| csv_error(&e))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: "unexpected CSV header".into(),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| csv_error(&e))).collect()
}

fn csv_error(e: &csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: e.to_string(),
    }
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, format_csv(rows))?;
    Ok(())
}

/// Final scalars of one (fold, seed, strategy) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fold: String,
    pub seed: u64,
    pub strategy: String,
    pub click_profile: String,
    pub attack: String,
    pub targets: Vec<usize>,
    pub config_digest: String,
    pub train_rounds: usize,
    pub unlearn_rounds: usize,
    /// Gain and discount of every nDCG in the run.
    pub ndcg_form: String,
    /// Discounted online nDCG over training and unlearning rounds.
    pub online_performance_total: f64,
    /// Discounted online nDCG over the unlearning rounds only.
    pub online_performance_unlearn: f64,
    pub final_offline_ndcg10: f64,
    /// Offline nDCG@10 of the model treated as the unlearning result.
    pub unlearned_offline_ndcg10: f64,
    pub relr_diff: Option<f64>,
    pub dist_diff: Option<f64>,
}

pub const NDCG_FORM: &str = "gain 2^rel-1, discount log2(rank+1)";

/// `Σ v_t γ^(t-1)` over the measured rounds; unmeasured rounds still
/// advance the discount.
pub fn discounted_sum(values: &[Option<f64>], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for v in values {
        if let Some(v) = v {
            total += v * discount;
        }
        discount *= gamma;
    }
    total
}
