//! Aggregation of finished runs into `summary.json` and `summary.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::log::RunSummary;
use super::runner::ORIGINAL;
use crate::error::{Error, Result};
use crate::metrics::paired_t_test;
use crate::unlearning::Strategy;

pub const METRICS: [&str; 6] = [
    "online_performance_total",
    "online_performance_unlearn",
    "final_offline_ndcg10",
    "unlearned_offline_ndcg10",
    "relr_diff",
    "dist_diff",
];

fn metric(s: &RunSummary, name: &str) -> Option<f64> {
    match name {
        "online_performance_total" => Some(s.online_performance_total),
        "online_performance_unlearn" => Some(s.online_performance_unlearn),
        "final_offline_ndcg10" => Some(s.final_offline_ndcg10),
        "unlearned_offline_ndcg10" => Some(s.unlearned_offline_ndcg10),
        "relr_diff" => s.relr_diff,
        "dist_diff" => s.dist_diff,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMeans {
    pub strategy: String,
    pub runs: usize,
    /// Metric name to mean over the runs that report it.
    pub means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub pairs: usize,
    /// `None` when infinite (zero-variance differences).
    pub t: Option<f64>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_digest: String,
    pub runs: usize,
    pub strategies: Vec<StrategyMeans>,
    pub tests: Vec<PairedTest>,
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            out.extend(json_files(&path)?);
        } else if path.extension().is_some_and(|e| e == "json")
            && path
                .parent()
                .and_then(Path::file_name)
                .is_some_and(|n| n.to_string_lossy().starts_with("seed-"))
        {
            out.push(path);
        }
    }
    Ok(out)
}

fn display_rank(name: &str) -> usize {
    if name == ORIGINAL {
        return 0;
    }
    Strategy::ALL
        .iter()
        .position(|s| s.as_str() == name)
        .map_or(usize::MAX, |i| i + 1)
}

type ByRun<'a> = BTreeMap<(String, u64), &'a RunSummary>;

/// Means and pairwise paired t-tests over a set of run summaries. Pairs
/// are matched by (fold, seed); tests need at least two pairs.
pub fn summarize_runs(runs: &[RunSummary]) -> Result<Summary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Config("no completed runs to summarize".into()))?;
    if let Some(other) = runs.iter().find(|r| r.config_digest != first.config_digest) {
        return Err(Error::Config(format!(
            "runs from different configurations ({} and {})",
            first.config_digest, other.config_digest
        )));
    }
    let mut by_strategy: BTreeMap<(usize, String), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_strategy
            .entry((display_rank(&r.strategy), r.strategy.clone()))
            .or_default()
            .push(r);
    }

    let strategies: Vec<StrategyMeans> = by_strategy
        .iter()
        .map(|((_, name), rs)| {
            let means = METRICS
                .iter()
                .filter_map(|m| {
                    let vals: Vec<f64> = rs.iter().filter_map(|r| metric(r, m)).collect();
                    (!vals.is_empty()).then(|| (m.to_string(), vals.iter().sum::<f64>() / vals.len() as f64))
                })
                .collect();
            StrategyMeans {
                strategy: name.clone(),
                runs: rs.len(),
                means,
            }
        })
        .collect();

    let keyed: Vec<(&String, ByRun)> = by_strategy
        .iter()
        .map(|((_, name), rs)| (name, rs.iter().map(|r| ((r.fold.clone(), r.seed), *r)).collect()))
        .collect();
    let mut tests = Vec::new();
    for (i, (a, ra)) in keyed.iter().enumerate() {
        for (b, rb) in &keyed[i + 1..] {
            for m in METRICS {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for (key, sa) in ra {
                    if let (Some(x), Some(y)) = (metric(sa, m), rb.get(key).and_then(|sb| metric(sb, m))) {
                        xs.push(x);
                        ys.push(y);
                    }
                }
                if xs.len() < 2 {
                    continue;
                }
                let t = paired_t_test(&xs, &ys);
                tests.push(PairedTest {
                    metric: m.to_string(),
                    a: a.to_string(),
                    b: b.to_string(),
                    pairs: xs.len(),
                    t: t.t.is_finite().then_some(t.t),
                    p: t.p,
                });
            }
        }
    }
    let distinct: BTreeSet<(&str, u64)> = runs.iter().map(|r| (r.fold.as_str(), r.seed)).collect();
    Ok(Summary {
        config_digest: first.config_digest.clone(),
        runs: distinct.len(),
        strategies,
        tests,
    })
}

pub fn render_markdown(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Summary\n\nconfig `{}`, {} run(s)\n", s.config_digest, s.runs);
    let _ = writeln!(out, "| strategy | runs | {} |", METRICS.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---|".repeat(METRICS.len()));
    for st in &s.strategies {
        let cells: Vec<String> = METRICS
            .iter()
            .map(|m| st.means.get(*m).map_or("-".to_string(), |v| format!("{v:.4}")))
            .collect();
        let _ = writeln!(out, "| {} | {} | {} |", st.strategy, st.runs, cells.join(" | "));
    }
    if !s.tests.is_empty() {
        let _ = writeln!(
            out,
            "\n## Paired t-tests\n\n| metric | a | b | pairs | t | p |\n|---|---|---|---|---|---|"
        );
        for t in &s.tests {
            let tv = t.t.map_or("inf".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {:.4} |",
                t.metric, t.a, t.b, t.pairs, tv, t.p
            );
        }
    }
    out
}

/// Reads every `<fold>/seed-<s>/<name>.json` under `dir` and writes
/// `summary.json` and `summary.md` next to them.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let mut runs = Vec::new();
    let mut files = json_files(dir)?;
    files.sort();
    for path in files {
        let text = fs::read_to_string(&path)?;
        runs.push(serde_json::from_str::<RunSummary>(&text)?);
    }
    let summary = summarize_runs(&runs)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(dir.join("summary.md"), render_markdown(&summary))?;
    Ok(summary)
}
