//! End-to-end runs: train (possibly attacked), trigger unlearning, run every
//! strategy and the frozen baseline, write logs.
//!
//! Output layout under the output directory:
//!
//! ```text
//! manifest.json                 resolved config, version, planned files
//! status.jsonl                  one line per finished (fold, seed)
//! <fold>/seed-<s>/history.bin   stored training deltas
//! <fold>/seed-<s>/<name>.csv    per-round metrics
//! <fold>/seed-<s>/<name>.json   final scalars
//! ```

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{config_digest, DatasetSource, ExperimentConfig};
use super::log::{discounted_sum, write_csv, MetricsRow, Phase, RunSummary, NDCG_FORM};
use crate::attacks::{apply_attack, select_targets};
use crate::click::{make_profile, ClickProfile};
use crate::data::{load_letor_fold, normalize_features, partition_clients, synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::federation::history::{read_history_file, HistoryHeader, HistoryWriter};
use crate::federation::{
    commit_round, freeze_targets, interact, local_outcomes, run_round, ClientState, GlobalState, LocalOutcome,
    RoundSettings, UpdateHistory,
};
use crate::metrics::{l2_distance, offline_eval, relr_diff, relr_prepare, RelabeledSubset};
use crate::ranker::LinearRanker;
use crate::rng::{stream_rng, Stream};
use crate::unlearning::{original_trace, run_strategy, UnlearnContext, UnlearnedTrace};

pub const ORIGINAL: &str = "original";

pub fn load_dataset(cfg: &ExperimentConfig, fold: &str) -> Result<Dataset> {
    let d = &cfg.dataset;
    let ds = match d.source {
        DatasetSource::Synthetic => synthetic_dataset(&d.synthetic)?,
        DatasetSource::Letor => {
            let root = d
                .path
                .as_deref()
                .ok_or_else(|| Error::validation("dataset.path", "required for LETOR datasets"))?;
            let dir = if d.folds.is_empty() {
                root.to_path_buf()
            } else {
                root.join(fold)
            };
            load_letor_fold(&dir, &d.train_file, &d.test_file, d.relevance_levels)?
        }
    };
    Ok(if d.normalize { normalize_features(&ds) } else { ds })
}

fn train_settings(cfg: &ExperimentConfig, seed: u64) -> RoundSettings {
    RoundSettings {
        local_updates: cfg.local_updates,
        lr: cfg.lr,
        serp_len: cfg.serp_len,
        seed,
        stream: Stream::Train,
        parallel: cfg.parallel,
    }
}

fn evaluated(cfg: &ExperimentConfig, round: usize, last: bool) -> bool {
    last || round.is_multiple_of(cfg.eval_every)
}

/// State of a run at the unlearning trigger.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Targets frozen.
    pub state: GlobalState,
    pub history: UpdateHistory,
    pub targets: Vec<usize>,
    /// Rounds `0..=T`.
    pub offline: Vec<Option<f64>>,
    /// Rounds `1..=T`.
    pub online: Vec<Option<f64>>,
    pub relr_subset: RelabeledSubset,
}

/// Each target fine-tunes its fresh local model on its relabeled
/// high-loss queries and uploads that instead.
fn relevancy_reset(
    outcomes: &mut [LocalOutcome],
    state: &GlobalState,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    targets: &[usize],
    honest: &ClickProfile,
    seed: u64,
) -> RelabeledSubset {
    let mut all = RelabeledSubset::default();
    for o in outcomes.iter_mut().filter(|o| targets.contains(&o.client_id)) {
        let c = o.client_id;
        let subset = relr_prepare(
            dataset,
            &state.clients[c].partition.queries,
            &o.local_model,
            cfg.relr.top_k_percent,
        );
        let mut rng = stream_rng(seed, Stream::RelevancyReset, c as u64, 0);
        let mut model = o.local_model.clone();
        for _ in 0..cfg.relr.finetune_updates {
            let (qi, labels) = &subset.queries[rng.random_range(0..subset.len())];
            let query = &dataset.train.queries[*qi];
            model = interact(&model, query, labels, honest, cfg.serp_len, cfg.lr, &mut rng).model;
        }
        o.local_model = model.clone();
        o.sent = model;
        all.extend(subset);
    }
    all
}

/// Builds the federation, runs the training phase and freezes the targets.
/// With a history path the deltas go to disk and are read back from there.
pub fn train_phase(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    history_path: Option<&Path>,
) -> Result<TrainingOutcome> {
    let levels = dataset.relevance_levels;
    let honest = make_profile(cfg.click_profile, levels)?;
    let clients: Vec<ClientState> = partition_clients(dataset, cfg.n_clients, seed)?
        .into_iter()
        .map(|p| ClientState::new(p, honest.clone(), dataset.feature_count))
        .collect();
    let mut state = GlobalState::new(clients, dataset.feature_count);
    let targets = select_targets(cfg.n_clients, cfg.n_targets(), seed);
    let [lo, hi] = cfg.attack.gamma_range;
    apply_attack(&mut state, cfg.attack.kind, &targets, (lo, hi), levels)?;

    let mut writer = match history_path {
        Some(p) => Some(HistoryWriter::create(
            p,
            HistoryHeader {
                feature_count: dataset.feature_count,
                n_clients: cfg.n_clients,
                seed,
            },
            &state.global_model,
        )?),
        None => None,
    };
    let settings = train_settings(cfg, seed);
    let mut offline = vec![Some(offline_eval(&state.global_model, &dataset.test))];
    let mut online = Vec::with_capacity(cfg.train_rounds);
    let mut relr_subset = RelabeledSubset::default();
    for t in 1..=cfg.train_rounds {
        let last = t == cfg.train_rounds;
        let summary = if last && cfg.relr.enabled && !targets.is_empty() {
            let mut outcomes = local_outcomes(&state, dataset, &settings);
            relr_subset = relevancy_reset(&mut outcomes, &state, dataset, cfg, &targets, &honest, seed);
            commit_round(&mut state, outcomes)
        } else {
            run_round(&mut state, dataset, &settings)
        };
        if let Some(w) = writer.as_mut() {
            w.append(&summary.record)?;
        }
        online.push(summary.online_ndcg);
        offline.push(evaluated(cfg, t, last).then(|| offline_eval(&state.global_model, &dataset.test)));
    }

    let history = match (writer, history_path) {
        (Some(w), Some(p)) => {
            w.finish()?;
            let (_, h) = read_history_file(p)?;
            h
        }
        _ => state.history.clone(),
    };
    freeze_targets(&mut state, &targets)?;
    Ok(TrainingOutcome {
        state,
        history,
        targets,
        offline,
        online,
        relr_subset,
    })
}

#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub name: String,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub unlearned: LinearRanker,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub fold: String,
    pub seed: u64,
    /// The frozen baseline first, then strategies in canonical order.
    pub results: Vec<StrategyResult>,
}

impl RunOutcome {
    pub fn get(&self, name: &str) -> Option<&StrategyResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_trace(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    fold: &str,
    seed: u64,
    training: &TrainingOutcome,
    trace: &UnlearnedTrace,
    retrained: Option<&LinearRanker>,
) -> StrategyResult {
    let t_rounds = cfg.train_rounds;
    let mut rows = Vec::with_capacity(t_rounds + trace.rounds.len() + 1);
    for (round, off) in training.offline.iter().enumerate() {
        rows.push(MetricsRow {
            round,
            phase: Phase::Train,
            strategy: trace.name.to_string(),
            offline_ndcg10: *off,
            online_increment: round.checked_sub(1).and_then(|i| training.online[i]),
        });
    }
    let n = trace.rounds.len();
    let mut final_offline = *training
        .offline
        .last()
        .and_then(|o| o.as_ref())
        .expect("last round evaluated");
    for (j, r) in trace.rounds.iter().enumerate() {
        let round = t_rounds + j + 1;
        let off = evaluated(cfg, round, j + 1 == n).then(|| offline_eval(&r.model, &dataset.test));
        if let Some(v) = off {
            final_offline = v;
        }
        rows.push(MetricsRow {
            round,
            phase: Phase::Unlearn,
            strategy: trace.name.to_string(),
            offline_ndcg10: off,
            online_increment: r.online_ndcg,
        });
    }

    let unlearn_online: Vec<Option<f64>> = trace.rounds.iter().map(|r| r.online_ndcg).collect();
    let mut total_online = training.online.clone();
    total_online.extend(unlearn_online.iter().copied());
    let summary = RunSummary {
        fold: fold.to_string(),
        seed,
        strategy: trace.name.to_string(),
        click_profile: cfg.click_profile.to_string(),
        attack: cfg.attack.kind.to_string(),
        targets: training.targets.clone(),
        config_digest: config_digest(cfg),
        train_rounds: cfg.train_rounds,
        unlearn_rounds: cfg.unlearn_rounds,
        ndcg_form: NDCG_FORM.to_string(),
        online_performance_total: discounted_sum(&total_online, cfg.online_gamma),
        online_performance_unlearn: discounted_sum(&unlearn_online, cfg.online_gamma),
        final_offline_ndcg10: final_offline,
        unlearned_offline_ndcg10: offline_eval(&trace.unlearned, &dataset.test),
        relr_diff: (!training.relr_subset.is_empty())
            .then(|| relr_diff(&trace.start, &trace.unlearned, dataset, &training.relr_subset)),
        dist_diff: retrained.map(|r| l2_distance(&trace.unlearned, r)),
    };
    StrategyResult {
        name: trace.name.to_string(),
        rows,
        summary,
        unlearned: trace.unlearned.clone(),
    }
}

/// One (fold, seed) run held in memory. Writes only the history file, and
/// only when a directory is given.
pub fn simulate(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    fold: &str,
    seed: u64,
    dir: Option<&Path>,
) -> Result<RunOutcome> {
    let history_path = dir.map(|d| d.join("history.bin"));
    let training = train_phase(cfg, dataset, seed, history_path.as_deref())?;
    let ctx = UnlearnContext {
        dataset,
        settings: train_settings(cfg, seed),
        unlearn_rounds: cfg.unlearn_rounds,
        params: cfg.unlearning,
    };

    let mut traces = Vec::new();
    for strategy in cfg.scheduled_strategies() {
        info!("{fold}/seed-{seed}: {strategy}");
        traces.push(run_strategy(strategy, &training.state, &training.history, &ctx)?);
    }
    let retrained = cfg
        .dist_diff
        .then(|| traces.iter().find(|t| t.name == "retrain").map(|t| t.unlearned.clone()))
        .flatten();

    let mut results = vec![finish_trace(
        cfg,
        dataset,
        fold,
        seed,
        &training,
        &original_trace(&training.state, &ctx)?,
        retrained.as_ref(),
    )];
    for trace in &traces {
        results.push(finish_trace(
            cfg,
            dataset,
            fold,
            seed,
            &training,
            trace,
            retrained.as_ref(),
        ));
    }
    Ok(RunOutcome {
        fold: fold.to_string(),
        seed,
        results,
    })
}

pub fn run_dir(out: &Path, fold: &str, seed: u64) -> PathBuf {
    out.join(fold).join(format!("seed-{seed}"))
}

pub fn write_outcome(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in &outcome.results {
        write_csv(&dir.join(format!("{}.csv", r.name)), &r.rows)?;
        fs::write(
            dir.join(format!("{}.json", r.name)),
            serde_json::to_string_pretty(&r.summary)? + "\n",
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRun {
    pub fold: String,
    pub seed: u64,
    pub dir: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub runs: Vec<ManifestRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusLine {
    pub fold: String,
    pub seed: u64,
    pub status: String,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn planned_manifest(cfg: &ExperimentConfig) -> Manifest {
    let mut names = vec![ORIGINAL.to_string()];
    names.extend(cfg.scheduled_strategies().iter().map(|s| s.to_string()));
    let mut runs = Vec::new();
    for fold in cfg.dataset.fold_names() {
        for &seed in &cfg.seeds {
            let mut files = vec!["history.bin".to_string()];
            for n in &names {
                files.push(format!("{n}.csv"));
                files.push(format!("{n}.json"));
            }
            runs.push(ManifestRun {
                dir: format!("{fold}/seed-{seed}"),
                fold: fold.clone(),
                seed,
                files,
            });
        }
    }
    Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config_digest(cfg),
        config: cfg.clone(),
        runs,
    }
}

/// Completed (fold, seed) pairs recorded in `status.jsonl`.
pub fn completed_runs(out: &Path) -> Result<HashSet<(String, u64)>> {
    let path = out.join("status.jsonl");
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let mut done = HashSet::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
        let s: StatusLine = serde_json::from_str(line)?;
        if s.status == "complete" {
            done.insert((s.fold, s.seed));
        }
    }
    Ok(done)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub completed: Vec<(String, u64)>,
    pub skipped: Vec<(String, u64)>,
    pub failed: Vec<(String, u64, String)>,
}

/// Runs every (fold, seed) of the configuration into `out`, skipping runs
/// already marked complete. A failing run is recorded and does not stop
/// the others.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let manifest_path = out.join("manifest.json");
    let planned = planned_manifest(cfg);
    if manifest_path.exists() {
        let existing: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if existing.config_digest != planned.config_digest {
            return Err(Error::Config(format!(
                "{} already holds runs of a different configuration",
                out.display()
            )));
        }
    } else {
        fs::write(&manifest_path, serde_json::to_string_pretty(&planned)? + "\n")?;
    }

    let done = completed_runs(out)?;
    let status = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("status.jsonl"))?,
    );
    let report = Mutex::new(ExperimentReport::default());

    for fold in cfg.dataset.fold_names() {
        let pending: Vec<u64> = cfg
            .seeds
            .iter()
            .copied()
            .filter(|&s| {
                let skip = done.contains(&(fold.clone(), s));
                if skip {
                    report.lock().unwrap().skipped.push((fold.clone(), s));
                }
                !skip
            })
            .collect();
        if pending.is_empty() {
            continue;
        }
        let dataset = load_dataset(cfg, &fold);
        let one = |seed: u64| -> Result<()> {
            let started = Instant::now();
            let result = dataset
                .as_ref()
                .map_err(|e| Error::Config(e.to_string()))
                .and_then(|ds| {
                    let dir = run_dir(out, &fold, seed);
                    fs::create_dir_all(&dir)?;
                    let outcome = simulate(cfg, ds, &fold, seed, Some(&dir))?;
                    write_outcome(&dir, &outcome)
                });
            let line = StatusLine {
                fold: fold.clone(),
                seed,
                status: if result.is_ok() { "complete" } else { "failed" }.into(),
                wall_seconds: started.elapsed().as_secs_f64(),
                error: result.as_ref().err().map(|e| e.to_string()),
            };
            {
                let mut f = status.lock().unwrap();
                writeln!(f, "{}", serde_json::to_string(&line)?)?;
                f.flush()?;
            }
            let mut r = report.lock().unwrap();
            match result {
                Ok(()) => r.completed.push((fold.clone(), seed)),
                Err(e) => {
                    warn!("{fold}/seed-{seed} failed: {e}");
                    r.failed.push((fold.clone(), seed, e.to_string()));
                }
            }
            Ok(())
        };
        if cfg.parallel {
            pending.par_iter().try_for_each(|&s| one(s))?;
        } else {
            pending.iter().try_for_each(|&s| one(s))?;
        }
    }
    let mut report = report.into_inner().unwrap();
    report.completed.sort();
    report.failed.sort();
    Ok(report)
}
