mod common;

use std::fs;
use std::path::Path;

use common::small_config;
use foltr_core::attacks::AttackKind;
use foltr_core::data::{synthetic_dataset, to_letor, SyntheticSpec};
use foltr_core::error::Error;
use foltr_core::experiment::config::DatasetSource;
use foltr_core::experiment::log::{parse_csv, RunSummary, CSV_HEADER, NDCG_FORM};
use foltr_core::experiment::runner::completed_runs;
use foltr_core::experiment::{run_experiment, summarize, ExperimentConfig};
use foltr_core::unlearning::Strategy;

fn files_with_ext(dir: &Path, ext: &str) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_with_ext(&p, ext));
        } else if p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn tiny(kind: AttackKind) -> ExperimentConfig {
    let mut cfg = small_config(kind);
    cfg.train_rounds = 3;
    cfg.unlearn_rounds = 4;
    cfg
}

#[test]
fn single_strategy_clean_run_writes_two_logs() {
    let mut cfg = tiny(AttackKind::None);
    cfg.strategies = vec![Strategy::Retrain];
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.completed.len(), 1);
    let csvs = files_with_ext(dir.path(), "csv");
    let names: Vec<_> = csvs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["original.csv", "retrain.csv"]);

    let rows = parse_csv(&fs::read_to_string(&csvs[1]).unwrap()).unwrap();
    assert_eq!(rows.len(), 1 + cfg.train_rounds + cfg.unlearn_rounds);
    assert!(rows.iter().all(|r| r.offline_ndcg10.is_some()));
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(csvs[1].with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary.dist_diff, Some(0.0));
    assert_eq!(summary.ndcg_form, NDCG_FORM);
}

fn write_letor_folds(root: &Path, folds: &[&str]) {
    for (i, f) in folds.iter().enumerate() {
        let ds = synthetic_dataset(&SyntheticSpec {
            train_queries: 20,
            test_queries: 5,
            docs_per_query: 6,
            feature_count: 3,
            seed: i as u64,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = root.join(f);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("train.txt"), to_letor(&ds.train)).unwrap();
        fs::write(dir.join("test.txt"), to_letor(&ds.test)).unwrap();
    }
}

fn letor_config(root: &Path, folds: &[&str]) -> ExperimentConfig {
    let mut cfg = tiny(AttackKind::DataPoison);
    cfg.dataset.source = DatasetSource::Letor;
    cfg.dataset.path = Some(root.to_path_buf());
    cfg.dataset.folds = folds.iter().map(|f| f.to_string()).collect();
    cfg.seeds = vec![0, 1, 2];
    cfg
}

#[test]
fn folds_seeds_and_strategies_multiply() {
    let data = tempfile::tempdir().unwrap();
    let folds = ["Fold1", "Fold2", "Fold3", "Fold4", "Fold5"];
    write_letor_folds(data.path(), &folds);
    let cfg = letor_config(data.path(), &folds);
    let out = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, out.path()).unwrap();
    assert_eq!(report.completed.len(), 15);
    assert!(report.failed.is_empty());
    assert_eq!(files_with_ext(out.path(), "csv").len(), 5 * 3 * (5 + 1));
    assert_eq!(files_with_ext(out.path(), "bin").len(), 15);
    assert_eq!(completed_runs(out.path()).unwrap().len(), 15);

    // a second invocation finds everything done
    let again = run_experiment(&cfg, out.path()).unwrap();
    assert!(again.completed.is_empty());
    assert_eq!(again.skipped.len(), 15);

    let summary = summarize(out.path()).unwrap();
    assert_eq!(summary.runs, 15);
    assert_eq!(summary.strategies.len(), 6);
    assert!(out.path().join("summary.md").exists());
}

#[test]
fn a_broken_fold_only_fails_its_own_runs() {
    let data = tempfile::tempdir().unwrap();
    write_letor_folds(data.path(), &["Fold1"]);
    let mut cfg = letor_config(data.path(), &["Fold1", "Missing"]);
    cfg.seeds = vec![0];
    let out = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, out.path()).unwrap();
    assert_eq!(report.completed, vec![("Fold1".to_string(), 0)]);
    assert_eq!(report.failed.len(), 1);
    let status = fs::read_to_string(out.path().join("status.jsonl")).unwrap();
    assert!(status.contains("\"failed\""));

    // once the fold appears, only the failed run is redone
    write_letor_folds(data.path(), &["Missing"]);
    let retry = run_experiment(&cfg, out.path()).unwrap();
    assert_eq!(retry.completed, vec![("Missing".to_string(), 0)]);
    assert_eq!(retry.skipped, vec![("Fold1".to_string(), 0)]);
}

#[test]
fn an_output_directory_holds_one_configuration() {
    let cfg = tiny(AttackKind::None);
    let out = tempfile::tempdir().unwrap();
    run_experiment(&cfg, out.path()).unwrap();
    let mut other = cfg.clone();
    other.lr = 0.2;
    assert!(matches!(run_experiment(&other, out.path()), Err(Error::Config(_))));
    // a different output directory name alone is not a different config
    let mut moved = cfg.clone();
    moved.output_dir = "elsewhere".into();
    assert!(run_experiment(&moved, out.path()).is_ok());
}

#[test]
fn repeated_runs_write_identical_csvs() {
    let cfg = tiny(AttackKind::ModelPoison);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    let mut serial = cfg.clone();
    serial.parallel = false;
    run_experiment(&serial, b.path()).unwrap();
    let fa = files_with_ext(a.path(), "csv");
    let fc = files_with_ext(b.path(), "csv");
    assert_eq!(fa.len(), 6);
    for (x, y) in fa.iter().zip(&fc) {
        let tx = fs::read_to_string(x).unwrap();
        assert!(tx.starts_with(CSV_HEADER));
        assert_eq!(tx, fs::read_to_string(y).unwrap(), "{}", x.display());
    }
}

fn summary_row(seed: u64, strategy: &str, offline: f64, dist: f64) -> RunSummary {
    RunSummary {
        fold: "Fold1".into(),
        seed,
        strategy: strategy.into(),
        click_profile: "perfect".into(),
        attack: "data_poison".into(),
        targets: vec![0, 4, 7],
        config_digest: "d1".into(),
        train_rounds: 10,
        unlearn_rounds: 10,
        ndcg_form: NDCG_FORM.into(),
        online_performance_total: 5.0 + seed as f64,
        online_performance_unlearn: 2.0,
        final_offline_ndcg10: offline,
        unlearned_offline_ndcg10: offline,
        relr_diff: None,
        dist_diff: Some(dist),
    }
}

fn write_run(root: &Path, r: &RunSummary) {
    let dir = root.join(&r.fold).join(format!("seed-{}", r.seed));
    fs::create_dir_all(&dir).unwrap();
    fs::write(
        dir.join(format!("{}.json", r.strategy)),
        serde_json::to_string(r).unwrap(),
    )
    .unwrap();
}

#[test]
fn summarize_a_hand_built_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &summary_row(0, "retrain", 0.6, 0.0));
    write_run(dir.path(), &summary_row(1, "retrain", 0.8, 0.0));
    write_run(dir.path(), &summary_row(0, "finetune", 0.5, 1.0));
    write_run(dir.path(), &summary_row(1, "finetune", 0.9, 3.0));
    let s = summarize(dir.path()).unwrap();
    assert_eq!(s.runs, 2);
    let ft = s.strategies.iter().find(|m| m.strategy == "finetune").unwrap();
    assert!((ft.means["final_offline_ndcg10"] - 0.7).abs() < 1e-12);
    assert!((ft.means["dist_diff"] - 2.0).abs() < 1e-12);
    assert!((ft.means["online_performance_total"] - 5.5).abs() < 1e-12);
    let rt = s.strategies.iter().find(|m| m.strategy == "retrain").unwrap();
    assert!((rt.means["final_offline_ndcg10"] - 0.7).abs() < 1e-12);
    assert!(s.tests.iter().any(|t| t.metric == "dist_diff" && t.pairs == 2));

    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(written["runs"], 2);
    assert!(fs::read_to_string(dir.path().join("summary.md"))
        .unwrap()
        .contains("| finetune | 2 |"));
}

#[test]
fn summarize_rejects_mixed_configurations() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &summary_row(0, "retrain", 0.6, 0.0));
    let mut other = summary_row(1, "retrain", 0.6, 0.0);
    other.config_digest = "d2".into();
    write_run(dir.path(), &other);
    assert!(matches!(summarize(dir.path()), Err(Error::Config(_))));

    let empty = tempfile::tempdir().unwrap();
    assert!(summarize(empty.path()).is_err());
}
