#![allow(dead_code)]

use foltr_core::attacks::AttackKind;
use foltr_core::data::{Dataset, SyntheticSpec};
use foltr_core::experiment::runner::{load_dataset, train_phase, TrainingOutcome};
use foltr_core::experiment::ExperimentConfig;
use foltr_core::federation::RoundSettings;
use foltr_core::rng::Stream;
use foltr_core::unlearning::{Strategy, UnlearnContext};

/// A federation small enough for debug-speed tests: 5 clients, 2 of them
/// targets unless the rate is overridden.
pub fn small_config(kind: AttackKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_clients: 5,
        local_updates: 3,
        train_rounds: 6,
        unlearn_rounds: 10,
        eval_every: 1,
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    cfg.dataset.synthetic = SyntheticSpec {
        train_queries: 40,
        test_queries: 10,
        docs_per_query: 8,
        feature_count: 4,
        ..SyntheticSpec::default()
    };
    cfg.attack.kind = kind;
    cfg.attack.poisoning_rate = 0.4;
    cfg
}

pub fn clean_without_targets() -> ExperimentConfig {
    let mut cfg = small_config(AttackKind::None);
    cfg.attack.poisoning_rate = 0.0;
    cfg.strategies.retain(|s| *s != Strategy::GradientAscent);
    cfg
}

pub fn trained(cfg: &ExperimentConfig, seed: u64) -> (Dataset, TrainingOutcome) {
    let ds = load_dataset(cfg, "synthetic").unwrap();
    let out = train_phase(cfg, &ds, seed, None).unwrap();
    (ds, out)
}

pub fn settings(cfg: &ExperimentConfig, seed: u64) -> RoundSettings {
    RoundSettings {
        local_updates: cfg.local_updates,
        lr: cfg.lr,
        serp_len: cfg.serp_len,
        seed,
        stream: Stream::Train,
        parallel: cfg.parallel,
    }
}

pub fn context<'a>(cfg: &ExperimentConfig, ds: &'a Dataset, seed: u64) -> UnlearnContext<'a> {
    UnlearnContext {
        dataset: ds,
        settings: settings(cfg, seed),
        unlearn_rounds: cfg.unlearn_rounds,
        params: cfg.unlearning,
    }
}
