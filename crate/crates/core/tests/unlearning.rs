mod common;

use common::{clean_without_targets, context, small_config, trained};
use foltr_core::attacks::AttackKind;
use foltr_core::click::simulate_session;
use foltr_core::data::{synthetic_dataset, SyntheticSpec};
use foltr_core::error::Error;
use foltr_core::experiment::runner::train_phase;
use foltr_core::federation::{aggregate_deltas, freeze_targets, GlobalState, RoundRecord, UpdateHistory};
use foltr_core::metrics::l2_distance;
use foltr_core::ranker::{pdgd_gradient, pdgd_update, sample_ranking, LinearRanker};
use foltr_core::rng::{stream_rng, Stream};
use foltr_core::unlearning::*;
use rand::Rng;

fn close(a: &LinearRanker, b: &LinearRanker, tol: f64) -> bool {
    l2_distance(a, b) <= tol
}

#[test]
fn fedremove_without_targets_replays_the_original_model() {
    let cfg = clean_without_targets();
    let (ds, out) = trained(&cfg, 3);
    let mut ctx = context(&cfg, &ds, 3);
    ctx.unlearn_rounds = out.history.len();
    let trace = unlearn_fedremove(&out.state, &out.history, &ctx).unwrap();
    assert!(close(&trace.unlearned, &out.state.global_model, 1e-9));
}

#[test]
fn fedremove_replay_from_disk_matches_too() {
    let cfg = clean_without_targets();
    let ds = foltr_core::experiment::runner::load_dataset(&cfg, "synthetic").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train_phase(&cfg, &ds, 1, Some(&dir.path().join("history.bin"))).unwrap();
    let mut ctx = context(&cfg, &ds, 1);
    ctx.unlearn_rounds = out.history.len();
    let trace = unlearn_fedremove(&out.state, &out.history, &ctx).unwrap();
    assert!(close(&trace.unlearned, &out.state.global_model, 1e-9));
}

/// Two clients over a 2-feature dataset; client 1 is frozen.
fn two_client_state() -> (foltr_core::data::Dataset, GlobalState) {
    let cfg = clean_without_targets();
    let ds = synthetic_dataset(&SyntheticSpec {
        train_queries: 4,
        test_queries: 2,
        docs_per_query: 3,
        feature_count: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let profile = foltr_core::click::make_profile(cfg.click_profile, 5).unwrap();
    let clients = foltr_core::data::partition_clients(&ds, 2, 0)
        .unwrap()
        .into_iter()
        .map(|p| foltr_core::federation::ClientState::new(p, profile.clone(), 2))
        .collect();
    let mut state = GlobalState::new(clients, 2);
    freeze_targets(&mut state, &[1]).unwrap();
    (ds, state)
}

#[test]
fn fedremove_hand_example() {
    let (ds, state) = two_client_state();
    let mut history = UpdateHistory::new(LinearRanker::zeros(2));
    history.push(RoundRecord {
        round: 1,
        participants: vec![0, 1],
        weights: vec![0.5, 0.5],
        deltas: vec![vec![1.0, 0.0], vec![9.0, 9.0]],
    });
    history.push(RoundRecord {
        round: 2,
        participants: vec![0, 1],
        weights: vec![0.5, 0.5],
        deltas: vec![vec![0.0, 1.0], vec![-9.0, 3.0]],
    });
    let cfg = clean_without_targets();
    let mut ctx = context(&cfg, &ds, 0);
    ctx.unlearn_rounds = 2;
    let trace = unlearn_fedremove(&state, &history, &ctx).unwrap();
    assert_eq!(trace.unlearned.weights, vec![1.0, 1.0]);
    assert_eq!(trace.rounds[0].model.weights, vec![1.0, 0.0]);
    // the server replay touches no client data
    assert_eq!(state.access.snapshot(), vec![0, 0]);
}

#[test]
fn federaser_single_round_hand_example() {
    // stored (0, 2), fresh (3, 4), θ0 = 0, one remaining client with weight 1
    let calibrated = calibrate_update(&[3.0, 4.0], &[0.0, 2.0]);
    let theta = aggregate_deltas(&LinearRanker::zeros(2), &[&calibrated], &[1.0]);
    assert!(close(&theta, &LinearRanker::new(vec![1.2, 1.6]), 1e-12));
}

#[test]
fn federaser_identity_calibration_is_plain_replay() {
    let stored = [vec![0.3, -0.2], vec![0.1, 0.4]];
    let mut theta = LinearRanker::zeros(2);
    let mut replay = LinearRanker::zeros(2);
    for d in &stored {
        theta = aggregate_deltas(&theta, &[&calibrate_update(d, d)], &[1.0]);
        replay = aggregate_deltas(&replay, &[d], &[1.0]);
    }
    assert_eq!(theta, replay);
}

#[test]
fn federaser_calibrated_updates_keep_stored_norms() {
    let cfg = small_config(AttackKind::DataPoison);
    let (ds, out) = trained(&cfg, 2);
    let ctx = context(&cfg, &ds, 2);
    let (trace, log) = federaser_with_log(&out.state, &out.history, &ctx).unwrap();
    assert_eq!(trace.rounds.len(), cfg.unlearn_rounds);
    assert!(!log.is_empty());
    for r in &log {
        assert!(!out.targets.contains(&r.client));
        assert!(
            r.calibrated_norm == 0.0 || (r.calibrated_norm - r.stored_norm).abs() <= 1e-12 * r.stored_norm.max(1.0),
            "{r:?}"
        );
    }
}

#[test]
fn history_strategies_need_history() {
    let cfg = small_config(AttackKind::DataPoison);
    let (ds, out) = trained(&cfg, 0);
    let ctx = context(&cfg, &ds, 0);
    let empty = UpdateHistory::new(LinearRanker::zeros(ds.feature_count));
    assert!(matches!(
        unlearn_fedremove(&out.state, &empty, &ctx),
        Err(Error::Strategy(_))
    ));
    assert!(matches!(
        unlearn_federaser(&out.state, &empty, &ctx),
        Err(Error::Strategy(_))
    ));

    let mut short = context(&cfg, &ds, 0);
    short.unlearn_rounds = out.history.len() - 1;
    assert!(matches!(
        unlearn_fedremove(&out.state, &out.history, &short),
        Err(Error::Strategy(_))
    ));
}

#[test]
fn zero_unlearning_rounds_is_a_configuration_error() {
    let cfg = small_config(AttackKind::DataPoison);
    let (ds, out) = trained(&cfg, 0);
    let mut ctx = context(&cfg, &ds, 0);
    ctx.unlearn_rounds = 0;
    for s in Strategy::ALL {
        assert!(
            matches!(run_strategy(s, &out.state, &out.history, &ctx), Err(Error::Config(_))),
            "{s}"
        );
    }
}

#[test]
fn gradient_ascent_needs_targets() {
    let cfg = clean_without_targets();
    let (ds, out) = trained(&cfg, 0);
    let ctx = context(&cfg, &ds, 0);
    assert!(matches!(
        unlearn_gradient_ascent(&out.state, &ctx),
        Err(Error::Strategy(_))
    ));
}

#[test]
fn gradient_ascent_without_steps_keeps_the_trigger_model() {
    let cfg = small_config(AttackKind::DataPoison);
    let (ds, out) = trained(&cfg, 1);
    let mut ctx = context(&cfg, &ds, 1);
    ctx.params.ascent_steps = 0;
    let trace = unlearn_gradient_ascent(&out.state, &ctx).unwrap();
    assert_eq!(trace.unlearned, out.state.global_model);
    assert_eq!(trace.rounds.len(), cfg.unlearn_rounds);
    assert!(trace.rounds[0].online_ndcg.is_none());
}

#[test]
fn ascent_iterates_stay_in_the_ball() {
    let mut cfg = small_config(AttackKind::DataPoison);
    cfg.unlearning.ascent_lr = 0.5;
    let (ds, out) = trained(&cfg, 4);
    let (center, radius) = ascent_reference(&out.state);
    assert!(radius > 0.0);
    for &t in &out.targets {
        let iterates = ascent_iterates(
            &out.state.clients[t],
            &out.state.global_model,
            &center,
            radius,
            &ds,
            &cfg.unlearning,
            cfg.serp_len,
            4,
            &out.state.access,
        );
        assert_eq!(iterates.len(), cfg.unlearning.ascent_steps);
        for th in &iterates {
            assert!(l2_distance(th, &center) <= radius * (1.0 + 1e-12));
        }
    }
}

#[test]
fn ascent_step_is_a_reversed_pdgd_step() {
    let cfg = small_config(AttackKind::DataPoison);
    let (ds, out) = trained(&cfg, 5);
    let client = &out.state.clients[out.targets[0]];
    let start = &out.state.global_model;
    let params = UnlearnParams {
        ascent_steps: 1,
        ..cfg.unlearning
    };
    let far = 1e9;
    let it = ascent_iterates(
        client,
        start,
        start,
        far,
        &ds,
        &params,
        cfg.serp_len,
        5,
        &out.state.access,
    );

    let mut rng = stream_rng(5, Stream::GradientAscent, client.client_id as u64, 0);
    let qi = client.partition.queries[rng.random_range(0..client.partition.len())];
    let query = &ds.train.queries[qi];
    let serp = sample_ranking(start, query, cfg.serp_len, &mut rng);
    let clicks = simulate_session(&client.profile, &serp.relevances(query), &mut rng);
    let descent = pdgd_update(start, query, &serp, &clicks, params.ascent_lr);
    let mirrored: Vec<f64> = start
        .weights
        .iter()
        .zip(&descent.weights)
        .map(|(s, d)| 2.0 * s - d)
        .collect();
    assert!(close(&it[0], &LinearRanker::new(mirrored), 1e-12));
    let grad = pdgd_gradient(start, query, &serp, &clicks);
    let expect: Vec<f64> = start
        .weights
        .iter()
        .zip(&grad)
        .map(|(s, g)| s - params.ascent_lr * g)
        .collect();
    assert!(close(&it[0], &LinearRanker::new(expect), 1e-12));
}

#[test]
fn retrain_on_the_training_stream_without_targets_is_a_clean_run() {
    let cfg = clean_without_targets();
    let (ds, out) = trained(&cfg, 7);
    let ctx = context(&cfg, &ds, 7);
    let trace = unlearn_retrain_on(&out.state, &ctx, Stream::Train).unwrap();

    let mut longer = cfg.clone();
    longer.train_rounds = cfg.unlearn_rounds;
    let (_, clean) = trained(&longer, 7);
    assert_eq!(trace.final_model(), &clean.state.global_model);

    let mut theta = clean.history.initial.clone();
    for (rec, r) in clean.history.rounds.iter().zip(&trace.rounds) {
        let deltas: Vec<&[f64]> = rec.deltas.iter().map(Vec::as_slice).collect();
        theta = aggregate_deltas(&theta, &deltas, &rec.weights);
        assert!(close(&theta, &r.model, 1e-12));
    }
}

#[test]
fn finetune_without_targets_continues_training() {
    let cfg = clean_without_targets();
    let (ds, out) = trained(&cfg, 8);
    let ctx = context(&cfg, &ds, 8);
    let trace = unlearn_finetune(&out.state, &ctx).unwrap();

    let mut longer = cfg.clone();
    longer.train_rounds = cfg.train_rounds + cfg.unlearn_rounds;
    let (_, continued) = trained(&longer, 8);
    assert_eq!(trace.final_model(), &continued.state.global_model);
}

#[test]
fn strategies_leave_target_data_alone() {
    let cfg = small_config(AttackKind::DataPoison);
    let (ds, out) = trained(&cfg, 6);
    let ctx = context(&cfg, &ds, 6);
    let targets = out.targets.clone();
    let reads = |s: &[u64]| -> Vec<u64> { targets.iter().map(|&t| s[t]).collect() };

    for s in [
        Strategy::Retrain,
        Strategy::Finetune,
        Strategy::Federaser,
        Strategy::Fedremove,
    ] {
        let before = out.state.access.snapshot();
        run_strategy(s, &out.state, &out.history, &ctx).unwrap();
        let after = out.state.access.snapshot();
        assert_eq!(reads(&before), reads(&after), "{s} read target data");
        assert!(
            after.iter().sum::<u64>() > before.iter().sum::<u64>(),
            "{s} trained no one"
        );
    }

    // pure replay: no client computation at all
    let mut replay_only = context(&cfg, &ds, 6);
    replay_only.unlearn_rounds = out.history.len();
    let before = out.state.access.snapshot();
    unlearn_fedremove(&out.state, &out.history, &replay_only).unwrap();
    assert_eq!(before, out.state.access.snapshot());

    let before = out.state.access.snapshot();
    original_trace(&out.state, &ctx).unwrap();
    assert_eq!(reads(&before), reads(&out.state.access.snapshot()));
}

#[test]
fn traces_have_one_model_per_round() {
    let cfg = small_config(AttackKind::ModelPoison);
    let (ds, out) = trained(&cfg, 9);
    let ctx = context(&cfg, &ds, 9);
    for s in Strategy::ALL {
        let t = run_strategy(s, &out.state, &out.history, &ctx).unwrap();
        assert_eq!(t.rounds.len(), cfg.unlearn_rounds, "{s}");
        assert_eq!(t.start, out.state.global_model);
        assert!(t.rounds.iter().all(|r| r.model.is_finite()));
    }
}
