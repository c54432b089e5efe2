//! Federated unlearning strategies.
//!
//! Every strategy starts from the state at the unlearning trigger (targets
//! already frozen) and produces one global model per unlearning round. The
//! trace also names the "unlearned" model used for distance and RelR
//! comparisons: the final model for retraining and fine-tuning, the model
//! right after the core step for the history-based strategies and gradient
//! ascent.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::click::simulate_session;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{
    aggregate_deltas, local_training, run_round, AccessLog, ClientState, GlobalState, RoundSettings, UpdateHistory,
};
use crate::metrics::{l2_distance, ndcg_at_k};
use crate::ranker::{pdgd_gradient, sample_ranking, LinearRanker};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Retrain,
    Finetune,
    Federaser,
    Fedremove,
    GradientAscent,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Retrain,
        Strategy::Finetune,
        Strategy::Federaser,
        Strategy::Fedremove,
        Strategy::GradientAscent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Retrain => "retrain",
            Strategy::Finetune => "finetune",
            Strategy::Federaser => "federaser",
            Strategy::Fedremove => "fedremove",
            Strategy::GradientAscent => "gradient_ascent",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnParams {
    /// η_u
    pub ascent_lr: f64,
    pub ascent_steps: usize,
    /// δ; defaults to the mean distance of the remaining local models to
    /// their average.
    pub ball_radius: Option<f64>,
    pub calibration_local_updates: usize,
    /// Use every n-th stored round for history-based strategies.
    pub history_interval: usize,
}

impl Default for UnlearnParams {
    fn default() -> Self {
        UnlearnParams {
            ascent_lr: 0.01,
            ascent_steps: 50,
            ball_radius: None,
            calibration_local_updates: 5,
            history_interval: 1,
        }
    }
}

pub struct UnlearnContext<'a> {
    pub dataset: &'a Dataset,
    /// Training settings; the stream is replaced per strategy.
    pub settings: RoundSettings,
    pub unlearn_rounds: usize,
    pub params: UnlearnParams,
}

impl UnlearnContext<'_> {
    fn with_stream(&self, stream: Stream) -> RoundSettings {
        RoundSettings {
            stream,
            ..self.settings
        }
    }

    fn check_rounds(&self) -> Result<()> {
        if self.unlearn_rounds == 0 {
            return Err(Error::Config("unlearn_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRound {
    pub model: LinearRanker,
    /// Mean nDCG of the SERPs shown this round; `None` when no user saw one.
    pub online_ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnedTrace {
    pub name: &'static str,
    /// Model at the trigger (round 0 of the unlearning phase).
    pub start: LinearRanker,
    pub rounds: Vec<TraceRound>,
    pub unlearned: LinearRanker,
}

impl UnlearnedTrace {
    pub fn final_model(&self) -> &LinearRanker {
        self.rounds.last().map_or(&self.start, |r| &r.model)
    }
}

fn standard_rounds(
    state: &mut GlobalState,
    ctx: &UnlearnContext,
    stream: Stream,
    count: usize,
    out: &mut Vec<TraceRound>,
) {
    let settings = ctx.with_stream(stream);
    for _ in 0..count {
        let summary = run_round(state, ctx.dataset, &settings);
        out.push(TraceRound {
            model: state.global_model.clone(),
            online_ndcg: summary.online_ndcg,
        });
    }
}

/// Trains from scratch with the remaining clients on the retraining stream.
pub fn unlearn_retrain(trigger: &GlobalState, ctx: &UnlearnContext) -> Result<UnlearnedTrace> {
    unlearn_retrain_on(trigger, ctx, Stream::Retrain)
}

/// [`unlearn_retrain`] on an explicit stream; with [`Stream::Train`] and no
/// targets it reproduces the original training run.
pub fn unlearn_retrain_on(trigger: &GlobalState, ctx: &UnlearnContext, stream: Stream) -> Result<UnlearnedTrace> {
    ctx.check_rounds()?;
    let dim = trigger.dim();
    let clients: Vec<ClientState> = trigger
        .clients
        .iter()
        .map(|c| ClientState {
            local_model: LinearRanker::zeros(dim),
            ..c.clone()
        })
        .collect();
    let mut state = GlobalState::new(clients, dim);
    state.targets = trigger.targets.clone();
    state.access = trigger.access.clone();
    state.record_history = false;

    let mut rounds = Vec::with_capacity(ctx.unlearn_rounds);
    standard_rounds(&mut state, ctx, stream, ctx.unlearn_rounds, &mut rounds);
    let unlearned = state.global_model.clone();
    Ok(UnlearnedTrace {
        name: Strategy::Retrain.as_str(),
        start: trigger.global_model.clone(),
        rounds,
        unlearned,
    })
}

/// Keeps training the trigger-time model with the remaining clients,
/// continuing the training stream and round numbering.
pub fn unlearn_finetune(trigger: &GlobalState, ctx: &UnlearnContext) -> Result<UnlearnedTrace> {
    ctx.check_rounds()?;
    let mut state = trigger.detached();
    let mut rounds = Vec::with_capacity(ctx.unlearn_rounds);
    standard_rounds(&mut state, ctx, Stream::Train, ctx.unlearn_rounds, &mut rounds);
    Ok(UnlearnedTrace {
        name: Strategy::Finetune.as_str(),
        start: trigger.global_model.clone(),
        unlearned: state.global_model.clone(),
        rounds,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Direction of the fresh update with the magnitude of the stored one.
pub fn calibrate_update(new_delta: &[f64], historical_delta: &[f64]) -> Vec<f64> {
    assert_eq!(new_delta.len(), historical_delta.len(), "delta dimension mismatch");
    let n = norm(new_delta);
    if n == 0.0 {
        return vec![0.0; new_delta.len()];
    }
    let scale = norm(historical_delta) / n;
    new_delta.iter().map(|x| x * scale).collect()
}

fn selected_rounds<'h>(
    history: &'h UpdateHistory,
    ctx: &UnlearnContext,
) -> Result<Vec<&'h crate::federation::RoundRecord>> {
    if history.is_empty() {
        return Err(Error::Strategy("no stored update history".into()));
    }
    let interval = ctx.params.history_interval.max(1);
    let picked: Vec<_> = history.rounds.iter().step_by(interval).collect();
    if picked.len() > ctx.unlearn_rounds {
        return Err(Error::Strategy(format!(
            "history replay needs {} rounds but only {} unlearning rounds are configured",
            picked.len(),
            ctx.unlearn_rounds
        )));
    }
    Ok(picked)
}

/// One calibrated round: returns the new model, the calibrated deltas per
/// participant and the mean online nDCG of the fresh interactions.
struct Calibrated {
    model: LinearRanker,
    participants: Vec<usize>,
    calibrated: Vec<Vec<f64>>,
    stored: Vec<Vec<f64>>,
    online: Option<f64>,
}

fn calibrated_round(
    state: &GlobalState,
    record: &crate::federation::RoundRecord,
    ctx: &UnlearnContext,
    round: usize,
) -> Calibrated {
    let participants: Vec<usize> = record
        .participants
        .iter()
        .copied()
        .filter(|c| !state.targets.contains(c))
        .collect();
    if participants.is_empty() {
        return Calibrated {
            model: state.global_model.clone(),
            participants,
            calibrated: Vec::new(),
            stored: Vec::new(),
            online: None,
        };
    }
    let settings = ctx.with_stream(Stream::FedEraser);
    let updates = ctx.params.calibration_local_updates;
    let fresh = |&c: &usize| {
        let mut rng = stream_rng(settings.seed, Stream::FedEraser, c as u64, round as u64);
        local_training(
            &state.clients[c],
            &state.global_model,
            ctx.dataset,
            updates,
            &settings,
            &state.access,
            &mut rng,
        )
    };
    let outcomes: Vec<(LinearRanker, Vec<f64>)> = if settings.parallel {
        participants.par_iter().map(fresh).collect()
    } else {
        participants.iter().map(fresh).collect()
    };

    let mut calibrated = Vec::with_capacity(participants.len());
    let mut stored = Vec::with_capacity(participants.len());
    let mut online = Vec::new();
    for (&c, (local, values)) in participants.iter().zip(outcomes) {
        let new_delta: Vec<f64> = local
            .weights
            .iter()
            .zip(&state.global_model.weights)
            .map(|(l, g)| l - g)
            .collect();
        let (_, hist) = record.entry(c).expect("participant has a stored delta");
        calibrated.push(calibrate_update(&new_delta, hist));
        stored.push(hist.to_vec());
        online.extend(values);
    }
    let weights = state.participant_weights(&participants);
    let refs: Vec<&[f64]> = calibrated.iter().map(Vec::as_slice).collect();
    Calibrated {
        model: aggregate_deltas(&state.global_model, &refs, &weights),
        participants,
        calibrated,
        stored,
        online: (!online.is_empty()).then(|| online.iter().sum::<f64>() / online.len() as f64),
    }
}

/// Per client-round record of a calibration, for inspection in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub round: usize,
    pub client: usize,
    pub stored_norm: f64,
    pub calibrated_norm: f64,
}

/// Replays the stored rounds from θ_0, replacing every remaining client's
/// stored delta by a calibrated fresh one; then trains normally for the
/// rest of the unlearning rounds.
pub fn unlearn_federaser(
    trigger: &GlobalState,
    history: &UpdateHistory,
    ctx: &UnlearnContext,
) -> Result<UnlearnedTrace> {
    federaser_with_log(trigger, history, ctx).map(|(trace, _)| trace)
}

pub fn federaser_with_log(
    trigger: &GlobalState,
    history: &UpdateHistory,
    ctx: &UnlearnContext,
) -> Result<(UnlearnedTrace, Vec<CalibrationRecord>)> {
    ctx.check_rounds()?;
    let picked = selected_rounds(history, ctx)?;
    let mut state = trigger.detached();
    state.global_model = history.initial.clone();
    state.round = 0;

    let mut rounds = Vec::with_capacity(ctx.unlearn_rounds);
    let mut log = Vec::new();
    for (j, record) in picked.iter().enumerate() {
        let step = calibrated_round(&state, record, ctx, j + 1);
        for ((&client, cal), stored) in step.participants.iter().zip(&step.calibrated).zip(&step.stored) {
            log.push(CalibrationRecord {
                round: j + 1,
                client,
                stored_norm: norm(stored),
                calibrated_norm: norm(cal),
            });
        }
        state.global_model = step.model;
        state.round = j + 1;
        rounds.push(TraceRound {
            model: state.global_model.clone(),
            online_ndcg: step.online,
        });
    }
    let unlearned = state.global_model.clone();
    standard_rounds(
        &mut state,
        ctx,
        Stream::FedEraser,
        ctx.unlearn_rounds - picked.len(),
        &mut rounds,
    );
    Ok((
        UnlearnedTrace {
            name: Strategy::Federaser.as_str(),
            start: trigger.global_model.clone(),
            rounds,
            unlearned,
        },
        log,
    ))
}

/// Server-only replay of the remaining clients' stored deltas with weights
/// renormalized over them; then normal training for the remaining rounds.
pub fn unlearn_fedremove(
    trigger: &GlobalState,
    history: &UpdateHistory,
    ctx: &UnlearnContext,
) -> Result<UnlearnedTrace> {
    ctx.check_rounds()?;
    if trigger.remaining().is_empty() {
        return Err(Error::Strategy("no remaining clients".into()));
    }
    let picked = selected_rounds(history, ctx)?;
    let mut state = trigger.detached();
    let mut model = history.initial.clone();
    let mut rounds = Vec::with_capacity(ctx.unlearn_rounds);
    for record in &picked {
        let mut participants = Vec::new();
        let mut deltas = Vec::new();
        for (i, &c) in record.participants.iter().enumerate() {
            if !trigger.targets.contains(&c) {
                participants.push(c);
                deltas.push(record.deltas[i].as_slice());
            }
        }
        if !participants.is_empty() {
            model = aggregate_deltas(&model, &deltas, &trigger.participant_weights(&participants));
        }
        rounds.push(TraceRound {
            model: model.clone(),
            online_ndcg: None,
        });
    }
    state.global_model = model.clone();
    state.round = picked.len();
    standard_rounds(
        &mut state,
        ctx,
        Stream::FedRemove,
        ctx.unlearn_rounds - picked.len(),
        &mut rounds,
    );
    Ok(UnlearnedTrace {
        name: Strategy::Fedremove.as_str(),
        start: trigger.global_model.clone(),
        rounds,
        unlearned: model,
    })
}

/// Nearest point of the ℓ2 ball around `center`.
pub fn project_l2_ball(point: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    assert_eq!(point.len(), center.len(), "dimension mismatch");
    assert!(radius >= 0.0, "radius must be non-negative");
    let diff: Vec<f64> = point.iter().zip(center).map(|(p, c)| p - c).collect();
    let dist = norm(&diff);
    if dist <= radius {
        return point.to_vec();
    }
    let scale = radius / dist;
    center.iter().zip(&diff).map(|(c, d)| c + d * scale).collect()
}

/// Reference point and default radius for gradient ascent.
pub fn ascent_reference(trigger: &GlobalState) -> (LinearRanker, f64) {
    let remaining = trigger.remaining();
    let dim = trigger.dim();
    let mut center = vec![0.0; dim];
    for &c in &remaining {
        for (s, w) in center.iter_mut().zip(&trigger.clients[c].local_model.weights) {
            *s += w;
        }
    }
    let k = remaining.len() as f64;
    center.iter_mut().for_each(|s| *s /= k);
    let center = LinearRanker::new(center);
    let radius = remaining
        .iter()
        .map(|&c| l2_distance(&trigger.clients[c].local_model, &center))
        .sum::<f64>()
        / k;
    (center, radius)
}

/// `steps` projected ascent iterations of one target client on freshly
/// sampled local queries; returns every iterate.
#[allow(clippy::too_many_arguments)]
pub fn ascent_iterates(
    client: &ClientState,
    start: &LinearRanker,
    center: &LinearRanker,
    radius: f64,
    dataset: &Dataset,
    params: &UnlearnParams,
    serp_len: usize,
    seed: u64,
    access: &AccessLog,
) -> Vec<LinearRanker> {
    let mut rng = stream_rng(seed, Stream::GradientAscent, client.client_id as u64, 0);
    let mut theta = start.clone();
    let mut iterates = Vec::with_capacity(params.ascent_steps);
    for _ in 0..params.ascent_steps {
        let qi = client.partition.queries[rng.random_range(0..client.partition.len())];
        access.record_read(client.client_id);
        let query = &dataset.train.queries[qi];
        let serp = sample_ranking(&theta, query, serp_len, &mut rng);
        let clicks = simulate_session(&client.profile, &serp.relevances(query), &mut rng);
        let grad = pdgd_gradient(&theta, query, &serp, &clicks);
        let moved = theta.stepped(&grad, -params.ascent_lr);
        theta = LinearRanker::new(project_l2_ball(&moved.weights, &center.weights, radius));
        iterates.push(theta.clone());
    }
    iterates
}

/// Each target ascends its own PDGD objective from the trigger-time model
/// inside a ball around the remaining clients' mean model; the results are
/// averaged. Later rounds train normally with the remaining clients.
pub fn unlearn_gradient_ascent(trigger: &GlobalState, ctx: &UnlearnContext) -> Result<UnlearnedTrace> {
    ctx.check_rounds()?;
    let targets = trigger.target_ids();
    if targets.is_empty() {
        return Err(Error::Strategy(
            "gradient ascent needs at least one target client".into(),
        ));
    }
    if ctx.params.ascent_lr <= 0.0 {
        return Err(Error::Strategy("ascent learning rate must be positive".into()));
    }
    let (center, default_radius) = ascent_reference(trigger);
    let radius = ctx.params.ball_radius.unwrap_or(default_radius);
    let finals: Vec<LinearRanker> = targets
        .iter()
        .map(|&t| {
            ascent_iterates(
                &trigger.clients[t],
                &trigger.global_model,
                &center,
                radius,
                ctx.dataset,
                &ctx.params,
                ctx.settings.serp_len,
                ctx.settings.seed,
                &trigger.access,
            )
            .pop()
            .unwrap_or_else(|| trigger.global_model.clone())
        })
        .collect();
    let weights = vec![1.0 / finals.len() as f64; finals.len()];
    let unlearned = crate::federation::aggregate_models(&finals, &weights);

    let mut state = trigger.detached();
    state.global_model = unlearned.clone();
    state.round = 1;
    let mut rounds = vec![TraceRound {
        model: unlearned.clone(),
        online_ndcg: None,
    }];
    standard_rounds(
        &mut state,
        ctx,
        Stream::GradientAscent,
        ctx.unlearn_rounds - 1,
        &mut rounds,
    );
    Ok(UnlearnedTrace {
        name: Strategy::GradientAscent.as_str(),
        start: trigger.global_model.clone(),
        rounds,
        unlearned,
    })
}

/// The comparison baseline: the trigger-time model stays frozen while the
/// remaining clients keep issuing queries to it.
pub fn original_trace(trigger: &GlobalState, ctx: &UnlearnContext) -> Result<UnlearnedTrace> {
    ctx.check_rounds()?;
    let model = &trigger.global_model;
    let remaining = trigger.remaining();
    let serve = |round: usize, c: usize| -> Vec<f64> {
        let client = &trigger.clients[c];
        let mut rng = stream_rng(ctx.settings.seed, Stream::Frozen, c as u64, round as u64);
        (0..ctx.settings.local_updates)
            .map(|_| {
                let qi = client.partition.queries[rng.random_range(0..client.partition.len())];
                let query = &ctx.dataset.train.queries[qi];
                let serp = sample_ranking(model, query, ctx.settings.serp_len, &mut rng);
                ndcg_at_k(&serp.relevances(query), &query.relevances(), serp.len().max(1))
            })
            .collect()
    };
    let rounds = (1..=ctx.unlearn_rounds)
        .map(|j| {
            let values: Vec<f64> = remaining.iter().flat_map(|&c| serve(j, c)).collect();
            TraceRound {
                model: model.clone(),
                online_ndcg: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
            }
        })
        .collect();
    Ok(UnlearnedTrace {
        name: "original",
        start: model.clone(),
        rounds,
        unlearned: model.clone(),
    })
}

pub fn run_strategy(
    strategy: Strategy,
    trigger: &GlobalState,
    history: &UpdateHistory,
    ctx: &UnlearnContext,
) -> Result<UnlearnedTrace> {
    match strategy {
        Strategy::Retrain => unlearn_retrain(trigger, ctx),
        Strategy::Finetune => unlearn_finetune(trigger, ctx),
        Strategy::Federaser => unlearn_federaser(trigger, history, ctx),
        Strategy::Fedremove => unlearn_fedremove(trigger, history, ctx),
        Strategy::GradientAscent => unlearn_gradient_ascent(trigger, ctx),
    }
}
