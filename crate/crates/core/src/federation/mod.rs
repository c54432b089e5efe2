//! Federated OLTR rounds.
//!
//! Each participating client receives the global model, runs
//! `local_updates` PDGD interactions on queries sampled from its own
//! partition and sends back its local model. The server folds the
//! per-client deltas into the global model with weights proportional to
//! partition size, renormalized over whoever participated, and records the
//! deltas so that history-based unlearning can replay them later.

pub mod history;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::attacks::poison_update;
use crate::click::{simulate_session, ClickProfile};
use crate::data::{ClientPartition, Dataset, QueryGroup};
use crate::error::{Error, Result};
use crate::metrics::ndcg_at_k;
use crate::ranker::{pdgd_update, sample_ranking, LinearRanker};
use crate::rng::{stream_rng, Stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClientRole {
    Honest,
    /// Interacts through the poison click profile.
    DataPoisoner,
    /// Sends `-γ·θ + μ` instead of its local model.
    ModelPoisoner {
        gamma_min: f64,
        gamma_max: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub partition: ClientPartition,
    pub profile: ClickProfile,
    /// Latest honest local model; never the poisoned message.
    pub local_model: LinearRanker,
    pub role: ClientRole,
}

impl ClientState {
    pub fn new(partition: ClientPartition, profile: ClickProfile, dim: usize) -> Self {
        ClientState {
            client_id: partition.client_id,
            partition,
            profile,
            local_model: LinearRanker::zeros(dim),
            role: ClientRole::Honest,
        }
    }
}

/// Counts how many times each client's partition was sampled.
#[derive(Debug, Default)]
pub struct AccessLog {
    reads: Vec<AtomicU64>,
}

impl AccessLog {
    pub fn new(n_clients: usize) -> Self {
        AccessLog {
            reads: (0..n_clients).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub(crate) fn record_read(&self, client: usize) {
        self.reads[client].fetch_add(1, Ordering::Relaxed);
    }

    pub fn reads(&self, client: usize) -> u64 {
        self.reads[client].load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> Vec<u64> {
        self.reads.iter().map(|r| r.load(Ordering::Relaxed)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub weights: Vec<f64>,
    /// `θ_sent - θ_broadcast` per participant, aligned with `participants`.
    pub deltas: Vec<Vec<f64>>,
}

impl RoundRecord {
    pub fn entry(&self, client: usize) -> Option<(f64, &[f64])> {
        self.participants
            .iter()
            .position(|&c| c == client)
            .map(|i| (self.weights[i], self.deltas[i].as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateHistory {
    pub initial: LinearRanker,
    pub rounds: Vec<RoundRecord>,
}

impl UpdateHistory {
    pub fn new(initial: LinearRanker) -> Self {
        UpdateHistory {
            initial,
            rounds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn push(&mut self, record: RoundRecord) {
        assert_eq!(
            record.round,
            self.rounds.len() + 1,
            "round indices must be contiguous from 1"
        );
        self.rounds.push(record);
    }

    /// `θ_0 + Σ_t Σ_i w_i Δ_i`.
    pub fn reconstruct(&self) -> LinearRanker {
        self.rounds.iter().fold(self.initial.clone(), |model, r| {
            let deltas: Vec<&[f64]> = r.deltas.iter().map(Vec::as_slice).collect();
            aggregate_deltas(&model, &deltas, &r.weights)
        })
    }
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub global_model: LinearRanker,
    /// Number of completed rounds.
    pub round: usize,
    pub history: UpdateHistory,
    /// Keep round records in `history`; off for throw-away continuations.
    pub record_history: bool,
    pub clients: Vec<ClientState>,
    pub targets: BTreeSet<usize>,
    pub access: Arc<AccessLog>,
}

impl GlobalState {
    /// Starts from the zero model. Client ids must be `0..clients.len()`.
    pub fn new(clients: Vec<ClientState>, dim: usize) -> Self {
        for (i, c) in clients.iter().enumerate() {
            assert_eq!(c.client_id, i, "client ids must be dense and ordered");
        }
        let initial = LinearRanker::zeros(dim);
        GlobalState {
            global_model: initial.clone(),
            round: 0,
            history: UpdateHistory::new(initial),
            record_history: true,
            access: Arc::new(AccessLog::new(clients.len())),
            clients,
            targets: BTreeSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.global_model.dim()
    }

    pub fn remaining(&self) -> Vec<usize> {
        (0..self.clients.len()).filter(|c| !self.targets.contains(c)).collect()
    }

    pub fn target_ids(&self) -> Vec<usize> {
        self.targets.iter().copied().collect()
    }

    /// `|d_i| / Σ_j |d_j|` over the given clients, in query counts.
    pub fn participant_weights(&self, participants: &[usize]) -> Vec<f64> {
        let sizes: Vec<f64> = participants
            .iter()
            .map(|&c| self.clients[c].partition.len() as f64)
            .collect();
        let total: f64 = sizes.iter().sum();
        sizes.into_iter().map(|s| s / total).collect()
    }

    /// Continuation state for an unlearning strategy: same clients and
    /// access log, no stored history.
    pub fn detached(&self) -> GlobalState {
        GlobalState {
            history: UpdateHistory::new(self.global_model.clone()),
            record_history: false,
            ..self.clone()
        }
    }
}

/// Freezes target clients: they stop participating from the next round on.
pub fn freeze_targets(state: &mut GlobalState, target_ids: &[usize]) -> Result<()> {
    if let Some(&bad) = target_ids.iter().find(|&&c| c >= state.clients.len()) {
        return Err(Error::Config(format!("target client {bad} does not exist")));
    }
    let mut targets = state.targets.clone();
    targets.extend(target_ids.iter().copied());
    if targets.len() == state.clients.len() {
        return Err(Error::Config("cannot freeze every client".into()));
    }
    state.targets = targets;
    Ok(())
}

/// Weighted average of full models.
pub fn aggregate_models(models: &[LinearRanker], weights: &[f64]) -> LinearRanker {
    assert!(!models.is_empty(), "aggregation needs at least one participant");
    assert_eq!(models.len(), weights.len());
    let dim = models[0].dim();
    let mut out = vec![0.0; dim];
    for (m, w) in models.iter().zip(weights) {
        assert_eq!(m.dim(), dim, "models must have equal dimension");
        for (o, x) in out.iter_mut().zip(&m.weights) {
            *o += w * x;
        }
    }
    LinearRanker::new(out)
}

/// `base + Σ_i w_i Δ_i`. With weights summing to one this equals the
/// weighted average of `base + Δ_i`.
pub fn aggregate_deltas(base: &LinearRanker, deltas: &[&[f64]], weights: &[f64]) -> LinearRanker {
    assert!(!deltas.is_empty(), "aggregation needs at least one participant");
    assert_eq!(deltas.len(), weights.len());
    let mut step = vec![0.0; base.dim()];
    for (d, w) in deltas.iter().zip(weights) {
        assert_eq!(d.len(), base.dim(), "delta dimension mismatch");
        for (s, x) in step.iter_mut().zip(d.iter()) {
            *s += w * x;
        }
    }
    LinearRanker::new(base.weights.iter().zip(&step).map(|(b, s)| b + s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSettings {
    pub local_updates: usize,
    pub lr: f64,
    pub serp_len: usize,
    pub seed: u64,
    pub stream: Stream,
    pub parallel: bool,
}

/// One displayed SERP, its clicks and the PDGD step they induce.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub model: LinearRanker,
    pub clicks: Vec<bool>,
    /// nDCG of the displayed ranking against the labels used for clicks,
    /// with the cutoff equal to the SERP length.
    pub online_ndcg: f64,
}

pub fn interact(
    ranker: &LinearRanker,
    query: &QueryGroup,
    labels: &[u8],
    profile: &ClickProfile,
    serp_len: usize,
    lr: f64,
    rng: &mut StreamRng,
) -> Interaction {
    let serp = sample_ranking(ranker, query, serp_len, rng);
    let shown: Vec<u8> = serp.entries.iter().map(|e| labels[e.doc]).collect();
    let clicks = simulate_session(profile, &shown, rng);
    let online_ndcg = ndcg_at_k(&shown, labels, serp.len().max(1));
    let model = pdgd_update(ranker, query, &serp, &clicks, lr);
    Interaction {
        model,
        clicks,
        online_ndcg,
    }
}

/// Result of one client's local work in a round.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub client_id: usize,
    pub local_model: LinearRanker,
    /// What the server receives.
    pub sent: LinearRanker,
    pub online: Vec<f64>,
}

/// Runs `updates` PDGD interactions on queries drawn uniformly with
/// replacement from the client's partition.
pub fn local_training(
    client: &ClientState,
    start: &LinearRanker,
    dataset: &Dataset,
    updates: usize,
    settings: &RoundSettings,
    access: &AccessLog,
    rng: &mut StreamRng,
) -> (LinearRanker, Vec<f64>) {
    let mut model = start.clone();
    let mut online = Vec::with_capacity(updates);
    for _ in 0..updates {
        let qi = client.partition.queries[rng.random_range(0..client.partition.len())];
        access.record_read(client.client_id);
        let query = &dataset.train.queries[qi];
        let step = interact(
            &model,
            query,
            &query.relevances(),
            &client.profile,
            settings.serp_len,
            settings.lr,
            rng,
        );
        model = step.model;
        online.push(step.online_ndcg);
    }
    (model, online)
}

fn client_round(
    client: &ClientState,
    broadcast: &LinearRanker,
    dataset: &Dataset,
    settings: &RoundSettings,
    round: usize,
    access: &AccessLog,
) -> LocalOutcome {
    let mut rng = stream_rng(settings.seed, settings.stream, client.client_id as u64, round as u64);
    let (local_model, online) = local_training(
        client,
        broadcast,
        dataset,
        settings.local_updates,
        settings,
        access,
        &mut rng,
    );
    let sent = match client.role {
        ClientRole::ModelPoisoner { gamma_min, gamma_max } => {
            poison_update(&local_model, (gamma_min, gamma_max), &mut rng)
        }
        _ => local_model.clone(),
    };
    LocalOutcome {
        client_id: client.client_id,
        local_model,
        sent,
        online,
    }
}

/// Local work of every non-frozen client for the next round.
pub fn local_outcomes(state: &GlobalState, dataset: &Dataset, settings: &RoundSettings) -> Vec<LocalOutcome> {
    let round = state.round + 1;
    let participants = state.remaining();
    let work = |&c: &usize| {
        client_round(
            &state.clients[c],
            &state.global_model,
            dataset,
            settings,
            round,
            &state.access,
        )
    };
    if settings.parallel {
        participants.par_iter().map(work).collect()
    } else {
        participants.iter().map(work).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RoundSummary {
    pub record: RoundRecord,
    /// Mean nDCG of every SERP displayed in the round, if any.
    pub online_ndcg: Option<f64>,
}

/// Server side of a round: aggregate the outcomes into the global model and
/// advance the round counter.
pub fn commit_round(state: &mut GlobalState, outcomes: Vec<LocalOutcome>) -> RoundSummary {
    assert!(!outcomes.is_empty(), "round without participants");
    let participants: Vec<usize> = outcomes.iter().map(|o| o.client_id).collect();
    let weights = state.participant_weights(&participants);
    let deltas: Vec<Vec<f64>> = outcomes
        .iter()
        .map(|o| {
            o.sent
                .weights
                .iter()
                .zip(&state.global_model.weights)
                .map(|(s, g)| s - g)
                .collect()
        })
        .collect();
    let delta_refs: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
    state.global_model = aggregate_deltas(&state.global_model, &delta_refs, &weights);

    let mut online_total = 0.0;
    let mut online_count = 0usize;
    for o in outcomes {
        online_total += o.online.iter().sum::<f64>();
        online_count += o.online.len();
        state.clients[o.client_id].local_model = o.local_model;
    }
    state.round += 1;
    let record = RoundRecord {
        round: state.round,
        participants,
        weights,
        deltas,
    };
    if state.record_history {
        state.history.push(record.clone());
    }
    RoundSummary {
        record,
        online_ndcg: (online_count > 0).then(|| online_total / online_count as f64),
    }
}

pub fn run_round(state: &mut GlobalState, dataset: &Dataset, settings: &RoundSettings) -> RoundSummary {
    let outcomes = local_outcomes(state, dataset, settings);
    commit_round(state, outcomes)
}
