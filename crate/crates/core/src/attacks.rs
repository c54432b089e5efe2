//! Poisoning attacks carried out by target clients.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::click::{make_profile, ProfileName};
use crate::error::Result;
use crate::federation::{ClientRole, GlobalState};
use crate::ranker::LinearRanker;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    /// Targets click through the poison profile.
    DataPoison,
    /// Targets send a scaled, sign-flipped and shifted model.
    ModelPoison,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::None => "none",
            AttackKind::DataPoison => "data_poison",
            AttackKind::ModelPoison => "model_poison",
        })
    }
}

/// Picks `count` distinct clients, returned in ascending order.
pub fn select_targets(n_clients: usize, count: usize, seed: u64) -> Vec<usize> {
    assert!(count <= n_clients, "more targets than clients");
    let mut ids: Vec<usize> = (0..n_clients).collect();
    ids.shuffle(&mut stream_rng(seed, Stream::Targets, 0, 0));
    let mut picked = ids[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Turns the given clients into attackers. With `AttackKind::None` the
/// targets stay honest; they are still the ones later unlearned.
pub fn apply_attack(
    state: &mut GlobalState,
    kind: AttackKind,
    targets: &[usize],
    gamma_range: (f64, f64),
    relevance_levels: u8,
) -> Result<()> {
    let poison = make_profile(ProfileName::Poison, relevance_levels)?;
    for &t in targets {
        let client = &mut state.clients[t];
        match kind {
            AttackKind::None => {}
            AttackKind::DataPoison => {
                client.role = ClientRole::DataPoisoner;
                client.profile = poison.clone();
            }
            AttackKind::ModelPoison => {
                client.role = ClientRole::ModelPoisoner {
                    gamma_min: gamma_range.0,
                    gamma_max: gamma_range.1,
                };
            }
        }
    }
    Ok(())
}

/// `-γ·θ + μ`.
pub fn poison_with(theta: &LinearRanker, gamma: f64, mu: &[f64]) -> LinearRanker {
    assert_eq!(theta.dim(), mu.len());
    LinearRanker::new(theta.weights.iter().zip(mu).map(|(w, m)| -gamma * w + m).collect())
}

/// Draws `γ ~ U[lo, hi]` and `μ_j ~ N(mean(θ), std(θ))`, then applies
/// [`poison_with`]. The standard deviation is the sample one (0 for a
/// single weight).
pub fn poison_update<R: Rng + ?Sized>(theta: &LinearRanker, gamma_range: (f64, f64), rng: &mut R) -> LinearRanker {
    let (lo, hi) = gamma_range;
    assert!(lo <= hi, "empty gamma range");
    let gamma = rng.random_range(lo..=hi);
    let n = theta.dim() as f64;
    let mean = theta.weights.iter().sum::<f64>() / n;
    let std = if theta.dim() < 2 {
        0.0
    } else {
        (theta.weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let normal = Normal::new(mean, std).expect("finite mean and non-negative std");
    let mu: Vec<f64> = (0..theta.dim()).map(|_| normal.sample(rng)).collect();
    poison_with(theta, gamma, &mu)
}
