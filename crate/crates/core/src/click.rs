//! Cascade click model user simulation.
//!
//! The user scans the SERP top to bottom, clicks a document with a
//! relevance-dependent probability and, only after a click, abandons the
//! session with a relevance-dependent stop probability.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Perfect,
    Navigational,
    Informational,
    /// Clicks irrelevant documents; realizes the data-poisoning attack.
    Poison,
}

impl ProfileName {
    pub const ALL: [ProfileName; 4] = [
        ProfileName::Perfect,
        ProfileName::Navigational,
        ProfileName::Informational,
        ProfileName::Poison,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::Perfect => "perfect",
            ProfileName::Navigational => "navigational",
            ProfileName::Informational => "informational",
            ProfileName::Poison => "poison",
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProfileName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown click profile `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickProfile {
    pub name: ProfileName,
    /// `P(click = 1 | rel)` indexed by relevance grade.
    pub click_prob: Vec<f64>,
    /// `P(stop = 1 | click = 1, rel)` indexed by relevance grade.
    pub stop_prob: Vec<f64>,
    pub relevance_levels: u8,
}

// (click, stop) rows for 5-level and 3-level relevance schemes.
const FIVE_LEVEL: [(ProfileName, [f64; 5], [f64; 5]); 4] = [
    (
        ProfileName::Perfect,
        [0.0, 0.2, 0.4, 0.8, 1.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ),
    (
        ProfileName::Navigational,
        [0.05, 0.3, 0.5, 0.7, 0.95],
        [0.2, 0.3, 0.5, 0.7, 0.9],
    ),
    (
        ProfileName::Informational,
        [0.4, 0.6, 0.7, 0.8, 0.9],
        [0.1, 0.2, 0.3, 0.4, 0.5],
    ),
    (
        ProfileName::Poison,
        [1.0, 0.8, 0.6, 0.2, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ),
];

const THREE_LEVEL: [(ProfileName, [f64; 3], [f64; 3]); 4] = [
    (ProfileName::Perfect, [0.0, 0.5, 1.0], [0.0, 0.0, 0.0]),
    (ProfileName::Navigational, [0.05, 0.5, 0.95], [0.2, 0.5, 0.9]),
    (ProfileName::Informational, [0.4, 0.7, 0.9], [0.1, 0.3, 0.5]),
    (ProfileName::Poison, [1.0, 0.5, 0.0], [0.0, 0.0, 0.0]),
];

pub fn make_profile(name: ProfileName, relevance_levels: u8) -> Result<ClickProfile> {
    let (click_prob, stop_prob) = match relevance_levels {
        5 => FIVE_LEVEL
            .iter()
            .find(|row| row.0 == name)
            .map(|row| (row.1.to_vec(), row.2.to_vec())),
        3 => THREE_LEVEL
            .iter()
            .find(|row| row.0 == name)
            .map(|row| (row.1.to_vec(), row.2.to_vec())),
        _ => {
            return Err(Error::Config(format!(
                "click profiles exist for 3 or 5 relevance levels, not {relevance_levels}"
            )))
        }
    }
    .expect("every profile has a row");
    Ok(ClickProfile {
        name,
        click_prob,
        stop_prob,
        relevance_levels,
    })
}

/// Looks a profile up by its configuration name.
pub fn make_profile_named(name: &str, relevance_levels: u8) -> Result<ClickProfile> {
    make_profile(name.parse()?, relevance_levels)
}

/// Simulates one cascade session over the SERP's relevance labels.
///
/// Random draws happen in scan order: one uniform per examined position
/// for the click, followed by one for the stop decision when clicked.
pub fn simulate_session<R: Rng + ?Sized>(profile: &ClickProfile, relevances: &[u8], rng: &mut R) -> Vec<bool> {
    let mut clicks = vec![false; relevances.len()];
    for (pos, &rel) in relevances.iter().enumerate() {
        let rel = rel as usize;
        if rng.random::<f64>() < profile.click_prob[rel] {
            clicks[pos] = true;
            if rng.random::<f64>() < profile.stop_prob[rel] {
                break;
            }
        }
    }
    clicks
}
