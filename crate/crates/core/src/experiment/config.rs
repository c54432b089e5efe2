//! Experiment configuration (TOML).
//!
//! Every key is optional; missing keys take the defaults below and unknown
//! keys are rejected. A preset can serve as the base that a file overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackKind;
use crate::click::ProfileName;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::unlearning::{Strategy, UnlearnParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    Letor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Root directory of a LETOR dataset; folds are subdirectories.
    pub path: Option<PathBuf>,
    /// Fold subdirectories. Empty means `path` itself is the only fold.
    pub folds: Vec<String>,
    pub train_file: String,
    pub test_file: String,
    /// Grades of a LETOR dataset (3 or 5); the synthetic spec has its own.
    pub relevance_levels: u8,
    pub normalize: bool,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            path: None,
            folds: Vec::new(),
            train_file: "train.txt".into(),
            test_file: "test.txt".into(),
            relevance_levels: 5,
            normalize: true,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DatasetConfig {
    /// Fold labels in run order.
    pub fn fold_names(&self) -> Vec<String> {
        match self.source {
            DatasetSource::Synthetic => vec!["synthetic".into()],
            DatasetSource::Letor if self.folds.is_empty() => vec![self
                .path
                .as_deref()
                .and_then(Path::file_name)
                .map_or_else(|| "data".to_string(), |n| n.to_string_lossy().into_owned())],
            DatasetSource::Letor => self.folds.clone(),
        }
    }

    pub fn relevance_levels(&self) -> u8 {
        match self.source {
            DatasetSource::Synthetic => self.synthetic.relevance_levels,
            DatasetSource::Letor => self.relevance_levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Fraction of clients that are targets (and attackers unless `kind`
    /// is `none`).
    pub poisoning_rate: f64,
    pub gamma_range: [f64; 2],
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            poisoning_rate: 0.3,
            gamma_range: [1.0, 2.0],
        }
    }
}

/// Relevancy-reset probe run by the targets in the last training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelrConfig {
    pub enabled: bool,
    pub top_k_percent: f64,
    /// PDGD updates on the relabeled queries before uploading.
    pub finetune_updates: usize,
}

impl Default for RelrConfig {
    fn default() -> Self {
        RelrConfig {
            enabled: true,
            top_k_percent: 20.0,
            finetune_updates: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub local_updates: usize,
    pub train_rounds: usize,
    pub unlearn_rounds: usize,
    pub lr: f64,
    pub serp_len: usize,
    pub click_profile: ProfileName,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Offline evaluation cadence in rounds; the last round of each phase
    /// is always evaluated.
    pub eval_every: usize,
    pub online_gamma: f64,
    pub parallel: bool,
    /// Schedule a retraining run and report distances to it.
    pub dist_diff: bool,
    pub dataset: DatasetConfig,
    pub attack: AttackConfig,
    pub unlearning: UnlearnParams,
    pub relr: RelrConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_clients: 10,
            local_updates: 5,
            train_rounds: 1000,
            unlearn_rounds: 1000,
            lr: 0.1,
            serp_len: 10,
            click_profile: ProfileName::Perfect,
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            eval_every: 10,
            online_gamma: 0.9995,
            parallel: true,
            dist_diff: true,
            dataset: DatasetConfig::default(),
            attack: AttackConfig::default(),
            unlearning: UnlearnParams::default(),
            relr: RelrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl ExperimentConfig {
    /// Small synthetic data-poisoning scenario that runs in seconds.
    pub fn desk() -> Self {
        ExperimentConfig {
            // with perfect users the honest clicks drown out poisoned ones
            click_profile: ProfileName::Navigational,
            train_rounds: 200,
            unlearn_rounds: 200,
            output_dir: PathBuf::from("runs/desk"),
            attack: AttackConfig {
                kind: AttackKind::DataPoison,
                ..AttackConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => ExperimentConfig::desk(),
        }
    }

    pub fn n_targets(&self) -> usize {
        (self.attack.poisoning_rate * self.n_clients as f64).round() as usize
    }

    /// Strategies to run, in canonical order, with retraining added when
    /// distances to it are requested.
    pub fn scheduled_strategies(&self) -> Vec<Strategy> {
        Strategy::ALL
            .into_iter()
            .filter(|s| self.strategies.contains(s) || (self.dist_diff && *s == Strategy::Retrain))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::validation(key, msg));
        for (key, v) in [
            ("n_clients", self.n_clients),
            ("local_updates", self.local_updates),
            ("train_rounds", self.train_rounds),
            ("unlearn_rounds", self.unlearn_rounds),
            ("serp_len", self.serp_len),
            ("eval_every", self.eval_every),
            (
                "unlearning.calibration_local_updates",
                self.unlearning.calibration_local_updates,
            ),
            ("unlearning.history_interval", self.unlearning.history_interval),
            ("relr.finetune_updates", self.relr.finetune_updates),
        ] {
            if v == 0 {
                return fail(key, "must be at least 1".into());
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.online_gamma > 0.0 && self.online_gamma <= 1.0) {
            return fail("online_gamma", format!("must lie in (0, 1], got {}", self.online_gamma));
        }
        if self.click_profile == ProfileName::Poison {
            return fail("click_profile", "the poison profile is reserved for attackers".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds", "at least one seed is required".into());
        }

        let rate = self.attack.poisoning_rate;
        if !(0.0..=1.0).contains(&rate) {
            return fail("attack.poisoning_rate", format!("must lie in [0, 1], got {rate}"));
        }
        let count = rate * self.n_clients as f64;
        if (count - count.round()).abs() > 1e-9 {
            return fail(
                "attack.poisoning_rate",
                format!("{rate} of {} clients is not a whole number of targets", self.n_clients),
            );
        }
        if self.n_targets() >= self.n_clients {
            return fail("attack.poisoning_rate", "at least one client must remain".into());
        }
        let [lo, hi] = self.attack.gamma_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail("attack.gamma_range", format!("[{lo}, {hi}] is not an interval"));
        }

        let u = &self.unlearning;
        if !(u.ascent_lr.is_finite() && u.ascent_lr > 0.0) {
            return fail("unlearning.ascent_lr", format!("must be positive, got {}", u.ascent_lr));
        }
        if let Some(r) = u.ball_radius {
            if !(r.is_finite() && r > 0.0) {
                return fail("unlearning.ball_radius", format!("must be positive, got {r}"));
            }
        }
        let strategies = self.scheduled_strategies();
        if strategies.contains(&Strategy::GradientAscent) && self.n_targets() == 0 {
            return fail("strategies", "gradient_ascent needs at least one target client".into());
        }
        let replay = self.train_rounds.div_ceil(u.history_interval);
        let uses_history = strategies.contains(&Strategy::Federaser) || strategies.contains(&Strategy::Fedremove);
        if uses_history && replay > self.unlearn_rounds {
            return fail(
                "unlearning.history_interval",
                format!(
                    "replaying {replay} stored rounds does not fit into {} unlearning rounds",
                    self.unlearn_rounds
                ),
            );
        }
        if !(self.relr.top_k_percent > 0.0 && self.relr.top_k_percent <= 100.0) {
            return fail(
                "relr.top_k_percent",
                format!("must lie in (0, 100], got {}", self.relr.top_k_percent),
            );
        }

        let d = &self.dataset;
        match d.source {
            DatasetSource::Letor => {
                if d.path.is_none() {
                    return fail("dataset.path", "required for LETOR datasets".into());
                }
                if d.relevance_levels != 3 && d.relevance_levels != 5 {
                    return fail(
                        "dataset.relevance_levels",
                        format!("must be 3 or 5, got {}", d.relevance_levels),
                    );
                }
            }
            DatasetSource::Synthetic => {
                let levels = d.synthetic.relevance_levels;
                if levels != 3 && levels != 5 {
                    return fail(
                        "dataset.synthetic.relevance_levels",
                        format!("must be 3 or 5, got {levels}"),
                    );
                }
                if d.synthetic.train_queries < self.n_clients {
                    return fail(
                        "dataset.synthetic.train_queries",
                        "fewer training queries than clients".into(),
                    );
                }
                if d.synthetic.test_queries == 0 {
                    return fail("dataset.synthetic.test_queries", "must be at least 1".into());
                }
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses TOML text on top of `base`: keys present in the text win.
pub fn parse_config_over(text: &str, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let over: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut merged = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut merged, toml::Value::Table(over));
    let cfg: ExperimentConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_over(text, &ExperimentConfig::default())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn load_config_over(path: &Path, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    parse_config_over(&fs::read_to_string(path)?, base)
}

/// SHA-256 of the JSON form, truncated to 16 hex digits. The output
/// directory and the parallelism switch do not change results and are
/// left out.
pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let mut canonical = cfg.clone();
    canonical.output_dir = PathBuf::new();
    canonical.parallel = true;
    let json = serde_json::to_string(&canonical).expect("config serializes");
    let hash = Sha256::digest(json.as_bytes());
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}
