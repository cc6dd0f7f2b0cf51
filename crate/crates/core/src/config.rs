//! Run configuration: one TOML file with a table per stage.
//!
//! Every key is optional; missing keys take their defaults and unknown keys
//! are rejected with the dotted path of the offending entry. Keys can be
//! written as tables (`[critic]` / `beta = 0.1`) or flat (`critic.beta = 0.1`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actor::{ActorTrainConfig, MtdpoConfig, RftConfig, ValueConfig};
use crate::critic::{CriticTrainConfig, HiddenInfoMode};
use crate::env::EnvConfig;
use crate::features::FeatureConfig;
use crate::policy::ModelMode;
use crate::theory::TheoryConfig;
use crate::trajectory::PairingConfig;
use crate::warmstart::WarmstartConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub id: String,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            id: "default".into(),
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs"),
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TabularExact,
    LinearHashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hash_seed: u64,
    pub features: FeatureConfig,
    /// Token cap per sampled action; 0 means the environment's longest action.
    pub max_action_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::LinearHashed,
            hash_seed: 17,
            features: FeatureConfig::default(),
            max_action_len: 0,
        }
    }
}

impl ModelSection {
    pub fn mode(&self) -> ModelMode {
        match self.kind {
            ModelKind::TabularExact => ModelMode::TabularExact,
            ModelKind::LinearHashed => ModelMode::LinearHashed(self.features),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub offline_trajectories: usize,
    /// Offline rollouts per training task.
    pub rollouts_per_task: usize,
    pub eval_tasks: usize,
    /// Evaluation task seeds start here so they never overlap training tasks.
    pub eval_task_offset: u64,
    pub pair_min_gap: f64,
    /// Cap on preference pairs per task; 0 means no cap.
    pub max_pairs_per_task: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            offline_trajectories: 2000,
            rollouts_per_task: 4,
            eval_tasks: 500,
            eval_task_offset: 1_000_000,
            pair_min_gap: 0.0,
            max_pairs_per_task: 8,
        }
    }
}

impl DataSection {
    pub fn train_tasks(&self) -> usize {
        self.offline_trajectories.div_ceil(self.rollouts_per_task.max(1))
    }

    pub fn pairing(&self) -> PairingConfig {
        PairingConfig {
            min_gap: self.pair_min_gap,
            max_pairs_per_task: (self.max_pairs_per_task > 0).then_some(self.max_pairs_per_task),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSection {
    pub beta: f64,
    pub normalize_by_length: bool,
    pub hidden_info: HiddenInfoMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_nll: f64,
}

impl Default for CriticSection {
    fn default() -> Self {
        let t = CriticTrainConfig::default();
        Self {
            beta: 0.1,
            normalize_by_length: true,
            hidden_info: HiddenInfoMode::Full,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda_nll: t.lambda_nll,
        }
    }
}

impl CriticSection {
    pub fn train(&self) -> CriticTrainConfig {
        CriticTrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda_nll: self.lambda_nll,
        }
    }
}

/// Everything the pipeline can train and evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ZeroShot,
    Rft,
    Mtdpo,
    Sweet,
    /// Critic advantages summed over tokens instead of averaged.
    SweetUnnormalized,
    /// Critic trained and queried with a blank instead of the hidden info.
    SweetNoHiddenInfo,
    SweetValueHead,
    /// Control: candidates ranked at random.
    SweetRandom,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::ZeroShot,
        Algorithm::Rft,
        Algorithm::Mtdpo,
        Algorithm::Sweet,
        Algorithm::SweetUnnormalized,
        Algorithm::SweetNoHiddenInfo,
        Algorithm::SweetValueHead,
        Algorithm::SweetRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ZeroShot => "zero_shot",
            Algorithm::Rft => "rft",
            Algorithm::Mtdpo => "mtdpo",
            Algorithm::Sweet => "sweet",
            Algorithm::SweetUnnormalized => "sweet_unnormalized",
            Algorithm::SweetNoHiddenInfo => "sweet_no_hidden_info",
            Algorithm::SweetValueHead => "sweet_value_head",
            Algorithm::SweetRandom => "sweet_random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub algorithms: Vec<Algorithm>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 1000,
            algorithms: vec![Algorithm::ZeroShot, Algorithm::Rft, Algorithm::Mtdpo, Algorithm::Sweet],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    CriticAdvantage,
    CriticNoHiddenInfo,
    ValueHead,
    Random,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::CriticAdvantage => "critic_advantage",
            ScorerKind::CriticNoHiddenInfo => "critic_no_hidden_info",
            ScorerKind::ValueHead => "value_head",
            ScorerKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BestOfNSection {
    pub enabled: bool,
    pub n_values: Vec<usize>,
    pub scorers: Vec<ScorerKind>,
    pub episodes: usize,
}

impl Default for BestOfNSection {
    fn default() -> Self {
        Self {
            enabled: true,
            n_values: vec![1, 2, 4, 8, 16],
            scorers: vec![
                ScorerKind::CriticAdvantage,
                ScorerKind::CriticNoHiddenInfo,
                ScorerKind::ValueHead,
                ScorerKind::Random,
            ],
            episodes: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub model: ModelSection,
    pub data: DataSection,
    pub warmstart: WarmstartConfig,
    pub critic: CriticSection,
    pub actor: ActorTrainConfig,
    pub rft: RftConfig,
    pub mtdpo: MtdpoConfig,
    pub value: ValueConfig,
    pub eval: EvalSection,
    pub best_of_n: BestOfNSection,
    pub theory: TheoryConfig,
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.to_owned()))
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_owned();
            if path.is_empty() || path == "." {
                Error::Config(msg)
            } else {
                Error::Config(format!("{path}: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn max_action_len(&self) -> usize {
        if self.model.max_action_len == 0 {
            self.env.max_action_len()
        } else {
            self.model.max_action_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        check(!self.run.id.is_empty(), "run.id must be nonempty")?;
        check(
            self.run.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
            "run.id may only contain letters, digits, `-`, `_` and `.`",
        )?;
        check(!self.run.seeds.is_empty(), "run.seeds must be nonempty")?;
        check(self.model.features.width > 0, "model.features.width must be >= 1")?;
        check(self.data.offline_trajectories > 0, "data.offline_trajectories must be >= 1")?;
        check(self.data.rollouts_per_task > 0, "data.rollouts_per_task must be >= 1")?;
        check(self.data.eval_tasks > 0, "data.eval_tasks must be >= 1")?;
        check(self.data.pair_min_gap >= 0.0, "data.pair_min_gap must be >= 0")?;
        check(positive(self.warmstart.lr), "warmstart.lr must be > 0")?;
        check(positive(self.critic.beta), "critic.beta must be > 0")?;
        check(positive(self.critic.lr), "critic.lr must be > 0")?;
        check(self.critic.lambda_nll >= 0.0, "critic.lambda_nll must be >= 0")?;
        check(positive(self.actor.lr), "actor.lr must be > 0")?;
        check(positive(self.actor.beta), "actor.beta must be > 0")?;
        check(self.actor.lambda_nll >= 0.0, "actor.lambda_nll must be >= 0")?;
        check(self.actor.candidates >= 2, "actor.candidates must be >= 2")?;
        check(positive(self.rft.lr), "rft.lr must be > 0")?;
        check(positive(self.mtdpo.lr), "mtdpo.lr must be > 0")?;
        check(positive(self.mtdpo.beta), "mtdpo.beta must be > 0")?;
        check(positive(self.value.lr), "value.lr must be > 0")?;
        check(self.eval.episodes > 0, "eval.episodes must be >= 1")?;
        check(!self.best_of_n.n_values.is_empty(), "best_of_n.n_values must be nonempty")?;
        check(
            self.best_of_n.n_values.iter().all(|&n| n >= 1),
            "best_of_n.n_values entries must be >= 1",
        )?;
        check(self.best_of_n.episodes > 0, "best_of_n.episodes must be >= 1")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.critic.beta, 0.1);
        assert_eq!(c.actor.beta, 0.1);
        assert_eq!(c.actor.lambda_nll, 0.01);
        assert_eq!(c.critic.lambda_nll, 0.01);
        assert_eq!(c.actor.candidates, 16);
        assert_eq!(c.actor.epochs, 1);
        assert_eq!(c.actor.batch_size, 8);
        assert_eq!(c.critic.batch_size, 8);
        assert_eq!(c.critic.epochs, 16);
        assert_eq!(c.rft.batch_size, 32);
        assert_eq!(c.data.offline_trajectories, 2000);
        assert_eq!(c.data.train_tasks(), 500);
    }

    #[test]
    fn shipped_templates_parse() {
        let full = RunConfig::from_toml_str(include_str!("../../../configs/default.toml")).unwrap();
        let mut expected = RunConfig::default();
        expected.eval.algorithms = Algorithm::ALL.to_vec();
        assert_eq!(full, expected);
        let smoke = RunConfig::from_toml_str(include_str!("../../../configs/smoke.toml")).unwrap();
        smoke.validate().unwrap();
    }

    #[test]
    fn flat_and_table_keys_agree() {
        let a = RunConfig::from_toml_str("critic.beta = 0.2\nenv.horizon = 5\n").unwrap();
        let b = RunConfig::from_toml_str("[critic]\nbeta = 0.2\n[env]\nhorizon = 5\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.critic.beta, 0.2);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_toml_str("[critic]\nbetta = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("critic"), "{err}");
        assert!(err.contains("betta"), "{err}");
    }

    #[test]
    fn bad_type_names_its_path() {
        let err = RunConfig::from_toml_str("env.horizon = \"six\"\n").unwrap_err().to_string();
        assert!(err.contains("env.horizon"), "{err}");
    }

    #[test]
    fn negative_horizon_is_rejected() {
        assert!(RunConfig::from_toml_str("env.horizon = -1\n").is_err());
        assert!(RunConfig::from_toml_str("env.horizon = 0\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "critic.beta = 0.0",
            "actor.candidates = 1",
            "run.seeds = []",
            "best_of_n.n_values = [0]",
            "run.id = \"a/b\"",
        ] {
            assert!(RunConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.eval.algorithms.push(Algorithm::SweetUnnormalized);
        c.model.kind = ModelKind::TabularExact;
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn algorithm_names_parse() {
        for a in Algorithm::ALL {
            assert_eq!(Algorithm::parse(a.name()).unwrap(), a);
        }
        assert!(Algorithm::parse("ppo").is_err());
    }
}
