//! Collaborative environments.
//!
//! The hidden-slot query game: a task hides an assignment of values to a few
//! attributes. Each turn the agent may query one attribute, which the
//! scripted collaborator answers truthfully, or submit an answer, which is
//! scored by a battery of per-attribute tests. The hidden assignment is the
//! training-time information `c`.
//!
//! [`tiny`] holds small explicit POMDPs that can be enumerated exactly.

pub mod scripted;
pub mod tiny;

use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{Context, PolicyModel};
use crate::trajectory::{Task, Termination};
use crate::{Error, Result, Token};

pub const ASK_PREFIX: &str = "ASK_";
pub const ANSWER: &str = "ANSWER";
pub const END: &str = "END";
pub const UNPARSEABLE: &str = "UNPARSEABLE";
pub const TASK: &str = "TASK";
pub const EQUALS: &str = "=";

const ATTRIBUTES: [&str; 4] = ["color", "size", "shape", "material"];
const VALUES: [[&str; 4]; 4] = [
    ["red", "green", "blue", "yellow"],
    ["small", "medium", "large", "huge"],
    ["circle", "square", "triangle", "star"],
    ["wood", "metal", "glass", "stone"],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    BinaryAllTests,
    FractionPassed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub n_attributes: usize,
    pub n_values: usize,
    pub horizon: usize,
    pub n_tests: usize,
    pub reward_mode: RewardMode,
    /// Probability that the collaborator misreports a queried value.
    pub responder_noise: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_attributes: 4,
            n_values: 4,
            horizon: 6,
            n_tests: 4,
            reward_mode: RewardMode::BinaryAllTests,
            responder_noise: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.n_attributes == 0 {
            return bad("env.n_attributes must be >= 1");
        }
        if self.n_values == 0 {
            return bad("env.n_values must be >= 1");
        }
        if self.horizon == 0 {
            return bad("env.horizon must be >= 1");
        }
        if self.n_tests == 0 {
            return bad("env.n_tests must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.responder_noise) {
            return bad("env.responder_noise must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn attribute(&self, i: usize) -> Token {
        ATTRIBUTES
            .get(i)
            .map_or_else(|| format!("attr{i}"), |s| s.to_string())
    }

    pub fn attributes(&self) -> Vec<Token> {
        (0..self.n_attributes).map(|i| self.attribute(i)).collect()
    }

    pub fn value(&self, attr: usize, j: usize) -> Token {
        match VALUES.get(attr).and_then(|row| row.get(j)) {
            Some(v) => v.to_string(),
            None => format!("{}_{j}", self.attribute(attr)),
        }
    }

    pub fn values(&self, attr: usize) -> Vec<Token> {
        (0..self.n_values).map(|j| self.value(attr, j)).collect()
    }

    pub fn ask_token(&self, attr: usize) -> Token {
        format!("{ASK_PREFIX}{}", self.attribute(attr))
    }

    /// Query tokens, the answer marker, every value token, then the end token.
    pub fn vocab(&self) -> Vec<Token> {
        let mut v: Vec<Token> = (0..self.n_attributes).map(|i| self.ask_token(i)).collect();
        v.push(ANSWER.into());
        for a in 0..self.n_attributes {
            v.extend(self.values(a));
        }
        v.push(END.into());
        v
    }

    /// Longest well-formed action: the answer marker, one value per attribute, end.
    pub fn max_action_len(&self) -> usize {
        self.n_attributes + 2
    }

    fn evaluator_id(&self) -> String {
        let mode = match self.reward_mode {
            RewardMode::BinaryAllTests => "binary",
            RewardMode::FractionPassed => "fraction",
        };
        format!("slot-tests/{mode}/{}", self.n_tests)
    }
}

/// The hidden assignment and the tests derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenSpec {
    pub slots: IndexMap<Token, Token>,
    /// `(attribute index, expected value)`; test `j` checks attribute `j mod n`.
    pub test_battery: Vec<(usize, Token)>,
}

impl HiddenSpec {
    pub fn new(slots: IndexMap<Token, Token>, n_tests: usize) -> Self {
        let values: Vec<Token> = slots.values().cloned().collect();
        let test_battery = (0..n_tests)
            .map(|j| {
                let a = j % values.len().max(1);
                (a, values.get(a).cloned().unwrap_or_default())
            })
            .collect();
        Self {
            slots,
            test_battery,
        }
    }

    pub fn to_hidden_info(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(3 * self.slots.len());
        for (a, v) in &self.slots {
            out.push(a.clone());
            out.push(EQUALS.into());
            out.push(v.clone());
        }
        out
    }

    pub fn from_hidden_info(tokens: &[Token], n_tests: usize) -> Result<Self> {
        if tokens.len() % 3 != 0 {
            return Err(Error::Invalid("hidden info is not a list of `attr = value`".into()));
        }
        let mut slots = IndexMap::new();
        for chunk in tokens.chunks(3) {
            if chunk[1] != EQUALS {
                return Err(Error::Invalid(format!("malformed slot `{}`", chunk.join(" "))));
            }
            slots.insert(chunk[0].clone(), chunk[2].clone());
        }
        Ok(Self::new(slots, n_tests))
    }

    pub fn value_of(&self, attr: &str) -> Option<&Token> {
        self.slots.get(attr)
    }
}

pub fn sample_spec(config: &EnvConfig, seed: u64) -> HiddenSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = (0..config.n_attributes)
        .map(|a| {
            let j = rng.gen_range(0..config.n_values);
            (config.attribute(a), config.value(a, j))
        })
        .collect();
    HiddenSpec::new(slots, config.n_tests)
}

/// Deterministic in `(config, seed)`. The initial observation names the
/// attributes but not their values.
pub fn sample_task(config: &EnvConfig, seed: u64) -> Task {
    let spec = sample_spec(config, seed);
    let mut obs = vec![TASK.to_owned()];
    obs.extend(config.attributes());
    Task::new(
        format!("slot-{seed}"),
        obs,
        spec.to_hidden_info(),
        config.horizon,
        config.evaluator_id(),
    )
    .expect("validated horizon")
}

/// Scores the value tokens of an answer (without the answer marker or end token).
/// Answers of the wrong arity score 0.
pub fn evaluate_answer(answer: &[Token], spec: &HiddenSpec, mode: RewardMode) -> f64 {
    if answer.len() != spec.slots.len() || spec.test_battery.is_empty() {
        return 0.0;
    }
    let passed = spec
        .test_battery
        .iter()
        .filter(|(a, expected)| &answer[*a] == expected)
        .count();
    match mode {
        RewardMode::BinaryAllTests => {
            if passed == spec.test_battery.len() {
                1.0
            } else {
                0.0
            }
        }
        RewardMode::FractionPassed => passed as f64 / spec.test_battery.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAction {
    Query(usize),
    Answer(Vec<Token>),
    Malformed,
}

pub fn parse_action(config: &EnvConfig, action: &[Token]) -> ParsedAction {
    let body = match action.split_last() {
        Some((last, rest)) if last == END => rest,
        _ => action,
    };
    match body {
        [] => ParsedAction::Malformed,
        [first, values @ ..] if first == ANSWER => ParsedAction::Answer(values.to_vec()),
        [single] => single
            .strip_prefix(ASK_PREFIX)
            .and_then(|name| (0..config.n_attributes).find(|&a| config.attribute(a) == name))
            .map_or(ParsedAction::Malformed, ParsedAction::Query),
        _ => ParsedAction::Malformed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub response: Vec<Token>,
    pub reward: f64,
    pub done: bool,
    pub terminated_by: Option<Termination>,
}

/// A running episode. The observation is the full interaction history.
pub trait Episode {
    fn task(&self) -> &Task;
    fn observation(&self) -> &[Token];
    fn turns_taken(&self) -> usize;
    fn is_done(&self) -> bool;
    fn step(&mut self, action: &[Token]) -> Result<StepOutcome>;
}

/// Anything that maps an interaction history to an action.
pub trait Agent: Sync {
    fn act(&self, observation: &[Token], rng: &mut dyn RngCore) -> Vec<Token>;
}

/// Samples from a policy that sees only the history.
#[derive(Debug, Clone, Copy)]
pub struct PolicyAgent<'a> {
    pub model: &'a PolicyModel,
    pub max_len: usize,
}

impl Agent for PolicyAgent<'_> {
    fn act(&self, observation: &[Token], rng: &mut dyn RngCore) -> Vec<Token> {
        self.model
            .sample_action(&Context::actor(observation), rng, self.max_len)
    }
}

#[derive(Debug, Clone)]
pub struct SlotEpisode {
    config: EnvConfig,
    task: Task,
    spec: HiddenSpec,
    history: Vec<Token>,
    turns: usize,
    done: bool,
}

impl SlotEpisode {
    pub fn new(config: EnvConfig, task: Task) -> Result<Self> {
        let spec = HiddenSpec::from_hidden_info(task.simulator_hidden_info(), config.n_tests)?;
        let history = task.initial_observation.clone();
        Ok(Self {
            config,
            task,
            spec,
            history,
            turns: 0,
            done: false,
        })
    }

    pub fn spec(&self) -> &HiddenSpec {
        &self.spec
    }

    fn reveal(&self, attr: usize, action: &[Token]) -> Token {
        let name = self.config.attribute(attr);
        let truth = self.spec.value_of(&name).cloned().unwrap_or_default();
        if self.config.responder_noise <= 0.0 || self.config.n_values < 2 {
            return truth;
        }
        let key = format!("{}|{}|{}", self.task.task_id, self.history.join(" "), action.join(" "));
        let h = key
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u >= self.config.responder_noise {
            return truth;
        }
        let values = self.config.values(attr);
        let idx = values.iter().position(|v| *v == truth).unwrap_or(0);
        values[(idx + 1) % values.len()].clone()
    }
}

impl Episode for SlotEpisode {
    fn task(&self) -> &Task {
        &self.task
    }

    fn observation(&self) -> &[Token] {
        &self.history
    }

    fn turns_taken(&self) -> usize {
        self.turns
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn step(&mut self, action: &[Token]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        self.turns += 1;
        let (response, reward, answered) = match parse_action(&self.config, action) {
            ParsedAction::Query(a) => (
                vec![self.config.attribute(a), EQUALS.into(), self.reveal(a, action)],
                0.0,
                false,
            ),
            ParsedAction::Answer(values) => (
                Vec::new(),
                evaluate_answer(&values, &self.spec, self.config.reward_mode),
                true,
            ),
            ParsedAction::Malformed => (vec![UNPARSEABLE.into()], 0.0, false),
        };
        let terminated_by = if answered {
            Some(Termination::AnswerToken)
        } else if self.turns >= self.task.horizon {
            Some(Termination::HorizonExhausted)
        } else {
            None
        };
        self.done = terminated_by.is_some();
        self.history.extend(action.iter().cloned());
        self.history.extend(response.iter().cloned());
        Ok(StepOutcome {
            response,
            reward,
            done: self.done,
            terminated_by,
        })
    }
}
