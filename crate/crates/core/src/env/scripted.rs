//! Scripted agents for the slot game: a perfect-information strategy and a
//! noisy demonstrator used to seed the learned actor.

use indexmap::IndexMap;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Agent, EnvConfig, ANSWER, END, EQUALS, UNPARSEABLE};
use crate::Token;

/// What a history reveals: the latest reported value per attribute, and the
/// number of turns already taken.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistorySummary {
    pub revealed: IndexMap<Token, Token>,
    pub turns_taken: usize,
}

pub fn summarize(config: &EnvConfig, history: &[Token]) -> HistorySummary {
    let attrs = config.attributes();
    let mut s = HistorySummary::default();
    for (i, t) in history.iter().enumerate() {
        if t == UNPARSEABLE {
            s.turns_taken += 1;
        } else if t == EQUALS && i > 0 && i + 1 < history.len() {
            s.turns_taken += 1;
            if attrs.contains(&history[i - 1]) {
                s.revealed
                    .insert(history[i - 1].clone(), history[i + 1].clone());
            }
        }
    }
    s
}

/// Queries every unrevealed attribute in order, then answers.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedOptimal {
    pub config: EnvConfig,
}

impl Agent for ScriptedOptimal {
    fn act(&self, observation: &[Token], _rng: &mut dyn RngCore) -> Vec<Token> {
        let s = summarize(&self.config, observation);
        for a in 0..self.config.n_attributes {
            if !s.revealed.contains_key(&self.config.attribute(a)) {
                return vec![self.config.ask_token(a), END.into()];
            }
        }
        let mut action = vec![ANSWER.to_owned()];
        action.extend(self.config.attributes().iter().map(|a| s.revealed[a].clone()));
        action.push(END.into());
        action
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemonstratorConfig {
    /// Per-turn probability of answering while attributes are still unknown.
    pub answer_hazard: f64,
    /// Probability of querying an already revealed attribute.
    pub reask_prob: f64,
    /// Probability of copying a revealed value into the answer.
    pub copy_prob: f64,
    /// Probability of emitting an unparseable action.
    pub malformed_prob: f64,
}

impl Default for DemonstratorConfig {
    fn default() -> Self {
        Self {
            answer_hazard: 0.2,
            reask_prob: 0.15,
            copy_prob: 0.85,
            malformed_prob: 0.05,
        }
    }
}

/// An imperfect collaborator policy over histories only.
#[derive(Debug, Clone, Copy)]
pub struct NoisyDemonstrator {
    pub env: EnvConfig,
    pub params: DemonstratorConfig,
}

impl NoisyDemonstrator {
    fn answer(&self, s: &HistorySummary, rng: &mut dyn RngCore) -> Vec<Token> {
        let mut action = vec![ANSWER.to_owned()];
        for a in 0..self.env.n_attributes {
            let name = self.env.attribute(a);
            let value = match s.revealed.get(&name) {
                Some(v) if rng.gen_bool(self.params.copy_prob) => v.clone(),
                _ => self.env.value(a, rng.gen_range(0..self.env.n_values)),
            };
            action.push(value);
        }
        action.push(END.into());
        action
    }
}

impl Agent for NoisyDemonstrator {
    fn act(&self, observation: &[Token], rng: &mut dyn RngCore) -> Vec<Token> {
        let s = summarize(&self.env, observation);
        if rng.gen_bool(self.params.malformed_prob) {
            let a = rng.gen_range(0..self.env.n_attributes);
            return vec![self.env.value(a, rng.gen_range(0..self.env.n_values)), END.into()];
        }
        let unknown: Vec<usize> = (0..self.env.n_attributes)
            .filter(|&a| !s.revealed.contains_key(&self.env.attribute(a)))
            .collect();
        let last_turn = s.turns_taken + 1 >= self.env.horizon;
        if unknown.is_empty() || last_turn || rng.gen_bool(self.params.answer_hazard) {
            return self.answer(&s, rng);
        }
        let attr = if !s.revealed.is_empty() && rng.gen_bool(self.params.reask_prob) {
            let known: Vec<usize> = (0..self.env.n_attributes)
                .filter(|a| !unknown.contains(a))
                .collect();
            known[rng.gen_range(0..known.len())]
        } else {
            unknown[rng.gen_range(0..unknown.len())]
        };
        vec![self.env.ask_token(attr), END.into()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_task, Episode, SlotEpisode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn play(agent: &dyn Agent, config: EnvConfig, seed: u64) -> f64 {
        let mut ep = SlotEpisode::new(config, sample_task(&config, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        while !ep.is_done() {
            let a = agent.act(ep.observation(), &mut rng);
            total += ep.step(&a).unwrap().reward;
        }
        total
    }

    #[test]
    fn optimal_agent_always_succeeds_with_enough_turns() {
        for (n_attr, horizon) in [(4, 6), (4, 5), (2, 3), (3, 4)] {
            let c = EnvConfig {
                n_attributes: n_attr,
                horizon,
                ..EnvConfig::default()
            };
            let agent = ScriptedOptimal { config: c };
            for seed in 0..50 {
                assert_eq!(play(&agent, c, seed), 1.0);
            }
        }
    }

    #[test]
    fn optimal_agent_fails_without_enough_turns() {
        let c = EnvConfig {
            horizon: 4,
            ..EnvConfig::default()
        };
        assert_eq!(play(&ScriptedOptimal { config: c }, c, 0), 0.0);
    }

    #[test]
    fn summary_tracks_reveals_and_turns() {
        let c = EnvConfig::default();
        let h: Vec<Token> = "TASK color size shape material ASK_size END size = huge red END UNPARSEABLE"
            .split_whitespace()
            .map(str::to_owned)
            .collect();
        let s = summarize(&c, &h);
        assert_eq!(s.turns_taken, 2);
        assert_eq!(s.revealed.get("size").map(String::as_str), Some("huge"));
        assert_eq!(s.revealed.len(), 1);
    }

    #[test]
    fn demonstrator_is_imperfect_but_better_than_chance() {
        let c = EnvConfig::default();
        let agent = NoisyDemonstrator {
            env: c,
            params: DemonstratorConfig::default(),
        };
        let wins: f64 = (0..400).map(|s| play(&agent, c, s)).sum();
        let rate = wins / 400.0;
        assert!(rate > 0.05 && rate < 0.9, "rate {rate}");
    }
}
