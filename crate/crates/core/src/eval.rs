//! Rollouts, success metrics and the Best-of-N scorer comparison.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actor::ValueHead;
use crate::critic::CriticModel;
use crate::env::{Agent, Episode};
use crate::stats::{binomial_stderr, mean, stderr};
use crate::theory::ExactTables;
use crate::trajectory::{Task, Termination, Trajectory, TurnRecord};
use crate::{Error, Result, Token};

/// Rewards at or above this count as a success.
pub const SUCCESS_THRESHOLD: f64 = 1.0 - 1e-9;

/// Independent deterministic stream `stream` of a seeded generator.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ranks candidate actions at a history.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    /// Critic conditioned on the task's hidden info.
    CriticAdvantage(&'a CriticModel),
    /// Critic trained and queried with a blank in place of the hidden info.
    CriticNoHiddenInfo(&'a CriticModel),
    ValueHead(&'a ValueHead),
    Random,
    /// Exact advantages of a tiny MDP under a fixed policy.
    OracleExactAdvantage(&'a ExactTables),
}

impl Scorer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::CriticAdvantage(_) => "critic_advantage",
            Scorer::CriticNoHiddenInfo(_) => "critic_no_hidden_info",
            Scorer::ValueHead(_) => "value_head",
            Scorer::Random => "random",
            Scorer::OracleExactAdvantage(_) => "oracle_exact_advantage",
        }
    }

    pub fn needs_hidden_info(&self) -> bool {
        match self {
            Scorer::CriticAdvantage(c) => c.reads_hidden_info(),
            Scorer::ValueHead(_) | Scorer::OracleExactAdvantage(_) => true,
            Scorer::CriticNoHiddenInfo(_) | Scorer::Random => false,
        }
    }

    /// `hidden` must be given whenever [`Self::needs_hidden_info`] holds.
    pub fn score_all(
        &self,
        observation: &[Token],
        candidates: &[Vec<Token>],
        hidden: Option<&[Token]>,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        let need = || hidden.ok_or_else(|| Error::Invalid(format!("{} scorer needs hidden info", self.name())));
        match self {
            Scorer::CriticAdvantage(c) => c.advantages(observation, candidates, if c.reads_hidden_info() { need()? } else { &[] }),
            Scorer::CriticNoHiddenInfo(c) => c.advantages(observation, candidates, &[]),
            Scorer::ValueHead(v) => {
                let h = need()?;
                Ok(candidates.iter().map(|a| v.predict(observation, a, h)).collect())
            }
            Scorer::Random => Ok(candidates.iter().map(|_| rng.gen::<f64>()).collect()),
            Scorer::OracleExactAdvantage(t) => {
                let h = need()?;
                candidates.iter().map(|a| t.advantage_for_tokens(observation, a, h)).collect()
            }
        }
    }
}

/// Index of the best-scoring candidate; exact ties are broken uniformly.
pub fn best_of_n_select(
    scorer: &Scorer<'_>,
    candidates: &[Vec<Token>],
    observation: &[Token],
    hidden: Option<&[Token]>,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    match candidates.len() {
        0 => Err(Error::EmptyInput("Best-of-N candidates")),
        1 => Ok(0),
        _ => {
            let scores = scorer.score_all(observation, candidates, hidden, rng)?;
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
            Ok(if ties.len() == 1 {
                ties[0]
            } else {
                ties[rng.gen_range(0..ties.len())]
            })
        }
    }
}

/// How the executed action is chosen each turn.
pub enum Selector<'a> {
    Identity,
    /// Candidates come from the episode generator; scoring and tie-breaks
    /// use `rng`, so scorers sharing an episode seed see the same candidates.
    BestOfN {
        scorer: Scorer<'a>,
        n: usize,
        rng: ChaCha8Rng,
    },
}

/// Rolls `agent` until the episode ends.
pub fn run_episode(
    agent: &dyn Agent,
    episode: &mut dyn Episode,
    rng: &mut dyn RngCore,
    selector: &mut Selector<'_>,
) -> Result<Trajectory> {
    let mut turns = Vec::new();
    let mut terminated_by = Termination::HorizonExhausted;
    let hidden: Option<Vec<Token>> = match selector {
        Selector::BestOfN { scorer, .. } if scorer.needs_hidden_info() => {
            Some(episode.task().hidden_info().to_vec())
        }
        _ => None,
    };
    while !episode.is_done() {
        let observation = episode.observation().to_vec();
        let action = match selector {
            Selector::Identity => agent.act(&observation, rng),
            Selector::BestOfN { scorer, n, rng: select_rng } => {
                let cands: Vec<Vec<Token>> = (0..(*n).max(1)).map(|_| agent.act(&observation, rng)).collect();
                let i = best_of_n_select(scorer, &cands, &observation, hidden.as_deref(), select_rng)?;
                cands.into_iter().nth(i).expect("index in range")
            }
        };
        let out = episode.step(&action)?;
        if let Some(t) = out.terminated_by {
            terminated_by = t;
        }
        turns.push(TurnRecord {
            turn_index: turns.len() + 1,
            observation,
            action,
            simulator_response: out.response,
            reward: out.reward,
        });
    }
    Trajectory::new(episode.task().task_id.clone(), turns, terminated_by)
}

/// Builds a fresh episode for a task; the seed drives any environment randomness.
pub type EpisodeFactory<'a> = dyn Fn(&Task, u64) -> Result<Box<dyn Episode>> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    /// Binomial standard error of the success rate.
    pub stderr: f64,
    pub reward_stderr: f64,
    pub mean_action_length: f64,
    pub mean_turns: f64,
}

fn summarize(trajs: &[Trajectory]) -> EvalSummary {
    let rewards: Vec<f64> = trajs.iter().map(Trajectory::cumulative_reward).collect();
    let successes: Vec<f64> = rewards
        .iter()
        .map(|&r| f64::from(u8::from(r >= SUCCESS_THRESHOLD)))
        .collect();
    let lengths: Vec<f64> = trajs
        .iter()
        .flat_map(|t| t.turns())
        .map(|t| t.action.len() as f64)
        .collect();
    let success_rate = mean(&successes);
    EvalSummary {
        episodes: trajs.len(),
        success_rate,
        mean_reward: mean(&rewards),
        stderr: binomial_stderr(success_rate, trajs.len()),
        reward_stderr: stderr(&rewards),
        mean_action_length: mean(&lengths),
        mean_turns: trajs.iter().map(|t| t.len() as f64).sum::<f64>() / trajs.len().max(1) as f64,
    }
}

/// Runs `episodes` rollouts; episode `i` plays task `i mod |tasks|` with
/// generator stream `i` of `seed`.
pub fn rollouts(
    agent: &dyn Agent,
    tasks: &[Task],
    factory: &EpisodeFactory<'_>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("evaluation tasks"));
    }
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            let task = &tasks[i % tasks.len()];
            let mut rng = stream_rng(seed, i as u64);
            let mut ep = factory(task, rng.gen())?;
            run_episode(agent, ep.as_mut(), &mut rng, &mut Selector::Identity)
        })
        .collect()
}

pub fn eval_success(
    agent: &dyn Agent,
    tasks: &[Task],
    factory: &EpisodeFactory<'_>,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Invalid("episodes must be >= 1".into()));
    }
    Ok(summarize(&rollouts(agent, tasks, factory, episodes, seed)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub scorer: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub success_rate: f64,
    pub stderr: f64,
    pub episodes: usize,
    pub mean_reward: f64,
}

const SELECT_STREAM_SALT: u64 = 0x5e1e_c7ed_0000_0000;

/// Success rate per `N` of Best-of-N selection with `scorer`. Episode `i`
/// uses the same candidate stream for every scorer and every `N`.
pub fn scaling_curve(
    agent: &dyn Agent,
    scorer: &Scorer<'_>,
    tasks: &[Task],
    factory: &EpisodeFactory<'_>,
    n_values: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    if n_values.is_empty() {
        return Err(Error::EmptyInput("Best-of-N grid"));
    }
    if tasks.is_empty() {
        return Err(Error::EmptyInput("evaluation tasks"));
    }
    n_values
        .iter()
        .map(|&n| {
            let trajs: Vec<Trajectory> = (0..episodes)
                .into_par_iter()
                .map(|i| {
                    let task = &tasks[i % tasks.len()];
                    let mut rng = stream_rng(seed, i as u64);
                    let mut ep = factory(task, rng.gen())?;
                    let mut selector = Selector::BestOfN {
                        scorer: *scorer,
                        n,
                        rng: stream_rng(seed ^ SELECT_STREAM_SALT, i as u64),
                    };
                    run_episode(agent, ep.as_mut(), &mut rng, &mut selector)
                })
                .collect::<Result<_>>()?;
            let s = summarize(&trajs);
            Ok(ScalingRow {
                scorer: scorer.name().to_owned(),
                n,
                success_rate: s.success_rate,
                stderr: s.stderr,
                episodes,
                mean_reward: s.mean_reward,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scripted::ScriptedOptimal;
    use crate::env::{sample_task, EnvConfig, PolicyAgent, SlotEpisode};
    use crate::features::FeatureConfig;
    use crate::policy::{ModelMode, PolicyModel, Vocab};
    use std::sync::Arc;

    fn slot_factory(config: EnvConfig) -> impl Fn(&Task, u64) -> Result<Box<dyn Episode>> + Sync {
        move |task: &Task, _| Ok(Box::new(SlotEpisode::new(config, task.clone())?) as Box<dyn Episode>)
    }

    fn fresh_actor(config: &EnvConfig) -> PolicyModel {
        let vocab = Arc::new(Vocab::new(config.vocab(), Some("END")).unwrap());
        PolicyModel::fresh(
            ModelMode::LinearHashed(FeatureConfig {
                width: 64,
                ..FeatureConfig::default()
            }),
            vocab,
            0,
        )
    }

    #[test]
    fn scripted_optimal_always_succeeds() {
        let c = EnvConfig::default();
        let tasks: Vec<Task> = (0..20).map(|s| sample_task(&c, s)).collect();
        let s = eval_success(&ScriptedOptimal { config: c }, &tasks, &slot_factory(c), 50, 0).unwrap();
        assert_eq!(s.success_rate, 1.0);
        assert_eq!(s.stderr, 0.0);
        assert_eq!(s.success_rate, s.mean_reward);
    }

    #[test]
    fn uniform_actor_is_near_random() {
        let c = EnvConfig::default();
        let tasks: Vec<Task> = (0..100).map(|s| sample_task(&c, s)).collect();
        let actor = fresh_actor(&c);
        let agent = PolicyAgent {
            model: &actor,
            max_len: c.max_action_len(),
        };
        let s = eval_success(&agent, &tasks, &slot_factory(c), 1000, 1).unwrap();
        assert!(s.success_rate < 0.05);
        assert_eq!(s.success_rate, s.mean_reward);
    }

    #[test]
    fn fraction_mode_reward_dominates_success() {
        let c = EnvConfig {
            reward_mode: crate::env::RewardMode::FractionPassed,
            horizon: 3,
            ..EnvConfig::default()
        };
        let tasks: Vec<Task> = (0..10).map(|s| sample_task(&c, s)).collect();
        let agent = ScriptedOptimal { config: c };
        let s = eval_success(&agent, &tasks, &slot_factory(c), 30, 2).unwrap();
        assert!(s.mean_reward >= s.success_rate);
    }

    #[test]
    fn best_of_one_reproduces_plain_rollout() {
        let c = EnvConfig::default();
        let actor = fresh_actor(&c);
        let agent = PolicyAgent {
            model: &actor,
            max_len: c.max_action_len(),
        };
        for seed in 0..20 {
            let task = sample_task(&c, seed);
            let mut e1 = SlotEpisode::new(c, task.clone()).unwrap();
            let mut e2 = SlotEpisode::new(c, task).unwrap();
            let a = run_episode(&agent, &mut e1, &mut stream_rng(seed, 0), &mut Selector::Identity).unwrap();
            let mut sel = Selector::BestOfN {
                scorer: Scorer::Random,
                n: 1,
                rng: stream_rng(99, seed),
            };
            let b = run_episode(&agent, &mut e2, &mut stream_rng(seed, 0), &mut sel).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn random_scorer_selects_uniformly() {
        let cands: Vec<Vec<Token>> = (0..4).map(|i| vec![format!("t{i}")]).collect();
        let mut rng = stream_rng(3, 0);
        let mut counts = [0usize; 4];
        let trials = 10_000;
        for _ in 0..trials {
            counts[best_of_n_select(&Scorer::Random, &cands, &[], None, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 0.25).abs() < 0.02);
        }
        let one = &cands[..1];
        assert_eq!(best_of_n_select(&Scorer::Random, one, &[], None, &mut rng).unwrap(), 0);
    }

    #[test]
    fn rollouts_are_reproducible_and_parallel_safe() {
        let c = EnvConfig::default();
        let tasks: Vec<Task> = (0..7).map(|s| sample_task(&c, s)).collect();
        let actor = fresh_actor(&c);
        let agent = PolicyAgent {
            model: &actor,
            max_len: c.max_action_len(),
        };
        let a = rollouts(&agent, &tasks, &slot_factory(c), 40, 5).unwrap();
        let b = rollouts(&agent, &tasks, &slot_factory(c), 40, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[8].task_id(), tasks[1].task_id);
    }

    #[test]
    fn actor_rollouts_never_read_hidden_info() {
        let before = crate::trajectory::hidden_info_reads();
        let c = EnvConfig::default();
        let task = sample_task(&c, 0);
        let actor = fresh_actor(&c);
        let agent = PolicyAgent {
            model: &actor,
            max_len: c.max_action_len(),
        };
        let mut ep = SlotEpisode::new(c, task).unwrap();
        run_episode(&agent, &mut ep, &mut stream_rng(0, 0), &mut Selector::Identity).unwrap();
        assert_eq!(crate::trajectory::hidden_info_reads(), before);
    }
}
