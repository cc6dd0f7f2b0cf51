//! Small explicit POMDPs whose trajectories can be enumerated exactly.
//!
//! State at turn `t` is the pair (latest emission `e_t`, hidden `c`). The
//! agent sees the history `[e_1, a_1, e_2, ..., e_t]`; `c` stays hidden.
//! Transition and reward tables are indexed by `(e, a, c)`. The final turn
//! has an empty response.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Episode, StepOutcome};
use crate::policy::{Context, PolicyModel, Vocab};
use crate::trajectory::{Task, Termination, Trajectory, TurnRecord};
use crate::{Error, Result, Token};

pub const DEFAULT_ENUMERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyMdpSpec {
    pub n_hidden: usize,
    pub n_emissions: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// Random transition distributions instead of one-hot rows.
    pub stochastic: bool,
}

impl Default for TinyMdpSpec {
    fn default() -> Self {
        Self {
            n_hidden: 2,
            n_emissions: 3,
            n_actions: 3,
            horizon: 3,
            stochastic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyMdp {
    pub n_hidden: usize,
    pub n_emissions: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `μ₁` over `(e₁, c)`, indexed `e * n_hidden + c`.
    pub initial: Vec<f64>,
    /// Next-emission distribution per [`TinyMdp::sac`] index.
    pub transition: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
}

pub fn emission_token(e: usize) -> Token {
    format!("e{e}")
}

pub fn action_token(a: usize) -> Token {
    format!("a{a}")
}

pub fn hidden_token(c: usize) -> Token {
    format!("c{c}")
}

fn parse_index(token: &str, prefix: char, bound: usize) -> Result<usize> {
    token
        .strip_prefix(prefix)
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| i < bound)
        .ok_or_else(|| Error::UnknownToken(token.to_owned()))
}

fn normalized<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

impl TinyMdp {
    pub fn random(spec: TinyMdpSpec, seed: u64) -> Result<Self> {
        if spec.n_hidden == 0 || spec.n_emissions == 0 || spec.n_actions == 0 {
            return Err(Error::Invalid("tiny MDP sets must be nonempty".into()));
        }
        if !(1..=3).contains(&spec.horizon) {
            return Err(Error::Invalid("tiny MDP horizon must be in 1..=3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial = normalized(&mut rng, spec.n_emissions * spec.n_hidden);
        let rows = spec.n_emissions * spec.n_actions * spec.n_hidden;
        let mut transition = Vec::with_capacity(rows);
        let mut reward = Vec::with_capacity(rows);
        for _ in 0..rows {
            if spec.stochastic {
                transition.push(normalized(&mut rng, spec.n_emissions));
            } else {
                let mut row = vec![0.0; spec.n_emissions];
                row[rng.gen_range(0..spec.n_emissions)] = 1.0;
                transition.push(row);
            }
            reward.push(rng.gen_range(0.0..1.0));
        }
        let mdp = Self {
            n_hidden: spec.n_hidden,
            n_emissions: spec.n_emissions,
            n_actions: spec.n_actions,
            horizon: spec.horizon,
            initial,
            transition,
            reward,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.n_emissions * self.n_actions * self.n_hidden;
        if self.initial.len() != self.n_emissions * self.n_hidden
            || self.transition.len() != rows
            || self.reward.len() != rows
        {
            return Err(Error::Invalid("tiny MDP table sizes are inconsistent".into()));
        }
        let is_dist = |d: &[f64]| {
            d.iter().all(|&p| (0.0..=1.0).contains(&p)) && (d.iter().sum::<f64>() - 1.0).abs() < 1e-12
        };
        if !is_dist(&self.initial) {
            return Err(Error::Invalid("initial distribution does not sum to 1".into()));
        }
        if self
            .transition
            .iter()
            .any(|row| row.len() != self.n_emissions || !is_dist(row))
        {
            return Err(Error::Invalid("transition row is not a distribution".into()));
        }
        Ok(())
    }

    pub fn sac(&self, e: usize, a: usize, c: usize) -> usize {
        (e * self.n_actions + a) * self.n_hidden + c
    }

    pub fn initial_prob(&self, e: usize, c: usize) -> f64 {
        self.initial[e * self.n_hidden + c]
    }

    pub fn is_deterministic(&self) -> bool {
        self.transition
            .iter()
            .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0))
    }

    /// Action tokens only; single-token actions need no end token.
    pub fn vocab(&self) -> Arc<Vocab> {
        let tokens = (0..self.n_actions).map(action_token).collect();
        Arc::new(Vocab::new(tokens, None).expect("distinct action tokens"))
    }

    pub fn history_tokens(emissions: &[usize], actions: &[usize]) -> Vec<Token> {
        let mut h = Vec::with_capacity(emissions.len() + actions.len());
        for (i, &e) in emissions.iter().enumerate() {
            h.push(emission_token(e));
            if let Some(&a) = actions.get(i) {
                h.push(action_token(a));
            }
        }
        h
    }

    /// Samples `(e₁, c)` from `μ₁`.
    pub fn sample_task(&self, seed: u64) -> Task {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.initial.len() - 1;
        for (i, p) in self.initial.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        let (e, c) = (pick / self.n_hidden, pick % self.n_hidden);
        Task::new(
            format!("tiny-{seed}"),
            vec![emission_token(e)],
            vec![hidden_token(c)],
            self.horizon,
            "tiny-mdp",
        )
        .expect("horizon >= 1")
    }
}

/// Action distribution of a single-token policy at a history.
pub fn action_probs(policy: &PolicyModel, history: &[Token]) -> Vec<f64> {
    policy
        .token_logprobs(&Context::actor(history), &[])
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// One complete trajectory with its hidden info and probability.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedPath {
    pub c: usize,
    pub emissions: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub prob: f64,
}

impl EnumeratedPath {
    pub fn to_trajectory(&self, task_id: &str) -> Result<Trajectory> {
        let n = self.actions.len();
        let turns = (0..n)
            .map(|t| TurnRecord {
                turn_index: t + 1,
                observation: TinyMdp::history_tokens(&self.emissions[..=t], &self.actions[..t]),
                action: vec![action_token(self.actions[t])],
                simulator_response: self
                    .emissions
                    .get(t + 1)
                    .map(|&e| vec![emission_token(e)])
                    .unwrap_or_default(),
                reward: self.rewards[t],
            })
            .collect();
        Trajectory::new(task_id, turns, Termination::HorizonExhausted)
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Every `(c, trajectory)` with positive probability under `policy`.
pub fn enumerate_trajectories(
    mdp: &TinyMdp,
    policy: &PolicyModel,
    cap: usize,
) -> Result<Vec<EnumeratedPath>> {
    let mut out = Vec::new();
    for e in 0..mdp.n_emissions {
        for c in 0..mdp.n_hidden {
            let p = mdp.initial_prob(e, c);
            if p > 0.0 {
                let start = EnumeratedPath {
                    c,
                    emissions: vec![e],
                    actions: Vec::new(),
                    rewards: Vec::new(),
                    prob: p,
                };
                extend(mdp, policy, start, cap, &mut out)?;
            }
        }
    }
    Ok(out)
}

fn extend(
    mdp: &TinyMdp,
    policy: &PolicyModel,
    path: EnumeratedPath,
    cap: usize,
    out: &mut Vec<EnumeratedPath>,
) -> Result<()> {
    if path.actions.len() == mdp.horizon {
        if out.len() >= cap {
            return Err(Error::EnumerationOverflow { cap });
        }
        out.push(path);
        return Ok(());
    }
    let history = TinyMdp::history_tokens(&path.emissions, &path.actions);
    let probs = action_probs(policy, &history);
    let e = *path.emissions.last().expect("nonempty");
    let last = path.actions.len() + 1 == mdp.horizon;
    for (a, &pa) in probs.iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        let idx = mdp.sac(e, a, path.c);
        let mut base = path.clone();
        base.actions.push(a);
        base.rewards.push(mdp.reward[idx]);
        base.prob *= pa;
        if last {
            extend(mdp, policy, base, cap, out)?;
            continue;
        }
        for (next, &pt) in mdp.transition[idx].iter().enumerate() {
            if pt > 0.0 {
                let mut child = base.clone();
                child.emissions.push(next);
                child.prob *= pt;
                extend(mdp, policy, child, cap, out)?;
            }
        }
    }
    Ok(())
}

/// A live episode on a tiny MDP; stochastic transitions draw from `rng`.
#[derive(Debug, Clone)]
pub struct TinyEpisode {
    mdp: Arc<TinyMdp>,
    task: Task,
    c: usize,
    emission: usize,
    history: Vec<Token>,
    turns: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl TinyEpisode {
    pub fn new(mdp: Arc<TinyMdp>, task: Task, seed: u64) -> Result<Self> {
        let c = match task.simulator_hidden_info() {
            [tok] => parse_index(tok, 'c', mdp.n_hidden)?,
            _ => return Err(Error::Invalid("tiny task needs one hidden token".into())),
        };
        let emission = match task.initial_observation.as_slice() {
            [tok] => parse_index(tok, 'e', mdp.n_emissions)?,
            _ => return Err(Error::Invalid("tiny task needs one initial emission".into())),
        };
        let history = task.initial_observation.clone();
        Ok(Self {
            mdp,
            task,
            c,
            emission,
            history,
            turns: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Episode for TinyEpisode {
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
        let a = match action {
            [tok] => parse_index(tok, 'a', self.mdp.n_actions)?,
            _ => return Err(Error::Invalid("tiny MDP actions are single tokens".into())),
        };
        let idx = self.mdp.sac(self.emission, a, self.c);
        let reward = self.mdp.reward[idx];
        self.turns += 1;
        self.history.push(action_token(a));
        let response = if self.turns >= self.mdp.horizon {
            self.done = true;
            Vec::new()
        } else {
            let u: f64 = self.rng.gen();
            let row = &self.mdp.transition[idx];
            let mut acc = 0.0;
            let mut next = row.len() - 1;
            for (i, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = i;
                    break;
                }
            }
            self.emission = next;
            self.history.push(emission_token(next));
            vec![emission_token(next)]
        };
        Ok(StepOutcome {
            response,
            reward,
            done: self.done,
            terminated_by: self.done.then_some(Termination::HorizonExhausted),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelMode;

    fn uniform(mdp: &TinyMdp) -> PolicyModel {
        PolicyModel::fresh(ModelMode::TabularExact, mdp.vocab(), 0)
    }

    #[test]
    fn uniform_two_actions_horizon_one() {
        let spec = TinyMdpSpec {
            n_hidden: 1,
            n_emissions: 1,
            n_actions: 2,
            horizon: 1,
            stochastic: false,
        };
        let mdp = TinyMdp::random(spec, 3).unwrap();
        let paths = enumerate_trajectories(&mdp, &uniform(&mdp), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(paths.len(), 2);
        for p in &paths {
            assert!((p.prob - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_policy_gives_single_path() {
        let spec = TinyMdpSpec {
            n_hidden: 1,
            n_emissions: 2,
            n_actions: 2,
            horizon: 2,
            stochastic: false,
        };
        let mut mdp = TinyMdp::random(spec, 1).unwrap();
        mdp.initial = vec![1.0, 0.0];
        let mut pol = uniform(&mdp);
        // Force action a0 everywhere by enumerating reachable histories.
        for e1 in 0..2 {
            for e2 in 0..2 {
                for h in [
                    TinyMdp::history_tokens(&[e1], &[]),
                    TinyMdp::history_tokens(&[e1, e2], &[0]),
                ] {
                    pol.set_logits(&Context::actor(&h), &[], &[0.0, -800.0]).unwrap();
                }
            }
        }
        let paths = enumerate_trajectories(&mdp, &pol, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].prob, 1.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        for stochastic in [false, true] {
            for seed in 0..5 {
                let spec = TinyMdpSpec {
                    stochastic,
                    ..TinyMdpSpec::default()
                };
                let mdp = TinyMdp::random(spec, seed).unwrap();
                assert_eq!(mdp.is_deterministic(), !stochastic);
                let paths =
                    enumerate_trajectories(&mdp, &uniform(&mdp), DEFAULT_ENUMERATION_CAP).unwrap();
                let total: f64 = paths.iter().map(|p| p.prob).sum();
                assert!((total - 1.0).abs() < 1e-10);
                for p in &paths {
                    for t in 0..p.actions.len() {
                        let idx = mdp.sac(p.emissions[t], p.actions[t], p.c);
                        assert_eq!(p.rewards[t], mdp.reward[idx]);
                        if let Some(&next) = p.emissions.get(t + 1) {
                            assert!(mdp.transition[idx][next] > 0.0);
                        }
                    }
                    p.to_trajectory("x").unwrap();
                }
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let spec = TinyMdpSpec {
            n_hidden: 4,
            n_emissions: 5,
            n_actions: 5,
            horizon: 3,
            stochastic: true,
        };
        let mdp = TinyMdp::random(spec, 0).unwrap();
        assert!(matches!(
            enumerate_trajectories(&mdp, &uniform(&mdp), 100),
            Err(Error::EnumerationOverflow { cap: 100 })
        ));
    }

    #[test]
    fn episode_matches_tables() {
        let mdp = Arc::new(TinyMdp::random(TinyMdpSpec::default(), 8).unwrap());
        let task = mdp.sample_task(2);
        let mut ep = TinyEpisode::new(mdp.clone(), task, 0).unwrap();
        let mut n = 0;
        while !ep.is_done() {
            let out = ep.step(&[action_token(1)]).unwrap();
            n += 1;
            assert_eq!(out.response.is_empty(), n == mdp.horizon);
        }
        assert_eq!(n, mdp.horizon);
        assert!(ep.step(&[action_token(0)]).is_err());
    }
}
