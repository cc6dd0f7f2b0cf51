//! Exact numerical checks on enumerable tiny MDPs.
//!
//! - [`exact_qva`]: backward induction for `Q^π(o,a,c)`, `V^π(o,c)`,
//!   `A^π(o,a,c)` and their marginals over `c | o`.
//! - [`check_advantage_telescoping`]: the relation between summed advantages
//!   and summed rewards along every trajectory.
//! - [`check_asymmetric_policy_gradient`]: the return gradient against the
//!   marginal-advantage and hidden-info-advantage estimators.
//! - [`finite_diff_audit`] and [`audit_training_gradients`]: central
//!   differences against the analytic gradients of every training loss.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actor::{dpo_terms, nll_grad, TurnPreference, ValueExample, ValueHead};
use crate::critic::{CriticModel, HiddenInfoMode};
use crate::env::scripted::{DemonstratorConfig, NoisyDemonstrator};
use crate::env::tiny::{
    action_token, emission_token, enumerate_trajectories, hidden_token, TinyMdp, TinyMdpSpec,
    DEFAULT_ENUMERATION_CAP,
};
use crate::env::{sample_task, EnvConfig, SlotEpisode};
use crate::eval::{run_episode, stream_rng, Selector};
use crate::features::FeatureConfig;
use crate::policy::{freeze_reference, Context, Gradient, ModelMode, PolicyModel, Vocab};
use crate::trajectory::{make_trajectory_pairs, PairingConfig, Task, TaskIndex, Trajectory};
use crate::{Error, Result, Token};

/// One history node of a tiny MDP with its per-`c` quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct StateNode {
    pub history: Vec<Token>,
    /// 1-based turn.
    pub t: usize,
    pub emission: usize,
    /// `π(a | o)`.
    pub policy: Vec<f64>,
    /// `P(o_t = history, c)` for each `c`.
    pub reach: Vec<f64>,
    /// `Q[c][a]`.
    pub q: Vec<Vec<f64>>,
    /// `V[c]`.
    pub v: Vec<f64>,
}

impl StateNode {
    pub fn advantage(&self, a: usize, c: usize) -> f64 {
        self.q[c][a] - self.v[c]
    }

    /// `P(c | o)`; all zeros for unreachable histories.
    pub fn posterior(&self) -> Vec<f64> {
        let z: f64 = self.reach.iter().sum();
        if z > 0.0 {
            self.reach.iter().map(|r| r / z).collect()
        } else {
            vec![0.0; self.reach.len()]
        }
    }

    fn marginal(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.posterior().iter().enumerate().map(|(c, p)| p * f(c)).sum()
    }

    pub fn marginal_q(&self, a: usize) -> f64 {
        self.marginal(|c| self.q[c][a])
    }

    pub fn marginal_v(&self) -> f64 {
        self.marginal(|c| self.v[c])
    }

    /// `A(o, a) = E_{c | o} A(o, a, c)`; the policy does not see `c`, so
    /// conditioning on the action leaves the posterior unchanged.
    pub fn marginal_advantage(&self, a: usize) -> f64 {
        self.marginal(|c| self.advantage(a, c))
    }
}

/// Exact `Q`, `V`, `A` over every history of a tiny MDP under one policy.
#[derive(Debug, Clone)]
pub struct ExactTables {
    pub n_actions: usize,
    pub n_hidden: usize,
    pub nodes: Vec<StateNode>,
    index: IndexMap<Vec<Token>, usize>,
    /// `Σ μ₁(e, c) V([e], c)`.
    pub expected_return: f64,
}

impl ExactTables {
    pub fn node(&self, history: &[Token]) -> Option<&StateNode> {
        self.index.get(history).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, history: &[Token]) -> Option<usize> {
        self.index.get(history).copied()
    }

    /// Scorer entry point: `A(o, a, c)` from token forms.
    pub fn advantage_for_tokens(&self, history: &[Token], action: &[Token], hidden: &[Token]) -> Result<f64> {
        let node = self
            .node(history)
            .ok_or_else(|| Error::Invalid(format!("history `{}` not in table", history.join(" "))))?;
        let a = match action {
            [tok] => (0..self.n_actions)
                .find(|&a| action_token(a) == *tok)
                .ok_or_else(|| Error::UnknownToken(tok.clone()))?,
            _ => return Err(Error::Invalid("tiny MDP actions are single tokens".into())),
        };
        let c = match hidden {
            [tok] => (0..self.n_hidden)
                .find(|&c| hidden_token(c) == *tok)
                .ok_or_else(|| Error::UnknownToken(tok.clone()))?,
            _ => return Err(Error::Invalid("tiny MDP hidden info is a single token".into())),
        };
        Ok(node.advantage(a, c))
    }
}

struct Builder<'a> {
    mdp: &'a TinyMdp,
    policy: &'a PolicyModel,
    nodes: Vec<StateNode>,
    index: IndexMap<Vec<Token>, usize>,
    cap: usize,
}

impl Builder<'_> {
    fn visit(&mut self, emissions: &mut Vec<usize>, actions: &mut Vec<usize>, reach: Vec<f64>) -> Result<usize> {
        if self.nodes.len() >= self.cap {
            return Err(Error::EnumerationOverflow { cap: self.cap });
        }
        let mdp = self.mdp;
        let history = TinyMdp::history_tokens(emissions, actions);
        let policy: Vec<f64> = self
            .policy
            .token_logprobs(&Context::actor(&history), &[])
            .into_iter()
            .map(f64::exp)
            .collect();
        let t = emissions.len();
        let e = *emissions.last().expect("nonempty");
        let id = self.nodes.len();
        self.nodes.push(StateNode {
            history: history.clone(),
            t,
            emission: e,
            policy: policy.clone(),
            reach: reach.clone(),
            q: vec![vec![0.0; mdp.n_actions]; mdp.n_hidden],
            v: vec![0.0; mdp.n_hidden],
        });
        self.index.insert(history, id);
        let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_hidden];
        for a in 0..mdp.n_actions {
            for c in 0..mdp.n_hidden {
                q[c][a] = mdp.reward[mdp.sac(e, a, c)];
            }
            if t == mdp.horizon {
                continue;
            }
            for next in 0..mdp.n_emissions {
                let probs: Vec<f64> = (0..mdp.n_hidden)
                    .map(|c| mdp.transition[mdp.sac(e, a, c)][next])
                    .collect();
                if probs.iter().all(|&p| p == 0.0) {
                    continue;
                }
                let child_reach: Vec<f64> = (0..mdp.n_hidden)
                    .map(|c| reach[c] * policy[a] * probs[c])
                    .collect();
                emissions.push(next);
                actions.push(a);
                let child = self.visit(emissions, actions, child_reach)?;
                emissions.pop();
                actions.pop();
                for c in 0..mdp.n_hidden {
                    q[c][a] += probs[c] * self.nodes[child].v[c];
                }
            }
        }
        let v: Vec<f64> = (0..mdp.n_hidden)
            .map(|c| (0..mdp.n_actions).map(|a| policy[a] * q[c][a]).sum())
            .collect();
        self.nodes[id].q = q;
        self.nodes[id].v = v;
        Ok(id)
    }
}

/// Backward induction over every history reachable under the transition table.
pub fn exact_qva(mdp: &TinyMdp, policy: &PolicyModel) -> Result<ExactTables> {
    let mut b = Builder {
        mdp,
        policy,
        nodes: Vec::new(),
        index: IndexMap::new(),
        cap: DEFAULT_ENUMERATION_CAP,
    };
    let mut expected_return = 0.0;
    for e in 0..mdp.n_emissions {
        let reach: Vec<f64> = (0..mdp.n_hidden).map(|c| mdp.initial_prob(e, c)).collect();
        let id = b.visit(&mut vec![e], &mut Vec::new(), reach.clone())?;
        expected_return += (0..mdp.n_hidden).map(|c| reach[c] * b.nodes[id].v[c]).sum::<f64>();
    }
    Ok(ExactTables {
        n_actions: mdp.n_actions,
        n_hidden: mdp.n_hidden,
        nodes: b.nodes,
        index: b.index,
        expected_return,
    })
}

/// A tabular policy with logits drawn uniformly from `[-scale, scale]` at
/// every history of the MDP.
pub fn random_tabular_policy(mdp: &TinyMdp, seed: u64, scale: f64) -> Result<PolicyModel> {
    let mut policy = PolicyModel::fresh(ModelMode::TabularExact, mdp.vocab(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frontier: Vec<(Vec<usize>, Vec<usize>)> = (0..mdp.n_emissions).map(|e| (vec![e], vec![])).collect();
    while let Some((em, ac)) = frontier.pop() {
        let h = TinyMdp::history_tokens(&em, &ac);
        let logits: Vec<f64> = (0..mdp.n_actions).map(|_| rng.gen_range(-scale..=scale)).collect();
        policy.set_logits(&Context::actor(&h), &[], &logits)?;
        if em.len() < mdp.horizon {
            for a in 0..mdp.n_actions {
                for e in 0..mdp.n_emissions {
                    let mut em2 = em.clone();
                    let mut ac2 = ac.clone();
                    em2.push(e);
                    ac2.push(a);
                    frontier.push((em2, ac2));
                }
            }
        }
    }
    Ok(policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TelescopingReport {
    /// `max |Σ r − Σ A|` over trajectories.
    pub literal: f64,
    /// `max |Σ r − V(o₁, c) − Σ A|`.
    pub telescoped: f64,
    /// Largest deviation between `Σ r⁺ − Σ r⁻` and `Σ A⁺ − Σ A⁻` over pairs
    /// sharing `(o₁, c)`: the quantity a Bradley-Terry loss actually sees.
    pub pairwise: f64,
    /// `max |Σ_a π(a|o) A(o,a,c)|` over states.
    pub centering: f64,
    pub trajectories: usize,
}

impl TelescopingReport {
    /// Deviation of the identities that hold for deterministic transitions.
    pub fn violation(&self) -> f64 {
        self.telescoped.max(self.pairwise)
    }
}

/// Compares summed advantages with summed rewards on every trajectory.
pub fn check_advantage_telescoping(mdp: &TinyMdp, policy: &PolicyModel) -> Result<TelescopingReport> {
    let tables = exact_qva(mdp, policy)?;
    let paths = enumerate_trajectories(mdp, policy, DEFAULT_ENUMERATION_CAP)?;
    let mut literal: f64 = 0.0;
    let mut telescoped: f64 = 0.0;
    let mut groups: IndexMap<(usize, usize), (f64, f64)> = IndexMap::new();
    for p in &paths {
        let mut sum_a = 0.0;
        for t in 0..p.actions.len() {
            let h = TinyMdp::history_tokens(&p.emissions[..=t], &p.actions[..t]);
            let node = tables.node(&h).expect("enumerated history is tabulated");
            sum_a += node.advantage(p.actions[t], p.c);
        }
        let sum_r = p.total_reward();
        let v1 = tables.node(&[emission_token(p.emissions[0])]).expect("root").v[p.c];
        literal = literal.max((sum_r - sum_a).abs());
        telescoped = telescoped.max((sum_r - v1 - sum_a).abs());
        let gap = sum_r - sum_a;
        let entry = groups.entry((p.emissions[0], p.c)).or_insert((gap, gap));
        entry.0 = entry.0.min(gap);
        entry.1 = entry.1.max(gap);
    }
    let pairwise = groups.values().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
    let mut centering: f64 = 0.0;
    for node in &tables.nodes {
        for c in 0..tables.n_hidden {
            let s: f64 = (0..tables.n_actions).map(|a| node.policy[a] * node.advantage(a, c)).sum();
            centering = centering.max(s.abs());
        }
    }
    Ok(TelescopingReport {
        literal,
        telescoped,
        pairwise,
        centering,
        trajectories: paths.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyGradientReport {
    /// `Σ_τ P(τ) R(τ) Σ_t ∇ log π(a_t | o_t)`.
    pub grad_reward: Vec<f64>,
    /// `Σ_t E[A(o_t, a_t) ∇ log π]` with the marginal advantage.
    pub grad_adv_marginal: Vec<f64>,
    /// `Σ_t E[A(o_t, a_t, c) ∇ log π]`, expectation over trajectories.
    pub grad_adv_hidden: Vec<f64>,
    /// The same estimator as an occupancy-weighted sum over states.
    pub grad_adv_hidden_occupancy: Vec<f64>,
    /// Largest componentwise gap among the first three.
    pub max_deviation: f64,
    /// Gap between the trajectory and occupancy forms.
    pub occupancy_deviation: f64,
}

fn add_score(grad: &mut [f64], node_idx: usize, policy: &[f64], a: usize, weight: f64) {
    let base = node_idx * policy.len();
    for (b, p) in policy.iter().enumerate() {
        let d = if a == b { 1.0 - p } else { -p };
        grad[base + b] += weight * d;
    }
}

fn max_gap(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Gradients are laid out as `[node][action]` over the logits at each
/// tabulated history (see [`ExactTables::nodes`]).
pub fn check_asymmetric_policy_gradient(mdp: &TinyMdp, policy: &PolicyModel) -> Result<(ExactTables, PolicyGradientReport)> {
    let tables = exact_qva(mdp, policy)?;
    let paths = enumerate_trajectories(mdp, policy, DEFAULT_ENUMERATION_CAP)?;
    let dim = tables.nodes.len() * tables.n_actions;
    let mut g_r = vec![0.0; dim];
    let mut g_m = vec![0.0; dim];
    let mut g_h = vec![0.0; dim];
    for p in &paths {
        let ret = p.total_reward();
        for t in 0..p.actions.len() {
            let h = TinyMdp::history_tokens(&p.emissions[..=t], &p.actions[..t]);
            let idx = tables.node_index(&h).expect("tabulated");
            let node = &tables.nodes[idx];
            let a = p.actions[t];
            add_score(&mut g_r, idx, &node.policy, a, p.prob * ret);
            add_score(&mut g_m, idx, &node.policy, a, p.prob * node.marginal_advantage(a));
            add_score(&mut g_h, idx, &node.policy, a, p.prob * node.advantage(a, p.c));
        }
    }
    let mut g_o = vec![0.0; dim];
    for (idx, node) in tables.nodes.iter().enumerate() {
        for c in 0..tables.n_hidden {
            for a in 0..tables.n_actions {
                let w = node.reach[c] * node.policy[a] * node.advantage(a, c);
                add_score(&mut g_o, idx, &node.policy, a, w);
            }
        }
    }
    let max_deviation = max_gap(&g_r, &g_m).max(max_gap(&g_r, &g_h)).max(max_gap(&g_m, &g_h));
    let occupancy_deviation = max_gap(&g_h, &g_o);
    Ok((
        tables,
        PolicyGradientReport {
            grad_reward: g_r,
            grad_adv_marginal: g_m,
            grad_adv_hidden: g_h,
            grad_adv_hidden_occupancy: g_o,
            max_deviation,
            occupancy_deviation,
        },
    ))
}

/// Central differences of the exact expected return against `grad` over
/// every logit of every tabulated history.
pub fn return_gradient_fd_gap(mdp: &TinyMdp, policy: &PolicyModel, tables: &ExactTables, grad: &[f64], eps: f64) -> Result<f64> {
    let coords: Vec<(usize, usize)> = (0..tables.nodes.len())
        .flat_map(|i| (0..tables.n_actions).map(move |a| (i, a)))
        .collect();
    let gaps: Vec<f64> = coords
        .par_iter()
        .map(|&(i, a)| {
            let node = &tables.nodes[i];
            let ctx = Context::actor(&node.history);
            let base: Vec<f64> = node.policy.iter().map(|p| p.ln()).collect();
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = policy.clone();
                let mut row = base.clone();
                row[a] += delta;
                probe.set_logits(&ctx, &[], &row)?;
                Ok(exact_qva(mdp, &probe)?.expected_return)
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            Ok((fd - grad[i * tables.n_actions + a]).abs())
        })
        .collect::<Result<_>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// Max relative error between central differences of `loss` and `grad` over
/// up to `n_coords` coordinates, drawn from the gradient's support first.
/// Relative error is `|fd − g| / max(|fd|, |g|, 1e-8)`.
pub fn finite_diff_audit<R: Rng>(
    loss: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    grad: &[f64],
    params: &[f64],
    rng: &mut R,
    n_coords: usize,
    eps: f64,
) -> Result<f64> {
    let l0 = loss(params)?;
    if !l0.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: "finite-difference audit",
            step: 0,
            value: l0,
        });
    }
    let support: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut coords: Vec<usize> = if support.len() > n_coords {
        sample(rng, support.len(), n_coords).into_iter().map(|k| support[k]).collect()
    } else {
        support.clone()
    };
    let others: Vec<usize> = (0..grad.len()).filter(|i| grad[*i] == 0.0).collect();
    let extra = n_coords.saturating_sub(coords.len()).min(others.len());
    coords.extend(sample(rng, others.len(), extra).into_iter().map(|k| others[k]));
    let errs: Vec<f64> = coords
        .par_iter()
        .map(|&i| {
            let mut p = params.to_vec();
            p[i] += eps;
            let up = loss(&p)?;
            p[i] -= 2.0 * eps;
            let down = loss(&p)?;
            let fd = (up - down) / (2.0 * eps);
            Ok((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8))
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditReport {
    pub bt_loss: f64,
    pub dpo_loss: f64,
    pub rft_nll: f64,
    pub value_bce: f64,
}

impl AuditReport {
    pub fn max(&self) -> f64 {
        self.bt_loss.max(self.dpo_loss).max(self.rft_nll).max(self.value_bce)
    }
}

const AUDIT_EPS: f64 = 1e-5;
const AUDIT_COORDS: usize = 64;

fn randomized_model(vocab: Arc<Vocab>, seed: u64, width: usize) -> PolicyModel {
    let mode = ModelMode::LinearHashed(FeatureConfig {
        width,
        ..FeatureConfig::default()
    });
    let mut m = PolicyModel::fresh(mode, vocab, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for w in m.linear_weights_mut().expect("linear") {
        *w = rng.gen_range(-0.5..0.5);
    }
    m
}

/// Gradient audits of the four training losses on randomized slot-game
/// fixtures (demonstrator trajectories, randomized linear models).
pub fn audit_training_gradients(seed: u64) -> Result<AuditReport> {
    let env = EnvConfig::default();
    let vocab = Arc::new(Vocab::new(env.vocab(), Some(crate::env::END))?);
    let demo = NoisyDemonstrator {
        env,
        params: DemonstratorConfig::default(),
    };
    let tasks: Vec<Task> = (0..4).map(|i| sample_task(&env, seed * 100 + i)).collect();
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        for j in 0..6u64 {
            let mut ep = SlotEpisode::new(env, task.clone())?;
            let mut rng = stream_rng(seed, k as u64 * 16 + j);
            trajs.push(run_episode(&demo, &mut ep, &mut rng, &mut Selector::Identity)?);
        }
    }
    let index = TaskIndex::new(tasks.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 96;

    // Critic Bradley-Terry loss with the NLL term.
    let pairs = make_trajectory_pairs(&trajs, PairingConfig::default(), &mut rng)?;
    let pair = pairs
        .first()
        .cloned()
        .ok_or_else(|| Error::Invalid("audit fixture has no preference pair".into()))?;
    let c = index.hidden_info(pair.task_id())?.to_vec();
    let reference = randomized_model(vocab.clone(), seed + 1, width);
    let theta = randomized_model(vocab.clone(), seed + 2, width);
    let critic = CriticModel::with_reference(theta, freeze_reference(&reference), 0.1, true, HiddenInfoMode::Full)?;
    let (_, g) = critic.pair_loss_grad(&pair, &c, 0.01)?;
    let g = critic.pi_theta.flatten_gradient(&g)?;
    let params = critic.pi_theta.flat_params();
    let bt = finite_diff_audit(
        &|p: &[f64]| {
            let mut cr = critic.clone();
            cr.pi_theta.set_flat_params(p)?;
            Ok(cr.pair_loss_grad(&pair, &c, 0.01)?.0.loss)
        },
        &g,
        &params,
        &mut rng,
        AUDIT_COORDS,
        AUDIT_EPS,
    )?;

    // Per-turn DPO with the NLL term.
    let actor = randomized_model(vocab.clone(), seed + 3, width);
    let turn = &trajs[0].turns()[0];
    let pref = TurnPreference {
        observation: turn.observation.clone(),
        chosen: turn.action.clone(),
        rejected: trajs[1].turns()[0].action.clone(),
        chosen_score: 1.0,
        rejected_score: 0.0,
    };
    let mut g = Gradient::new();
    dpo_terms(&actor, &reference, &pref, 0.1, 0.01, Some(&mut g))?;
    let g = actor.flatten_gradient(&g)?;
    let dpo = finite_diff_audit(
        &|p: &[f64]| {
            let mut a = actor.clone();
            a.set_flat_params(p)?;
            Ok(dpo_terms(&a, &reference, &pref, 0.1, 0.01, None)?.loss)
        },
        &g,
        &actor.flat_params(),
        &mut rng,
        AUDIT_COORDS,
        AUDIT_EPS,
    )?;

    // Rejection fine-tuning NLL over a few trajectories.
    let batch: Vec<&Trajectory> = trajs.iter().take(5).collect();
    let mut g = Gradient::new();
    nll_grad(&actor, &batch, Some(&mut g))?;
    let g = actor.flatten_gradient(&g)?;
    let rft = finite_diff_audit(
        &|p: &[f64]| {
            let mut a = actor.clone();
            a.set_flat_params(p)?;
            nll_grad(&a, &batch, None)
        },
        &g,
        &actor.flat_params(),
        &mut rng,
        AUDIT_COORDS,
        AUDIT_EPS,
    )?;

    // Value-head binary cross-entropy.
    let mut head = ValueHead::new(
        FeatureConfig {
            width,
            ..FeatureConfig::default()
        },
        seed,
    );
    let w: Vec<f64> = (0..width).map(|_| rng.gen_range(-0.5..0.5)).collect();
    head.set_weights(&w)?;
    let examples: Vec<ValueExample> = head.examples(&trajs, &index, 1.0)?;
    let mut g = vec![0.0; width];
    head.bce_grad(&examples, Some(&mut g));
    let value = finite_diff_audit(
        &|p: &[f64]| {
            let mut h = head.clone();
            h.set_weights(p)?;
            Ok(h.bce_grad(&examples, None))
        },
        &g,
        &w,
        &mut rng,
        AUDIT_COORDS,
        AUDIT_EPS,
    )?;
    Ok(AuditReport {
        bt_loss: bt,
        dpo_loss: dpo,
        rft_nll: rft,
        value_bce: value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub telescoping_mdps: usize,
    pub policies_per_mdp: usize,
    pub gradient_mdps: usize,
    pub audit_fixtures: usize,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            telescoping_mdps: 20,
            policies_per_mdp: 5,
            gradient_mdps: 10,
            audit_fixtures: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub max_violation: f64,
    pub tolerance: f64,
    /// `true` when the check passes if the violation is *above* the tolerance.
    pub expect_violation: bool,
    pub passed: bool,
}

impl CheckRow {
    fn at_most(check: &str, v: f64, tol: f64) -> Self {
        Self {
            check: check.into(),
            max_violation: v,
            tolerance: tol,
            expect_violation: false,
            passed: v <= tol,
        }
    }

    fn above(check: &str, v: f64, tol: f64) -> Self {
        Self {
            check: check.into(),
            max_violation: v,
            tolerance: tol,
            expect_violation: true,
            passed: v > tol,
        }
    }
}

pub fn telescoping_mdp(seed: u64) -> Result<TinyMdp> {
    TinyMdp::random(TinyMdpSpec::default(), seed)
}

/// The two-hidden-state, stochastic-transition fixture on which the
/// telescoping identity must break.
pub fn stochastic_counterexample() -> Result<TinyMdp> {
    let mdp = TinyMdp {
        n_hidden: 1,
        n_emissions: 2,
        n_actions: 1,
        horizon: 2,
        initial: vec![1.0, 0.0],
        transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        // Reward 1 only when acting from emission e1.
        reward: vec![0.0, 1.0],
    };
    mdp.validate()?;
    Ok(mdp)
}

pub fn gradient_mdp(seed: u64) -> Result<TinyMdp> {
    TinyMdp::random(
        TinyMdpSpec {
            n_hidden: 3,
            n_emissions: 2,
            n_actions: 2,
            horizon: 3,
            stochastic: false,
        },
        seed,
    )
}

/// Runs every exact check and returns one row per check.
pub fn run_theory_suite(config: &TheoryConfig) -> Result<Vec<CheckRow>> {
    let jobs: Vec<(u64, u64)> = (0..config.telescoping_mdps as u64)
        .flat_map(|m| (0..config.policies_per_mdp as u64).map(move |p| (m, p)))
        .collect();
    let reports: Vec<TelescopingReport> = jobs
        .par_iter()
        .map(|&(m, p)| {
            let mdp = telescoping_mdp(config.seed * 1000 + m)?;
            let pol = random_tabular_policy(&mdp, config.seed * 1000 + 100 + m * 10 + p, 2.0)?;
            check_advantage_telescoping(&mdp, &pol)
        })
        .collect::<Result<_>>()?;
    let fold = |f: fn(&TelescopingReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
    let stoch = stochastic_counterexample()?;
    let stoch_report = check_advantage_telescoping(&stoch, &PolicyModel::fresh(ModelMode::TabularExact, stoch.vocab(), 0))?;

    let grads: Vec<(f64, f64, f64)> = (0..config.gradient_mdps as u64)
        .into_par_iter()
        .map(|m| {
            let mdp = gradient_mdp(config.seed * 1000 + 500 + m)?;
            let pol = random_tabular_policy(&mdp, config.seed * 1000 + 700 + m, 1.5)?;
            let (tables, rep) = check_asymmetric_policy_gradient(&mdp, &pol)?;
            let fd = return_gradient_fd_gap(&mdp, &pol, &tables, &rep.grad_reward, 1e-5)?;
            Ok((rep.max_deviation, rep.occupancy_deviation, fd))
        })
        .collect::<Result<_>>()?;
    let audits: Vec<AuditReport> = (0..config.audit_fixtures as u64)
        .map(|k| audit_training_gradients(config.seed * 1000 + k))
        .collect::<Result<_>>()?;
    let audit_max = |f: fn(&AuditReport) -> f64| audits.iter().map(f).fold(0.0, f64::max);
    Ok(vec![
        CheckRow::at_most("advantage_sum_equals_return", fold(|r| r.literal), 1e-9),
        CheckRow::at_most("advantage_sum_equals_return_minus_initial_value", fold(|r| r.telescoped), 1e-9),
        CheckRow::at_most("pairwise_return_gap_equals_advantage_gap", fold(|r| r.pairwise), 1e-9),
        CheckRow::at_most("advantage_centering", fold(|r| r.centering), 1e-12),
        CheckRow::above("stochastic_transition_breaks_telescoping", stoch_report.telescoped, 0.01),
        CheckRow::at_most("policy_gradient_three_way_agreement", grads.iter().map(|g| g.0).fold(0.0, f64::max), 1e-8),
        CheckRow::at_most("policy_gradient_occupancy_form", grads.iter().map(|g| g.1).fold(0.0, f64::max), 1e-8),
        CheckRow::at_most("return_gradient_vs_finite_differences", grads.iter().map(|g| g.2).fold(0.0, f64::max), 1e-6),
        CheckRow::at_most("grad_audit_bt_loss", audit_max(|a| a.bt_loss), 1e-4),
        CheckRow::at_most("grad_audit_dpo_loss", audit_max(|a| a.dpo_loss), 1e-4),
        CheckRow::at_most("grad_audit_rejection_ft_nll", audit_max(|a| a.rft_nll), 1e-4),
        CheckRow::at_most("grad_audit_value_head_bce", audit_max(|a| a.value_bce), 1e-4),
    ])
}

pub fn checks_to_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("check,max_violation,tolerance,expect_violation,passed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{},{}\n",
            r.check, r.max_violation, r.tolerance, r.expect_violation, r.passed
        ));
    }
    out
}
