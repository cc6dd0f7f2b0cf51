//! Actor optimization.
//!
//! - [`train_actor_sweet`]: at every logged turn, sample candidate actions
//!   from the current actor, rank them with a scorer (normally the trained
//!   critic reading `c`), and apply a per-turn DPO update on a chosen/rejected
//!   pair drawn from the top and bottom halves.
//! - [`train_rejection_ft`]: imitation of successful trajectories.
//! - [`train_multiturn_dpo`]: DPO on whole-trajectory log-ratios.
//! - [`ValueHead`]: logistic success predictor used as a Best-of-N scorer.
//!
//! The actor only ever conditions on the interaction history.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critic::EpochStats;
use crate::eval::Scorer;
use crate::features::{dedup, FeatureConfig, FeatureHasher, Segment};
use crate::loss::{bce_with_logit, preference_loss, preference_loss_slope, sigmoid};
use crate::policy::{Context, FrozenPolicy, Gradient, PolicyModel};
use crate::trajectory::{TaskIndex, Trajectory, TrajectoryPair};
use crate::{Error, Result, Token};

/// `n` independent samples at `observation`; duplicates are kept.
pub fn generate_candidates<R: Rng + ?Sized>(
    actor: &PolicyModel,
    observation: &[Token],
    n: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Token>>> {
    if n < 2 {
        return Err(Error::Invalid("need at least 2 candidates".into()));
    }
    let prepared = actor.prepare(&Context::actor(observation));
    Ok((0..n).map(|_| prepared.sample(rng, max_len)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPreference {
    pub observation: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

/// Sorts candidates by descending score (random tie-break), then draws the
/// chosen action from the top half and the rejected one from the bottom
/// half; with an odd count the middle candidate joins the bottom half.
/// Returns `None` when every candidate is the same action.
pub fn rank_and_pair<R: Rng + ?Sized>(
    candidates: &[Vec<Token>],
    scores: &[f64],
    observation: &[Token],
    rng: &mut R,
) -> Result<Option<TurnPreference>> {
    if candidates.len() < 2 || candidates.len() != scores.len() {
        return Err(Error::Invalid("ranking needs >= 2 scored candidates".into()));
    }
    if candidates.iter().all(|c| *c == candidates[0]) {
        return Ok(None);
    }
    let mut order: Vec<(f64, u64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, rng.gen::<u64>(), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let top = candidates.len() / 2;
    let (c, _, ci) = order[rng.gen_range(0..top)];
    let (r, _, ri) = order[rng.gen_range(top..order.len())];
    Ok(Some(TurnPreference {
        observation: observation.to_vec(),
        chosen: candidates[ci].clone(),
        rejected: candidates[ri].clone(),
        chosen_score: c,
        rejected_score: r,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoTerms {
    pub loss: f64,
    pub dpo: f64,
    pub nll: f64,
    /// `β′ · Δ log-ratio`.
    pub margin: f64,
}

/// Standard DPO loss on one turn:
/// `softplus(−β′[(log π(a⁺) − log π_ref(a⁺)) − (log π(a⁻) − log π_ref(a⁻))])`.
pub fn dpo_loss(actor: &PolicyModel, reference: &PolicyModel, pref: &TurnPreference, beta: f64) -> Result<f64> {
    Ok(dpo_terms(actor, reference, pref, beta, 0.0, None)?.dpo)
}

/// DPO loss plus `λ ·` mean per-token NLL of the chosen action; optionally
/// accumulates the gradient.
pub fn dpo_terms(
    actor: &PolicyModel,
    reference: &PolicyModel,
    pref: &TurnPreference,
    beta: f64,
    lambda_nll: f64,
    grad: Option<&mut Gradient>,
) -> Result<DpoTerms> {
    if !(beta > 0.0) {
        return Err(Error::Invalid("DPO beta must be > 0".into()));
    }
    let ctx = Context::actor(&pref.observation);
    let ref_c = reference.action_logprob(&ctx, &pref.chosen)?.total;
    let ref_r = reference.action_logprob(&ctx, &pref.rejected)?.total;
    let (lp_c, lp_r, grads) = match grad {
        None => (
            actor.action_logprob(&ctx, &pref.chosen)?.total,
            actor.action_logprob(&ctx, &pref.rejected)?.total,
            None,
        ),
        Some(g) => {
            let mut gc = Gradient::new();
            let mut gr = Gradient::new();
            let c = actor.accumulate_logprob_grad(&mut gc, 1.0, &ctx, &pref.chosen)?.total;
            let r = actor.accumulate_logprob_grad(&mut gr, 1.0, &ctx, &pref.rejected)?.total;
            (c, r, Some((g, gc, gr)))
        }
    };
    let margin = beta * ((lp_c - ref_c) - (lp_r - ref_r));
    let dpo = preference_loss(margin);
    let len = pref.chosen.len() as f64;
    let nll = -lp_c / len;
    if let Some((g, gc, gr)) = grads {
        let slope = preference_loss_slope(margin) * beta;
        g.add_scaled(&gc, slope - lambda_nll / len);
        g.add_scaled(&gr, -slope);
    }
    Ok(DpoTerms {
        loss: dpo + lambda_nll * nll,
        dpo,
        nll,
        margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda_nll: f64,
    pub candidates: usize,
    /// Critic→actor rounds; each round is one actor pass.
    pub rounds: usize,
}

impl Default for ActorTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 1,
            batch_size: 8,
            beta: 0.1,
            lambda_nll: 0.01,
            candidates: 16,
            rounds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    /// Turns skipped because every candidate was the same action.
    pub skipped: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,margin,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.margin, e.accuracy));
        }
        out
    }
}

fn check_finite(stage: &'static str, step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { stage, step, value })
    }
}

/// Critic-guided per-turn DPO over the logged turns of an offline dataset.
///
/// Candidates are sampled from the current actor at the logged history, so
/// no new interaction with the collaborator is needed. `reference` is the
/// frozen actor the DPO log-ratios are measured against. `c` is looked up
/// only when the scorer needs it.
#[allow(clippy::too_many_arguments)]
pub fn train_actor_sweet<R: Rng>(
    actor: &mut PolicyModel,
    reference: &FrozenPolicy,
    scorer: &Scorer<'_>,
    offline: &[Trajectory],
    tasks: &TaskIndex,
    max_len: usize,
    config: &ActorTrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let mut turns: Vec<(usize, usize)> = offline
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if turns.is_empty() {
        return Err(Error::EmptyInput("offline turns"));
    }
    let mut hidden: Vec<Option<Vec<Token>>> = vec![None; offline.len()];
    if scorer.needs_hidden_info() {
        for (slot, traj) in hidden.iter_mut().zip(offline) {
            *slot = Some(tasks.hidden_info(traj.task_id())?.to_vec());
        }
    }
    let batch = config.batch_size.max(1);
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        skipped: 0,
    };
    for epoch in 0..config.epochs * config.rounds.max(1) {
        turns.shuffle(rng);
        let (mut loss_sum, mut margin_sum, mut correct, mut used) = (0.0, 0.0, 0usize, 0usize);
        for chunk in turns.chunks(batch) {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.gen()).collect();
            let current: &PolicyModel = actor;
            let prefs: Vec<Option<TurnPreference>> = chunk
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&(i, j), &seed)| {
                    let mut turn_rng = ChaCha8Rng::seed_from_u64(seed);
                    let obs = &offline[i].turns()[j].observation;
                    let cands = generate_candidates(current, obs, config.candidates, max_len, &mut turn_rng)?;
                    let scores = scorer.score_all(obs, &cands, hidden[i].as_deref(), &mut turn_rng)?;
                    rank_and_pair(&cands, &scores, obs, &mut turn_rng)
                })
                .collect::<Result<_>>()?;
            let results: Vec<(DpoTerms, Gradient)> = prefs
                .par_iter()
                .flatten()
                .map(|p| {
                    let mut g = Gradient::new();
                    let terms = dpo_terms(current, reference, p, config.beta, config.lambda_nll, Some(&mut g))?;
                    Ok((terms, g))
                })
                .collect::<Result<_>>()?;
            report.skipped += prefs.iter().filter(|p| p.is_none()).count();
            if results.is_empty() {
                continue;
            }
            let mut grad = Gradient::new();
            for ((terms, g), pref) in results.iter().zip(prefs.iter().flatten()) {
                check_finite("actor-sweet", report.steps, terms.loss)?;
                loss_sum += terms.loss;
                margin_sum += pref.chosen_score - pref.rejected_score;
                correct += usize::from(terms.margin > 0.0);
                grad.add_scaled(g, 1.0);
            }
            used += results.len();
            // Descent on the loss: the accumulated gradient is of the loss already.
            actor.apply(&grad, -config.lr / results.len() as f64);
            report.steps += 1;
        }
        let n = used.max(1) as f64;
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / n,
            margin: margin_sum / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 4,
            batch_size: 32,
            threshold: 1.0,
        }
    }
}

/// Mean per-token NLL of every action in `trajectories`, with its gradient.
pub fn nll_grad(actor: &PolicyModel, trajectories: &[&Trajectory], grad: Option<&mut Gradient>) -> Result<f64> {
    let n_tokens: usize = trajectories
        .iter()
        .flat_map(|t| t.turns())
        .map(|t| t.action.len())
        .sum();
    if n_tokens == 0 {
        return Err(Error::EmptyInput("trajectories"));
    }
    let scale = -1.0 / n_tokens as f64;
    let mut total = 0.0;
    match grad {
        Some(g) => {
            for turn in trajectories.iter().flat_map(|t| t.turns()) {
                let ctx = Context::actor(&turn.observation);
                total += actor.accumulate_logprob_grad(g, scale, &ctx, &turn.action)?.total;
            }
        }
        None => {
            for turn in trajectories.iter().flat_map(|t| t.turns()) {
                total += actor
                    .action_logprob(&Context::actor(&turn.observation), &turn.action)?
                    .total;
            }
        }
    }
    Ok(-total / n_tokens as f64)
}

/// Maximizes the likelihood of trajectories whose return reaches `threshold`.
pub fn train_rejection_ft<R: Rng>(
    actor: &mut PolicyModel,
    trajectories: &[Trajectory],
    config: &RftConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let keep: Vec<&Trajectory> = trajectories
        .iter()
        .filter(|t| t.cumulative_reward() >= config.threshold)
        .collect();
    if keep.is_empty() {
        return Err(Error::NoQualifyingTrajectories {
            threshold: config.threshold,
        });
    }
    let mut order: Vec<usize> = (0..keep.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        skipped: 0,
    };
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| keep[i]).collect();
            let mut grad = Gradient::new();
            let loss = nll_grad(actor, &batch, Some(&mut grad))?;
            check_finite("actor-rft", report.steps, loss)?;
            actor.apply(&grad, -config.lr);
            loss_sum += loss;
            batches += 1;
            report.steps += 1;
        }
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            margin: 0.0,
            accuracy: 0.0,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtdpoConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda_nll: f64,
}

impl Default for MtdpoConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            epochs: 4,
            batch_size: 8,
            beta: 0.1,
            lambda_nll: 0.01,
        }
    }
}

fn trajectory_logprob(model: &PolicyModel, traj: &Trajectory, grad: Option<&mut Gradient>) -> Result<f64> {
    let mut total = 0.0;
    match grad {
        Some(g) => {
            for t in traj.turns() {
                total += model
                    .accumulate_logprob_grad(g, 1.0, &Context::actor(&t.observation), &t.action)?
                    .total;
            }
        }
        None => {
            for t in traj.turns() {
                total += model.action_logprob(&Context::actor(&t.observation), &t.action)?.total;
            }
        }
    }
    Ok(total)
}

/// Trajectory-level DPO: the margin sums per-turn log-ratios over each whole
/// trajectory. Adds `λ ·` mean per-token NLL of the chosen trajectory.
pub fn mtdpo_terms(
    actor: &PolicyModel,
    reference: &PolicyModel,
    pair: &TrajectoryPair,
    beta: f64,
    lambda_nll: f64,
    grad: Option<&mut Gradient>,
) -> Result<DpoTerms> {
    let ref_c = trajectory_logprob(reference, pair.chosen(), None)?;
    let ref_r = trajectory_logprob(reference, pair.rejected(), None)?;
    let n_tokens: usize = pair.chosen().turns().iter().map(|t| t.action.len()).sum();
    let (lp_c, lp_r) = match grad {
        None => (
            trajectory_logprob(actor, pair.chosen(), None)?,
            trajectory_logprob(actor, pair.rejected(), None)?,
        ),
        Some(g) => {
            let mut gc = Gradient::new();
            let mut gr = Gradient::new();
            let c = trajectory_logprob(actor, pair.chosen(), Some(&mut gc))?;
            let r = trajectory_logprob(actor, pair.rejected(), Some(&mut gr))?;
            let margin = beta * ((c - ref_c) - (r - ref_r));
            let slope = preference_loss_slope(margin) * beta;
            g.add_scaled(&gc, slope - lambda_nll / n_tokens as f64);
            g.add_scaled(&gr, -slope);
            (c, r)
        }
    };
    let margin = beta * ((lp_c - ref_c) - (lp_r - ref_r));
    let dpo = preference_loss(margin);
    let nll = -lp_c / n_tokens as f64;
    Ok(DpoTerms {
        loss: dpo + lambda_nll * nll,
        dpo,
        nll,
        margin,
    })
}

pub fn train_multiturn_dpo<R: Rng>(
    actor: &mut PolicyModel,
    reference: &FrozenPolicy,
    pairs: &[TrajectoryPair],
    config: &MtdpoConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("multi-turn DPO pairs"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        skipped: 0,
    };
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut margin_sum, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let current: &PolicyModel = actor;
            let results: Vec<(DpoTerms, Gradient)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut g = Gradient::new();
                    let t = mtdpo_terms(current, reference, &pairs[i], config.beta, config.lambda_nll, Some(&mut g))?;
                    Ok((t, g))
                })
                .collect::<Result<_>>()?;
            let mut grad = Gradient::new();
            for (t, g) in &results {
                check_finite("actor-mtdpo", report.steps, t.loss)?;
                loss_sum += t.loss;
                margin_sum += t.margin;
                correct += usize::from(t.margin > 0.0);
                grad.add_scaled(g, 1.0);
            }
            actor.apply(&grad, -config.lr / chunk.len() as f64);
            report.steps += 1;
        }
        let n = pairs.len() as f64;
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / n,
            margin: margin_sum / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Returns at or above this count as success.
    pub success_threshold: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 4,
            batch_size: 32,
            success_threshold: 1.0,
        }
    }
}

/// Logistic regression on hashed features of `c ⊕ o_t ⊕ a_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead {
    hasher: FeatureHasher,
    weights: Vec<f64>,
}

/// One value-head training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueExample {
    pub features: Vec<u32>,
    pub label: f64,
}

impl ValueHead {
    pub fn new(features: FeatureConfig, hash_seed: u64) -> Self {
        Self {
            hasher: FeatureHasher::new(features, hash_seed),
            weights: vec![0.0; features.width],
        }
    }

    pub fn features(&self, observation: &[Token], action: &[Token], hidden: &[Token]) -> Vec<u32> {
        let h = &self.hasher;
        let mut f = Vec::new();
        h.bias(&mut f);
        h.bag(Segment::Hidden, hidden, &mut f);
        h.bag(Segment::History, observation, &mut f);
        h.bag(Segment::Action, action, &mut f);
        h.suffix(observation, action, &mut f);
        dedup(&mut f);
        f
    }

    fn logit(&self, features: &[u32]) -> f64 {
        features.iter().map(|&i| self.weights[i as usize]).sum()
    }

    /// Predicted success probability in (0, 1).
    pub fn predict(&self, observation: &[Token], action: &[Token], hidden: &[Token]) -> f64 {
        sigmoid(self.logit(&self.features(observation, action, hidden)))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.weights.len() {
            return Err(Error::Invalid("value head weight length mismatch".into()));
        }
        self.weights.copy_from_slice(w);
        Ok(())
    }

    /// Mean BCE over `examples`; adds the dense gradient into `grad` when given.
    pub fn bce_grad(&self, examples: &[ValueExample], grad: Option<&mut [f64]>) -> f64 {
        let n = examples.len().max(1) as f64;
        let mut loss = 0.0;
        let mut grad = grad;
        for ex in examples {
            let z = self.logit(&ex.features);
            loss += bce_with_logit(z, ex.label);
            if let Some(g) = grad.as_deref_mut() {
                let d = (sigmoid(z) - ex.label) / n;
                for &i in &ex.features {
                    g[i as usize] += d;
                }
            }
        }
        loss / n
    }

    /// One example per turn, labelled with the trajectory's final success.
    pub fn examples(&self, trajectories: &[Trajectory], tasks: &TaskIndex, success_threshold: f64) -> Result<Vec<ValueExample>> {
        let mut out = Vec::new();
        for traj in trajectories {
            let c = tasks.hidden_info(traj.task_id())?;
            let label = f64::from(u8::from(traj.cumulative_reward() >= success_threshold));
            for t in traj.turns() {
                out.push(ValueExample {
                    features: self.features(&t.observation, &t.action, c),
                    label,
                });
            }
        }
        Ok(out)
    }

    pub fn train<R: Rng>(&mut self, examples: &[ValueExample], config: &ValueConfig, rng: &mut R) -> Result<TrainReport> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("value head examples"));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut report = TrainReport {
            epochs: Vec::new(),
            steps: 0,
            skipped: 0,
        };
        let mut grad = vec![0.0; self.weights.len()];
        for epoch in 0..config.epochs {
            order.shuffle(rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(config.batch_size.max(1)) {
                let batch: Vec<ValueExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
                grad.iter_mut().for_each(|g| *g = 0.0);
                let loss = self.bce_grad(&batch, Some(&mut grad));
                check_finite("value-head", report.steps, loss)?;
                loss_sum += loss * batch.len() as f64;
                for ex in &batch {
                    for &i in &ex.features {
                        let i = i as usize;
                        if grad[i] != 0.0 {
                            self.weights[i] -= config.lr * grad[i];
                            grad[i] = 0.0;
                        }
                    }
                }
                report.steps += 1;
            }
            let correct = examples
                .iter()
                .filter(|ex| (self.logit(&ex.features) > 0.0) == (ex.label > 0.5))
                .count();
            report.epochs.push(EpochStats {
                epoch: epoch + 1,
                loss: loss_sum / examples.len() as f64,
                margin: 0.0,
                accuracy: correct as f64 / examples.len() as f64,
            });
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = ValueCheckpoint {
            v: 1,
            features: self.hasher.config,
            hash_seed: self.hasher.seed,
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(i, &w)| (i, w))
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let ckpt: ValueCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut head = ValueHead::new(ckpt.features, ckpt.hash_seed);
        for (i, w) in ckpt.weights {
            *head
                .weights
                .get_mut(i)
                .ok_or_else(|| Error::Checkpoint("value weight index out of range".into()))? = w;
        }
        Ok(head)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueCheckpoint {
    v: u32,
    features: FeatureConfig,
    hash_seed: u64,
    weights: Vec<(usize, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{freeze_reference, ModelMode, Vocab};
    use crate::trajectory::{Termination, TurnRecord};
    use std::collections::HashMap;
    use std::sync::Arc;

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn vocab4() -> Arc<Vocab> {
        Arc::new(Vocab::new(toks("a b c END"), Some("END")).unwrap())
    }

    fn linear() -> ModelMode {
        ModelMode::LinearHashed(FeatureConfig {
            width: 128,
            ..FeatureConfig::default()
        })
    }

    fn pref(chosen: &str, rejected: &str) -> TurnPreference {
        TurnPreference {
            observation: toks("o"),
            chosen: toks(chosen),
            rejected: toks(rejected),
            chosen_score: 1.0,
            rejected_score: 0.0,
        }
    }

    fn traj(task: &str, actions: &[&str], r: f64) -> Trajectory {
        let mut turns: Vec<TurnRecord> = Vec::new();
        let mut obs = toks("start");
        for (i, a) in actions.iter().enumerate() {
            let last = i + 1 == actions.len();
            let t = TurnRecord {
                turn_index: i + 1,
                observation: obs.clone(),
                action: toks(a),
                simulator_response: if last { vec![] } else { toks("ok") },
                reward: if last { r } else { 0.0 },
            };
            obs = t.next_observation();
            turns.push(t);
        }
        Trajectory::new(task, turns, Termination::AnswerToken).unwrap()
    }

    #[test]
    fn candidate_count_and_validation() {
        let m = PolicyModel::fresh(linear(), vocab4(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(generate_candidates(&m, &toks("o"), 16, 3, &mut rng).unwrap().len(), 16);
        assert!(generate_candidates(&m, &toks("o"), 1, 3, &mut rng).is_err());
    }

    #[test]
    fn deterministic_actor_gives_identical_candidates() {
        let mut m = PolicyModel::fresh(ModelMode::TabularExact, vocab4(), 1);
        let o = toks("o");
        m.set_logits(&Context::actor(&o), &[], &[60.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = generate_candidates(&m, &o, 8, 1, &mut rng).unwrap();
        assert!(c.iter().all(|x| *x == toks("a")));
        assert!(rank_and_pair(&c, &[0.0; 8], &o, &mut rng).unwrap().is_none());
    }

    #[test]
    fn two_candidates_collide_with_probability_one_quarter() {
        let m = PolicyModel::fresh(linear(), vocab4(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 10_000;
        let distinct = (0..trials)
            .filter(|_| {
                let c = generate_candidates(&m, &toks("o"), 2, 1, &mut rng).unwrap();
                c[0] != c[1]
            })
            .count();
        assert!((distinct as f64 / trials as f64 - 0.75).abs() < 0.02);
    }

    #[test]
    fn quantile_split() {
        let cands: Vec<Vec<Token>> = ["a", "b", "c", "a b"].iter().map(|s| toks(s)).collect();
        let scores = [3.0, 2.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen_c = HashMap::new();
        let mut seen_r = HashMap::new();
        for _ in 0..400 {
            let p = rank_and_pair(&cands, &scores, &toks("o"), &mut rng).unwrap().unwrap();
            assert!(p.chosen_score >= 2.0 && p.rejected_score <= 1.0);
            *seen_c.entry(p.chosen_score as i64).or_insert(0) += 1;
            *seen_r.entry(p.rejected_score as i64).or_insert(0) += 1;
        }
        assert_eq!(seen_c.len(), 2);
        assert_eq!(seen_r.len(), 2);
        let two = rank_and_pair(&cands[..2], &[0.5, 0.9], &toks("o"), &mut rng).unwrap().unwrap();
        assert_eq!(two.chosen, toks("b"));
        assert_eq!(two.rejected, toks("a"));
    }

    #[test]
    fn odd_count_puts_middle_in_bottom_half() {
        let cands: Vec<Vec<Token>> = ["a", "b", "c"].iter().map(|s| toks(s)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = rank_and_pair(&cands, &[2.0, 1.0, 0.0], &toks("o"), &mut rng).unwrap().unwrap();
            assert_eq!(p.chosen, toks("a"));
            assert!(p.rejected == toks("b") || p.rejected == toks("c"));
        }
    }

    #[test]
    fn equal_scores_still_pair_and_dpo_is_ln2() {
        let cands: Vec<Vec<Token>> = ["a", "b"].iter().map(|s| toks(s)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rank_and_pair(&cands, &[0.0, 0.0], &toks("o"), &mut rng).unwrap().unwrap();
        assert_eq!(p.chosen_score, p.rejected_score);
        let m = PolicyModel::fresh(linear(), vocab4(), 1);
        let loss = dpo_loss(&m, &freeze_reference(&m), &p, 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dpo_loss_fixtures() {
        let v = Arc::new(Vocab::new(toks("a b c"), None).unwrap());
        let reference = PolicyModel::fresh(ModelMode::TabularExact, v, 0);
        let o = toks("o");
        let mut actor = reference.clone();
        // Raw log-ratio difference of exactly 1: log π(a) − log π(b) = 1.
        actor.set_logits(&Context::actor(&o), &[], &[1.0, 0.0, 0.0]).unwrap();
        let p = pref("a", "b");
        let loss = dpo_loss(&actor, &reference, &p, 0.1).unwrap();
        let oracle = (1.0 + (-0.1f64).exp()).ln();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.644397).abs() < 1e-6);
        actor.set_logits(&Context::actor(&o), &[], &[400.0, 0.0, 0.0]).unwrap();
        assert!(dpo_loss(&actor, &reference, &p, 0.1).unwrap() < 1e-6);
    }

    #[test]
    fn small_dpo_step_increases_margin() {
        let m0 = PolicyModel::fresh(linear(), vocab4(), 3);
        let reference = freeze_reference(&m0);
        let mut m = m0.clone();
        let p = pref("a b END", "c END");
        let mut g = Gradient::new();
        let before = dpo_terms(&m, &reference, &p, 0.1, 0.0, Some(&mut g)).unwrap();
        m.apply(&g, -0.01);
        let after = dpo_terms(&m, &reference, &p, 0.1, 0.0, None).unwrap();
        assert!(after.margin > before.margin);
    }

    #[test]
    fn rft_errors_without_qualifying_trajectories() {
        let mut m = PolicyModel::fresh(linear(), vocab4(), 3);
        let data = vec![traj("t", &["a END"], 0.0)];
        let cfg = RftConfig::default();
        assert!(matches!(
            train_rejection_ft(&mut m, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::NoQualifyingTrajectories { .. })
        ));
    }

    #[test]
    fn rft_imitates_successful_trajectory() {
        let mut m = PolicyModel::fresh(linear(), vocab4(), 3);
        let good = traj("t", &["a END", "b c END"], 1.0);
        let data = vec![good.clone(), traj("t", &["c END"], 0.0)];
        let cfg = RftConfig {
            lr: 2.0,
            epochs: 1,
            batch_size: 32,
            threshold: 1.0,
        };
        let keep = [&good];
        let before = nll_grad(&m, &keep, None).unwrap();
        train_rejection_ft(&mut m, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(nll_grad(&m, &keep, None).unwrap() < before);
        let cfg = RftConfig { epochs: 200, ..cfg };
        train_rejection_ft(&mut m, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for t in good.turns() {
            assert_eq!(m.greedy_action(&Context::actor(&t.observation), 6), t.action);
        }
    }

    #[test]
    fn mtdpo_identity_and_convergence() {
        let m0 = PolicyModel::fresh(linear(), vocab4(), 3);
        let reference = freeze_reference(&m0);
        let pair = TrajectoryPair::new(traj("t", &["a END", "b END"], 1.0), traj("t", &["c END"], 0.0)).unwrap();
        let t0 = mtdpo_terms(&m0, &reference, &pair, 0.1, 0.0, None).unwrap();
        assert!((t0.dpo - std::f64::consts::LN_2).abs() < 1e-12);
        let mut m = m0.clone();
        let cfg = MtdpoConfig {
            lr: 1.0,
            epochs: 20,
            batch_size: 1,
            ..MtdpoConfig::default()
        };
        train_multiturn_dpo(&mut m, &reference, &[pair.clone()], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(mtdpo_terms(&m, &reference, &pair, 0.1, 0.0, None).unwrap().margin > 0.0);
    }

    #[test]
    fn value_head_fixtures() {
        let tasks = TaskIndex::new([crate::trajectory::Task::new("t", toks("start"), toks("g"), 3, "x").unwrap()]).unwrap();
        let mut head = ValueHead::new(
            FeatureConfig {
                width: 256,
                ..FeatureConfig::default()
            },
            1,
        );
        let balanced = vec![traj("t", &["a END"], 1.0), traj("t", &["b END"], 0.0)];
        let ex = head.examples(&balanced, &tasks, 1.0).unwrap();
        assert!((head.bce_grad(&ex, None) - std::f64::consts::LN_2).abs() < 1e-12);
        let wins = vec![traj("t", &["a END"], 1.0), traj("t", &["b END", "c END"], 1.0)];
        let ex = head.examples(&wins, &tasks, 1.0).unwrap();
        let cfg = ValueConfig {
            lr: 1.0,
            epochs: 200,
            batch_size: 4,
            success_threshold: 1.0,
        };
        head.train(&ex, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(head.bce_grad(&ex, None) < 0.01);
        let p = head.predict(&toks("start"), &toks("a END"), &toks("g"));
        assert!(p > 0.99 && p < 1.0);
        let dir = tempfile::tempdir().unwrap();
        head.save(dir.path().join("v.json")).unwrap();
        assert_eq!(ValueHead::load(dir.path().join("v.json")).unwrap(), head);
    }
}
