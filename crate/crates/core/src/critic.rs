//! Turn-wise advantage critic with training-time information.
//!
//! The advantage of an action is the length-normalized log-ratio between a
//! trainable policy head `π_θ` and a frozen reference `π_ref`, both
//! conditioned on the hidden info `c` followed by the history `o_t`. The
//! critic is fit to trajectory preference pairs with a Bradley-Terry loss on
//! summed turn advantages.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::loss::{preference_loss, preference_loss_slope};
use crate::policy::{freeze_reference, Context, FrozenPolicy, Gradient, PolicyModel};
use crate::trajectory::{TaskIndex, Trajectory, TrajectoryPair};
use crate::{Error, Result, Token};

/// Stand-in hidden info for the critic that is denied access to `c`.
pub const BLANK: &str = "BLANK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenInfoMode {
    Full,
    Blank,
}

#[derive(Debug, Clone)]
pub struct CriticModel {
    pub pi_theta: PolicyModel,
    pub pi_ref: FrozenPolicy,
    pub beta: f64,
    pub normalize_by_length: bool,
    pub hidden_mode: HiddenInfoMode,
}

impl CriticModel {
    /// Both heads start from `init`, so the advantage is identically zero.
    pub fn new(init: &PolicyModel, beta: f64, normalize_by_length: bool, hidden_mode: HiddenInfoMode) -> Result<Self> {
        Self::with_reference(init.clone(), freeze_reference(init), beta, normalize_by_length, hidden_mode)
    }

    pub fn with_reference(
        pi_theta: PolicyModel,
        pi_ref: FrozenPolicy,
        beta: f64,
        normalize_by_length: bool,
        hidden_mode: HiddenInfoMode,
    ) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Invalid("critic beta must be > 0".into()));
        }
        if pi_theta.vocab() != pi_ref.vocab() || pi_theta.mode() != pi_ref.mode() {
            return Err(Error::Invalid("critic heads must share vocab and mode".into()));
        }
        Ok(Self {
            pi_theta,
            pi_ref,
            beta,
            normalize_by_length,
            hidden_mode,
        })
    }

    /// Whether scoring needs the task's real hidden info.
    pub fn reads_hidden_info(&self) -> bool {
        self.hidden_mode == HiddenInfoMode::Full
    }

    /// The conditioning tokens actually fed to the heads.
    pub fn conditioning(&self, hidden: &[Token]) -> Vec<Token> {
        match self.hidden_mode {
            HiddenInfoMode::Full => hidden.to_vec(),
            HiddenInfoMode::Blank => vec![BLANK.to_owned()],
        }
    }

    fn reduce(&self, log_ratio_sum: f64, len: usize) -> f64 {
        if self.normalize_by_length {
            log_ratio_sum / len as f64
        } else {
            log_ratio_sum
        }
    }

    /// `A_θ(o, a, c)`; `hidden` is replaced by the blank token in blank mode.
    pub fn advantage(&self, observation: &[Token], action: &[Token], hidden: &[Token]) -> Result<f64> {
        let cond = self.conditioning(hidden);
        let ctx = Context::with_hidden(&cond, observation);
        let theta = self.pi_theta.action_logprob(&ctx, action)?;
        let reference = self.pi_ref.action_logprob(&ctx, action)?;
        let diff: f64 = theta
            .per_token
            .iter()
            .zip(&reference.per_token)
            .map(|(t, r)| t - r)
            .sum();
        Ok(self.reduce(diff, action.len()))
    }

    /// Advantages of several candidate actions at one `(o, c)`.
    pub fn advantages(&self, observation: &[Token], candidates: &[Vec<Token>], hidden: &[Token]) -> Result<Vec<f64>> {
        let cond = self.conditioning(hidden);
        let ctx = Context::with_hidden(&cond, observation);
        let theta = self.pi_theta.prepare(&ctx);
        let reference = self.pi_ref.prepare(&ctx);
        candidates
            .iter()
            .map(|a| {
                if a.is_empty() {
                    return Err(Error::Invalid("action must be nonempty".into()));
                }
                let ids = self.pi_theta.vocab().encode(a)?;
                let t = theta.action_logprob(&ids, None, 0.0).total;
                let r = reference.action_logprob(&ids, None, 0.0).total;
                Ok(self.reduce(t - r, ids.len()))
            })
            .collect()
    }

    /// Adds `scale * ∇_θ A` for one turn and returns `A`.
    fn accumulate_advantage(
        &self,
        grad: &mut Gradient,
        scale: f64,
        observation: &[Token],
        action: &[Token],
        cond: &[Token],
    ) -> Result<f64> {
        let ctx = Context::with_hidden(cond, observation);
        let norm = if self.normalize_by_length {
            1.0 / action.len() as f64
        } else {
            1.0
        };
        let theta = self
            .pi_theta
            .accumulate_logprob_grad(grad, scale * norm, &ctx, action)?;
        let reference = self.pi_ref.action_logprob(&ctx, action)?;
        Ok(self.reduce(theta.total - reference.total, action.len()))
    }

    pub fn trajectory_advantage(&self, traj: &Trajectory, hidden: &[Token]) -> Result<f64> {
        traj.turns()
            .iter()
            .map(|t| self.advantage(&t.observation, &t.action, hidden))
            .sum()
    }

    /// `β (Σ_t A⁺ − Σ_t A⁻)`.
    pub fn margin(&self, pair: &TrajectoryPair, hidden: &[Token]) -> Result<f64> {
        Ok(self.beta
            * (self.trajectory_advantage(pair.chosen(), hidden)?
                - self.trajectory_advantage(pair.rejected(), hidden)?))
    }

    pub fn bt_loss(&self, pair: &TrajectoryPair, hidden: &[Token]) -> Result<f64> {
        Ok(preference_loss(self.margin(pair, hidden)?))
    }

    /// Loss and gradient of `bt_loss + λ · mean per-token NLL(chosen)`.
    pub fn pair_loss_grad(&self, pair: &TrajectoryPair, hidden: &[Token], lambda_nll: f64) -> Result<(PairTerms, Gradient)> {
        let cond = self.conditioning(hidden);
        let mut g_chosen = Gradient::new();
        let mut g_rejected = Gradient::new();
        let mut sum_chosen = 0.0;
        let mut sum_rejected = 0.0;
        for t in pair.chosen().turns() {
            sum_chosen += self.accumulate_advantage(&mut g_chosen, 1.0, &t.observation, &t.action, &cond)?;
        }
        for t in pair.rejected().turns() {
            sum_rejected += self.accumulate_advantage(&mut g_rejected, 1.0, &t.observation, &t.action, &cond)?;
        }
        let margin = self.beta * (sum_chosen - sum_rejected);
        let bt = preference_loss(margin);
        let slope = preference_loss_slope(margin) * self.beta;
        let mut grad = Gradient::new();
        grad.add_scaled(&g_chosen, slope);
        grad.add_scaled(&g_rejected, -slope);
        let mut nll = 0.0;
        if lambda_nll != 0.0 {
            let n_tokens: usize = pair.chosen().turns().iter().map(|t| t.action.len()).sum();
            let scale = -lambda_nll / n_tokens as f64;
            let mut total = 0.0;
            for t in pair.chosen().turns() {
                let ctx = Context::with_hidden(&cond, &t.observation);
                total += self
                    .pi_theta
                    .accumulate_logprob_grad(&mut grad, scale, &ctx, &t.action)?
                    .total;
            }
            nll = -total / n_tokens as f64;
        }
        Ok((
            PairTerms {
                bt,
                nll,
                margin,
                loss: bt + lambda_nll * nll,
            },
            grad,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = CriticCheckpoint {
            v: 1,
            beta: self.beta,
            normalize_by_length: self.normalize_by_length,
            hidden_mode: self.hidden_mode,
            reference_sha256: self.pi_ref.fingerprint()?,
            pi_theta: serde_json::from_str(&self.pi_theta.to_json()?)?,
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    /// Loads `π_θ` and checks it was trained against `pi_ref`.
    pub fn load(path: impl AsRef<Path>, pi_ref: FrozenPolicy) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let ckpt: CriticCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.reference_sha256 != pi_ref.fingerprint()? {
            return Err(Error::Checkpoint(format!(
                "{} was trained against a different reference policy",
                path.display()
            )));
        }
        let pi_theta = PolicyModel::from_json(&ckpt.pi_theta.to_string())?;
        Self::with_reference(pi_theta, pi_ref, ckpt.beta, ckpt.normalize_by_length, ckpt.hidden_mode)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriticCheckpoint {
    v: u32,
    beta: f64,
    normalize_by_length: bool,
    hidden_mode: HiddenInfoMode,
    reference_sha256: String,
    pi_theta: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms {
    pub bt: f64,
    pub nll: f64,
    pub margin: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_nll: f64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self {
            lr: 20.0,
            epochs: 16,
            batch_size: 8,
            lambda_nll: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticReport {
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub final_bt_loss: f64,
    /// Fraction of pairs with a strictly positive margin after training.
    pub pair_accuracy: f64,
    pub steps: usize,
}

/// Looks up `c` for every pair on the calling thread (blank critics skip it).
pub fn pair_hidden_info(critic: &CriticModel, pairs: &[TrajectoryPair], tasks: &TaskIndex) -> Result<Vec<Vec<Token>>> {
    pairs
        .iter()
        .map(|p| {
            if critic.reads_hidden_info() {
                Ok(tasks.hidden_info(p.task_id())?.to_vec())
            } else {
                Ok(vec![BLANK.to_owned()])
            }
        })
        .collect()
}

fn evaluate(critic: &CriticModel, pairs: &[TrajectoryPair], hidden: &[Vec<Token>]) -> Result<(f64, f64, f64)> {
    let margins: Vec<f64> = pairs
        .par_iter()
        .zip(hidden.par_iter())
        .map(|(p, c)| critic.margin(p, c))
        .collect::<Result<_>>()?;
    let n = margins.len() as f64;
    let loss = margins.iter().map(|&m| preference_loss(m)).sum::<f64>() / n;
    let acc = margins.iter().filter(|&&m| m > 0.0).count() as f64 / n;
    let mean_margin = margins.iter().sum::<f64>() / n;
    Ok((loss, mean_margin, acc))
}

/// Mini-batch gradient descent on the mean pair loss.
pub fn train_critic<R: Rng>(
    critic: &mut CriticModel,
    pairs: &[TrajectoryPair],
    tasks: &TaskIndex,
    config: &CriticTrainConfig,
    rng: &mut R,
) -> Result<CriticReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("critic training pairs"));
    }
    let hidden = pair_hidden_info(critic, pairs, tasks)?;
    let (initial_loss, _, _) = evaluate(critic, pairs, &hidden)?;
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut margin_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch) {
            let results: Vec<(PairTerms, Gradient)> = chunk
                .par_iter()
                .map(|&i| critic.pair_loss_grad(&pairs[i], &hidden[i], config.lambda_nll))
                .collect::<Result<_>>()?;
            let mut grad = Gradient::new();
            for (terms, g) in &results {
                if !terms.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: "critic",
                        step: steps,
                        value: terms.loss,
                    });
                }
                loss_sum += terms.loss;
                margin_sum += terms.margin;
                correct += usize::from(terms.margin > 0.0);
                grad.add_scaled(g, 1.0);
            }
            critic.pi_theta.apply(&grad, -config.lr / chunk.len() as f64);
            steps += 1;
        }
        let n = pairs.len() as f64;
        epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / n,
            margin: margin_sum / n,
            accuracy: correct as f64 / n,
        });
    }
    let (final_bt_loss, _, pair_accuracy) = evaluate(critic, pairs, &hidden)?;
    Ok(CriticReport {
        initial_loss,
        epochs,
        final_bt_loss,
        pair_accuracy,
        steps,
    })
}
