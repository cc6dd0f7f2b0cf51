//! The zero-shot seed actor: a hashed-linear policy fit by maximum
//! likelihood to an imperfect scripted collaborator on the slot game.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{nll_grad, TrainReport};
use crate::critic::EpochStats;
use crate::env::scripted::{DemonstratorConfig, NoisyDemonstrator};
use crate::env::{sample_task, EnvConfig, SlotEpisode, END};
use crate::eval::{run_episode, stream_rng, Selector};
use crate::policy::{Gradient, ModelMode, PolicyModel, Vocab};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmstartConfig {
    pub demonstrations: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Task seeds for demonstrations start here, away from train and eval tasks.
    pub task_offset: u64,
    pub demonstrator: DemonstratorConfig,
}

impl Default for WarmstartConfig {
    fn default() -> Self {
        Self {
            demonstrations: 4000,
            lr: 0.5,
            epochs: 10,
            batch_size: 16,
            task_offset: 2_000_000,
            demonstrator: DemonstratorConfig::default(),
        }
    }
}

pub fn slot_vocab(env: &EnvConfig) -> Result<Arc<Vocab>> {
    Ok(Arc::new(Vocab::new(env.vocab(), Some(END))?))
}

/// Demonstrator rollouts on fresh tasks; deterministic in `seed`.
pub fn demonstrations(env: &EnvConfig, config: &WarmstartConfig, seed: u64) -> Result<Vec<Trajectory>> {
    let demo = NoisyDemonstrator {
        env: *env,
        params: config.demonstrator,
    };
    (0..config.demonstrations as u64)
        .map(|i| {
            let task = sample_task(env, config.task_offset + seed * 1_000_003 + i);
            let mut ep = SlotEpisode::new(*env, task)?;
            run_episode(&demo, &mut ep, &mut stream_rng(seed ^ 0x5eed, i), &mut Selector::Identity)
        })
        .collect()
}

/// Fits a fresh model to demonstrations by mini-batch gradient descent on
/// mean per-token NLL.
pub fn train_seed_actor<R: Rng>(
    env: &EnvConfig,
    mode: ModelMode,
    hash_seed: u64,
    config: &WarmstartConfig,
    seed: u64,
    rng: &mut R,
) -> Result<(PolicyModel, TrainReport)> {
    env.validate()?;
    let mut actor = PolicyModel::fresh(mode, slot_vocab(env)?, hash_seed);
    if config.demonstrations == 0 || config.epochs == 0 {
        return Ok((
            actor,
            TrainReport {
                epochs: Vec::new(),
                steps: 0,
                skipped: 0,
            },
        ));
    }
    let demos = demonstrations(env, config, seed)?;
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        skipped: 0,
    };
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &demos[i]).collect();
            let mut grad = Gradient::new();
            let loss = nll_grad(&actor, &batch, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "warmstart",
                    step: report.steps,
                    value: loss,
                });
            }
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
    Ok((actor, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn demonstrations_are_deterministic() {
        let env = EnvConfig::default();
        let cfg = WarmstartConfig {
            demonstrations: 20,
            ..WarmstartConfig::default()
        };
        assert_eq!(demonstrations(&env, &cfg, 3).unwrap(), demonstrations(&env, &cfg, 3).unwrap());
        assert_ne!(demonstrations(&env, &cfg, 3).unwrap(), demonstrations(&env, &cfg, 4).unwrap());
    }

    #[test]
    fn fitting_lowers_demonstration_nll() {
        let env = EnvConfig::default();
        let cfg = WarmstartConfig {
            demonstrations: 60,
            epochs: 1,
            ..WarmstartConfig::default()
        };
        let mode = ModelMode::LinearHashed(FeatureConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (fit, report) = train_seed_actor(&env, mode, 1, &cfg, 0, &mut rng).unwrap();
        let fresh = PolicyModel::fresh(mode, slot_vocab(&env).unwrap(), 1);
        let demos = demonstrations(&env, &cfg, 0).unwrap();
        let refs: Vec<&Trajectory> = demos.iter().collect();
        assert!(nll_grad(&fit, &refs, None).unwrap() < nll_grad(&fresh, &refs, None).unwrap());
        assert!(report.steps > 0);
    }
}
