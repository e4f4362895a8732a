//! The training loop: batch sampling, gradient clipping, optimizer updates,
//! and expert balance maintenance.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Dataset, UserSequence};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::grad::compute_gradients_prepared;
use crate::loss::{prepare_batch, LossBreakdown, LossConfig};
use crate::model::{update_balance_biases, ModelConfig, Parameters};
use crate::train::optimizer::{optimizer_step, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Global-norm gradient clip; non-positive disables it.
    pub clip_norm: f64,
    pub seed: u64,
    /// Optimizer steps per incremental phase.
    pub steps_per_phase: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            clip_norm: 1.0,
            seed: 42,
            steps_per_phase: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Global optimizer step (1-based, after the update).
    pub step: u64,
    pub breakdown: LossBreakdown,
}

/// `steps` optimizer steps over a fixed user pool. Each step's batch and
/// negatives derive from (seed, label, global step), so a resumed run walks
/// the same randomness as an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_steps_on(
    users: &[UserSequence],
    catalog: &Catalog,
    params: &mut Parameters,
    opt: &mut OptimizerState,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
    loss_days: Option<(i64, i64)>,
    steps: usize,
    label: &str,
) -> Result<Vec<StepMetrics>> {
    if users.is_empty() {
        return Err(Error::data("training pool is empty"));
    }
    let mut series = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step_label = format!("{}:{}", label, opt.step);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &step_label));
        let batch: Vec<UserSequence> = if users.len() <= tcfg.batch_size {
            users.to_vec()
        } else {
            (0..users.len())
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, tcfg.batch_size)
                .map(|&i| users[i].clone())
                .collect()
        };
        let prepared = prepare_batch(&batch, catalog, mcfg, lcfg, loss_days, &mut rng)?;
        let bg = compute_gradients_prepared(&prepared, catalog, params, mcfg, lcfg)?;

        let mut grads = bg.grads;
        if tcfg.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > tcfg.clip_norm {
                grads.scale(tcfg.clip_norm / norm);
            }
        }
        optimizer_step(params, &grads, opt);
        if mcfg.toggles.moe && mcfg.moe.num_routed > 0 {
            update_balance_biases(params, &bg.expert_loads, mcfg.moe.balance_step);
        }
        series.push(StepMetrics {
            step: opt.step,
            breakdown: bg.breakdown,
        });
    }
    Ok(series)
}

/// Plain (non-incremental) training over the whole dataset.
pub fn train_steps(
    dataset: &Dataset,
    params: &mut Parameters,
    opt: &mut OptimizerState,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<StepMetrics>> {
    train_steps_on(
        &dataset.users,
        &dataset.catalog,
        params,
        opt,
        mcfg,
        lcfg,
        tcfg,
        None,
        steps,
        "train",
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    pub(crate) fn tiny_setup() -> (Dataset, ModelConfig, LossConfig, TrainConfig) {
        let scfg = SyntheticConfig {
            num_users: 10,
            num_items: 80,
            num_days: 5,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&scfg, 17).unwrap();
        let mcfg = ModelConfig {
            dim: 16,
            num_blocks: 1,
            num_heads: 2,
            ff_hidden: 32,
            max_seq_len: 512,
            moe: crate::model::MoeConfig {
                num_routed: 2,
                top_k: 1,
                expert_hidden: 16,
                ..Default::default()
            },
            ..ModelConfig::default()
        }
        .for_dataset(&ds);
        let lcfg = LossConfig {
            num_negatives: 8,
            ..LossConfig::default()
        };
        let tcfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        (ds, mcfg, lcfg, tcfg)
    }

    #[test]
    fn zero_steps_change_nothing() {
        let (ds, mcfg, lcfg, tcfg) = tiny_setup();
        let mut params = Parameters::init(&mcfg, 1);
        let before = params.clone();
        let mut opt = OptimizerState::new(1e-3);
        let series =
            train_steps(&ds, &mut params, &mut opt, &mcfg, &lcfg, &tcfg, 0).unwrap();
        assert!(series.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn same_seed_gives_identical_loss_series() {
        let (ds, mcfg, lcfg, tcfg) = tiny_setup();
        let run = || {
            let mut params = Parameters::init(&mcfg, 1);
            let mut opt = OptimizerState::new(1e-3);
            train_steps(&ds, &mut params, &mut opt, &mcfg, &lcfg, &tcfg, 5)
                .unwrap()
                .iter()
                .map(|m| m.breakdown.total)
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn short_run_reduces_loss() {
        let (ds, mcfg, lcfg, tcfg) = tiny_setup();
        let mut params = Parameters::init(&mcfg, 1);
        let mut opt = OptimizerState::new(1e-3);
        let series =
            train_steps(&ds, &mut params, &mut opt, &mcfg, &lcfg, &tcfg, 40).unwrap();
        let first: f64 = series[..5].iter().map(|m| m.breakdown.total).sum::<f64>() / 5.0;
        let last: f64 = series[series.len() - 5..]
            .iter()
            .map(|m| m.breakdown.total)
            .sum::<f64>()
            / 5.0;
        assert!(last < first, "loss did not drop: {} -> {}", first, last);
    }
}
