//! Negative sampling and the full training objective: per-session
//! contrastive loss, click/pay cascade losses, deeper-session prediction
//! targets, and multi-scene normalized aggregation.

mod objective;
mod sampling;

pub use objective::{
    build_total_loss, cascade_losses, embed_items, msp_targets, nce_loss, sample_logits,
    total_loss, LossBreakdown, LossConfig, ScenarioLoss,
};
pub use objective::{prepare_batch, prepare_user, PreparedSession, PreparedUser};
pub use sampling::{sample_negatives, NegativeSampler};
