//! The session-wise autoregressive network.

pub mod config;
pub mod forward;
pub mod mask;
pub mod params;
pub mod rope;

pub use config::{ModelConfig, MoeConfig, Toggles};
pub use forward::{
    attention_layer, embed_tokens, ffn_apply, forward, route_moe, run_forward,
    update_balance_biases, ForwardOutput, HiddenStates,
};
pub use mask::{build_session_mask, mask_rule, SessionMask};
pub use params::{param_count, Param, ParamKind, ParamLeaves, Parameters};
pub use rope::sw_rope_rotate;
