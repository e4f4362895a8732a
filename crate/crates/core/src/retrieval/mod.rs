//! Item index, top-k retrieval, hit-rate evaluation, nearline cache.

mod cache;
mod eval;
mod index;

pub use cache::{nearline_refresh, NearlineCache};
pub use eval::{evaluate, hit_rate_at_k, EvalConfig, EvalReport, GroundTruth};
pub use index::{
    build_index, item_embedding, retrieve_topk, IndexConfig, IndexMode, ItemIndex,
    RetrievalResult,
};
