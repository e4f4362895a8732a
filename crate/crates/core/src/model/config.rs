//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::data::SideVocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_routed: usize,
    pub num_shared: usize,
    pub top_k: usize,
    /// Hidden width of each expert.
    pub expert_hidden: usize,
    /// Fixed step for the sign update on expert selection biases.
    pub balance_step: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            num_routed: 4,
            num_shared: 1,
            top_k: 2,
            expert_hidden: 64,
            balance_step: 0.001,
        }
    }
}

/// Independent component switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub tsn: bool,
    pub msp: bool,
    pub moe: bool,
    pub sw_rope: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            tsn: true,
            msp: true,
            moe: true,
            sw_rope: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    /// Extra future sessions predicted per context token.
    pub msp_extra_depth: usize,
    pub ff_hidden: usize,
    pub moe: MoeConfig,
    pub toggles: Toggles,
    pub temperature: f64,
    // Vocabulary sizes, taken from the dataset.
    pub num_items: usize,
    pub num_scenarios: usize,
    pub side_vocab: SideVocab,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            num_blocks: 2,
            num_heads: 2,
            max_seq_len: 256,
            msp_extra_depth: 1,
            ff_hidden: 256,
            moe: MoeConfig::default(),
            toggles: Toggles::default(),
            temperature: 1.0,
            num_items: 0,
            num_scenarios: 3,
            side_vocab: SideVocab::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_blocks == 0 || self.num_heads == 0 {
            return Err(Error::config("dim, num_blocks, num_heads must be positive"));
        }
        if self.dim % (2 * self.num_heads) != 0 {
            return Err(Error::config(format!(
                "dim ({}) must be divisible by 2*num_heads ({}) for rotary pairs",
                self.dim,
                2 * self.num_heads
            )));
        }
        if self.toggles.moe && self.moe.num_routed > 0 && self.moe.top_k > self.moe.num_routed {
            return Err(Error::config("moe top_k must be <= num_routed"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.max_seq_len < 3 {
            return Err(Error::config("max_seq_len too small"));
        }
        Ok(())
    }

    /// Bind vocabulary sizes to a dataset's.
    pub fn for_dataset(mut self, dataset: &crate::data::Dataset) -> Self {
        self.num_items = dataset.catalog.len();
        self.num_scenarios = dataset.scenarios.len();
        self.side_vocab = dataset.side_vocab;
        self
    }

    /// Sizes for a given hidden width with the other defaults scaled along.
    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self.ff_hidden = 4 * dim;
        self.moe.expert_hidden = dim;
        self
    }
}
