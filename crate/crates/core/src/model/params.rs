//! Learnable state: embedding tables, token-kind projections, attention
//! blocks, expert networks, and the deeper-session prediction heads.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

/// How a parameter block participates in optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Dense block, updated by Adam.
    Dense,
    /// Embedding table with row-sparse gradients, updated by Adagrad.
    /// The last row of every table is the absent-slot row.
    Table,
    /// State updated outside gradient descent (expert balance biases).
    NoGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    entries: BTreeMap<String, Param>,
}

impl Parameters {
    /// No blocks; checkpoint loading fills entries one by one.
    pub fn empty() -> Self {
        Parameters {
            entries: BTreeMap::new(),
        }
    }

    /// Initialize all parameter blocks for a config, deterministically.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut entries = BTreeMap::new();

        let table = |entries: &mut BTreeMap<String, Param>,
                         rng: &mut ChaCha8Rng,
                         name: &str,
                         rows: usize| {
            let t = normal_tensor(rng, &[rows, d], 0.1);
            entries.insert(name.to_string(), Param { tensor: t, kind: ParamKind::Table });
        };
        // Every table gets a dedicated absent row at the end.
        table(&mut entries, &mut rng, "emb.item", config.num_items + 1);
        table(&mut entries, &mut rng, "emb.action", 3);
        table(&mut entries, &mut rng, "emb.cat1", config.side_vocab.cat1 + 1);
        table(&mut entries, &mut rng, "emb.cat2", config.side_vocab.cat2 + 1);
        table(&mut entries, &mut rng, "emb.seller", config.side_vocab.seller + 1);
        table(&mut entries, &mut rng, "emb.price", config.side_vocab.price_bucket + 1);
        table(&mut entries, &mut rng, "emb.tod", config.side_vocab.time_buckets + 1);
        table(&mut entries, &mut rng, "emb.scenario", config.num_scenarios + 1);

        let dense = |entries: &mut BTreeMap<String, Param>, name: String, t: Tensor| {
            entries.insert(name, Param { tensor: t, kind: ParamKind::Dense });
        };

        // Token-kind projections at the embedding and first-block stages;
        // near-identity at init so the signal passes through untouched.
        for stage in 0..2 {
            for kind in tsn_kinds(config) {
                dense(
                    &mut entries,
                    format!("tsn.s{}.{}.w", stage, kind),
                    near_identity(&mut rng, d),
                );
                dense(
                    &mut entries,
                    format!("tsn.s{}.{}.b", stage, kind),
                    Tensor::zeros(&[d]),
                );
            }
        }

        for b in 0..config.num_blocks {
            let p = format!("blk{}", b);
            dense(&mut entries, format!("{}.ln1.g", p), ones(&[d]));
            dense(&mut entries, format!("{}.ln1.b", p), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                dense(
                    &mut entries,
                    format!("{}.attn.{}", p, w),
                    xavier(&mut rng, d, d),
                );
            }
            dense(&mut entries, format!("{}.ln2.g", p), ones(&[d]));
            dense(&mut entries, format!("{}.ln2.b", p), Tensor::zeros(&[d]));

            if moe_active(config) {
                dense(
                    &mut entries,
                    format!("{}.moe.router.w", p),
                    xavier(&mut rng, d, config.moe.num_routed),
                );
                entries.insert(
                    format!("{}.moe.bias", p),
                    Param {
                        tensor: Tensor::zeros(&[config.moe.num_routed]),
                        kind: ParamKind::NoGrad,
                    },
                );
                for e in 0..config.moe.num_shared {
                    init_ffn(&mut rng, &mut entries, &format!("{}.moe.shared{}", p, e), d, config.moe.expert_hidden);
                }
                for e in 0..config.moe.num_routed {
                    init_ffn(&mut rng, &mut entries, &format!("{}.moe.exp{}", p, e), d, config.moe.expert_hidden);
                }
            } else {
                init_ffn(&mut rng, &mut entries, &format!("{}.ff", p), d, config.ff_hidden);
            }
        }

        dense(&mut entries, "final_ln.g".to_string(), ones(&[d]));
        dense(&mut entries, "final_ln.b".to_string(), Tensor::zeros(&[d]));

        if config.toggles.msp {
            for depth in 1..=config.msp_extra_depth {
                dense(
                    &mut entries,
                    format!("msp.h{}.w", depth),
                    near_identity(&mut rng, d),
                );
                dense(&mut entries, format!("msp.h{}.b", depth), Tensor::zeros(&[d]));
            }
        }

        Parameters { entries }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter block {}", name))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter block {}", name))
            .tensor
    }

    pub fn kind(&self, name: &str) -> ParamKind {
        self.entries[name].kind
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Trainable scalar count (balance biases excluded).
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind != ParamKind::NoGrad)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn insert(&mut self, name: String, param: Param) {
        self.entries.insert(name, param);
    }
}

/// One tape leaf per parameter block, shared across every use site in a
/// batch so gradients accumulate at a single node. Also records which
/// embedding rows were touched, for row-sparse gradient extraction.
pub struct ParamLeaves<'a> {
    pub params: &'a Parameters,
    ids: std::collections::HashMap<String, crate::tape::NodeId>,
    touched: BTreeMap<String, std::collections::BTreeSet<usize>>,
}

impl<'a> ParamLeaves<'a> {
    pub fn new(params: &'a Parameters) -> Self {
        ParamLeaves {
            params,
            ids: std::collections::HashMap::new(),
            touched: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut crate::tape::Tape, name: &str) -> crate::tape::NodeId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = tape.leaf(self.params.get(name).clone());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn touch(&mut self, name: &str, rows: &[usize]) {
        self.touched
            .entry(name.to_string())
            .or_default()
            .extend(rows.iter().copied());
    }

    pub fn leaf_ids(&self) -> impl Iterator<Item = (&String, crate::tape::NodeId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }

    pub fn touched_rows(&self, name: &str) -> Option<&std::collections::BTreeSet<usize>> {
        self.touched.get(name)
    }
}

fn tsn_kinds(config: &ModelConfig) -> Vec<&'static str> {
    if config.toggles.tsn {
        vec!["ctx", "item"]
    } else {
        vec!["shared"]
    }
}

fn moe_active(config: &ModelConfig) -> bool {
    config.toggles.moe && config.moe.num_routed > 0
}

fn init_ffn(
    rng: &mut ChaCha8Rng,
    entries: &mut BTreeMap<String, Param>,
    prefix: &str,
    d: usize,
    hidden: usize,
) {
    let mut dense = |name: String, t: Tensor| {
        entries.insert(name, Param { tensor: t, kind: ParamKind::Dense });
    };
    dense(format!("{}.w1", prefix), xavier(rng, d, hidden));
    dense(format!("{}.b1", prefix), Tensor::zeros(&[hidden]));
    dense(format!("{}.w2", prefix), xavier(rng, hidden, d));
    dense(format!("{}.b2", prefix), Tensor::zeros(&[d]));
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect(),
    )
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_tensor(rng, &[fan_in, fan_out], scale)
}

fn near_identity(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let mut t = normal_tensor(rng, &[d, d], 0.02);
    for i in 0..d {
        t.data[i * d + i] += 1.0;
    }
    t
}

fn ones(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n])
}

/// Closed-form trainable parameter count for a config; the scaling sweep and
/// the ablation checks rely on this being exact.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.dim;
    let sv = &config.side_vocab;
    let table_rows = (config.num_items + 1)
        + 3
        + (sv.cat1 + 1)
        + (sv.cat2 + 1)
        + (sv.seller + 1)
        + (sv.price_bucket + 1)
        + (sv.time_buckets + 1)
        + (config.num_scenarios + 1);
    let mut count = table_rows * d;

    let tsn_kinds = if config.toggles.tsn { 2 } else { 1 };
    count += 2 * tsn_kinds * (d * d + d);

    let ffn = |hidden: usize| d * hidden + hidden + hidden * d + d;
    for _ in 0..config.num_blocks {
        count += 2 * (2 * d); // two layer norms
        count += 4 * d * d; // attention projections
        if moe_active(config) {
            count += d * config.moe.num_routed; // router
            count += (config.moe.num_shared + config.moe.num_routed) * ffn(config.moe.expert_hidden);
        } else {
            count += ffn(config.ff_hidden);
        }
    }
    count += 2 * d; // final norm
    if config.toggles.msp {
        count += config.msp_extra_depth * (d * d + d);
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Toggles;

    fn base_config() -> ModelConfig {
        ModelConfig {
            num_items: 50,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn formula_matches_actual_for_all_toggle_combos() {
        for bits in 0..16u8 {
            let mut cfg = base_config();
            cfg.toggles = Toggles {
                tsn: bits & 1 != 0,
                msp: bits & 2 != 0,
                moe: bits & 4 != 0,
                sw_rope: bits & 8 != 0,
            };
            let params = Parameters::init(&cfg, 0);
            assert_eq!(
                params.num_trainable(),
                param_count(&cfg),
                "mismatch for toggles {:?}",
                cfg.toggles
            );
        }
    }

    #[test]
    fn tsn_toggle_changes_count_by_one_projection_per_stage() {
        let mut on = base_config();
        on.toggles = Toggles::default();
        let mut off = on.clone();
        off.toggles.tsn = false;
        let d = on.dim;
        assert_eq!(param_count(&on) - param_count(&off), 2 * (d * d + d));
    }

    #[test]
    fn deterministic_init() {
        let cfg = base_config();
        let a = Parameters::init(&cfg, 9);
        let b = Parameters::init(&cfg, 9);
        assert_eq!(a, b);
    }
}
