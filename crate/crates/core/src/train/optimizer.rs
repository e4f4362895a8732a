//! The split optimizer: Adam with bias correction for dense blocks, Adagrad
//! over touched rows for embedding tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grad::GradientSet;
use crate::model::Parameters;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    /// Adam step count (shared across dense blocks).
    pub step: u64,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    /// Per-table Adagrad accumulators, rows created on first touch.
    pub adagrad: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        OptimizerState {
            lr,
            step: 0,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            adagrad: BTreeMap::new(),
        }
    }
}

/// One update. Dense blocks move by bias-corrected Adam; embedding rows in
/// the gradient move by Adagrad; everything else stays put.
pub fn optimizer_step(params: &mut Parameters, grads: &GradientSet, state: &mut OptimizerState) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);

    for (name, g) in &grads.dense {
        let p = params.get_mut(name);
        assert_eq!(p.shape, g.shape, "gradient shape mismatch for {}", name);
        let m = state
            .adam_m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&g.shape));
        let v = state
            .adam_v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&g.shape));
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= state.lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    for (name, rows) in &grads.sparse {
        let table = params.get_mut(name);
        let cols = table.cols();
        let acc_rows = state.adagrad.entry(name.clone()).or_default();
        for (&r, g) in rows {
            assert_eq!(g.len(), cols, "gradient row width mismatch for {}", name);
            let acc = acc_rows.entry(r).or_insert_with(|| vec![0.0; cols]);
            let row = table.row_mut(r);
            for i in 0..cols {
                acc[i] += g[i] * g[i];
                row[i] -= state.lr * g[i] / (acc[i] + ADAGRAD_EPS).sqrt();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Param, ParamKind};

    fn probe_params() -> Parameters {
        let mut p = Parameters::init(
            &ModelConfig {
                num_items: 4,
                ..ModelConfig::default()
            },
            0,
        );
        p.insert(
            "probe.w".into(),
            Param {
                tensor: Tensor::from_vec(&[1], vec![1.0]),
                kind: ParamKind::Dense,
            },
        );
        p
    }

    #[test]
    fn zero_gradient_leaves_params_but_advances_step() {
        let mut params = probe_params();
        let before = params.clone();
        let mut state = OptimizerState::new(1e-3);
        let mut grads = GradientSet::default();
        grads.dense.insert("probe.w".into(), Tensor::zeros(&[1]));
        optimizer_step(&mut params, &grads, &mut state);
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adagrad_row_hand_arithmetic() {
        // g = 3, acc = 0, lr = 0.1: acc becomes 9, the row moves by
        // -lr * g / sqrt(acc) = -0.1 (up to the tiny epsilon).
        let mut params = probe_params();
        params.get_mut("emb.item").row_mut(2).fill(0.5);
        let mut state = OptimizerState::new(0.1);
        let mut grads = GradientSet::default();
        let dim = params.get("emb.item").cols();
        let mut rows = BTreeMap::new();
        rows.insert(2usize, vec![3.0; dim]);
        grads.sparse.insert("emb.item".into(), rows);
        optimizer_step(&mut params, &grads, &mut state);
        let acc = &state.adagrad["emb.item"][&2];
        assert!(acc.iter().all(|&a| (a - 9.0).abs() < 1e-12));
        for &x in params.get("emb.item").row(2) {
            assert!((x - 0.4).abs() < 1e-6, "x {}", x);
        }
        // Untouched rows keep no accumulator.
        assert_eq!(state.adagrad["emb.item"].len(), 1);
    }

    #[test]
    fn adam_two_step_hand_trace() {
        let mut params = probe_params();
        let mut state = OptimizerState::new(0.01);
        let mut grads = GradientSet::default();
        grads
            .dense
            .insert("probe.w".into(), Tensor::from_vec(&[1], vec![1.0]));

        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=2 {
            optimizer_step(&mut params, &grads, &mut state);
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1);
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2);
            let mhat = m / (1.0 - ADAM_BETA1.powi(t));
            let vhat = v / (1.0 - ADAM_BETA2.powi(t));
            w -= 0.01 * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        assert!((params.get("probe.w").data[0] - w).abs() < 1e-15);
    }

    #[test]
    fn dense_and_sparse_state_never_mix() {
        let mut params = probe_params();
        let mut state = OptimizerState::new(1e-3);
        let mut grads = GradientSet::default();
        grads
            .dense
            .insert("final_ln.g".into(), Tensor::zeros(&params.get("final_ln.g").shape));
        let mut rows = BTreeMap::new();
        rows.insert(0usize, vec![1.0; params.get("emb.item").cols()]);
        grads.sparse.insert("emb.item".into(), rows);
        optimizer_step(&mut params, &grads, &mut state);
        assert!(state.adam_m.contains_key("final_ln.g"));
        assert!(!state.adam_m.contains_key("emb.item"));
        assert!(state.adagrad.contains_key("emb.item"));
        assert!(!state.adagrad.contains_key("final_ln.g"));
    }
}
