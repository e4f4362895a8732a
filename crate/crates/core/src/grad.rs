//! Analytic gradients of the training objective, a central finite-difference
//! oracle, and the gradient check comparing the two.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{Catalog, UserSequence};
use crate::error::{Error, Result};
use crate::loss::{build_total_loss, prepare_batch, LossBreakdown, LossConfig, PreparedUser};
use crate::model::{ModelConfig, ParamKind, ParamLeaves, Parameters};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Gradients per parameter block; embedding tables carry touched rows only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub dense: BTreeMap<String, Tensor>,
    pub sparse: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
}

impl GradientSet {
    /// l2 norm over every stored coordinate.
    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for t in self.dense.values() {
            s += t.data.iter().map(|x| x * x).sum::<f64>();
        }
        for rows in self.sparse.values() {
            for row in rows.values() {
                s += row.iter().map(|x| x * x).sum::<f64>();
            }
        }
        s.sqrt()
    }

    pub fn scale(&mut self, f: f64) {
        for t in self.dense.values_mut() {
            for x in t.data.iter_mut() {
                *x *= f;
            }
        }
        for rows in self.sparse.values_mut() {
            for row in rows.values_mut() {
                for x in row.iter_mut() {
                    *x *= f;
                }
            }
        }
    }

    /// Gradient at a flat coordinate of a block, zero if absent.
    pub fn at(&self, block: &str, flat: usize, cols: usize) -> f64 {
        if let Some(t) = self.dense.get(block) {
            return t.data[flat];
        }
        if let Some(rows) = self.sparse.get(block) {
            if let Some(row) = rows.get(&(flat / cols)) {
                return row[flat % cols];
            }
        }
        0.0
    }
}

/// Everything one optimizer step needs from a batch.
pub struct BatchGradients {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    pub grads: GradientSet,
    pub expert_loads: Vec<Vec<usize>>,
}

/// Backward pass over an already-prepared batch.
pub fn compute_gradients_prepared(
    batch: &[PreparedUser],
    catalog: &Catalog,
    params: &Parameters,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
) -> Result<BatchGradients> {
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new(params);
    let (root, breakdown, expert_loads) =
        build_total_loss(&mut tape, batch, &mut leaves, catalog, mcfg, lcfg)?;
    let node_grads = tape.backward(root);

    let mut grads = GradientSet::default();
    for (name, id) in leaves.leaf_ids() {
        match params.kind(name) {
            ParamKind::NoGrad => continue,
            ParamKind::Dense => {
                let g = node_grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&params.get(name).shape));
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient { block: name.clone() });
                }
                grads.dense.insert(name.clone(), g);
            }
            ParamKind::Table => {
                let full = node_grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&params.get(name).shape));
                if !full.all_finite() {
                    return Err(Error::NonFiniteGradient { block: name.clone() });
                }
                let mut rows = BTreeMap::new();
                if let Some(touched) = leaves.touched_rows(name) {
                    for &r in touched {
                        rows.insert(r, full.row(r).to_vec());
                    }
                }
                grads.sparse.insert(name.clone(), rows);
            }
        }
    }

    Ok(BatchGradients {
        loss: tape.value(root).item(),
        breakdown,
        grads,
        expert_loads,
    })
}

/// Loss value and gradients over raw user sequences; the loss value is
/// bit-identical to [`crate::loss::total_loss`] at the same rng state.
pub fn compute_gradients(
    users: &[UserSequence],
    catalog: &Catalog,
    params: &Parameters,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradientSet)> {
    let batch = prepare_batch(users, catalog, mcfg, lcfg, None, rng)?;
    let bg = compute_gradients_prepared(&batch, catalog, params, mcfg, lcfg)?;
    Ok((bg.loss, bg.grads))
}

/// Objective value only, for the oracle's perturbed evaluations.
pub fn loss_value_prepared(
    batch: &[PreparedUser],
    catalog: &Catalog,
    params: &Parameters,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new(params);
    let (root, _, _) = build_total_loss(&mut tape, batch, &mut leaves, catalog, mcfg, lcfg)?;
    Ok(tape.value(root).item())
}

pub const FD_EPS: f64 = 1e-5;

/// Central finite differences at sampled coordinates: for each block, up to
/// `samples_per_block` coordinates (tables restricted to rows the analytic
/// pass touched). Returns (flat coordinate, derivative) lists per block.
pub fn finite_difference_gradients(
    batch: &[PreparedUser],
    catalog: &Catalog,
    params: &Parameters,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    analytic: &GradientSet,
    eps: f64,
    samples_per_block: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<(usize, f64)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();

    let block_coords = |name: &str, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let cols = params.get(name).cols();
        let candidates: Vec<usize> = if let Some(rows) = analytic.sparse.get(name) {
            rows.keys()
                .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
                .collect()
        } else {
            (0..params.get(name).len()).collect()
        };
        if candidates.len() <= samples_per_block {
            candidates
        } else {
            candidates
                .choose_multiple(rng, samples_per_block)
                .copied()
                .collect()
        }
    };

    let names: Vec<String> = analytic
        .dense
        .keys()
        .chain(analytic.sparse.keys())
        .cloned()
        .collect();
    let mut work = params.clone();
    for name in names {
        let coords = block_coords(&name, &mut rng);
        let mut pairs = Vec::with_capacity(coords.len());
        for flat in coords {
            let orig = params.get(&name).data[flat];
            work.get_mut(&name).data[flat] = orig + eps;
            let up = loss_value_prepared(batch, catalog, &work, mcfg, lcfg)?;
            work.get_mut(&name).data[flat] = orig - eps;
            let down = loss_value_prepared(batch, catalog, &work, mcfg, lcfg)?;
            work.get_mut(&name).data[flat] = orig;
            pairs.push((flat, (up - down) / (2.0 * eps)));
        }
        out.insert(name, pairs);
    }
    Ok(out)
}

/// Relative error with a floor guarding near-zero gradients.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    /// Fraction of sampled coordinates with relative error <= 1e-4.
    pub frac_tight: f64,
    pub pass: bool,
}

pub const GRAD_TOL_MAX: f64 = 1e-3;
pub const GRAD_TOL_TIGHT: f64 = 1e-4;
pub const GRAD_TIGHT_FRACTION: f64 = 0.99;

/// Compare analytic gradients against oracle samples.
pub fn compare_gradients(
    params: &Parameters,
    analytic: &GradientSet,
    oracle: &BTreeMap<String, Vec<(usize, f64)>>,
) -> GradCheckReport {
    let mut blocks = Vec::new();
    let mut tight = 0usize;
    let mut total = 0usize;
    for (name, pairs) in oracle {
        let cols = params.get(name).cols();
        let mut errs: Vec<f64> = pairs
            .iter()
            .map(|&(flat, fd)| rel_err(analytic.at(name, flat, cols), fd))
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let max = errs.last().copied().unwrap_or(0.0);
        let median = if errs.is_empty() { 0.0 } else { errs[errs.len() / 2] };
        tight += errs.iter().filter(|&&e| e <= GRAD_TOL_TIGHT).count();
        total += errs.len();
        blocks.push(BlockCheck {
            block: name.clone(),
            coords: pairs.len(),
            max_rel_err: max,
            median_rel_err: median,
            pass: max <= GRAD_TOL_MAX,
        });
    }
    let frac_tight = if total == 0 { 1.0 } else { tight as f64 / total as f64 };
    let pass = blocks.iter().all(|b| b.pass) && frac_tight >= GRAD_TIGHT_FRACTION;
    GradCheckReport { blocks, frac_tight, pass }
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:>7} {:>14} {:>14} {:>6}\n",
            "block", "coords", "max_rel_err", "median_rel_err", "status"
        ));
        for b in &self.blocks {
            s.push_str(&format!(
                "{:<28} {:>7} {:>14.3e} {:>14.3e} {:>6}\n",
                b.block,
                b.coords,
                b.max_rel_err,
                b.median_rel_err,
                if b.pass { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "coords within {:.0e}: {:.2}%  overall: {}\n",
            GRAD_TOL_TIGHT,
            self.frac_tight * 100.0,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,coords,max_rel_err,median_rel_err,status\n");
        for b in &self.blocks {
            s.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                b.block,
                b.coords,
                b.max_rel_err,
                b.median_rel_err,
                if b.pass { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

/// End-to-end gradient check: analytic backward pass vs the oracle on a
/// user batch, with `samples_per_block` coordinates per block.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    users: &[UserSequence],
    catalog: &Catalog,
    params: &Parameters,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    samples_per_block: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = prepare_batch(users, catalog, mcfg, lcfg, None, &mut rng)?;
    let bg = compute_gradients_prepared(&batch, catalog, params, mcfg, lcfg)?;
    let oracle = finite_difference_gradients(
        &batch,
        catalog,
        params,
        mcfg,
        lcfg,
        &bg.grads,
        FD_EPS,
        samples_per_block,
        seed,
    )?;
    Ok(compare_gradients(params, &bg.grads, &oracle))
}
