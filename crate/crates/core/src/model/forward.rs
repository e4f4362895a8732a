//! The forward pass: additive token embedding, token-kind projections,
//! masked multi-head attention with session-wise rotary encoding, and a
//! dense or expert-routed feed-forward, all built on the autodiff tape.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::data::{Token, TokenKind, TokenSequence};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::mask::{build_session_mask, SessionMask};
use crate::model::params::{ParamLeaves, Parameters};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Forward results addressed on the tape, so losses can extend the graph.
pub struct ForwardOutput {
    /// Final L×dim hidden matrix.
    pub hidden: NodeId,
    /// Session index -> 1×dim output at that session's context token.
    pub context_outputs: BTreeMap<usize, NodeId>,
    /// Per block, selections per routed expert during this pass.
    pub expert_loads: Vec<Vec<usize>>,
}

/// Plain-value forward results for inference paths.
pub struct HiddenStates {
    pub hidden: Tensor,
    pub context_outputs: BTreeMap<usize, Vec<f64>>,
}

/// Full forward pass on a fresh region of `tape`.
pub fn forward(
    tape: &mut Tape,
    seq: &TokenSequence,
    leaves: &mut ParamLeaves,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    if seq.len() > config.max_seq_len {
        return Err(Error::Model(format!(
            "sequence length {} exceeds max_seq_len {}",
            seq.len(),
            config.max_seq_len
        )));
    }
    let mask = build_session_mask(seq);
    let session_indices = Rc::new(seq.session_indices());

    let mut h = embed_tokens(tape, seq, leaves, config)?;
    h = apply_tsn(tape, h, seq, leaves, config, 1);

    let mut expert_loads = Vec::with_capacity(config.num_blocks);
    for layer in 0..config.num_blocks {
        let (next, loads) =
            attention_layer(tape, h, &mask, &session_indices, seq, leaves, config, layer)?;
        h = next;
        expert_loads.push(loads);
    }

    let g = leaves.get(tape, "final_ln.g");
    let b = leaves.get(tape, "final_ln.b");
    let hidden = tape.layer_norm(h, g, b);

    let mut context_outputs = BTreeMap::new();
    for (k, pos) in seq.context_positions() {
        let row = tape.gather_rows(hidden, Rc::new(vec![pos]));
        context_outputs.insert(k, row);
    }

    Ok(ForwardOutput {
        hidden,
        context_outputs,
        expert_loads,
    })
}

/// Forward returning plain values only.
pub fn run_forward(
    seq: &TokenSequence,
    params: &Parameters,
    config: &ModelConfig,
) -> Result<HiddenStates> {
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new(params);
    let out = forward(&mut tape, seq, &mut leaves, config)?;
    Ok(HiddenStates {
        hidden: tape.value(out.hidden).clone(),
        context_outputs: out
            .context_outputs
            .iter()
            .map(|(&k, &id)| (k, tape.value(id).data.clone()))
            .collect(),
    })
}

/// Row t = e_id + e_act + e_side + e_ctx, absent slots taking each table's
/// dedicated absent row, followed by the stage-0 token-kind projection.
pub fn embed_tokens(
    tape: &mut Tape,
    seq: &TokenSequence,
    leaves: &mut ParamLeaves,
    config: &ModelConfig,
) -> Result<NodeId> {
    let lookups: [(&str, Box<dyn Fn(&Token) -> Option<usize>>); 8] = [
        ("emb.item", Box::new(|t: &Token| t.item)),
        (
            "emb.action",
            Box::new(|t: &Token| t.action.map(|a| a as usize)),
        ),
        ("emb.cat1", Box::new(|t: &Token| t.side.cat1.map(|v| v as usize))),
        ("emb.cat2", Box::new(|t: &Token| t.side.cat2.map(|v| v as usize))),
        ("emb.seller", Box::new(|t: &Token| t.side.seller.map(|v| v as usize))),
        (
            "emb.price",
            Box::new(|t: &Token| t.side.price_bucket.map(|v| v as usize)),
        ),
        ("emb.tod", Box::new(|t: &Token| t.time_bucket.map(|v| v as usize))),
        ("emb.scenario", Box::new(|t: &Token| Some(t.scenario.0 as usize))),
    ];

    let mut sum: Option<NodeId> = None;
    for (table_name, slot) in lookups.iter() {
        let rows = leaves.params.get(table_name).rows();
        let absent = rows - 1;
        let mut idx = Vec::with_capacity(seq.len());
        for tok in &seq.tokens {
            let i = match slot(tok) {
                Some(i) => {
                    if i >= absent {
                        return Err(Error::Model(format!(
                            "id {} out of range for table {} ({} real rows)",
                            i, table_name, absent
                        )));
                    }
                    i
                }
                None => absent,
            };
            idx.push(i);
        }
        leaves.touch(table_name, &idx);
        let leaf = leaves.get(tape, table_name);
        let gathered = tape.gather_rows(leaf, Rc::new(idx));
        sum = Some(match sum {
            Some(acc) => tape.add(acc, gathered),
            None => gathered,
        });
    }
    let h = sum.expect("at least one embedding table");
    Ok(apply_tsn(tape, h, seq, leaves, config, 0))
}

/// Token-kind-conditional affine projection; a single shared projection when
/// the tsn toggle is off.
pub fn apply_tsn(
    tape: &mut Tape,
    h: NodeId,
    seq: &TokenSequence,
    leaves: &mut ParamLeaves,
    config: &ModelConfig,
    stage: usize,
) -> NodeId {
    if !config.toggles.tsn {
        let w = leaves.get(tape, &format!("tsn.s{}.shared.w", stage));
        let b = leaves.get(tape, &format!("tsn.s{}.shared.b", stage));
        let m = tape.matmul(h, w);
        return tape.add_row(m, b);
    }
    let l = seq.len();
    let mut out: Option<NodeId> = None;
    for (kind, name) in [(TokenKind::Context, "ctx"), (TokenKind::Item, "item")] {
        let pos: Vec<usize> = seq
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind == kind)
            .map(|(i, _)| i)
            .collect();
        if pos.is_empty() {
            continue;
        }
        let w = leaves.get(tape, &format!("tsn.s{}.{}.w", stage, name));
        let b = leaves.get(tape, &format!("tsn.s{}.{}.b", stage, name));
        let pos = Rc::new(pos);
        let rows = tape.gather_rows(h, pos.clone());
        let m = tape.matmul(rows, w);
        let m = tape.add_row(m, b);
        let scattered = tape.scatter_add_rows(m, pos, l);
        out = Some(match out {
            Some(acc) => tape.add(acc, scattered),
            None => scattered,
        });
    }
    out.unwrap_or(h)
}

/// One pre-norm block: masked multi-head attention with rotary queries/keys,
/// then the feed-forward (dense or expert-routed), both with residuals.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer(
    tape: &mut Tape,
    h: NodeId,
    mask: &SessionMask,
    session_indices: &Rc<Vec<usize>>,
    seq: &TokenSequence,
    leaves: &mut ParamLeaves,
    config: &ModelConfig,
    layer: usize,
) -> Result<(NodeId, Vec<usize>)> {
    let p = format!("blk{}", layer);
    let hd = config.head_dim();
    let mask_rc = Rc::new(mask.allowed.clone());

    let g1 = leaves.get(tape, &format!("{}.ln1.g", p));
    let b1 = leaves.get(tape, &format!("{}.ln1.b", p));
    let x1 = tape.layer_norm(h, g1, b1);

    let wq = leaves.get(tape, &format!("{}.attn.wq", p));
    let wk = leaves.get(tape, &format!("{}.attn.wk", p));
    let wv = leaves.get(tape, &format!("{}.attn.wv", p));
    let wo = leaves.get(tape, &format!("{}.attn.wo", p));
    let q = tape.matmul(x1, wq);
    let k = tape.matmul(x1, wk);
    let v = tape.matmul(x1, wv);

    let mut head_outputs = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let mut qh = tape.slice_cols(q, head * hd, hd);
        let mut kh = tape.slice_cols(k, head * hd, hd);
        let vh = tape.slice_cols(v, head * hd, hd);
        if config.toggles.sw_rope {
            qh = tape.rope(qh, session_indices.clone());
            kh = tape.rope(kh, session_indices.clone());
        }
        let scores = tape.matmul_trans_b(qh, kh);
        let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let probs = tape.softmax_masked_rows(scaled, mask_rc.clone());
        head_outputs.push(tape.matmul(probs, vh));
    }
    let cat = tape.concat_cols(head_outputs);
    let attn_out = tape.matmul(cat, wo);
    let h = tape.add(h, attn_out);

    let g2 = leaves.get(tape, &format!("{}.ln2.g", p));
    let b2 = leaves.get(tape, &format!("{}.ln2.b", p));
    let x2 = tape.layer_norm(h, g2, b2);

    let (ff_out, loads) = if config.toggles.moe && config.moe.num_routed > 0 {
        route_moe(tape, x2, leaves, config, layer)
    } else if config.toggles.moe {
        // Expert routing with zero routed experts degenerates to the shared
        // experts alone.
        let mut out: Option<NodeId> = None;
        for e in 0..config.moe.num_shared {
            let y = ffn_apply(tape, x2, leaves, &format!("{}.moe.shared{}", p, e));
            out = Some(match out {
                Some(acc) => tape.add(acc, y),
                None => y,
            });
        }
        (
            out.unwrap_or_else(|| tape.leaf(Tensor::zeros(&[seq.len(), config.dim]))),
            Vec::new(),
        )
    } else {
        (ffn_apply(tape, x2, leaves, &format!("{}.ff", p)), Vec::new())
    };
    let out = tape.add(h, ff_out);

    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite { layer });
    }
    Ok((out, loads))
}

/// Two-layer feed-forward with gelu.
pub fn ffn_apply(tape: &mut Tape, x: NodeId, leaves: &mut ParamLeaves, prefix: &str) -> NodeId {
    let w1 = leaves.get(tape, &format!("{}.w1", prefix));
    let b1 = leaves.get(tape, &format!("{}.b1", prefix));
    let w2 = leaves.get(tape, &format!("{}.w2", prefix));
    let b2 = leaves.get(tape, &format!("{}.b2", prefix));
    let a = tape.matmul(x, w1);
    let a = tape.add_row(a, b1);
    let a = tape.gelu(a);
    let a = tape.matmul(a, w2);
    tape.add_row(a, b2)
}

/// Expert-routed feed-forward with bias-steered top-k selection.
///
/// Router scores are sigmoids of affinities; selection ranks score + bias but
/// gates renormalize the raw scores of the selected experts only, so the
/// balance biases steer selection without ever entering the output.
pub fn route_moe(
    tape: &mut Tape,
    x: NodeId,
    leaves: &mut ParamLeaves,
    config: &ModelConfig,
    layer: usize,
) -> (NodeId, Vec<usize>) {
    let p = format!("blk{}", layer);
    let l = tape.value(x).rows();
    let num_routed = config.moe.num_routed;
    let bias = leaves.params.get(&format!("{}.moe.bias", p)).data.clone();

    let wr = leaves.get(tape, &format!("{}.moe.router.w", p));
    let affinity = tape.matmul(x, wr);
    let scores = tape.sigmoid(affinity);

    // Host-side top-k selection over score + bias (selection only).
    let score_vals = tape.value(scores).clone();
    let mut selected = vec![false; l * num_routed];
    let mut loads = vec![0usize; num_routed];
    for r in 0..l {
        let row = score_vals.row(r);
        let mut ranked: Vec<usize> = (0..num_routed).collect();
        ranked.sort_by(|&a, &b| {
            (row[b] + bias[b])
                .partial_cmp(&(row[a] + bias[a]))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &e in ranked.iter().take(config.moe.top_k) {
            selected[r * num_routed + e] = true;
            loads[e] += 1;
        }
    }

    let mask = tape.leaf(Tensor::from_vec(
        &[l, num_routed],
        selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
    ));
    let masked = tape.mul(scores, mask);
    let gates = tape.normalize_rows(masked);

    let mut out: Option<NodeId> = None;
    for e in 0..config.moe.num_shared {
        let y = ffn_apply(tape, x, leaves, &format!("{}.moe.shared{}", p, e));
        out = Some(match out {
            Some(acc) => tape.add(acc, y),
            None => y,
        });
    }
    for e in 0..num_routed {
        let rows: Vec<usize> = (0..l).filter(|&r| selected[r * num_routed + e]).collect();
        if rows.is_empty() {
            continue;
        }
        let rows = Rc::new(rows);
        let sub = tape.gather_rows(x, rows.clone());
        let y = ffn_apply(tape, sub, leaves, &format!("{}.moe.exp{}", p, e));
        let gate_col = tape.slice_cols(gates, e, 1);
        let gate_sel = tape.gather_rows(gate_col, rows.clone());
        let scaled = tape.scale_rows(y, gate_sel);
        let scattered = tape.scatter_add_rows(scaled, rows, l);
        out = Some(match out {
            Some(acc) => tape.add(acc, scattered),
            None => scattered,
        });
    }
    (out.expect("at least one expert"), loads)
}

/// Fixed-step sign update on expert selection biases: under-loaded experts
/// gain, over-loaded experts lose, relative to the mean load.
pub fn update_balance_biases(params: &mut Parameters, loads: &[Vec<usize>], step: f64) {
    for (layer, layer_loads) in loads.iter().enumerate() {
        if layer_loads.is_empty() {
            continue;
        }
        let mean = layer_loads.iter().sum::<usize>() as f64 / layer_loads.len() as f64;
        let bias = params.get_mut(&format!("blk{}.moe.bias", layer));
        for (b, &load) in bias.data.iter_mut().zip(layer_loads) {
            if (load as f64) < mean {
                *b += step;
            } else if (load as f64) > mean {
                *b -= step;
            }
        }
    }
}
