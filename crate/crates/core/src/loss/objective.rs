//! The training objective, built on the autodiff tape so one code path
//! serves loss reporting, gradient computation, and the gradient oracle.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_token_sequence, Catalog, ScenarioId, TokenSequence, UserSequence};
use crate::error::{Error, Result};
use crate::loss::sampling::NegativeSampler;
use crate::model::{forward, ModelConfig, ParamLeaves, Parameters};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Negatives sampled per session, shared across that session's positives.
    pub num_negatives: usize,
    /// Popularity exponent of the negative-sampling distribution.
    pub beta: f64,
    /// Weight of the deeper-session prediction terms.
    pub lambda_msp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            num_negatives: 32,
            beta: 0.75,
            lambda_msp: 0.3,
        }
    }
}

/// One session's loss inputs: the positive set with its click/pay subsets
/// (as positions into `items`) and the sampled negative set.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSession {
    /// 1-based session index after truncation, matching the token sequence.
    pub session_index: usize,
    pub scenario: ScenarioId,
    /// Catalog rows of the exposed items.
    pub items: Vec<usize>,
    /// Positions into `items` that were clicked.
    pub clicked: Vec<usize>,
    /// Positions into `items` that were paid.
    pub paid: Vec<usize>,
    /// Catalog rows of the sampled negatives, disjoint from `items`.
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUser {
    pub seq: TokenSequence,
    pub sessions: Vec<PreparedSession>,
}

/// Per-scenario loss means (each term divided by that scenario's count).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLoss {
    pub nce: f64,
    pub click: f64,
    pub pay: f64,
    pub msp: f64,
    /// Sessions contributing to the nce/click/pay means.
    pub sessions: usize,
    /// Deeper-prediction terms contributing to the msp mean.
    pub msp_terms: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub scenarios: BTreeMap<ScenarioId, ScenarioLoss>,
    pub total: f64,
}

/// Token layout plus per-session negative sampling for one user. Sessions
/// whose day falls outside `loss_days` stay in the token sequence as context
/// but carry no loss terms. Returns `None` when the user has nothing to
/// train on.
pub fn prepare_user(
    user: &UserSequence,
    catalog: &Catalog,
    sampler: &NegativeSampler,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    loss_days: Option<(i64, i64)>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PreparedUser>> {
    if user.sessions.is_empty() {
        return Ok(None);
    }
    let last = user.sessions.last().unwrap();
    let seq = build_token_sequence(
        user,
        last.scenario,
        last.start_time + 1,
        mcfg.max_seq_len,
        mcfg.side_vocab.time_buckets,
        &|i| catalog.items[i].side,
    )?;
    let kept = &user.sessions[user.sessions.len() - seq.num_sessions..];

    let mut sessions = Vec::new();
    for (i, sess) in kept.iter().enumerate() {
        if sess.items.is_empty() {
            continue;
        }
        if let Some((lo, hi)) = loss_days {
            let day = sess.day();
            if day < lo || day > hi {
                continue;
            }
        }
        let items: Vec<usize> = sess.items.iter().map(|it| it.item).collect();
        let clicked: Vec<usize> = sess
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.clicked)
            .map(|(p, _)| p)
            .collect();
        let paid: Vec<usize> = sess
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.paid)
            .map(|(p, _)| p)
            .collect();
        let negatives = sampler.sample(lcfg.num_negatives, &items, rng)?;
        sessions.push(PreparedSession {
            session_index: i + 1,
            scenario: sess.scenario,
            items,
            clicked,
            paid,
            negatives,
        });
    }
    if sessions.is_empty() {
        return Ok(None);
    }
    Ok(Some(PreparedUser { seq, sessions }))
}

pub fn prepare_batch(
    users: &[UserSequence],
    catalog: &Catalog,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    loss_days: Option<(i64, i64)>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreparedUser>> {
    let sampler = NegativeSampler::new(catalog, lcfg.beta);
    let mut out = Vec::with_capacity(users.len());
    for user in users {
        if let Some(p) = prepare_user(user, catalog, &sampler, mcfg, lcfg, loss_days, rng)? {
            out.push(p);
        }
    }
    Ok(out)
}

/// Sample-token embedding: e_id + e_side, the same composition the serving
/// score uses.
pub fn embed_items(
    tape: &mut Tape,
    leaves: &mut ParamLeaves,
    catalog: &Catalog,
    items: &[usize],
) -> Result<NodeId> {
    let slots: [(&str, Box<dyn Fn(usize) -> Option<usize>>); 5] = [
        ("emb.item", Box::new(|i| Some(i))),
        (
            "emb.cat1",
            Box::new(|i: usize| catalog.items[i].side.cat1.map(|v| v as usize)),
        ),
        (
            "emb.cat2",
            Box::new(|i: usize| catalog.items[i].side.cat2.map(|v| v as usize)),
        ),
        (
            "emb.seller",
            Box::new(|i: usize| catalog.items[i].side.seller.map(|v| v as usize)),
        ),
        (
            "emb.price",
            Box::new(|i: usize| catalog.items[i].side.price_bucket.map(|v| v as usize)),
        ),
    ];
    let mut sum: Option<NodeId> = None;
    for (table_name, slot) in slots.iter() {
        let absent = leaves.params.get(table_name).rows() - 1;
        let mut idx = Vec::with_capacity(items.len());
        for &item in items {
            let i = match slot(item) {
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
    Ok(sum.expect("at least one table"))
}

/// Inner products between the context output (1×dim) and each item
/// embedding row, divided by the temperature; an (n, 1) column of scores.
pub fn sample_logits(tape: &mut Tape, ctx: NodeId, item_emb: NodeId, temperature: f64) -> NodeId {
    let s = tape.matmul_trans_b(item_emb, ctx);
    if temperature == 1.0 {
        s
    } else {
        tape.scale(s, 1.0 / temperature)
    }
}

/// Mean over positives of the sampled-softmax term against the shared
/// negative pool.
pub fn nce_loss(tape: &mut Tape, pos_scores: NodeId, neg_scores: NodeId) -> Result<NodeId> {
    if tape.value(pos_scores).len() == 0 {
        return Err(Error::data("nce_loss called with no positives"));
    }
    let per_pos = tape.shared_noise_nce(pos_scores, neg_scores);
    Ok(tape.mean_elems(per_pos))
}

/// Click and pay terms over a session's item scores. `clicked` and `paid`
/// are positions into the score rows; a term whose positive or contrast set
/// is empty is absent (contributes exactly zero).
pub fn cascade_losses(
    tape: &mut Tape,
    scores: NodeId,
    clicked: &[usize],
    paid: &[usize],
) -> (Option<NodeId>, Option<NodeId>) {
    let n = tape.value(scores).rows();
    let contrast_term = |tape: &mut Tape, pos: &[usize], neg: &[usize]| -> Option<NodeId> {
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let p = tape.gather_rows(scores, Rc::new(pos.to_vec()));
        let ng = tape.gather_rows(scores, Rc::new(neg.to_vec()));
        let per = tape.shared_noise_nce(p, ng);
        Some(tape.mean_elems(per))
    };
    let unclicked: Vec<usize> = (0..n).filter(|p| !clicked.contains(p)).collect();
    let click = contrast_term(tape, clicked, &unclicked);
    let unpaid: Vec<usize> = clicked.iter().copied().filter(|p| !paid.contains(p)).collect();
    let pay = contrast_term(tape, paid, &unpaid);
    (click, pay)
}

/// (context session, target session, head depth) triples for a user with
/// `num_sessions` history sessions. Depth 0 is the base next-session target;
/// depths 1..=extra route through the per-depth prediction heads.
pub fn msp_targets(num_sessions: usize, extra_depth: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for k in 1..=num_sessions {
        out.push((k, k, 0));
    }
    for d in 1..=extra_depth {
        for k in 1..=num_sessions.saturating_sub(d) {
            out.push((k, k + d, d));
        }
    }
    out
}

/// Mean within each scenario, sum across scenarios.
fn aggregate(tape: &mut Tape, terms: &[(ScenarioId, NodeId)]) -> Option<NodeId> {
    let mut by_sc: BTreeMap<ScenarioId, Vec<NodeId>> = BTreeMap::new();
    for &(sc, id) in terms {
        by_sc.entry(sc).or_default().push(id);
    }
    let mut total: Option<NodeId> = None;
    for (_, ids) in by_sc {
        let mut sum = ids[0];
        for &id in &ids[1..] {
            sum = tape.add(sum, id);
        }
        let mean = tape.scale(sum, 1.0 / ids.len() as f64);
        total = Some(match total {
            Some(t) => tape.add(t, mean),
            None => mean,
        });
    }
    total
}

/// The full objective on `tape`: per-session contrastive + cascade terms and
/// the deeper-session terms, normalized per scenario. Returns the scalar
/// root, the value breakdown, and per-block expert loads.
pub fn build_total_loss(
    tape: &mut Tape,
    batch: &[PreparedUser],
    leaves: &mut ParamLeaves,
    catalog: &Catalog,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
) -> Result<(NodeId, LossBreakdown, Vec<Vec<usize>>)> {
    let tau = mcfg.temperature;
    let mut session_sums: Vec<(ScenarioId, NodeId)> = Vec::new();
    let mut msp_nodes: Vec<(ScenarioId, NodeId)> = Vec::new();
    // Raw per-scenario term sums; divided by counts at the end.
    let mut acc: BTreeMap<ScenarioId, ScenarioLoss> = BTreeMap::new();
    let mut loads: Vec<Vec<usize>> = Vec::new();

    for user in batch {
        if user.sessions.is_empty() {
            continue;
        }
        let out = forward(tape, &user.seq, leaves, mcfg)?;
        for (b, layer_loads) in out.expert_loads.iter().enumerate() {
            if b == loads.len() {
                loads.push(vec![0; layer_loads.len()]);
            }
            for (t, &l) in loads[b].iter_mut().zip(layer_loads) {
                *t += l;
            }
        }

        // Session index -> (item embeddings, negative scores are per-context
        // so only embeddings are shared with the deeper-prediction terms).
        let mut emb_cache: BTreeMap<usize, (NodeId, NodeId)> = BTreeMap::new();
        for ps in &user.sessions {
            let items = embed_items(tape, leaves, catalog, &ps.items)?;
            let negs = embed_items(tape, leaves, catalog, &ps.negatives)?;
            emb_cache.insert(ps.session_index, (items, negs));
        }

        for ps in &user.sessions {
            let ctx = *out
                .context_outputs
                .get(&ps.session_index)
                .expect("context output for every kept session");
            let (items, negs) = emb_cache[&ps.session_index];
            let pos_scores = sample_logits(tape, ctx, items, tau);
            let neg_scores = sample_logits(tape, ctx, negs, tau);
            let nce = nce_loss(tape, pos_scores, neg_scores)?;
            let (click, pay) = cascade_losses(tape, pos_scores, &ps.clicked, &ps.paid);

            let e = acc.entry(ps.scenario).or_default();
            e.sessions += 1;
            e.nce += tape.value(nce).item();
            let mut sum = nce;
            if let Some(c) = click {
                e.click += tape.value(c).item();
                sum = tape.add(sum, c);
            }
            if let Some(p) = pay {
                e.pay += tape.value(p).item();
                sum = tape.add(sum, p);
            }
            session_sums.push((ps.scenario, sum));
        }

        if mcfg.toggles.msp && mcfg.msp_extra_depth > 0 {
            let by_index: BTreeMap<usize, &PreparedSession> = user
                .sessions
                .iter()
                .map(|ps| (ps.session_index, ps))
                .collect();
            for (k, tgt, d) in msp_targets(user.seq.num_sessions, mcfg.msp_extra_depth) {
                if d == 0 {
                    continue;
                }
                let (Some(&ctx), Some(ps)) =
                    (out.context_outputs.get(&k), by_index.get(&tgt))
                else {
                    continue;
                };
                let w = leaves.get(tape, &format!("msp.h{}.w", d));
                let b = leaves.get(tape, &format!("msp.h{}.b", d));
                let h = tape.matmul(ctx, w);
                let h = tape.add_row(h, b);
                let (items, negs) = emb_cache[&ps.session_index];
                let pos_scores = sample_logits(tape, h, items, tau);
                let neg_scores = sample_logits(tape, h, negs, tau);
                let term = nce_loss(tape, pos_scores, neg_scores)?;
                let e = acc.entry(ps.scenario).or_default();
                e.msp_terms += 1;
                e.msp += tape.value(term).item();
                msp_nodes.push((ps.scenario, term));
            }
        }
    }

    let Some(main) = aggregate(tape, &session_sums) else {
        return Err(Error::data("no trainable sessions in batch"));
    };
    let root = match aggregate(tape, &msp_nodes) {
        Some(msp) if lcfg.lambda_msp != 0.0 => {
            let weighted = tape.scale(msp, lcfg.lambda_msp);
            tape.add(main, weighted)
        }
        _ => main,
    };

    for e in acc.values_mut() {
        let n = e.sessions.max(1) as f64;
        e.nce /= n;
        e.click /= n;
        e.pay /= n;
        e.msp /= e.msp_terms.max(1) as f64;
    }
    let total = tape.value(root).item();
    if !total.is_finite() {
        return Err(Error::Model(format!("non-finite loss {}", total)));
    }
    Ok((root, LossBreakdown { scenarios: acc, total }, loads))
}

/// Value-only objective evaluation over raw user sequences.
pub fn total_loss(
    users: &[UserSequence],
    catalog: &Catalog,
    params: &Parameters,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let batch = prepare_batch(users, catalog, mcfg, lcfg, None, rng)?;
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new(params);
    let (_, breakdown, _) = build_total_loss(&mut tape, &batch, &mut leaves, catalog, mcfg, lcfg)?;
    Ok(breakdown)
}
