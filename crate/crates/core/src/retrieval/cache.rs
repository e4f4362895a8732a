//! Desk-scale nearline cache: user_id -> last retrieved top-k, refreshed by
//! event batches so the fetch path never runs the model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{
    build_dataset, build_token_sequence, DataConfig, Dataset, Event, IngestStats, UserSequence,
};
use crate::error::Result;
use crate::model::{run_forward, ModelConfig, Parameters};
use crate::retrieval::index::{retrieve_topk, ItemIndex, RetrievalResult};

#[derive(Debug, Clone, Default)]
pub struct NearlineCache {
    entries: BTreeMap<String, RetrievalResult>,
    /// Model forwards performed on behalf of this cache (refresh only).
    pub forward_count: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Serialize)]
struct CacheLine<'a> {
    user_id: &'a str,
    items: &'a [usize],
    scores: &'a [f64],
}

impl NearlineCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The serving path: a pure map lookup, counted but never a forward.
    pub fn fetch(&mut self, user_id: &str) -> Option<&RetrievalResult> {
        match self.entries.get(user_id) {
            Some(r) => {
                self.hits += 1;
                Some(r)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn entry(&self, user_id: &str) -> Option<&RetrievalResult> {
        self.entries.get(user_id)
    }

    /// One JSON object per cached user.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for (user_id, r) in &self.entries {
            let line = serde_json::to_string(&CacheLine {
                user_id,
                items: &r.items,
                scores: &r.scores,
            })
            .expect("cache line serializes");
            let _ = writeln!(out, "{}", line);
        }
        out
    }
}

/// Append a batch of events to the affected users' sequences and recompute
/// only their cache entries. Events naming items absent from the catalog are
/// dropped: the model has no row for them until the next full retrain.
#[allow(clippy::too_many_arguments)]
pub fn nearline_refresh(
    batch: &[Event],
    dataset: &mut Dataset,
    params: &Parameters,
    mcfg: &ModelConfig,
    index: &ItemIndex,
    cache: &mut NearlineCache,
    dcfg: &DataConfig,
    k: usize,
) -> Result<()> {
    let known: Vec<Event> = batch
        .iter()
        .filter(|e| dataset.catalog.lookup(&e.item_id).is_some())
        .cloned()
        .collect();
    let mut stats = IngestStats::default();
    let mini = build_dataset(known, dcfg, &mut stats)?;
    let catalog = &dataset.catalog;
    let users = &mut dataset.users;

    for mut incoming in mini.users {
        // Sessionizing built a private catalog; remap rows onto the shared one.
        for s in incoming.sessions.iter_mut() {
            for it in s.items.iter_mut() {
                let id = &mini.catalog.items[it.item].item_id;
                it.item = catalog
                    .lookup(id)
                    .expect("batch pre-filtered to known items");
            }
        }
        let user = match users.iter_mut().position(|u| u.user_id == incoming.user_id) {
            Some(i) => &mut users[i],
            None => {
                users.push(UserSequence {
                    user_id: incoming.user_id.clone(),
                    sessions: Vec::new(),
                });
                users.last_mut().unwrap()
            }
        };
        user.sessions.append(&mut incoming.sessions);
        user.sessions.sort_by_key(|s| s.start_time);

        let seq = {
            let last = user.sessions.last().expect("refreshed user has sessions");
            build_token_sequence(
                user,
                last.scenario,
                last.start_time + 1,
                mcfg.max_seq_len,
                mcfg.side_vocab.time_buckets,
                &|item| catalog.items[item].side.clone(),
            )?
        };
        let out = run_forward(&seq, params, mcfg)?;
        cache.forward_count += 1;
        let (_, ctx) = out
            .context_outputs
            .iter()
            .next_back()
            .expect("trailing context output");
        let result = retrieve_topk(ctx, index, k)?;
        cache.entries.insert(user.user_id.clone(), result);
    }
    Ok(())
}
