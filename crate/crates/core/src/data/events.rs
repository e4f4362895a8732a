//! Raw interaction events, sessionization, and the ingested dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// The surface a session came from (index into the configured scenario set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScenarioId(pub u16);

/// The fixed scenario vocabulary of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSet {
    names: Vec<String>,
}

impl ScenarioSet {
    pub fn new(names: Vec<String>) -> Self {
        ScenarioSet { names }
    }

    /// Default scenario surfaces: homepage feed, in-shop, search.
    pub fn default_set() -> Self {
        ScenarioSet::new(vec!["GUL".into(), "IS".into(), "SE".into()])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ScenarioId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn resolve(&self, name: &str) -> Option<ScenarioId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| ScenarioId(i as u16))
    }

    pub fn ids(&self) -> impl Iterator<Item = ScenarioId> + '_ {
        (0..self.names.len()).map(|i| ScenarioId(i as u16))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Exposure,
    Click,
    Pay,
}

/// One interaction log line. Optional side-info fields may be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: String,
    pub timestamp: i64,
    pub scenario: String,
    pub session_id: String,
    pub item_id: String,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cat1: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cat2: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seller: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price_bucket: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideInfo {
    pub cat1: Option<u32>,
    pub cat2: Option<u32>,
    pub seller: Option<u32>,
    pub price_bucket: Option<u32>,
}

/// One item exposed in a session, with its cascade of action flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    /// Catalog row index.
    pub item: usize,
    pub clicked: bool,
    pub paid: bool,
}

/// One recommendation request and the user's response to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub scenario: ScenarioId,
    pub start_time: i64,
    /// Exposed items in exposure order; clicked/paid flags form the
    /// containment chain paid ⊆ clicked ⊆ exposed.
    pub items: Vec<SessionItem>,
}

impl SessionRecord {
    pub fn day(&self) -> i64 {
        self.start_time.div_euclid(SECONDS_PER_DAY)
    }

    pub fn exposed(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().map(|it| it.item)
    }

    pub fn clicked(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().filter(|it| it.clicked).map(|it| it.item)
    }

    pub fn paid(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().filter(|it| it.paid).map(|it| it.item)
    }
}

/// A user's chronological multi-session history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub sessions: Vec<SessionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemInfo {
    pub item_id: String,
    pub side: SideInfo,
    pub exposure_count: u64,
}

/// The item catalog: side info plus exposure counts, with a dense row index
/// per item that doubles as the embedding-table row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub items: Vec<ItemInfo>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn lookup(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn get_or_insert(&mut self, item_id: &str) -> usize {
        if let Some(&i) = self.index.get(item_id) {
            return i;
        }
        let i = self.items.len();
        self.items.push(ItemInfo {
            item_id: item_id.to_string(),
            side: SideInfo::default(),
            exposure_count: 0,
        });
        self.index.insert(item_id.to_string(), i);
        i
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.clone(), i))
            .collect();
    }
}

/// Categorical vocabulary sizes for the side-info embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideVocab {
    pub cat1: usize,
    pub cat2: usize,
    pub seller: usize,
    pub price_bucket: usize,
    pub time_buckets: usize,
}

impl Default for SideVocab {
    fn default() -> Self {
        SideVocab {
            cat1: 1,
            cat2: 1,
            seller: 1,
            price_bucket: 1,
            time_buckets: 24,
        }
    }
}

/// An immutable, fully sessionized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub users: Vec<UserSequence>,
    pub catalog: Catalog,
    pub scenarios: ScenarioSet,
    pub side_vocab: SideVocab,
    /// Data days present per user, keyed by user_id.
    pub day_index: BTreeMap<String, BTreeSet<i64>>,
}

impl Dataset {
    pub fn user(&self, user_id: &str) -> Option<&UserSequence> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn stats_summary(&self) -> String {
        let num_sessions: usize = self.users.iter().map(|u| u.sessions.len()).sum();
        let num_exposed: usize = self
            .users
            .iter()
            .flat_map(|u| &u.sessions)
            .map(|s| s.items.len())
            .sum();
        let num_clicked: usize = self
            .users
            .iter()
            .flat_map(|u| &u.sessions)
            .map(|s| s.clicked().count())
            .sum();
        let num_paid: usize = self
            .users
            .iter()
            .flat_map(|u| &u.sessions)
            .map(|s| s.paid().count())
            .sum();
        format!(
            "users: {}\nitems: {}\nsessions: {}\nexposures: {}\nclicks: {}\npays: {}\nclick rate: {:.4}\npay/click: {:.4}\n",
            self.users.len(),
            self.catalog.len(),
            num_sessions,
            num_exposed,
            num_clicked,
            num_paid,
            num_clicked as f64 / num_exposed.max(1) as f64,
            num_paid as f64 / num_clicked.max(1) as f64,
        )
    }
}

/// Ingestion and sessionization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scenarios: ScenarioSet,
    pub max_sessions: usize,
    /// Bound on the time span covered by one session; consecutive events
    /// further apart than this start a new session.
    pub session_gap_secs: i64,
    pub time_buckets: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenarios: ScenarioSet::default_set(),
            max_sessions: 50,
            session_gap_secs: 1800,
            time_buckets: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub total_lines: usize,
    pub malformed_lines: usize,
    /// Events violating the action cascade (click without exposure, pay
    /// without click) within their session.
    pub dropped_events: usize,
    pub unknown_scenario: usize,
}

/// Read raw events from a JSON Lines file, counting malformed lines.
pub fn read_event_lines(path: &Path, stats: &mut IngestStats) -> Result<Vec<Event>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {}", path.display(), e)))?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.total_lines += 1;
        match serde_json::from_str::<Event>(&line) {
            Ok(ev) => events.push(ev),
            Err(_) => stats.malformed_lines += 1,
        }
    }
    Ok(events)
}

pub fn write_event_log(path: &Path, events: &[Event]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ev in events {
        serde_json::to_writer(&mut file, ev)
            .map_err(|e| Error::data(format!("serialize event: {}", e)))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Ingest a JSON Lines event log into a sessionized [`Dataset`].
pub fn ingest_events(path: &Path, config: &DataConfig) -> Result<(Dataset, IngestStats)> {
    let mut stats = IngestStats::default();
    let events = read_event_lines(path, &mut stats)?;
    let dataset = build_dataset(events, config, &mut stats)?;
    Ok((dataset, stats))
}

/// Sessionize a flat event list into per-user chronological sequences.
pub fn sessionize(events: Vec<Event>, config: &DataConfig) -> Result<Vec<UserSequence>> {
    let mut stats = IngestStats::default();
    let ds = build_dataset(events, config, &mut stats)?;
    Ok(ds.users)
}

pub(crate) fn build_dataset(
    mut events: Vec<Event>,
    config: &DataConfig,
    stats: &mut IngestStats,
) -> Result<Dataset> {
    events.sort_by(|a, b| {
        (&a.user_id, a.timestamp, &a.session_id, a.action).cmp(&(
            &b.user_id,
            b.timestamp,
            &b.session_id,
            b.action,
        ))
    });

    let mut catalog = Catalog::default();
    let mut users: BTreeMap<String, Vec<SessionRecord>> = BTreeMap::new();
    let mut side_vocab = SideVocab::default();
    side_vocab.time_buckets = config.time_buckets;

    let mut i = 0;
    while i < events.len() {
        let user_id = events[i].user_id.clone();
        let mut j = i;
        while j < events.len() && events[j].user_id == user_id {
            j += 1;
        }
        let sessions = sessionize_user(
            &events[i..j],
            config,
            &mut catalog,
            &mut side_vocab,
            stats,
        )?;
        if !sessions.is_empty() {
            users.insert(user_id, sessions);
        }
        i = j;
    }

    let mut day_index = BTreeMap::new();
    let mut user_seqs = Vec::with_capacity(users.len());
    for (user_id, mut sessions) in users {
        sessions.sort_by(|a, b| (a.start_time, &a.session_id).cmp(&(b.start_time, &b.session_id)));
        if sessions.len() > config.max_sessions {
            let drop = sessions.len() - config.max_sessions;
            sessions.drain(..drop);
        }
        let days: BTreeSet<i64> = sessions.iter().map(|s| s.day()).collect();
        day_index.insert(user_id.clone(), days);
        user_seqs.push(UserSequence { user_id, sessions });
    }

    Ok(Dataset {
        users: user_seqs,
        catalog,
        scenarios: config.scenarios.clone(),
        side_vocab,
        day_index,
    })
}

/// Group one user's time-sorted events into sessions. An explicit session_id
/// defines the boundary; an empty session_id falls back to gap splitting.
fn sessionize_user(
    events: &[Event],
    config: &DataConfig,
    catalog: &mut Catalog,
    side_vocab: &mut SideVocab,
    stats: &mut IngestStats,
) -> Result<Vec<SessionRecord>> {
    // Partition events into session groups while preserving time order.
    let mut groups: Vec<(String, Vec<&Event>)> = Vec::new();
    let mut open: HashMap<String, usize> = HashMap::new();
    let mut anon_count = 0usize;
    for ev in events {
        let key = if ev.session_id.is_empty() {
            // Gap splitter: reuse the latest anonymous group if close enough.
            let reuse = groups.iter().rposition(|(k, evs)| {
                k.starts_with("__gap") && ev.timestamp - evs.last().unwrap().timestamp <= config.session_gap_secs && evs[0].scenario == ev.scenario
            });
            match reuse {
                Some(g) => {
                    groups[g].1.push(ev);
                    continue;
                }
                None => {
                    anon_count += 1;
                    format!("__gap{}", anon_count)
                }
            }
        } else {
            ev.session_id.clone()
        };
        match open.get(&key) {
            Some(&g) if ev.timestamp - groups[g].1.last().unwrap().timestamp
                <= config.session_gap_secs =>
            {
                groups[g].1.push(ev);
            }
            Some(_) | None => {
                // Either a fresh session_id or a gap violation that splits
                // the session; the split keeps the gap invariant.
                open.insert(key.clone(), groups.len());
                groups.push((key, vec![ev]));
            }
        }
    }

    let mut sessions = Vec::new();
    for (gi, (key, group)) in groups.iter().enumerate() {
        let scenario = match config.scenarios.resolve(&group[0].scenario) {
            Some(s) => s,
            None => {
                stats.unknown_scenario += group.len();
                continue;
            }
        };
        let mut items: Vec<SessionItem> = Vec::new();
        let mut pos: HashMap<usize, usize> = HashMap::new();
        for ev in group {
            let idx = catalog.get_or_insert(&ev.item_id);
            match ev.action {
                Action::Exposure => {
                    if pos.contains_key(&idx) {
                        stats.dropped_events += 1;
                        continue;
                    }
                    catalog.items[idx].exposure_count += 1;
                    let info = &mut catalog.items[idx].side;
                    if info.cat1.is_none() {
                        info.cat1 = ev.cat1;
                    }
                    if info.cat2.is_none() {
                        info.cat2 = ev.cat2;
                    }
                    if info.seller.is_none() {
                        info.seller = ev.seller;
                    }
                    if info.price_bucket.is_none() {
                        info.price_bucket = ev.price_bucket;
                    }
                    grow_vocab(side_vocab, ev);
                    pos.insert(idx, items.len());
                    items.push(SessionItem {
                        item: idx,
                        clicked: false,
                        paid: false,
                    });
                }
                Action::Click => match pos.get(&idx) {
                    Some(&p) => items[p].clicked = true,
                    None => stats.dropped_events += 1,
                },
                Action::Pay => match pos.get(&idx) {
                    Some(&p) if items[p].clicked => items[p].paid = true,
                    _ => stats.dropped_events += 1,
                },
            }
        }
        if items.is_empty() {
            continue;
        }
        let session_id = if key.starts_with("__gap") {
            format!("{}#{}", group[0].user_id, gi)
        } else {
            key.clone()
        };
        sessions.push(SessionRecord {
            session_id,
            scenario,
            start_time: group[0].timestamp,
            items,
        });
    }
    Ok(sessions)
}

fn grow_vocab(v: &mut SideVocab, ev: &Event) {
    if let Some(c) = ev.cat1 {
        v.cat1 = v.cat1.max(c as usize + 1);
    }
    if let Some(c) = ev.cat2 {
        v.cat2 = v.cat2.max(c as usize + 1);
    }
    if let Some(c) = ev.seller {
        v.seller = v.seller.max(c as usize + 1);
    }
    if let Some(c) = ev.price_bucket {
        v.price_bucket = v.price_bucket.max(c as usize + 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, t: i64, sess: &str, item: &str, action: Action) -> Event {
        Event {
            user_id: user.into(),
            timestamp: t,
            scenario: "GUL".into(),
            session_id: sess.into(),
            item_id: item.into(),
            action,
            cat1: Some(1),
            cat2: Some(2),
            seller: Some(3),
            price_bucket: Some(4),
        }
    }

    #[test]
    fn minimal_consistent_log() {
        let events = vec![
            ev("u1", 100, "s1", "a", Action::Exposure),
            ev("u1", 110, "s1", "a", Action::Click),
            ev("u1", 120, "s1", "a", Action::Pay),
        ];
        let cfg = DataConfig::default();
        let mut stats = IngestStats::default();
        let ds = build_dataset(events, &cfg, &mut stats).unwrap();
        assert_eq!(ds.users.len(), 1);
        assert_eq!(ds.users[0].sessions.len(), 1);
        let s = &ds.users[0].sessions[0];
        assert_eq!(s.items.len(), 1);
        assert!(s.items[0].clicked && s.items[0].paid);
        assert_eq!(stats.dropped_events, 0);
    }

    #[test]
    fn pay_without_click_dropped() {
        let events = vec![
            ev("u1", 100, "s1", "a", Action::Exposure),
            ev("u1", 120, "s1", "a", Action::Pay),
        ];
        let cfg = DataConfig::default();
        let mut stats = IngestStats::default();
        let ds = build_dataset(events, &cfg, &mut stats).unwrap();
        assert_eq!(stats.dropped_events, 1);
        assert!(!ds.users[0].sessions[0].items[0].paid);
    }

    #[test]
    fn two_sessions_of_three() {
        let mut events = Vec::new();
        for (sess, base) in [("s1", 100), ("s2", 10_000)] {
            for item in ["a", "b", "c"] {
                events.push(ev("u1", base, sess, item, Action::Exposure));
            }
        }
        let users = sessionize(events, &DataConfig::default()).unwrap();
        assert_eq!(users.len(), 1);
        assert_eq!(users[0].sessions.len(), 2);
        assert_eq!(users[0].sessions[0].items.len(), 3);
        assert_eq!(users[0].sessions[1].items.len(), 3);
    }

    #[test]
    fn max_sessions_keeps_most_recent() {
        let mut events = Vec::new();
        for k in 0..5 {
            events.push(ev("u1", k * 10_000, &format!("s{}", k), "a", Action::Exposure));
        }
        let cfg = DataConfig {
            max_sessions: 2,
            ..DataConfig::default()
        };
        let users = sessionize(events, &cfg).unwrap();
        assert_eq!(users[0].sessions.len(), 2);
        assert_eq!(users[0].sessions[0].session_id, "s3");
        assert_eq!(users[0].sessions[1].session_id, "s4");
    }

    #[test]
    fn interleaved_users_are_independent() {
        let events = vec![
            ev("u1", 100, "s1", "a", Action::Exposure),
            ev("u2", 105, "t1", "b", Action::Exposure),
            ev("u1", 110, "s1", "c", Action::Exposure),
            ev("u2", 115, "t1", "d", Action::Exposure),
        ];
        let users = sessionize(events, &DataConfig::default()).unwrap();
        assert_eq!(users.len(), 2);
        assert_eq!(users[0].sessions[0].items.len(), 2);
        assert_eq!(users[1].sessions[0].items.len(), 2);
    }

    #[test]
    fn containment_chain_holds() {
        let events = vec![
            ev("u1", 100, "s1", "a", Action::Exposure),
            ev("u1", 101, "s1", "b", Action::Exposure),
            ev("u1", 110, "s1", "a", Action::Click),
            ev("u1", 120, "s1", "a", Action::Pay),
        ];
        let users = sessionize(events, &DataConfig::default()).unwrap();
        for s in &users[0].sessions {
            for it in &s.items {
                assert!(!it.paid || it.clicked);
            }
        }
    }

    #[test]
    fn gap_violation_splits_session() {
        let events = vec![
            ev("u1", 100, "s1", "a", Action::Exposure),
            ev("u1", 100 + 3600, "s1", "b", Action::Exposure),
        ];
        let users = sessionize(events, &DataConfig::default()).unwrap();
        assert_eq!(users[0].sessions.len(), 2);
    }

    #[test]
    fn unknown_scenario_rejected() {
        let mut e = ev("u1", 100, "s1", "a", Action::Exposure);
        e.scenario = "ADS".into();
        let mut stats = IngestStats::default();
        let ds = build_dataset(vec![e], &DataConfig::default(), &mut stats).unwrap();
        assert!(ds.users.is_empty());
        assert_eq!(stats.unknown_scenario, 1);
    }
}
