//! Model-ready token streams: one context token per session followed by that
//! session's item tokens, closed by the trailing context token of the newly
//! arrived session.

use serde::{Deserialize, Serialize};

use crate::data::events::{ScenarioId, SideInfo, UserSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Context,
    Item,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenAction {
    Exposure,
    Click,
}

/// One token; absent feature slots map to the dedicated absent embedding row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    /// 1-based session index; the trailing context token carries K+1.
    pub session_index: usize,
    pub item: Option<usize>,
    pub action: Option<TokenAction>,
    pub side: SideInfo,
    /// Time-of-day bucket; carried by context tokens only.
    pub time_bucket: Option<u32>,
    pub scenario: ScenarioId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// Number of history sessions present (the trailing context opens
    /// session `num_sessions + 1`).
    pub num_sessions: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn session_indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.session_index).collect()
    }

    /// Position of the context token opening each session, keyed by
    /// session index (1-based, including the trailing K+1).
    pub fn context_positions(&self) -> Vec<(usize, usize)> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind == TokenKind::Context)
            .map(|(pos, t)| (t.session_index, pos))
            .collect()
    }
}

pub fn time_of_day_bucket(timestamp: i64, buckets: usize) -> u32 {
    let secs = timestamp.rem_euclid(86_400) as usize;
    (secs * buckets / 86_400) as u32
}

/// Lay out a user's sessions as tokens, truncating oldest sessions whole to
/// fit `max_seq_len`; sessions are never split and indices are renumbered
/// from 1 after truncation.
pub fn build_token_sequence(
    user_seq: &UserSequence,
    next_scenario: ScenarioId,
    next_time: i64,
    max_seq_len: usize,
    time_buckets: usize,
    side_of: &dyn Fn(usize) -> SideInfo,
) -> Result<TokenSequence> {
    let sessions = &user_seq.sessions;
    // Smallest suffix start such that the laid-out length fits.
    let mut start = 0;
    let mut total: usize = 1 + sessions.iter().map(|s| 1 + s.items.len()).sum::<usize>();
    while total > max_seq_len && start < sessions.len() {
        total -= 1 + sessions[start].items.len();
        start += 1;
    }
    if start == sessions.len() && !sessions.is_empty() {
        return Err(Error::data(format!(
            "sequence too long: last session needs {} tokens but max_seq_len is {}",
            2 + sessions.last().unwrap().items.len(),
            max_seq_len
        )));
    }
    if total > max_seq_len {
        return Err(Error::data("sequence too long: no session fits".to_string()));
    }

    let kept = &sessions[start..];
    let mut tokens = Vec::with_capacity(total);
    for (i, sess) in kept.iter().enumerate() {
        let k = i + 1;
        tokens.push(Token {
            kind: TokenKind::Context,
            session_index: k,
            item: None,
            action: None,
            side: SideInfo::default(),
            time_bucket: Some(time_of_day_bucket(sess.start_time, time_buckets)),
            scenario: sess.scenario,
        });
        for it in &sess.items {
            tokens.push(Token {
                kind: TokenKind::Item,
                session_index: k,
                item: Some(it.item),
                action: Some(if it.clicked {
                    TokenAction::Click
                } else {
                    TokenAction::Exposure
                }),
                side: side_of(it.item),
                time_bucket: None,
                scenario: sess.scenario,
            });
        }
    }
    tokens.push(Token {
        kind: TokenKind::Context,
        session_index: kept.len() + 1,
        item: None,
        action: None,
        side: SideInfo::default(),
        time_bucket: Some(time_of_day_bucket(next_time, time_buckets)),
        scenario: next_scenario,
    });

    Ok(TokenSequence {
        tokens,
        num_sessions: kept.len(),
    })
}
