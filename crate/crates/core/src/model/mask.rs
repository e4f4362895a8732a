//! The session mask: causal attention that additionally blocks interactions
//! between distinct item tokens of the same session.

use crate::data::{TokenKind, TokenSequence};

/// Attention visibility matrix; `allowed[q * len + k]` says whether query
/// position q may attend to key position k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionMask {
    pub len: usize,
    pub allowed: Vec<bool>,
}

impl SessionMask {
    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }
}

pub fn build_session_mask(seq: &TokenSequence) -> SessionMask {
    let l = seq.len();
    let mut allowed = vec![false; l * l];
    for q in 0..l {
        for k in 0..=q {
            allowed[q * l + k] = mask_rule(seq, q, k);
        }
    }
    SessionMask { len: l, allowed }
}

/// The rule, cell by cell: causal, and no cross-attention between two
/// distinct item tokens of one session. The diagonal is always allowed.
pub fn mask_rule(seq: &TokenSequence, q: usize, k: usize) -> bool {
    if k > q {
        return false;
    }
    if q == k {
        return true;
    }
    let tq = &seq.tokens[q];
    let tk = &seq.tokens[k];
    !(tq.kind == TokenKind::Item
        && tk.kind == TokenKind::Item
        && tq.session_index == tk.session_index)
}
