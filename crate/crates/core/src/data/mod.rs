//! Events, sessions, user sequences, the item catalog, synthetic data, and
//! user bucket assignment.

mod bucket;
mod events;
mod synthetic;
mod tokens;

pub use bucket::{assign_bucket, BucketAssignment};
pub(crate) use events::build_dataset;
pub use events::{
    ingest_events, read_event_lines, sessionize, write_event_log, Action, Catalog, DataConfig,
    Dataset, Event, IngestStats, ItemInfo, ScenarioId, ScenarioSet, SessionItem, SessionRecord,
    SideInfo, SideVocab, UserSequence, SECONDS_PER_DAY,
};
pub use synthetic::{generate_events, generate_synthetic, SyntheticConfig};
pub use tokens::{
    build_token_sequence, time_of_day_bucket, Token, TokenAction, TokenKind, TokenSequence,
};
