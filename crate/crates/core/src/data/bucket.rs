//! Stable user-to-bucket assignment for the rotating incremental schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::stable_hash;

/// Deterministic bucket for a user, independent of dataset contents.
pub fn assign_bucket(user_id: &str, num_buckets: usize) -> Result<usize> {
    if num_buckets == 0 {
        return Err(Error::config("num_buckets must be >= 1"));
    }
    Ok((stable_hash(user_id.as_bytes()) % num_buckets as u64) as usize)
}

#[derive(Debug, Clone)]
pub struct BucketAssignment {
    pub num_buckets: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl BucketAssignment {
    pub fn build<'a>(
        user_ids: impl Iterator<Item = &'a str>,
        num_buckets: usize,
    ) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for uid in user_ids {
            assignment.insert(uid.to_string(), assign_bucket(uid, num_buckets)?);
        }
        Ok(BucketAssignment {
            num_buckets,
            assignment,
        })
    }

    pub fn bucket(&self, user_id: &str) -> Option<usize> {
        self.assignment.get(user_id).copied()
    }
}
