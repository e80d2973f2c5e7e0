//! Lifetime-scoped data containers: cache blocks, shuffle buffers, the
//! memory manager that keeps them within a page budget, and spill runs.

mod cache;
mod hash;
mod memory;
mod shuffle;
mod spill;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::pagestore::{LayoutError, StoreError};

pub use cache::{CacheBlock, Cursor};
pub use hash::{fnv1a, OpenTable};
pub use memory::{Event, MemoryManager, StorageLevel};
pub use shuffle::{GroupBuffer, ReduceBuffer, SortBuffer};
pub use spill::{merge_sorted, write_run, MergeSource, RunReader, SpillRun};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("container `{0}` has been released")]
    Released(String),
    #[error("container `{0}` is sealed")]
    Sealed(String),
    #[error("record {0} out of range")]
    OutOfRange(usize),
    #[error("memory budget exhausted and nothing can be evicted or spilled")]
    BudgetExhausted,
    #[error("eviction of `{0}` is not allowed at storage level memory-only")]
    EvictionForbidden(String),
    #[error("combine failed: {0}")]
    Combine(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for ContainerError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::BudgetExhausted => ContainerError::BudgetExhausted,
            StoreError::Layout(l) => ContainerError::Layout(l),
            StoreError::Io(s) => ContainerError::Io(s),
            e => ContainerError::Store(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainerKind {
    UdfVars,
    CacheBlock,
    ShuffleSort,
    ShuffleHashReduce,
    ShuffleHashGroup,
}

impl ContainerKind {
    pub fn name(self) -> &'static str {
        match self {
            ContainerKind::UdfVars => "udf-vars",
            ContainerKind::CacheBlock => "cache",
            ContainerKind::ShuffleSort => "shuffle-sort",
            ContainerKind::ShuffleHashReduce => "shuffle-reduce",
            ContainerKind::ShuffleHashGroup => "shuffle-group",
        }
    }

    /// Cache blocks and shuffle buffers own data ahead of UDF variables.
    fn priority(self) -> u8 {
        match self {
            ContainerKind::UdfVars => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Primary,
    Secondary,
}

/// A container as seen by ownership assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Holder {
    pub container: String,
    pub kind: ContainerKind,
    /// Position in stage execution order.
    pub created: usize,
}

/// Picks one primary per object set: cache and shuffle containers beat UDF
/// variables, then the earliest-created container wins. Returns the role of
/// every holder, keyed by object set and container.
pub fn assign_ownership(sets: &BTreeMap<String, Vec<Holder>>) -> BTreeMap<(String, String), Role> {
    let mut out = BTreeMap::new();
    for (set, holders) in sets {
        let primary = holders
            .iter()
            .min_by_key(|h| (h.kind.priority(), h.created))
            .map(|h| h.container.clone());
        for h in holders {
            let role = if Some(&h.container) == primary.as_ref() {
                Role::Primary
            } else {
                Role::Secondary
            };
            out.insert((set.clone(), h.container.clone()), role);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(c: &str, kind: ContainerKind, created: usize) -> Holder {
        Holder {
            container: c.into(),
            kind,
            created,
        }
    }

    #[test]
    fn cache_beats_udf_vars() {
        let mut sets = BTreeMap::new();
        sets.insert(
            "o".to_string(),
            vec![
                h("vars", ContainerKind::UdfVars, 0),
                h("rdd", ContainerKind::CacheBlock, 1),
            ],
        );
        let r = assign_ownership(&sets);
        assert_eq!(r[&("o".into(), "rdd".into())], Role::Primary);
        assert_eq!(r[&("o".into(), "vars".into())], Role::Secondary);
    }

    #[test]
    fn earliest_cache_wins() {
        let mut sets = BTreeMap::new();
        sets.insert(
            "o".to_string(),
            vec![
                h("b", ContainerKind::CacheBlock, 3),
                h("a", ContainerKind::CacheBlock, 1),
            ],
        );
        let r = assign_ownership(&sets);
        assert_eq!(r[&("o".into(), "a".into())], Role::Primary);
        assert_eq!(r[&("o".into(), "b".into())], Role::Secondary);
    }

    #[test]
    fn udf_vars_alone_are_primary() {
        let mut sets = BTreeMap::new();
        sets.insert("o".to_string(), vec![h("vars", ContainerKind::UdfVars, 0)]);
        assert_eq!(
            assign_ownership(&sets)[&("o".into(), "vars".into())],
            Role::Primary
        );
    }
}
