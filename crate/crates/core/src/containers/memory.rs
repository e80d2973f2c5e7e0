use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::Serialize;

use crate::pagestore::{GroupId, PageStore, SegmentRef};

use super::ContainerError;

/// What eviction does with a cache page group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StorageLevel {
    /// Evicted groups are written to a swap file and read through it.
    MemoryAndDisk,
    /// Eviction is not allowed.
    MemoryOnly,
}

impl StorageLevel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "memory-and-disk" => Some(StorageLevel::MemoryAndDisk),
            "memory-only" => Some(StorageLevel::MemoryOnly),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StorageLevel::MemoryAndDisk => "memory-and-disk",
            StorageLevel::MemoryOnly => "memory-only",
        }
    }
}

/// Lifecycle events recorded by the manager.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Spill {
        container: String,
        run: u32,
        records: u64,
        bytes: u64,
    },
    Evict {
        container: String,
        pages: usize,
        bytes: u64,
    },
    Release {
        container: String,
        pages: usize,
    },
    Reconstruct {
        container: String,
        records: usize,
    },
    Share {
        container: String,
        primary: String,
    },
    /// `live_pages` is the store's page count right after the release.
    Unpersist {
        container: String,
        live_pages: usize,
    },
}

/// The page store plus the policy that keeps it within budget: cache page
/// groups are limited to a fraction of the budget and evicted in LRU order;
/// shuffle buffers use the rest and spill when they run out.
#[derive(Debug)]
pub struct MemoryManager {
    pub store: PageStore,
    cache_limit: usize,
    cache_groups: BTreeSet<GroupId>,
    shuffle_meta: usize,
    pub level: StorageLevel,
    pub spill_dir: PathBuf,
    pub events: Vec<Event>,
    seq: BTreeMap<String, u32>,
}

impl MemoryManager {
    pub fn new(
        page_size: usize,
        budget: usize,
        cache_frac: f64,
        level: StorageLevel,
        spill_dir: PathBuf,
    ) -> Result<Self, ContainerError> {
        let store = PageStore::new(page_size, budget)?;
        let cache_limit = ((store.max_pages() as f64) * cache_frac).floor() as usize;
        Ok(MemoryManager {
            store,
            cache_limit,
            cache_groups: BTreeSet::new(),
            shuffle_meta: 0,
            level,
            spill_dir,
            events: Vec::new(),
            seq: BTreeMap::new(),
        })
    }

    pub fn cache_limit_pages(&self) -> usize {
        self.cache_limit
    }

    /// Next `<containerId>.<runSeq>.run` path for a container.
    pub fn run_path(&mut self, container: &str) -> (u32, PathBuf) {
        let n = self.seq.entry(container.to_string()).or_insert(0);
        let seq = *n;
        *n += 1;
        (seq, self.spill_dir.join(format!("{container}.{seq}.run")))
    }

    pub fn register_cache_group(&mut self, g: GroupId) {
        self.cache_groups.insert(g);
    }

    pub fn cache_pages(&self) -> usize {
        self.cache_groups
            .iter()
            .filter_map(|g| self.store.info(*g).ok())
            .map(|i| i.pages.len())
            .sum()
    }

    pub fn shuffle_pages(&self) -> usize {
        self.store.live_pages() - self.cache_pages()
    }

    pub fn shuffle_meta(&self) -> usize {
        self.shuffle_meta
    }

    pub fn add_shuffle_meta(&mut self, delta: isize) {
        self.shuffle_meta = (self.shuffle_meta as isize + delta).max(0) as usize;
    }

    /// Whether shuffle data would exceed its share after adding
    /// `pages` pages and `meta` bytes of pointer/table metadata.
    pub fn shuffle_pressure(&self, pages: usize, meta: usize) -> bool {
        let ps = self.store.page_size();
        let limit = (self.store.max_pages() - self.cache_limit.min(self.store.max_pages())) * ps;
        let used = (self.shuffle_pages() + pages) * ps + self.shuffle_meta + meta;
        used > limit || self.store.live_pages() + pages > self.store.max_pages()
    }

    /// Evicts the least recently used unpinned cache group other than
    /// `except`. Returns false when nothing can be evicted.
    pub fn evict_one(&mut self, except: Option<GroupId>) -> Result<bool, ContainerError> {
        let victim = self
            .cache_groups
            .iter()
            .filter(|g| Some(**g) != except)
            .filter_map(|g| self.store.info(*g).ok().map(|i| (*g, i)))
            .filter(|(_, i)| i.swapped.is_none() && !i.pages.is_empty() && i.ref_count == 1)
            .min_by_key(|(g, i)| (i.lru_tick, *g))
            .map(|(g, i)| (g, i.owner.clone(), i.pages.len()));
        let Some((g, owner, pages)) = victim else {
            return Ok(false);
        };
        if self.level == StorageLevel::MemoryOnly {
            return Err(ContainerError::EvictionForbidden(owner));
        }
        let (_, path) = self.run_path(&owner);
        std::fs::create_dir_all(&self.spill_dir).map_err(|e| ContainerError::Io(e.to_string()))?;
        let bytes = self.store.swap_out(g, &path)?;
        self.events.push(Event::Evict {
            container: owner,
            pages,
            bytes,
        });
        Ok(true)
    }

    /// Evicts cache groups until `pages` more pages fit in the store and, if
    /// `for_cache`, within the cache share.
    fn make_room(
        &mut self,
        pages: usize,
        for_cache: bool,
        except: Option<GroupId>,
    ) -> Result<(), ContainerError> {
        loop {
            let store_full = self.store.live_pages() + pages > self.store.max_pages();
            let over_share = for_cache && self.cache_pages() + pages > self.cache_limit;
            if !store_full && !over_share {
                return Ok(());
            }
            if !self.evict_one(except)? {
                // Nothing else can go: a growing cache group moves itself to
                // disk and keeps appending there.
                if store_full && except.is_some() && self.evict_one(None)? {
                    continue;
                }
                return if store_full {
                    Err(ContainerError::BudgetExhausted)
                } else {
                    Ok(())
                };
            }
        }
    }

    /// Appends a segment to a cache group, evicting other cache groups first
    /// if a new page would exceed the cache share.
    pub fn cache_append(&mut self, g: GroupId, bytes: &[u8]) -> Result<SegmentRef, ContainerError> {
        if self.store.needs_page(g, bytes.len())? {
            self.make_room(1, true, Some(g))?;
        }
        Ok(self.store.append(g, bytes)?)
    }

    /// Makes room for shuffle growth by evicting cache groups. Fails only if
    /// the store itself cannot hold `pages` more pages.
    pub fn shuffle_make_room(&mut self, pages: usize, meta: usize) -> Result<(), ContainerError> {
        while self.shuffle_pressure(pages, meta) {
            if !self.evict_one(None)? {
                if self.store.live_pages() + pages > self.store.max_pages() {
                    return Err(ContainerError::BudgetExhausted);
                }
                break;
            }
        }
        Ok(())
    }

    /// Drops one reference to a group, recording a release event when its
    /// pages are returned.
    pub fn release_group(&mut self, g: GroupId, container: &str) -> Result<(), ContainerError> {
        let pages = self.store.info(g)?.pages.len();
        if self.store.release(g)? == 0 {
            self.cache_groups.remove(&g);
            self.events.push(Event::Release {
                container: container.to_string(),
                pages,
            });
        }
        Ok(())
    }

    pub fn spill_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Spill { .. }))
            .count()
    }

    pub fn evict_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Evict { .. }))
            .count()
    }
}
