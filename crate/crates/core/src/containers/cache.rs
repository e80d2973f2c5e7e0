use crate::datum::Datum;
use crate::ir::Program;
use crate::pagestore::{decode_object, encode_object, GroupId, Layout, SegmentRef};

use super::memory::{Event, MemoryManager};
use super::{ContainerError, Role};

#[derive(Debug)]
enum State {
    /// Records are segments of an owned (or shared) page group.
    Decomposed {
        group: GroupId,
        count: usize,
    },
    /// Secondary holding pointers into a primary's group.
    Pointers {
        dep: GroupId,
        segs: Vec<(SegmentRef, u32)>,
    },
    Objects(Vec<Datum>),
    Released,
}

/// One partition of a cached dataset.
#[derive(Debug)]
pub struct CacheBlock {
    pub id: String,
    pub role: Role,
    layout: Option<Layout>,
    state: State,
    /// Set once the block fell back to objects; it is never decomposed again.
    pub reconstructed: bool,
}

/// Segment positions of a decomposed block, captured for one pass.
#[derive(Debug, Default)]
pub struct Cursor {
    refs: Vec<(SegmentRef, u32)>,
}

impl CacheBlock {
    /// A block that decomposes records with `layout`, or keeps objects when
    /// `layout` is `None`.
    pub fn new(
        id: &str,
        layout: Option<Layout>,
        mgr: &mut MemoryManager,
    ) -> Result<Self, ContainerError> {
        let state = match &layout {
            Some(_) => {
                while mgr.store.free_pages() == 0 {
                    if !mgr.evict_one(None)? {
                        return Err(ContainerError::BudgetExhausted);
                    }
                }
                let g = mgr.store.allocate_group(id)?;
                mgr.register_cache_group(g);
                State::Decomposed { group: g, count: 0 }
            }
            None => State::Objects(Vec::new()),
        };
        Ok(CacheBlock {
            id: id.to_string(),
            role: Role::Primary,
            layout,
            state,
            reconstructed: false,
        })
    }

    pub fn is_released(&self) -> bool {
        matches!(self.state, State::Released)
    }

    pub fn is_decomposed(&self) -> bool {
        matches!(
            self.state,
            State::Decomposed { .. } | State::Pointers { .. }
        )
    }

    pub fn layout(&self) -> Option<&Layout> {
        self.layout.as_ref()
    }

    /// The page group holding this block's bytes, if any.
    pub fn group(&self) -> Option<GroupId> {
        match self.state {
            State::Decomposed { group, .. } => Some(group),
            State::Pointers { dep, .. } => Some(dep),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        match &self.state {
            State::Decomposed { count, .. } => *count,
            State::Pointers { segs, .. } => segs.len(),
            State::Objects(v) => v.len(),
            State::Released => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&mut self, d: Datum, mgr: &mut MemoryManager) -> Result<(), ContainerError> {
        match &mut self.state {
            State::Released => Err(ContainerError::Released(self.id.clone())),
            State::Objects(v) => {
                v.push(d);
                Ok(())
            }
            State::Pointers { .. } => Err(ContainerError::Sealed(self.id.clone())),
            State::Decomposed { group, count } => {
                let layout = self.layout.as_ref().expect("decomposed block has a layout");
                match encode_object(&d, layout) {
                    Ok(bytes) => {
                        mgr.cache_append(*group, &bytes)?;
                        *count += 1;
                        Ok(())
                    }
                    Err(_) => {
                        // A value the layout cannot hold (e.g. a null field):
                        // keep the whole block as objects from here on.
                        let cur = self.cursor(mgr)?;
                        self.reconstruct(&cur, mgr)?;
                        self.put(d, mgr)
                    }
                }
            }
        }
    }

    /// Captures segment positions for reading the block by index.
    pub fn cursor(&self, mgr: &mut MemoryManager) -> Result<Cursor, ContainerError> {
        match &self.state {
            State::Decomposed { group, .. } => {
                let layout = self.layout.as_ref().expect("layout");
                mgr.store.touch(*group)?;
                let mut refs = Vec::new();
                let mut lens = Vec::new();
                let segs = mgr.store.scan(*group, &mut |b| {
                    let n = layout.segment_len(b)?;
                    lens.push(n as u32);
                    Ok(n)
                })?;
                refs.extend(segs.into_iter().zip(lens));
                Ok(Cursor { refs })
            }
            State::Pointers { dep, .. } => {
                mgr.store.touch(*dep)?;
                Ok(Cursor::default())
            }
            State::Released => Err(ContainerError::Released(self.id.clone())),
            State::Objects(_) => Ok(Cursor::default()),
        }
    }

    fn seg_at<'a>(&'a self, i: usize, cur: &'a Cursor) -> Option<(GroupId, (SegmentRef, u32))> {
        match &self.state {
            State::Decomposed { group, .. } => cur.refs.get(i).map(|r| (*group, *r)),
            State::Pointers { dep, segs } => segs.get(i).map(|r| (*dep, *r)),
            _ => None,
        }
    }

    /// Record `i`, materialised as a value.
    pub fn get(
        &self,
        i: usize,
        cur: &Cursor,
        mgr: &MemoryManager,
    ) -> Result<Datum, ContainerError> {
        if let State::Objects(v) = &self.state {
            return v.get(i).cloned().ok_or(ContainerError::OutOfRange(i));
        }
        if let State::Released = self.state {
            return Err(ContainerError::Released(self.id.clone()));
        }
        let (g, (seg, len)) = self.seg_at(i, cur).ok_or(ContainerError::OutOfRange(i))?;
        let bytes = mgr.store.read(g, seg, len as usize)?;
        Ok(decode_object(&bytes, self.layout.as_ref().expect("layout"))?.0)
    }

    /// Position and length of record `i` within its page group.
    pub fn segment(&self, i: usize, cur: &Cursor) -> Option<(GroupId, SegmentRef, u32)> {
        self.seg_at(i, cur).map(|(g, (s, l))| (g, s, l))
    }

    /// Writes record `i` back after a task modified it. Same-size updates
    /// overwrite the segment in place; anything else turns the block back
    /// into objects for good.
    pub fn set(
        &mut self,
        i: usize,
        d: Datum,
        cur: &Cursor,
        mgr: &mut MemoryManager,
    ) -> Result<(), ContainerError> {
        match &mut self.state {
            State::Objects(v) => {
                *v.get_mut(i).ok_or(ContainerError::OutOfRange(i))? = d;
                return Ok(());
            }
            State::Released => return Err(ContainerError::Released(self.id.clone())),
            State::Decomposed { group, .. } => {
                let g = *group;
                let (seg, len) = *cur.refs.get(i).ok_or(ContainerError::OutOfRange(i))?;
                let shared = mgr.store.info(g)?.ref_count > 1;
                if let Ok(bytes) = encode_object(&d, self.layout.as_ref().expect("layout")) {
                    if bytes.len() == len as usize && !shared {
                        mgr.store.write(g, seg, &bytes)?;
                        return Ok(());
                    }
                }
            }
            State::Pointers { .. } => {}
        }
        self.reconstruct(cur, mgr)?;
        self.set(i, d, cur, mgr)
    }

    /// Re-materialises every record as an object and releases the page group.
    pub fn reconstruct(
        &mut self,
        cur: &Cursor,
        mgr: &mut MemoryManager,
    ) -> Result<(), ContainerError> {
        if !self.is_decomposed() {
            return Ok(());
        }
        let mut objs = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            objs.push(self.get(i, cur, mgr)?);
        }
        let g = self.group().expect("decomposed");
        mgr.release_group(g, &self.id)?;
        mgr.events.push(Event::Reconstruct {
            container: self.id.clone(),
            records: objs.len(),
        });
        self.state = State::Objects(objs);
        self.reconstructed = true;
        Ok(())
    }

    /// A secondary holding the same record set as `self` with no required
    /// order: shares the page group itself.
    pub fn share(&self, id: &str, mgr: &mut MemoryManager) -> Result<CacheBlock, ContainerError> {
        let state = match &self.state {
            State::Decomposed { group, count } => {
                mgr.store.retain(*group)?;
                mgr.events.push(Event::Share {
                    container: id.to_string(),
                    primary: self.id.clone(),
                });
                State::Decomposed {
                    group: *group,
                    count: *count,
                }
            }
            State::Pointers { dep, segs } => {
                mgr.store.retain(*dep)?;
                State::Pointers {
                    dep: *dep,
                    segs: segs.clone(),
                }
            }
            State::Objects(v) => State::Objects(v.clone()),
            State::Released => return Err(ContainerError::Released(self.id.clone())),
        };
        Ok(CacheBlock {
            id: id.to_string(),
            role: Role::Secondary,
            layout: self.layout.clone(),
            state,
            reconstructed: self.reconstructed,
        })
    }

    /// A secondary holding the records at `picks`, in that order, as
    /// pointers into `self`'s page group.
    pub fn select(
        &self,
        id: &str,
        picks: &[usize],
        cur: &Cursor,
        mgr: &mut MemoryManager,
    ) -> Result<CacheBlock, ContainerError> {
        let state = match &self.state {
            State::Decomposed { .. } | State::Pointers { .. } => {
                let mut segs = Vec::with_capacity(picks.len());
                for &i in picks {
                    let (_, r) = self.seg_at(i, cur).ok_or(ContainerError::OutOfRange(i))?;
                    segs.push(r);
                }
                let dep = self.group().expect("decomposed");
                mgr.store.retain(dep)?;
                mgr.events.push(Event::Share {
                    container: id.to_string(),
                    primary: self.id.clone(),
                });
                State::Pointers { dep, segs }
            }
            State::Objects(v) => State::Objects(picks.iter().map(|&i| v[i].clone()).collect()),
            State::Released => return Err(ContainerError::Released(self.id.clone())),
        };
        Ok(CacheBlock {
            id: id.to_string(),
            role: Role::Secondary,
            layout: self.layout.clone(),
            state,
            reconstructed: self.reconstructed,
        })
    }

    /// Ends the block's lifetime, dropping its hold on any page group.
    pub fn release(&mut self, mgr: &mut MemoryManager) -> Result<(), ContainerError> {
        match std::mem::replace(&mut self.state, State::Released) {
            State::Decomposed { group, .. } => mgr.release_group(group, &self.id),
            State::Pointers { dep, .. } => mgr.release_group(dep, &self.id),
            State::Objects(_) => Ok(()),
            State::Released => Err(ContainerError::Released(self.id.clone())),
        }
    }

    /// Bytes of encoded records (decomposed) or 0.
    pub fn used_bytes(&self, mgr: &MemoryManager) -> u64 {
        match &self.state {
            State::Decomposed { group, .. } => {
                mgr.store.info(*group).map(|i| i.used_bytes()).unwrap_or(0)
            }
            State::Pointers { segs, .. } => segs.iter().map(|s| s.1 as u64).sum(),
            _ => 0,
        }
    }

    pub fn pages(&self, mgr: &MemoryManager) -> usize {
        match &self.state {
            State::Decomposed { group, .. } => {
                mgr.store.info(*group).map(|i| i.page_count()).unwrap_or(0)
            }
            _ => 0,
        }
    }

    /// Modelled heap bytes: page bytes plus pointer arrays when decomposed,
    /// the object model otherwise.
    pub fn modeled_bytes(&self, program: &Program, mgr: &MemoryManager) -> u64 {
        match &self.state {
            State::Decomposed { group, .. } => {
                let i = mgr.store.info(*group);
                i.map(|i| (i.pages.len() * mgr.store.page_size()) as u64)
                    .unwrap_or(0)
            }
            State::Pointers { segs, .. } => 16 + 8 * segs.len() as u64,
            State::Objects(v) => v.iter().map(|d| d.modeled_bytes(program)).sum(),
            State::Released => 0,
        }
    }

    /// Managed nodes a tracing collector would visit for this block.
    pub fn trace_nodes(&self, mgr: &MemoryManager) -> u64 {
        match &self.state {
            State::Decomposed { group, .. } => mgr
                .store
                .info(*group)
                .map(|i| i.pages.len() as u64)
                .unwrap_or(0),
            State::Pointers { .. } => 1,
            State::Objects(v) => v.iter().map(Datum::node_count).sum(),
            State::Released => 0,
        }
    }
}
