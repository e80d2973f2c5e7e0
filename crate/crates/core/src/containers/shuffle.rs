use std::collections::BTreeSet;

use crate::datum::Datum;
use crate::pagestore::{decode_object, encode_object, GroupId, Layout, SegmentRef};

use super::hash::{fnv1a, OpenTable};
use super::memory::{Event, MemoryManager};
use super::spill::{merge_sorted, write_run, MergeSource, RunReader, SpillRun};
use super::ContainerError;

/// Per-entry bookkeeping charged against the shuffle share.
const ENTRY_META: usize = 24;

fn object_bytes(d: &Datum) -> usize {
    d.node_count() as usize * 24
}

#[derive(Debug, Clone)]
enum Slot {
    Seg(SegmentRef, u32),
    Obj(Datum),
}

/// The page group a shuffle buffer appends into, created on first use.
#[derive(Debug)]
struct Pages {
    id: String,
    group: Option<GroupId>,
}

impl Pages {
    fn pages_needed(&self, len: usize, mgr: &MemoryManager) -> Result<usize, ContainerError> {
        if len == 0 {
            return Ok(0);
        }
        Ok(match self.group {
            None => 1,
            Some(g) => mgr.store.needs_page(g, len)? as usize,
        })
    }

    fn group(&mut self, mgr: &mut MemoryManager) -> Result<GroupId, ContainerError> {
        if let Some(g) = self.group {
            return Ok(g);
        }
        let g = mgr.store.allocate_group(&self.id)?;
        self.group = Some(g);
        Ok(g)
    }

    fn read(
        &self,
        slot: &Slot,
        layout: Option<&Layout>,
        mgr: &MemoryManager,
    ) -> Result<Datum, ContainerError> {
        match slot {
            Slot::Obj(d) => Ok(d.clone()),
            Slot::Seg(s, n) => {
                let g = self.group.expect("segment without a group");
                let b = mgr.store.read(g, *s, *n as usize)?;
                Ok(decode_object(&b, layout.expect("segment without a layout"))?.0)
            }
        }
    }

    fn release(&mut self, mgr: &mut MemoryManager) -> Result<(), ContainerError> {
        if let Some(g) = self.group.take() {
            mgr.store.release(g)?;
        }
        Ok(())
    }

    fn appended(&self, mgr: &MemoryManager) -> u64 {
        self.group
            .and_then(|g| mgr.store.info(g).ok())
            .map(|i| i.segments)
            .unwrap_or(0)
    }
}

/// Writes `records` (already in key order) as the buffer's next run.
fn spill_records(
    id: &str,
    records: &[(Datum, Datum)],
    kl: &Layout,
    vl: &Layout,
    mgr: &mut MemoryManager,
) -> Result<SpillRun, ContainerError> {
    let mut enc = Vec::with_capacity(records.len());
    for (k, v) in records {
        enc.push((encode_object(k, kl)?, encode_object(v, vl)?));
    }
    let (seq, path) = mgr.run_path(id);
    std::fs::create_dir_all(&mgr.spill_dir).map_err(|e| ContainerError::Io(e.to_string()))?;
    let run = write_run(&path, enc.iter().map(|(k, v)| (k.as_slice(), v.as_slice())))?;
    mgr.events.push(Event::Spill {
        container: id.to_string(),
        run: seq,
        records: run.records,
        bytes: run.bytes,
    });
    Ok(run)
}

/// Merges spilled runs with the in-memory tail; run order then tail order
/// breaks key ties. Run files are removed afterwards.
fn merge_runs(
    runs: &mut Vec<SpillRun>,
    tail: Vec<(Datum, Datum)>,
    kl: Option<&Layout>,
    vl: Option<&Layout>,
    page_size: usize,
    sink: impl FnMut(Datum, Datum) -> Result<(), ContainerError>,
) -> Result<(), ContainerError> {
    let mut sources = Vec::with_capacity(runs.len() + 1);
    if !runs.is_empty() {
        let (kl, vl) = (
            kl.expect("spilled without layout"),
            vl.expect("spilled without layout"),
        );
        let buf = page_size / (runs.len() + 1);
        for r in runs.iter() {
            sources.push(MergeSource::Run(
                RunReader::open(&r.path, buf)?,
                kl.clone(),
                vl.clone(),
            ));
        }
    }
    sources.push(MergeSource::Memory(tail.into_iter()));
    let res = merge_sorted(sources, sink);
    for r in runs.drain(..) {
        let _ = std::fs::remove_file(&r.path);
    }
    res
}

#[derive(Debug)]
struct Entry {
    hash: u64,
    key: Slot,
    val: Slot,
}

/// Hash-based shuffle buffer that combines values per key as they arrive.
///
/// Keys with a layout are stored as segments; values are stored as segments
/// only when their layout has a static size, so a combined value overwrites
/// its old segment in place. When both sizes are static, key and value are
/// appended back to back and no pointer array is kept.
#[derive(Debug)]
pub struct ReduceBuffer {
    pages: Pages,
    key_layout: Option<Layout>,
    val_layout: Option<Layout>,
    table: OpenTable,
    entries: Vec<Entry>,
    /// Keys already written to a run. Later values for them are kept
    /// uncombined so the final fold sees values in arrival order.
    spilled: BTreeSet<Datum>,
    raw: Vec<(Datum, Datum)>,
    runs: Vec<SpillRun>,
    meta: usize,
}

impl ReduceBuffer {
    pub fn new(id: &str, key_layout: Option<Layout>, val_layout: Option<Layout>) -> Self {
        ReduceBuffer {
            pages: Pages {
                id: id.to_string(),
                group: None,
            },
            key_layout,
            val_layout,
            table: OpenTable::new(),
            entries: Vec::new(),
            spilled: BTreeSet::new(),
            raw: Vec::new(),
            runs: Vec::new(),
            meta: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.pages.id
    }

    fn spillable(&self) -> bool {
        self.key_layout.is_some() && self.val_layout.is_some()
    }

    fn val_static(&self) -> bool {
        self.val_layout
            .as_ref()
            .and_then(Layout::static_size)
            .is_some()
    }

    /// Whether key and value share one allocation with no pointer array.
    pub fn elides_pointers(&self) -> bool {
        self.val_static()
            && self
                .key_layout
                .as_ref()
                .and_then(Layout::static_size)
                .is_some()
    }

    /// Number of distinct keys held in memory.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.raw.is_empty() && self.runs.is_empty()
    }

    pub fn runs(&self) -> usize {
        self.runs.len()
    }

    /// Segments appended to the current page group.
    pub fn appended_segments(&self, mgr: &MemoryManager) -> u64 {
        self.pages.appended(mgr)
    }

    fn charge(&mut self, meta: usize, mgr: &mut MemoryManager) {
        if self.spillable() {
            self.meta += meta;
            mgr.add_shuffle_meta(meta as isize);
        }
    }

    fn reserve(
        &mut self,
        bytes: usize,
        meta: usize,
        mgr: &mut MemoryManager,
    ) -> Result<(), ContainerError> {
        if !self.spillable() {
            return Ok(());
        }
        let pages = self.pages.pages_needed(bytes, mgr)?;
        if mgr.shuffle_pressure(pages, meta) && (!self.entries.is_empty() || !self.raw.is_empty()) {
            self.spill(mgr)?;
        }
        let pages = self.pages.pages_needed(bytes, mgr)?;
        mgr.shuffle_make_room(pages, meta)
    }

    /// Looks up the value currently held for `key`.
    pub fn get(&self, key: &Datum, mgr: &MemoryManager) -> Result<Option<Datum>, ContainerError> {
        let kb = self.key_bytes(key)?;
        match self.find(&kb, key, mgr)? {
            Some(i) => Ok(Some(self.pages.read(
                &self.entries[i].val,
                self.val_layout.as_ref(),
                mgr,
            )?)),
            None => Ok(None),
        }
    }

    fn key_bytes(&self, key: &Datum) -> Result<Vec<u8>, ContainerError> {
        Ok(match &self.key_layout {
            Some(l) => encode_object(key, l)?,
            None => key.canonical_bytes(),
        })
    }

    fn find(
        &self,
        kb: &[u8],
        key: &Datum,
        mgr: &MemoryManager,
    ) -> Result<Option<usize>, ContainerError> {
        let h = fnv1a(kb);
        let mut err = None;
        let found = self.table.find(h, |i| {
            let e = &self.entries[i];
            if e.hash != h {
                return false;
            }
            match &e.key {
                Slot::Obj(k) => k == key,
                Slot::Seg(s, n) => {
                    match mgr
                        .store
                        .read(self.pages.group.expect("group"), *s, *n as usize)
                    {
                        Ok(b) => &*b == kb,
                        Err(x) => {
                            err = Some(x);
                            false
                        }
                    }
                }
            }
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(found),
        }
    }

    pub fn insert(
        &mut self,
        key: Datum,
        val: Datum,
        combine: &mut dyn FnMut(&Datum, &Datum) -> Result<Datum, ContainerError>,
        mgr: &mut MemoryManager,
    ) -> Result<(), ContainerError> {
        if self.spilled.contains(&key) {
            let m = ENTRY_META + object_bytes(&val);
            self.reserve(0, m, mgr)?;
            if self.spilled.contains(&key) {
                self.charge(m, mgr);
                self.raw.push((key, val));
                return Ok(());
            }
        }
        let kb = self.key_bytes(&key)?;
        if let Some(i) = self.find(&kb, &key, mgr)? {
            let old = self
                .pages
                .read(&self.entries[i].val, self.val_layout.as_ref(), mgr)?;
            let new = combine(&old, &val)?;
            match self.entries[i].val {
                Slot::Seg(s, n) => {
                    let vb = encode_object(&new, self.val_layout.as_ref().expect("layout"))?;
                    if vb.len() != n as usize {
                        return Err(ContainerError::Combine(format!(
                            "combined value changed size from {n} to {} bytes",
                            vb.len()
                        )));
                    }
                    mgr.store.write(self.pages.group.expect("group"), s, &vb)?;
                }
                Slot::Obj(_) => self.entries[i].val = Slot::Obj(new),
            }
            return Ok(());
        }

        let vb = if self.val_static() {
            Some(encode_object(
                &val,
                self.val_layout.as_ref().expect("layout"),
            )?)
        } else {
            None
        };
        let seg_bytes = if self.key_layout.is_some() {
            kb.len()
        } else {
            0
        } + vb.as_ref().map_or(0, Vec::len);
        let mut meta = ENTRY_META;
        if self.key_layout.is_none() {
            meta += object_bytes(&key);
        }
        if vb.is_none() {
            meta += object_bytes(&val);
        }
        self.reserve(seg_bytes, meta, mgr)?;
        if self.spilled.contains(&key) {
            // The reservation spilled this buffer and this key with it.
            self.charge(ENTRY_META + object_bytes(&val), mgr);
            self.raw.push((key, val));
            return Ok(());
        }
        let h = fnv1a(&kb);
        let (ks, vs) = match (&self.key_layout, vb) {
            (Some(_), Some(vb)) => {
                let g = self.pages.group(mgr)?;
                let s = mgr.store.append_pair(g, &kb, &vb)?;
                let vs = SegmentRef::new(s.page(), s.offset() + kb.len() as u32);
                (
                    Slot::Seg(s, kb.len() as u32),
                    Slot::Seg(vs, vb.len() as u32),
                )
            }
            (Some(_), None) => {
                let g = self.pages.group(mgr)?;
                let s = mgr.store.append(g, &kb)?;
                (Slot::Seg(s, kb.len() as u32), Slot::Obj(val))
            }
            (None, Some(vb)) => {
                let g = self.pages.group(mgr)?;
                let s = mgr.store.append(g, &vb)?;
                (Slot::Obj(key), Slot::Seg(s, vb.len() as u32))
            }
            (None, None) => (Slot::Obj(key), Slot::Obj(val)),
        };
        self.charge(meta, mgr);
        let idx = self.entries.len();
        self.entries.push(Entry {
            hash: h,
            key: ks,
            val: vs,
        });
        let entries = &self.entries;
        let before = self.table.footprint();
        self.table.insert(h, idx, |e| entries[e].hash);
        let grown = self.table.footprint() - before;
        self.charge(grown, mgr);
        Ok(())
    }

    /// In-memory contents as key-sorted records; raw values after the
    /// combined ones for the same key cannot occur since those keys differ.
    fn drain_sorted(
        &mut self,
        mgr: &mut MemoryManager,
    ) -> Result<Vec<(Datum, Datum)>, ContainerError> {
        let mut out = Vec::with_capacity(self.entries.len() + self.raw.len());
        for e in &self.entries {
            let k = self.pages.read(&e.key, self.key_layout.as_ref(), mgr)?;
            let v = self.pages.read(&e.val, self.val_layout.as_ref(), mgr)?;
            out.push((k, v));
        }
        out.append(&mut self.raw);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        self.entries.clear();
        self.table.clear();
        self.pages.release(mgr)?;
        mgr.add_shuffle_meta(-(self.meta as isize));
        self.meta = 0;
        Ok(out)
    }

    /// Writes the in-memory contents as one sorted run.
    pub fn spill(&mut self, mgr: &mut MemoryManager) -> Result<(), ContainerError> {
        if !self.spillable() {
            return Ok(());
        }
        let recs = self.drain_sorted(mgr)?;
        if recs.is_empty() {
            return Ok(());
        }
        for (k, _) in &recs {
            if !self.spilled.contains(k) {
                self.spilled.insert(k.clone());
            }
        }
        let (kl, vl) = (
            self.key_layout.clone().expect("layout"),
            self.val_layout.clone().expect("layout"),
        );
        let run = spill_records(&self.pages.id, &recs, &kl, &vl, mgr)?;
        self.runs.push(run);
        Ok(())
    }

    /// Final combined value per key, in key order. Releases everything.
    pub fn finish(
        &mut self,
        combine: &mut dyn FnMut(&Datum, &Datum) -> Result<Datum, ContainerError>,
        mgr: &mut MemoryManager,
    ) -> Result<Vec<(Datum, Datum)>, ContainerError> {
        let tail = self.drain_sorted(mgr)?;
        self.spilled.clear();
        if self.runs.is_empty() {
            return Ok(tail);
        }
        let mut out: Vec<(Datum, Datum)> = Vec::new();
        let ps = mgr.store.page_size();
        merge_runs(
            &mut self.runs,
            tail,
            self.key_layout.as_ref(),
            self.val_layout.as_ref(),
            ps,
            |k, v| {
                match out.last_mut() {
                    Some((lk, lv)) if *lk == k => *lv = combine(lv, &v)?,
                    _ => out.push((k, v)),
                }
                Ok(())
            },
        )?;
        Ok(out)
    }

    /// Drops all contents without producing output.
    pub fn release(&mut self, mgr: &mut MemoryManager) -> Result<(), ContainerError> {
        self.drain_sorted(mgr)?;
        for r in self.runs.drain(..) {
            let _ = std::fs::remove_file(&r.path);
        }
        self.spilled.clear();
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Val {
    Slot(Slot),
    /// A record in another container's page group.
    Ptr(GroupId, SegmentRef, u32),
}

/// Sort-based shuffle buffer: appends key/value records and yields them
/// stably sorted by key.
#[derive(Debug)]
pub struct SortBuffer {
    pages: Pages,
    key_layout: Option<Layout>,
    val_layout: Option<Layout>,
    recs: Vec<(Slot, Val)>,
    deps: Vec<GroupId>,
    runs: Vec<SpillRun>,
    meta: usize,
}

impl SortBuffer {
    pub fn new(id: &str, key_layout: Option<Layout>, val_layout: Option<Layout>) -> Self {
        SortBuffer {
            pages: Pages {
                id: id.to_string(),
                group: None,
            },
            key_layout,
            val_layout,
            recs: Vec::new(),
            deps: Vec::new(),
            runs: Vec::new(),
            meta: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.recs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recs.is_empty() && self.runs.is_empty()
    }

    pub fn runs(&self) -> usize {
        self.runs.len()
    }

    /// Groups this buffer holds pointers into.
    pub fn dependencies(&self) -> &[GroupId] {
        &self.deps
    }

    fn spillable(&self) -> bool {
        self.key_layout.is_some() && self.val_layout.is_some() && self.deps.is_empty()
    }

    fn reserve(
        &mut self,
        bytes: usize,
        meta: usize,
        mgr: &mut MemoryManager,
    ) -> Result<(), ContainerError> {
        if self.key_layout.is_none() && self.val_layout.is_none() {
            return Ok(());
        }
        let pages = self.pages.pages_needed(bytes, mgr)?;
        if self.spillable() && mgr.shuffle_pressure(pages, meta) && !self.recs.is_empty() {
            self.spill(mgr)?;
        }
        let pages = self.pages.pages_needed(bytes, mgr)?;
        // A buffer of pointers is never spilled; cache eviction makes room.
        mgr.shuffle_make_room(pages, meta)
    }

    fn charge(&mut self, meta: usize, mgr: &mut MemoryManager) {
        if self.key_layout.is_some() || self.val_layout.is_some() {
            self.meta += meta;
            mgr.add_shuffle_meta(meta as isize);
        }
    }

    fn key_slot(
        &mut self,
        key: Datum,
        kb: Option<Vec<u8>>,
        mgr: &mut MemoryManager,
    ) -> Result<Slot, ContainerError> {
        Ok(match kb {
            Some(kb) => {
                let g = self.pages.group(mgr)?;
                Slot::Seg(mgr.store.append(g, &kb)?, kb.len() as u32)
            }
            None => Slot::Obj(key),
        })
    }

    pub fn insert(
        &mut self,
        key: Datum,
        val: Datum,
        mgr: &mut MemoryManager,
    ) -> Result<(), ContainerError> {
        let kb = match &self.key_layout {
            Some(l) => Some(encode_object(&key, l)?),
            None => None,
        };
        let vb = match &self.val_layout {
            Some(l) => Some(encode_object(&val, l)?),
            None => None,
        };
        let bytes = kb.as_ref().map_or(0, Vec::len) + vb.as_ref().map_or(0, Vec::len);
        let mut meta = 2 * 8;
        if kb.is_none() {
            meta += object_bytes(&key);
        }
        if vb.is_none() {
            meta += object_bytes(&val);
        }
        self.reserve(bytes, meta, mgr)?;
        let rec = match (kb, vb) {
            (Some(kb), Some(vb)) => {
                let g = self.pages.group(mgr)?;
                let s = mgr.store.append_pair(g, &kb, &vb)?;
                let vs = SegmentRef::new(s.page(), s.offset() + kb.len() as u32);
                (
                    Slot::Seg(s, kb.len() as u32),
                    Val::Slot(Slot::Seg(vs, vb.len() as u32)),
                )
            }
            (kb, Some(vb)) => {
                let ks = self.key_slot(key, kb, mgr)?;
                let g = self.pages.group(mgr)?;
                let s = mgr.store.append(g, &vb)?;
                (ks, Val::Slot(Slot::Seg(s, vb.len() as u32)))
            }
            (kb, None) => (self.key_slot(key, kb, mgr)?, Val::Slot(Slot::Obj(val))),
        };
        self.charge(meta, mgr);
        self.recs.push(rec);
        Ok(())
    }

    /// Adds a record whose value stays in `dep`, another container's page
    /// group. The group is kept alive (and pinned against eviction) until
    /// this buffer is finished.
    pub fn insert_pointer(
        &mut self,
        key: Datum,
        dep: GroupId,
        seg: SegmentRef,
        len: u32,
        mgr: &mut MemoryManager,
    ) -> Result<(), ContainerError> {
        if !self.runs.is_empty() {
            return Err(ContainerError::Sealed(self.pages.id.clone()));
        }
        let kb = match &self.key_layout {
            Some(l) => Some(encode_object(&key, l)?),
            None => None,
        };
        let bytes = kb.as_ref().map_or(0, Vec::len);
        let meta = 2 * 8 + if kb.is_none() { object_bytes(&key) } else { 0 };
        if !self.deps.contains(&dep) {
            mgr.store.retain(dep)?;
            self.deps.push(dep);
        }
        self.reserve(bytes, meta, mgr)?;
        let ks = self.key_slot(key, kb, mgr)?;
        self.charge(meta, mgr);
        self.recs.push((ks, Val::Ptr(dep, seg, len)));
        Ok(())
    }

    fn drain_sorted(
        &mut self,
        mgr: &mut MemoryManager,
    ) -> Result<Vec<(Datum, Datum)>, ContainerError> {
        let mut out = Vec::with_capacity(self.recs.len());
        for (k, v) in &self.recs {
            let k = self.pages.read(k, self.key_layout.as_ref(), mgr)?;
            let v = match v {
                Val::Slot(s) => self.pages.read(s, self.val_layout.as_ref(), mgr)?,
                Val::Ptr(g, s, n) => {
                    let b = mgr.store.read(*g, *s, *n as usize)?;
                    decode_object(
                        &b,
                        self.val_layout.as_ref().expect("pointer without layout"),
                    )?
                    .0
                }
            };
            out.push((k, v));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        self.recs.clear();
        self.pages.release(mgr)?;
        for d in self.deps.drain(..) {
            mgr.store.release(d)?;
        }
        mgr.add_shuffle_meta(-(self.meta as isize));
        self.meta = 0;
        Ok(out)
    }

    pub fn spill(&mut self, mgr: &mut MemoryManager) -> Result<(), ContainerError> {
        if !self.spillable() {
            return Ok(());
        }
        let recs = self.drain_sorted(mgr)?;
        if recs.is_empty() {
            return Ok(());
        }
        let (kl, vl) = (
            self.key_layout.clone().expect("layout"),
            self.val_layout.clone().expect("layout"),
        );
        let run = spill_records(&self.pages.id, &recs, &kl, &vl, mgr)?;
        self.runs.push(run);
        Ok(())
    }

    /// All records, stably sorted by key. Releases everything.
    pub fn finish(
        &mut self,
        mgr: &mut MemoryManager,
    ) -> Result<Vec<(Datum, Datum)>, ContainerError> {
        let tail = self.drain_sorted(mgr)?;
        if self.runs.is_empty() {
            return Ok(tail);
        }
        let mut out = Vec::new();
        let ps = mgr.store.page_size();
        merge_runs(
            &mut self.runs,
            tail,
            self.key_layout.as_ref(),
            self.val_layout.as_ref(),
            ps,
            |k, v| {
                out.push((k, v));
                Ok(())
            },
        )?;
        Ok(out)
    }

    pub fn release(&mut self, mgr: &mut MemoryManager) -> Result<(), ContainerError> {
        self.drain_sorted(mgr)?;
        for r in self.runs.drain(..) {
            let _ = std::fs::remove_file(&r.path);
        }
        Ok(())
    }
}

/// Hash-based grouping buffer. Value lists grow while the buffer is being
/// filled, so they are always kept as objects; each list keeps insertion
/// order.
#[derive(Debug, Default)]
pub struct GroupBuffer {
    table: OpenTable,
    groups: Vec<(u64, Datum, Vec<Datum>)>,
}

impl GroupBuffer {
    pub fn new() -> Self {
        GroupBuffer::default()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn insert(&mut self, key: Datum, val: Datum) {
        let h = fnv1a(&key.canonical_bytes());
        let groups = &self.groups;
        match self
            .table
            .find(h, |i| groups[i].0 == h && groups[i].1 == key)
        {
            Some(i) => self.groups[i].2.push(val),
            None => {
                let idx = self.groups.len();
                self.groups.push((h, key, vec![val]));
                let groups = &self.groups;
                self.table.insert(h, idx, |i| groups[i].0);
            }
        }
    }

    pub fn get(&self, key: &Datum) -> Option<&[Datum]> {
        let h = fnv1a(&key.canonical_bytes());
        self.table
            .find(h, |i| self.groups[i].0 == h && &self.groups[i].1 == key)
            .map(|i| self.groups[i].2.as_slice())
    }

    /// Key-sorted groups. Empties the buffer.
    pub fn finish(&mut self) -> Vec<(Datum, Vec<Datum>)> {
        self.table.clear();
        let mut out: Vec<(Datum, Vec<Datum>)> =
            self.groups.drain(..).map(|(_, k, v)| (k, v)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::containers::StorageLevel;
    use crate::pagestore::ArrayLen;

    fn long() -> Layout {
        Layout::Prim(crate::ir::PrimKind::Long)
    }

    fn mgr(dir: &std::path::Path, budget: usize) -> MemoryManager {
        MemoryManager::new(
            256,
            budget,
            0.5,
            StorageLevel::MemoryAndDisk,
            dir.to_path_buf(),
        )
        .unwrap()
    }

    fn sum(a: &Datum, b: &Datum) -> Result<Datum, ContainerError> {
        Ok(Datum::Int(a.as_int().unwrap() + b.as_int().unwrap()))
    }

    #[test]
    fn combine_overwrites_in_place() {
        let d = tempfile::tempdir().unwrap();
        let mut m = mgr(d.path(), 1 << 16);
        let mut b = ReduceBuffer::new("r", Some(long()), Some(long()));
        b.insert(Datum::Int(7), Datum::Int(1), &mut sum, &mut m)
            .unwrap();
        b.insert(Datum::Int(7), Datum::Int(2), &mut sum, &mut m)
            .unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.appended_segments(&m), 2);
        assert_eq!(b.get(&Datum::Int(7), &m).unwrap(), Some(Datum::Int(3)));
        assert_eq!(b.get(&Datum::Int(8), &m).unwrap(), None);
        assert!(b.elides_pointers());
    }

    #[test]
    fn spilled_reduce_matches_unspilled() {
        let d = tempfile::tempdir().unwrap();
        let input: Vec<(i64, i64)> = (0..2000).map(|i| ((i * 7919) % 173, i)).collect();
        let run = |budget: usize| {
            let mut m = mgr(d.path(), budget);
            let mut b = ReduceBuffer::new("r", Some(long()), Some(long()));
            for &(k, v) in &input {
                b.insert(Datum::Int(k), Datum::Int(v), &mut sum, &mut m)
                    .unwrap();
            }
            let runs = b.runs();
            let out = b.finish(&mut sum, &mut m).unwrap();
            assert_eq!(m.store.live_pages(), 0);
            (out, runs)
        };
        let (a, ra) = run(1 << 20);
        let (b, rb) = run(512);
        assert_eq!(ra, 0);
        assert!(rb >= 3, "{rb} runs");
        assert_eq!(a, b);
        assert!(std::fs::read_dir(d.path()).unwrap().next().is_none());
    }

    #[test]
    fn float_fold_order_survives_spill() {
        let d = tempfile::tempdir().unwrap();
        let dl = Layout::Prim(crate::ir::PrimKind::Double);
        let mut fsum =
            |a: &Datum, b: &Datum| Ok(Datum::Float(a.as_float().unwrap() + b.as_float().unwrap()));
        let input: Vec<(i64, f64)> = (0..3000).map(|i| (i % 5, 1.0 / (i as f64 + 3.0))).collect();
        let mut expect = std::collections::BTreeMap::new();
        for &(k, v) in &input {
            let e = expect.entry(k).or_insert(None::<f64>);
            *e = Some(match *e {
                None => v,
                Some(a) => a + v,
            });
        }
        let mut m = mgr(d.path(), 512);
        let mut b = ReduceBuffer::new("f", Some(long()), Some(dl));
        for (i, &(k, v)) in input.iter().enumerate() {
            b.insert(Datum::Int(k), Datum::Float(v), &mut fsum, &mut m)
                .unwrap();
            if i % 400 == 399 {
                b.spill(&mut m).unwrap();
            }
        }
        assert!(b.runs() >= 3);
        let out = b.finish(&mut fsum, &mut m).unwrap();
        let got: Vec<(i64, u64)> = out
            .iter()
            .map(|(k, v)| (k.as_int().unwrap(), v.as_float().unwrap().to_bits()))
            .collect();
        let want: Vec<(i64, u64)> = expect
            .iter()
            .map(|(k, v)| (*k, v.unwrap().to_bits()))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn sort_is_stable_across_runs() {
        let d = tempfile::tempdir().unwrap();
        let input: Vec<(i64, i64)> = (0..1500).map(|i| ((i * 31) % 11, i)).collect();
        let mut want = input.clone();
        want.sort_by_key(|p| p.0);
        let mut m = mgr(d.path(), 512);
        let mut b = SortBuffer::new("s", Some(long()), Some(long()));
        for &(k, v) in &input {
            b.insert(Datum::Int(k), Datum::Int(v), &mut m).unwrap();
        }
        assert!(b.runs() >= 3);
        let got: Vec<(i64, i64)> = b
            .finish(&mut m)
            .unwrap()
            .into_iter()
            .map(|(k, v)| (k.as_int().unwrap(), v.as_int().unwrap()))
            .collect();
        assert_eq!(got, want);
        assert_eq!(m.store.live_pages(), 0);
    }

    #[test]
    fn empty_sort_buffer_yields_nothing() {
        let d = tempfile::tempdir().unwrap();
        let mut m = mgr(d.path(), 4096);
        let mut b = SortBuffer::new("s", Some(long()), Some(long()));
        assert!(b.finish(&mut m).unwrap().is_empty());
    }

    #[test]
    fn pointer_sort_pins_and_evicts_instead_of_spilling() {
        let d = tempfile::tempdir().unwrap();
        let mut m = mgr(d.path(), 256 * 4);
        let arr = Layout::Array {
            ty: "Array[long]".into(),
            elem: Box::new(long()),
            len: ArrayLen::Const(4),
        };
        let g = m.store.allocate_group("cache0").unwrap();
        m.register_cache_group(g);
        let mut segs = Vec::new();
        for i in 0..6i64 {
            let b = encode_object(&Datum::longs(&[i, i, i, i]), &arr).unwrap();
            segs.push((m.cache_append(g, &b).unwrap(), b.len() as u32));
        }
        let other = m.store.allocate_group("cache1").unwrap();
        m.register_cache_group(other);
        m.cache_append(other, &[1u8; 200]).unwrap();

        let mut s = SortBuffer::new("s", Some(long()), Some(arr));
        for (i, &(seg, n)) in segs.iter().enumerate().rev() {
            s.insert_pointer(Datum::Int(i as i64), g, seg, n, &mut m)
                .unwrap();
        }
        assert_eq!(m.store.info(g).unwrap().ref_count, 2);
        // Force pressure: the pinned group cannot go, the other one can.
        m.shuffle_make_room(2, 0).unwrap();
        assert!(m.store.info(other).unwrap().swapped.is_some());
        assert!(m.store.info(g).unwrap().swapped.is_none());
        let out = s.finish(&mut m).unwrap();
        assert_eq!(s.runs(), 0);
        assert_eq!(out[2], (Datum::Int(2), Datum::longs(&[2, 2, 2, 2])));
        assert_eq!(m.store.info(g).unwrap().ref_count, 1);
    }

    #[test]
    fn group_lists_keep_insertion_order() {
        let mut g = GroupBuffer::new();
        g.insert(Datum::Int(2), Datum::Int(5));
        g.insert(Datum::Int(1), Datum::Int(9));
        g.insert(Datum::Int(2), Datum::Int(4));
        assert_eq!(
            g.get(&Datum::Int(2)).unwrap(),
            &[Datum::Int(5), Datum::Int(4)]
        );
        let out = g.finish();
        assert_eq!(out[0].0, Datum::Int(1));
        assert_eq!(out[1].1, vec![Datum::Int(5), Datum::Int(4)]);
    }
}
