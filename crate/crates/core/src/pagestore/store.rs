use std::borrow::Cow;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::StoreError;

pub const DEFAULT_PAGE_SIZE: usize = 64 * 1024;

/// Location of a segment within a page group: page index in the group in
/// the high 32 bits, byte offset within that page in the low 32 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentRef(pub u64);

impl SegmentRef {
    pub fn new(page: u32, offset: u32) -> Self {
        SegmentRef(((page as u64) << 32) | offset as u64)
    }

    pub fn page(self) -> u32 {
        (self.0 >> 32) as u32
    }

    pub fn offset(self) -> u32 {
        self.0 as u32
    }
}

/// Handle of a page group inside a [`PageStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(pub u32);

/// Page-group metadata.
#[derive(Debug, Clone)]
pub struct PageInfo {
    pub owner: String,
    /// Store page slots, in group order. Empty while swapped out.
    pub pages: Vec<u32>,
    /// Start of unused space in the last page.
    pub end_offset: usize,
    pub cur_page: usize,
    pub cur_offset: usize,
    /// Groups of primary containers this group's pointers refer into.
    pub dep_pages: Vec<GroupId>,
    pub ref_count: u32,
    pub lru_tick: u64,
    /// Bytes used in each page; slack after the last segment is not counted.
    pub used: Vec<u32>,
    pub segments: u64,
    /// Swap file holding the group's bytes while evicted.
    pub swapped: Option<PathBuf>,
}

impl PageInfo {
    pub fn page_count(&self) -> usize {
        self.used.len()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used.iter().map(|&u| u as u64).sum()
    }

    fn file_offset(&self, seg: SegmentRef) -> u64 {
        let p = seg.page() as usize;
        self.used[..p].iter().map(|&u| u as u64).sum::<u64>() + seg.offset() as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub pages_allocated: u64,
    pub pages_freed: u64,
    pub peak_pages: usize,
    pub swap_outs: u64,
    pub swap_bytes: u64,
}

/// A pool of equally sized pages handed out to page groups.
#[derive(Debug)]
pub struct PageStore {
    page_size: usize,
    max_pages: usize,
    slots: Vec<Option<Box<[u8]>>>,
    free_slots: Vec<u32>,
    spare: Vec<Box<[u8]>>,
    live_pages: usize,
    groups: Vec<Option<PageInfo>>,
    tick: u64,
    pub stats: StoreStats,
}

impl PageStore {
    /// A store of `page_size`-byte pages holding at most `budget` bytes of pages.
    pub fn new(page_size: usize, budget: usize) -> Result<Self, StoreError> {
        if page_size == 0 || page_size > u32::MAX as usize {
            return Err(StoreError::BadPageSize(page_size));
        }
        let max_pages = budget / page_size;
        if max_pages == 0 {
            return Err(StoreError::BudgetTooSmall { budget, page_size });
        }
        Ok(PageStore {
            page_size,
            max_pages,
            slots: Vec::new(),
            free_slots: Vec::new(),
            spare: Vec::new(),
            live_pages: 0,
            groups: Vec::new(),
            tick: 0,
            stats: StoreStats::default(),
        })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn max_pages(&self) -> usize {
        self.max_pages
    }

    pub fn live_pages(&self) -> usize {
        self.live_pages
    }

    pub fn free_pages(&self) -> usize {
        self.max_pages - self.live_pages
    }

    /// Creates an empty group with one reference. Fails when no page could
    /// ever be given to it.
    pub fn allocate_group(&mut self, owner: &str) -> Result<GroupId, StoreError> {
        if self.live_pages >= self.max_pages {
            return Err(StoreError::BudgetExhausted);
        }
        let info = PageInfo {
            owner: owner.to_string(),
            pages: Vec::new(),
            end_offset: 0,
            cur_page: 0,
            cur_offset: 0,
            dep_pages: Vec::new(),
            ref_count: 1,
            lru_tick: self.next_tick(),
            used: Vec::new(),
            segments: 0,
            swapped: None,
        };
        self.groups.push(Some(info));
        Ok(GroupId(self.groups.len() as u32 - 1))
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    pub fn info(&self, g: GroupId) -> Result<&PageInfo, StoreError> {
        self.groups
            .get(g.0 as usize)
            .and_then(Option::as_ref)
            .ok_or(StoreError::DeadGroup(g.0))
    }

    fn info_mut(&mut self, g: GroupId) -> Result<&mut PageInfo, StoreError> {
        self.groups
            .get_mut(g.0 as usize)
            .and_then(Option::as_mut)
            .ok_or(StoreError::DeadGroup(g.0))
    }

    pub fn is_live(&self, g: GroupId) -> bool {
        self.info(g).is_ok()
    }

    /// Live groups in id order.
    pub fn groups(&self) -> impl Iterator<Item = (GroupId, &PageInfo)> {
        self.groups
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (GroupId(i as u32), g)))
    }

    /// Marks a group as just used.
    pub fn touch(&mut self, g: GroupId) -> Result<(), StoreError> {
        let t = self.next_tick();
        self.info_mut(g)?.lru_tick = t;
        Ok(())
    }

    fn new_page(&mut self) -> Result<u32, StoreError> {
        if self.live_pages >= self.max_pages {
            return Err(StoreError::BudgetExhausted);
        }
        let buf = match self.spare.pop() {
            Some(mut b) => {
                b.fill(0);
                b
            }
            None => vec![0u8; self.page_size].into_boxed_slice(),
        };
        let slot = match self.free_slots.pop() {
            Some(s) => {
                self.slots[s as usize] = Some(buf);
                s
            }
            None => {
                self.slots.push(Some(buf));
                self.slots.len() as u32 - 1
            }
        };
        self.live_pages += 1;
        self.stats.pages_allocated += 1;
        self.stats.peak_pages = self.stats.peak_pages.max(self.live_pages);
        Ok(slot)
    }

    fn free_page(&mut self, slot: u32) {
        if let Some(buf) = self.slots[slot as usize].take() {
            if self.spare.len() < 64 {
                self.spare.push(buf);
            }
            self.free_slots.push(slot);
            self.live_pages -= 1;
            self.stats.pages_freed += 1;
        }
    }

    /// Whether appending `len` bytes to `g` needs a fresh page in memory.
    pub fn needs_page(&self, g: GroupId, len: usize) -> Result<bool, StoreError> {
        let info = self.info(g)?;
        Ok(info.swapped.is_none()
            && (info.pages.is_empty() || info.end_offset + len > self.page_size))
    }

    /// Appends one segment. A segment that does not fit in the remaining
    /// space of the last page starts a new page; the slack stays unused.
    pub fn append(&mut self, g: GroupId, bytes: &[u8]) -> Result<SegmentRef, StoreError> {
        let r = self.reserve(g, bytes.len())?;
        self.write(g, r, bytes)?;
        self.info_mut(g)?.segments += 1;
        Ok(r)
    }

    /// Appends two segments contiguously in one page and returns the first.
    pub fn append_pair(
        &mut self,
        g: GroupId,
        a: &[u8],
        b: &[u8],
    ) -> Result<SegmentRef, StoreError> {
        let r = self.reserve(g, a.len() + b.len())?;
        self.write(g, r, a)?;
        self.write(g, SegmentRef::new(r.page(), r.offset() + a.len() as u32), b)?;
        self.info_mut(g)?.segments += 2;
        Ok(r)
    }

    fn reserve(&mut self, g: GroupId, len: usize) -> Result<SegmentRef, StoreError> {
        if len > self.page_size {
            return Err(StoreError::SegmentTooLarge {
                len,
                page_size: self.page_size,
            });
        }
        let info = self.info(g)?;
        let fresh = info.used.is_empty() || info.end_offset + len > self.page_size;
        if info.swapped.is_some() {
            // Growth of an evicted group goes straight to its swap file,
            // which always ends at the group's last used byte.
            let info = self.info_mut(g)?;
            if fresh {
                info.used.push(0);
                info.end_offset = 0;
            }
        } else if fresh {
            let slot = self.new_page()?;
            let info = self.info_mut(g)?;
            info.pages.push(slot);
            info.used.push(0);
            info.end_offset = 0;
        }
        let t = self.next_tick();
        let info = self.info_mut(g)?;
        let page = info.used.len() as u32 - 1;
        let r = SegmentRef::new(page, info.end_offset as u32);
        info.end_offset += len;
        *info.used.last_mut().expect("page") = info.end_offset as u32;
        info.lru_tick = t;
        Ok(r)
    }

    /// Reads `len` bytes at `seg`, from memory or through the swap file.
    pub fn read(
        &self,
        g: GroupId,
        seg: SegmentRef,
        len: usize,
    ) -> Result<Cow<'_, [u8]>, StoreError> {
        let info = self.info(g)?;
        let p = seg.page() as usize;
        let off = seg.offset() as usize;
        if p >= info.used.len() || off + len > info.used[p] as usize {
            return Err(StoreError::OutOfBounds);
        }
        if let Some(path) = &info.swapped {
            let mut f = File::open(path).map_err(|e| StoreError::Io(e.to_string()))?;
            f.seek(SeekFrom::Start(info.file_offset(seg)))
                .map_err(|e| StoreError::Io(e.to_string()))?;
            let mut buf = vec![0u8; len];
            f.read_exact(&mut buf)
                .map_err(|e| StoreError::Io(e.to_string()))?;
            return Ok(Cow::Owned(buf));
        }
        let page = self.slots[info.pages[p] as usize]
            .as_ref()
            .expect("live page");
        Ok(Cow::Borrowed(&page[off..off + len]))
    }

    /// The used bytes of page `p` of a group, starting at `offset`.
    pub fn page_tail(
        &self,
        g: GroupId,
        p: usize,
        offset: usize,
    ) -> Result<Cow<'_, [u8]>, StoreError> {
        let info = self.info(g)?;
        let used = *info.used.get(p).ok_or(StoreError::OutOfBounds)? as usize;
        if offset > used {
            return Err(StoreError::OutOfBounds);
        }
        self.read(g, SegmentRef::new(p as u32, offset as u32), used - offset)
    }

    /// Overwrites bytes inside already appended space.
    pub fn write(&mut self, g: GroupId, seg: SegmentRef, bytes: &[u8]) -> Result<(), StoreError> {
        let info = self.info(g)?;
        let p = seg.page() as usize;
        let off = seg.offset() as usize;
        if p >= info.used.len() || off + bytes.len() > info.used[p] as usize {
            return Err(StoreError::OutOfBounds);
        }
        if let Some(path) = &info.swapped {
            let mut f = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(|e| StoreError::Io(e.to_string()))?;
            f.seek(SeekFrom::Start(info.file_offset(seg)))
                .map_err(|e| StoreError::Io(e.to_string()))?;
            return f
                .write_all(bytes)
                .map_err(|e| StoreError::Io(e.to_string()));
        }
        let slot = info.pages[p] as usize;
        let page = self.slots[slot].as_mut().expect("live page");
        page[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// All segments of the group in append order, given a function that
    /// measures the segment starting at a byte slice. Moves the scan cursor.
    pub fn scan(
        &mut self,
        g: GroupId,
        seg_len: &mut dyn FnMut(&[u8]) -> Result<usize, StoreError>,
    ) -> Result<Vec<SegmentRef>, StoreError> {
        let pages = self.info(g)?.page_count();
        let mut out = Vec::new();
        let (mut cp, mut co) = (0usize, 0usize);
        while cp < pages {
            let tail = self.page_tail(g, cp, co)?;
            if tail.is_empty() {
                cp += 1;
                co = 0;
                continue;
            }
            let mut pos = 0;
            while pos < tail.len() {
                let n = seg_len(&tail[pos..])?;
                if n == 0 {
                    return Err(StoreError::OutOfBounds);
                }
                out.push(SegmentRef::new(cp as u32, (co + pos) as u32));
                pos += n;
            }
            co += pos;
        }
        let info = self.info_mut(g)?;
        info.cur_page = cp.min(pages.saturating_sub(1));
        info.cur_offset = if pages == 0 {
            0
        } else {
            info.used[info.cur_page] as usize
        };
        Ok(out)
    }

    /// Adds an owner; returns the new count.
    pub fn retain(&mut self, g: GroupId) -> Result<u32, StoreError> {
        let info = self.info_mut(g)?;
        info.ref_count += 1;
        Ok(info.ref_count)
    }

    /// Drops an owner. At zero every page returns to the store, the swap
    /// file is removed, dependency groups are released, and the group dies.
    pub fn release(&mut self, g: GroupId) -> Result<u32, StoreError> {
        let info = self.info_mut(g)?;
        info.ref_count -= 1;
        if info.ref_count > 0 {
            return Ok(info.ref_count);
        }
        let info = self.groups[g.0 as usize].take().expect("live");
        for s in info.pages {
            self.free_page(s);
        }
        if let Some(p) = info.swapped {
            let _ = std::fs::remove_file(p);
        }
        for d in info.dep_pages {
            self.release(d)?;
        }
        Ok(0)
    }

    /// Records that `g` holds pointers into `dep`, keeping `dep` alive.
    pub fn add_dependency(&mut self, g: GroupId, dep: GroupId) -> Result<(), StoreError> {
        self.retain(dep)?;
        self.info_mut(g)?.dep_pages.push(dep);
        Ok(())
    }

    /// Writes the group's used bytes to `path` (concatenated segments) and
    /// returns its pages to the store. Later reads and writes go to the file.
    pub fn swap_out(&mut self, g: GroupId, path: &Path) -> Result<u64, StoreError> {
        let info = self.info(g)?;
        if info.swapped.is_some() {
            return Ok(0);
        }
        let mut f = File::create(path).map_err(|e| StoreError::Io(e.to_string()))?;
        let mut written = 0u64;
        for (i, &slot) in info.pages.iter().enumerate() {
            let used = info.used[i] as usize;
            let page = self.slots[slot as usize].as_ref().expect("live page");
            f.write_all(&page[..used])
                .map_err(|e| StoreError::Io(e.to_string()))?;
            written += used as u64;
        }
        f.flush().map_err(|e| StoreError::Io(e.to_string()))?;
        let info = self.info_mut(g)?;
        let pages = std::mem::take(&mut info.pages);
        info.swapped = Some(path.to_path_buf());
        for s in pages {
            self.free_page(s);
        }
        self.stats.swap_outs += 1;
        self.stats.swap_bytes += written;
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_ref_packs_page_high() {
        let r = SegmentRef::new(3, 17);
        assert_eq!(r.0, (3u64 << 32) | 17);
        assert_eq!((r.page(), r.offset()), (3, 17));
    }

    #[test]
    fn first_append_lands_at_origin() {
        let mut s = PageStore::new(DEFAULT_PAGE_SIZE, 4 * DEFAULT_PAGE_SIZE).unwrap();
        let g = s.allocate_group("c").unwrap();
        assert!(s.info(g).unwrap().pages.is_empty());
        let r = s.append(g, &[7u8; 100]).unwrap();
        assert_eq!(r, SegmentRef::new(0, 0));
        assert_eq!(s.info(g).unwrap().end_offset, 100);
    }

    #[test]
    fn segments_never_span_pages() {
        let mut s = PageStore::new(256, 1024).unwrap();
        let g = s.allocate_group("c").unwrap();
        s.append(g, &[1u8; 206]).unwrap();
        let r = s.append(g, &[2u8; 100]).unwrap();
        assert_eq!(r, SegmentRef::new(1, 0));
        assert!(matches!(
            s.append(g, &[0u8; 257]),
            Err(StoreError::SegmentTooLarge { .. })
        ));
    }

    #[test]
    fn refcount_frees_exactly_once() {
        let mut s = PageStore::new(256, 1024).unwrap();
        let g = s.allocate_group("c").unwrap();
        s.append(g, &[1u8; 10]).unwrap();
        s.retain(g).unwrap();
        assert_eq!(s.release(g).unwrap(), 1);
        assert_eq!(s.live_pages(), 1);
        assert_eq!(s.release(g).unwrap(), 0);
        assert_eq!(s.live_pages(), 0);
        assert!(matches!(s.release(g), Err(StoreError::DeadGroup(_))));
    }

    #[test]
    fn budget_is_enforced() {
        let mut s = PageStore::new(256, 512).unwrap();
        let a = s.allocate_group("a").unwrap();
        s.append(a, &[0u8; 200]).unwrap();
        s.append(a, &[0u8; 200]).unwrap();
        assert!(matches!(
            s.allocate_group("b"),
            Err(StoreError::BudgetExhausted)
        ));
        assert!(matches!(
            s.append(a, &[0u8; 200]),
            Err(StoreError::BudgetExhausted)
        ));
    }

    #[test]
    fn swapped_group_reads_through() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = PageStore::new(64, 256).unwrap();
        let g = s.allocate_group("c").unwrap();
        let a = s.append(g, &[1u8; 40]).unwrap();
        let b = s.append(g, &[2u8; 40]).unwrap();
        s.swap_out(g, &dir.path().join("c.0.run")).unwrap();
        assert_eq!(s.live_pages(), 0);
        assert_eq!(&*s.read(g, a, 40).unwrap(), &[1u8; 40][..]);
        s.write(g, b, &[3u8; 4]).unwrap();
        assert_eq!(&*s.read(g, b, 4).unwrap(), &[3u8; 4][..]);
        let file = std::fs::read(dir.path().join("c.0.run")).unwrap();
        assert_eq!(file.len(), 80);
        s.release(g).unwrap();
        assert!(!dir.path().join("c.0.run").exists());
    }

    #[test]
    fn swapped_group_grows_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = PageStore::new(64, 256).unwrap();
        let g = s.allocate_group("c").unwrap();
        let a = s.append(g, &[1u8; 40]).unwrap();
        s.swap_out(g, &dir.path().join("c.0.run")).unwrap();
        assert!(!s.needs_page(g, 40).unwrap());
        let b = s.append(g, &[2u8; 20]).unwrap();
        let c = s.append(g, &[3u8; 30]).unwrap();
        assert_eq!((b, c), (SegmentRef::new(0, 40), SegmentRef::new(1, 0)));
        assert_eq!(s.live_pages(), 0);
        assert_eq!(&*s.read(g, a, 40).unwrap(), &[1u8; 40][..]);
        assert_eq!(&*s.read(g, b, 20).unwrap(), &[2u8; 20][..]);
        assert_eq!(&*s.read(g, c, 30).unwrap(), &[3u8; 30][..]);
        assert_eq!(std::fs::read(dir.path().join("c.0.run")).unwrap().len(), 90);
    }
}
