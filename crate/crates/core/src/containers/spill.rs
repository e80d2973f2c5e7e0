use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Encoded key and value bytes of one spilled record.
pub type RawRecord = (Vec<u8>, Vec<u8>);

use crate::datum::Datum;
use crate::pagestore::{decode_object, Layout};

use super::ContainerError;

/// One sorted run written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SpillRun {
    pub path: PathBuf,
    pub records: u64,
    pub bytes: u64,
    pub sorted: bool,
}

fn io(e: std::io::Error) -> ContainerError {
    ContainerError::Io(e.to_string())
}

/// Writes `[u32 klen][key][u32 vlen][value]` records, little-endian.
pub fn write_run<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a [u8], &'a [u8])>,
) -> Result<SpillRun, ContainerError> {
    let f = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(f);
    let (mut n, mut bytes) = (0u64, 0u64);
    for (k, v) in records {
        w.write_all(&(k.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(k).map_err(io)?;
        w.write_all(&(v.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(v).map_err(io)?;
        n += 1;
        bytes += 8 + k.len() as u64 + v.len() as u64;
    }
    w.flush().map_err(io)?;
    Ok(SpillRun {
        path: path.to_path_buf(),
        records: n,
        bytes,
        sorted: true,
    })
}

/// Sequential reader over a run's records.
pub struct RunReader {
    r: BufReader<File>,
}

impl RunReader {
    /// Opens a run with a read buffer of `buf` bytes.
    pub fn open(path: &Path, buf: usize) -> Result<Self, ContainerError> {
        let f = File::open(path).map_err(io)?;
        Ok(RunReader {
            r: BufReader::with_capacity(buf.max(64), f),
        })
    }

    pub fn next_record(&mut self) -> Result<Option<RawRecord>, ContainerError> {
        let mut len = [0u8; 4];
        match self.r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(io(e)),
        }
        let mut k = vec![0u8; u32::from_le_bytes(len) as usize];
        self.r.read_exact(&mut k).map_err(io)?;
        self.r.read_exact(&mut len).map_err(io)?;
        let mut v = vec![0u8; u32::from_le_bytes(len) as usize];
        self.r.read_exact(&mut v).map_err(io)?;
        Ok(Some((k, v)))
    }
}

/// A source of key-ordered records for [`merge_sorted`].
pub enum MergeSource {
    Run(RunReader, Layout, Layout),
    Memory(std::vec::IntoIter<(Datum, Datum)>),
}

impl MergeSource {
    fn next(&mut self) -> Result<Option<(Datum, Datum)>, ContainerError> {
        match self {
            MergeSource::Run(r, kl, vl) => match r.next_record()? {
                None => Ok(None),
                Some((k, v)) => Ok(Some((decode_object(&k, kl)?.0, decode_object(&v, vl)?.0))),
            },
            MergeSource::Memory(it) => Ok(it.next()),
        }
    }
}

struct Head {
    key: Datum,
    val: Datum,
    src: usize,
}

impl PartialEq for Head {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Head {}
impl PartialOrd for Head {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Head {
    // Reversed: BinaryHeap is a max-heap and we want the smallest key, then
    // the earliest source.
    fn cmp(&self, o: &Self) -> Ordering {
        o.key.cmp(&self.key).then_with(|| o.src.cmp(&self.src))
    }
}

/// K-way merge of key-sorted sources. Equal keys come out in source order
/// and, within a source, in record order, so the merge is stable.
pub fn merge_sorted(
    mut sources: Vec<MergeSource>,
    mut sink: impl FnMut(Datum, Datum) -> Result<(), ContainerError>,
) -> Result<(), ContainerError> {
    let mut heap = BinaryHeap::new();
    for (i, s) in sources.iter_mut().enumerate() {
        if let Some((key, val)) = s.next()? {
            heap.push(Head { key, val, src: i });
        }
    }
    while let Some(Head { key, val, src }) = heap.pop() {
        sink(key, val)?;
        if let Some((key, val)) = sources[src].next()? {
            heap.push(Head { key, val, src });
        }
    }
    Ok(())
}
