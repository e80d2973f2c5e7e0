use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::containers::Event;
use crate::datum::Datum;

/// Memory state after one phase ran over all partitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub seq: usize,
    pub stage: String,
    pub phase: String,
    /// Driver-chosen label, e.g. the iteration number.
    pub label: String,
    pub live_pages: usize,
    pub cache_pages: usize,
    pub shuffle_pages: usize,
    /// Objects held by containers outside pages.
    pub managed_objects: u64,
    /// Nodes a tracing collector would visit: managed objects, one per
    /// live page and one per pointer array.
    pub trace_cost: u64,
    /// Modelled heap bytes of container contents.
    pub modeled_bytes: u64,
    pub spill_runs: usize,
    pub evictions: usize,
}

/// Per-run totals and the sample timeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: Vec<Sample>,
    pub peak_pages: usize,
    pub spill_runs: usize,
    pub spill_bytes: u64,
    pub evictions: usize,
    pub evicted_bytes: u64,
    pub reconstructions: usize,
    pub records_in: u64,
    pub records_out: u64,
    /// Wall-clock time; excluded from determinism checks.
    pub elapsed_ms: u64,
}

impl Metrics {
    pub fn push(&mut self, s: Sample) {
        self.peak_pages = self.peak_pages.max(s.live_pages);
        self.samples.push(s);
    }

    /// Recomputes event totals from the lifecycle log.
    pub fn absorb_events(&mut self, events: &[Event]) {
        self.spill_runs = 0;
        self.spill_bytes = 0;
        self.evictions = 0;
        self.evicted_bytes = 0;
        self.reconstructions = 0;
        for e in events {
            match e {
                Event::Spill { bytes, .. } => {
                    self.spill_runs += 1;
                    self.spill_bytes += bytes;
                }
                Event::Evict { bytes, .. } => {
                    self.evictions += 1;
                    self.evicted_bytes += bytes;
                }
                Event::Reconstruct { .. } => self.reconstructions += 1,
                _ => {}
            }
        }
    }

    pub fn max_trace_cost(&self) -> u64 {
        self.samples.iter().map(|s| s.trace_cost).max().unwrap_or(0)
    }
}

/// SHA-256 hex of the canonical encoding of `outputs`, in order.
pub fn digest<'a>(outputs: impl IntoIterator<Item = &'a Datum>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for d in outputs {
        buf.clear();
        d.write_canonical(&mut buf);
        h.update((buf.len() as u64).to_le_bytes());
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_order_sensitive_and_stable() {
        let a = [Datum::Int(1), Datum::Int(2)];
        let b = [Datum::Int(2), Datum::Int(1)];
        assert_eq!(digest(&a), digest(&a.clone()));
        assert_ne!(digest(&a), digest(&b));
        assert_eq!(digest(&a).len(), 64);
    }

    #[test]
    fn digest_separates_record_boundaries() {
        let one = [Datum::longs(&[1, 2])];
        let two = [Datum::longs(&[1]), Datum::longs(&[2])];
        assert_ne!(digest(&one), digest(&two));
    }
}
