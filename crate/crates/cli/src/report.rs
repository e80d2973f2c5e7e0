//! JSON-lines run report: one record per metric sample, one per lifecycle
//! event, and a terminal `summary` record.

use std::io::Write;

use serde::Serialize;

use segmem::containers::Event;
use segmem::engine::{EngineConfig, RunOutcome, Sample};

use crate::RunArgs;

#[derive(Debug, Serialize)]
pub struct ConfigEcho {
    pub workload: String,
    pub mode: &'static str,
    pub page_size: usize,
    pub budget: usize,
    pub cache_frac: f64,
    /// Only when given explicitly; the default directory is per-process.
    pub spill_dir: Option<String>,
    pub partitions: usize,
    pub seed: u64,
    pub small: bool,
    pub input: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub config: ConfigEcho,
    pub digest: String,
    pub records_in: u64,
    pub records_out: u64,
    pub peak_pages: usize,
    pub final_live_pages: usize,
    pub max_trace_cost: u64,
    pub spill_runs: usize,
    pub spill_bytes: u64,
    pub evictions: usize,
    pub evicted_bytes: u64,
    pub reconstructions: usize,
    pub events: usize,
    /// Not deterministic; everything else is a function of config and seed.
    pub wall_clock_ms: u64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Line<'a> {
    Sample(&'a Sample),
    Event(&'a Event),
    Summary(&'a Summary),
}

pub struct Report<'a> {
    pub samples: &'a [Sample],
    pub events: &'a [Event],
    pub summary: Summary,
}

impl<'a> Report<'a> {
    pub fn new(workload: &str, a: &RunArgs, cfg: &EngineConfig, out: &'a RunOutcome) -> Self {
        let m = &out.metrics;
        let summary = Summary {
            config: ConfigEcho {
                workload: workload.to_string(),
                mode: cfg.mode.name(),
                page_size: cfg.page_size,
                budget: cfg.budget,
                cache_frac: cfg.cache_frac,
                spill_dir: a.spill_dir.as_ref().map(|p| p.display().to_string()),
                partitions: cfg.partitions,
                seed: a.seed,
                small: a.small,
                input: a.input.as_ref().map(|p| p.display().to_string()),
            },
            digest: out.digest.clone(),
            records_in: m.records_in,
            records_out: m.records_out,
            peak_pages: m.peak_pages,
            final_live_pages: out.final_live_pages,
            max_trace_cost: m.max_trace_cost(),
            spill_runs: m.spill_runs,
            spill_bytes: m.spill_bytes,
            evictions: m.evictions,
            evicted_bytes: m.evicted_bytes,
            reconstructions: m.reconstructions,
            events: out.events.len(),
            wall_clock_ms: m.elapsed_ms,
        };
        Report {
            samples: &m.samples,
            events: &out.events,
            summary,
        }
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        let lines = self
            .samples
            .iter()
            .map(Line::Sample)
            .chain(self.events.iter().map(Line::Event))
            .chain(std::iter::once(Line::Summary(&self.summary)));
        for l in lines {
            serde_json::to_writer(&mut w, &l)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn human(&self) -> String {
        let s = &self.summary;
        format!(
            "{} ({} mode): digest {}\n  records in/out {}/{}, peak pages {}, live pages at end {}\n  \
             spills {} ({} bytes), evictions {} ({} bytes), reconstructions {}, max trace cost {}\n",
            s.config.workload,
            s.config.mode,
            s.digest,
            s.records_in,
            s.records_out,
            s.peak_pages,
            s.final_live_pages,
            s.spill_runs,
            s.spill_bytes,
            s.evictions,
            s.evicted_bytes,
            s.reconstructions,
            s.max_trace_cost
        )
    }
}
