//! Browser demo: classify an IR program, explain its plan, and run a
//! workload in both modes side by side.
//!
//! The `*_text`/`compare_modes` functions are plain Rust so they can be
//! tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use segmem::classify::classify_program;
use segmem::engine::workloads::{self, run_workload, Params, Prepared};
use segmem::engine::{EngineConfig, Mode, RunOutcome};
use segmem::ir::{parse_program, Analysis};

const EXTRA: [(&str, &str); 6] = [
    ("listnode", include_str!("../../core/corpus/listnode.ir")),
    ("symcp", include_str!("../../core/corpus/symcp.ir")),
    ("vectors", include_str!("../../core/corpus/vectors.ir")),
    (
        "listappend",
        include_str!("../../core/corpus/listappend.ir"),
    ),
    ("sharing", include_str!("../../core/corpus/sharing.ir")),
    ("resize", include_str!("../../core/corpus/resize.ir")),
];

/// Names of the bundled example programs.
pub fn example_names() -> Vec<&'static str> {
    workloads::WORKLOADS
        .iter()
        .copied()
        .chain(EXTRA.iter().map(|(n, _)| *n))
        .collect()
}

pub fn example_text(name: &str) -> Option<&'static str> {
    workloads::source(name).or_else(|| EXTRA.iter().find(|(n, _)| *n == name).map(|(_, s)| *s))
}

pub fn classify_text(src: &str, evidence: bool) -> Result<String, String> {
    let program = parse_program(src).map_err(|e| e.to_string())?;
    let analysis = Analysis::new(&program).map_err(|e| e.to_string())?;
    let report = classify_program(&program, &analysis).map_err(|e| e.to_string())?;
    Ok(report.render(&program, evidence))
}

pub fn explain_text(src: &str) -> Result<String, String> {
    Ok(Prepared::from_source(src)
        .map_err(|e| e.to_string())?
        .plan
        .render())
}

#[derive(Debug, Serialize)]
pub struct ModeRun {
    pub mode: &'static str,
    pub digest: String,
    pub peak_pages: usize,
    pub final_live_pages: usize,
    pub max_trace_cost: u64,
    pub max_modeled_bytes: u64,
    pub records_out: u64,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub workload: String,
    pub same_digest: bool,
    pub runs: Vec<ModeRun>,
}

/// Runs a shipped workload at the reduced sizes in object and decomposed
/// mode. The budget is large enough that nothing spills, so no file system
/// is needed.
pub fn compare_modes(workload: &str, seed: u64, page_size: usize) -> Result<Comparison, String> {
    let prep = Prepared::workload(workload).map_err(|e| e.to_string())?;
    let params = Params::small(seed);
    let mut runs = Vec::new();
    for mode in [Mode::Object, Mode::Decomposed] {
        let cfg = EngineConfig {
            mode,
            page_size,
            budget: 64 << 20,
            ..EngineConfig::default()
        };
        let out: RunOutcome =
            run_workload(workload, &prep, &params, None, cfg).map_err(|e| e.to_string())?;
        let m = &out.metrics;
        runs.push(ModeRun {
            mode: mode.name(),
            digest: out.digest.clone(),
            peak_pages: m.peak_pages,
            final_live_pages: out.final_live_pages,
            max_trace_cost: m.max_trace_cost(),
            max_modeled_bytes: m.samples.iter().map(|s| s.modeled_bytes).max().unwrap_or(0),
            records_out: m.records_out,
        });
    }
    Ok(Comparison {
        workload: workload.to_string(),
        same_digest: runs[0].digest == runs[1].digest,
        runs,
    })
}

#[wasm_bindgen]
pub fn examples() -> Vec<String> {
    example_names().into_iter().map(String::from).collect()
}

#[wasm_bindgen]
pub fn example(name: &str) -> Option<String> {
    example_text(name).map(String::from)
}

#[wasm_bindgen]
pub fn classify(src: &str, evidence: bool) -> Result<String, JsError> {
    classify_text(src, evidence).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn explain(src: &str) -> Result<String, JsError> {
    explain_text(src).map_err(|e| JsError::new(&e))
}

/// JSON-encoded [`Comparison`].
#[wasm_bindgen]
pub fn compare(workload: &str, seed: u64, page_size: usize) -> Result<String, JsError> {
    let c = compare_modes(workload, seed, page_size).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&c).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_example_classifies_and_plans() {
        for name in example_names() {
            let src = example_text(name).unwrap();
            assert!(classify_text(src, true).is_ok(), "{name}");
            assert!(explain_text(src).unwrap().contains("container"), "{name}");
        }
    }

    #[test]
    fn classify_reports_parse_errors() {
        assert!(classify_text("class\n", false).is_err());
    }

    #[test]
    fn both_modes_agree() {
        let c = compare_modes("kmeans", 2, 4096).unwrap();
        assert!(c.same_digest);
        assert_eq!(c.runs[1].final_live_pages, 0);
        assert!(c.runs[1].max_trace_cost < c.runs[0].max_trace_cost);
        assert!(compare_modes("svm", 1, 4096).is_err());
    }
}
