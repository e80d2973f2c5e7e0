use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn segmem(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segmem"));
    c.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("SEGMEM_")) {
        c.env_remove(k);
    }
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn corpus(name: &str) -> String {
    let p: PathBuf = [
        env!("CARGO_MANIFEST_DIR"),
        "..",
        "core",
        "corpus",
        &format!("{name}.ir"),
    ]
    .iter()
    .collect();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Runs a workload with `--report -` and returns the parsed JSON lines.
fn report(args: &[&str], env: &[(&str, &str)]) -> Vec<Value> {
    let mut a = vec!["run"];
    a.extend_from_slice(args);
    a.extend_from_slice(&["--report", "-"]);
    let o = segmem(&a, env);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn summary(lines: &[Value]) -> &Value {
    let last = lines.last().unwrap();
    assert_eq!(last["type"], "summary");
    last
}

#[test]
fn classify_prints_refined_verdicts_with_evidence() {
    let o = segmem(&["classify", &corpus("lr")], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(
        text.lines().any(|l| l == "LabeledPoint stage1 StaticFixed"),
        "{text}"
    );
    assert!(text.contains("  because LabeledPoint.features is not final"));
}

#[test]
fn classify_reports_recursive_types_once() {
    let o = segmem(&["classify", &corpus("listnode")], &[]);
    assert!(stdout(&o).lines().any(|l| l == "ListNode * RecurDef"));
}

#[test]
fn classify_machine_lines_filter_by_phase() {
    let o = segmem(
        &[
            "classify",
            "--machine",
            "--phase",
            "stage1/build",
            &corpus("pr"),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(
        text.lines()
            .all(|l| l.split('\t').nth(1) == Some("stage1/build")),
        "{text}"
    );
    assert!(text
        .lines()
        .any(|l| l.starts_with("Adj\tstage1/build\tVariable\t")));
    let bad = segmem(&["classify", "--phase", "stage9/x", &corpus("pr")], &[]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn classify_errors_use_distinct_exit_codes() {
    let missing = segmem(&["classify", "/nonexistent/prog.ir"], &[]);
    assert_eq!(missing.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ir");
    std::fs::write(&bad, "class Point {\n  x double\n").unwrap();
    let o = segmem(&["classify", bad.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let usage = segmem(&["classify"], &[]);
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn modes_produce_the_same_digest() {
    let o = report(&["wc", "--mode", "object", "--seed", "7", "--small"], &[]);
    let d = report(
        &["wc", "--mode", "decomposed", "--seed", "7", "--small"],
        &[],
    );
    assert_eq!(summary(&o)["digest"], summary(&d)["digest"]);
    assert_eq!(summary(&o)["config"]["mode"], "object");
    assert_eq!(summary(&d)["final_live_pages"], 0);
    assert!(d[..d.len() - 1]
        .iter()
        .all(|l| l["type"] == "sample" || l["type"] == "event"));
}

#[test]
fn a_tiny_budget_evicts_without_changing_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let spill = dir.path().join("spill");
    let base = ["lr", "--small", "--partitions", "2", "--page-size", "1K"];
    let o = report(&[&base[..], &["--mode", "object"]].concat(), &[]);
    let tiny = report(
        &[
            &base[..],
            &["--budget", "8K", "--spill-dir", spill.to_str().unwrap()],
        ]
        .concat(),
        &[],
    );
    let s = summary(&tiny);
    assert_eq!(s["digest"], summary(&o)["digest"]);
    assert!(s["evictions"].as_u64().unwrap() + s["spill_runs"].as_u64().unwrap() > 0);
    assert!(tiny
        .iter()
        .any(|l| l["event"] == "evict" || l["event"] == "spill"));
    assert_eq!(s["config"]["spill_dir"], spill.to_str().unwrap());
}

#[test]
fn summaries_repeat_exactly_apart_from_wall_clock() {
    let args = ["kmeans", "--small", "--seed", "3"];
    let mut a = summary(&report(&args, &[])).clone();
    let mut b = summary(&report(&args, &[])).clone();
    a["wall_clock_ms"] = Value::Null;
    b["wall_clock_ms"] = Value::Null;
    assert_eq!(a.to_string(), b.to_string());
}

#[test]
fn environment_overrides_defaults_but_not_flags() {
    let env = [
        ("SEGMEM_MODE", "object"),
        ("SEGMEM_SEED", "9"),
        ("SEGMEM_PARTITIONS", "3"),
    ];
    let s = summary(&report(&["pr", "--small"], &env)).clone();
    assert_eq!(s["config"]["mode"], "object");
    assert_eq!(s["config"]["seed"], 9);
    assert_eq!(s["config"]["partitions"], 3);
    let s = summary(&report(&["pr", "--small", "--mode", "decomposed"], &env)).clone();
    assert_eq!(s["config"]["mode"], "decomposed");
}

#[test]
fn invalid_configurations_exit_with_one() {
    for args in [
        vec!["run", "lr", "--cache-frac", "1.5"],
        vec!["run", "lr", "--budget", "1K", "--page-size", "1K"],
        vec!["run", "lr", "--mode", "tracing"],
        vec!["run", "lr", "--budget", "12Q"],
        vec!["run", "nosuch"],
    ] {
        let o = segmem(&args, &[]);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
    }
    let o = segmem(&["run", "lr"], &[("SEGMEM_CACHE_FRAC", "2")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("points.txt");
    std::fs::write(&input, "1 2 3\n").unwrap();
    let o = segmem(&["run", "lr", "--input", input.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1), "malformed input is a usage error");

    let prog = dir.path().join("div.ir");
    std::fs::write(&prog, DIVIDE_BY_ZERO).unwrap();
    let o = segmem(&["run", prog.to_str().unwrap(), "--records", "3"], &[]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const DIVIDE_BY_ZERO: &str = "\
method boom(x long)
  (div y x 0)
  (emit y)
end

container xs input long
container ys output long

stage stage1
  phase p source=xs udf=boom sink=ys
";

#[test]
fn explain_shows_layouts_and_phase_verdicts() {
    let o = segmem(&["explain", "lr"], &[]);
    let text = stdout(&o);
    assert!(text.contains("decision decompose"), "{text}");
    assert!(text.contains("element LabeledPoint StaticFixed"), "{text}");
    assert!(text.contains("@0"));
    let pr = stdout(&segmem(&["explain", "pr"], &[]));
    assert!(pr.contains("group Adj Variable"), "{pr}");
    assert!(pr.contains("element Adj RuntimeFixed"), "{pr}");
    let bad = segmem(&["explain", "svm"], &[]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("wc, lr, kmeans, pr"));
}

#[test]
fn corpus_programs_run_on_random_records() {
    let s = summary(&report(
        &[&corpus("resize"), "--records", "20", "--seed", "3"],
        &[],
    ))
    .clone();
    assert!(s["reconstructions"].as_u64().unwrap() > 0);
    assert_eq!(s["final_live_pages"], 0);
}
