//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails; the process exits non-zero if any criterion fails.

#[path = "support/pagestore.rs"]
mod props;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use segmem::classify::{classify_program, is_fixed_length, Scope, SizeType, SymbolicValue};
use segmem::containers::Event;
use segmem::datum::Datum;
use segmem::engine::workloads::{
    gen_lr, gen_wc, run_random, run_workload, Params, Prepared, LR_DIMS, WORKLOADS,
};
use segmem::engine::{check_call_graphs, check_soundness, EngineConfig, Mode, RunOutcome, Session};
use segmem::ir::{parse_program, Analysis, Program, TypeSets};

const CORPUS: [&str; 10] = [
    "wc",
    "lr",
    "kmeans",
    "pr",
    "listnode",
    "symcp",
    "vectors",
    "listappend",
    "sharing",
    "resize",
];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus_source(name: &str) -> String {
    std::fs::read_to_string(format!("{}/corpus/{name}.ir", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn prepare(name: &str) -> Prepared {
    Prepared::from_source(&corpus_source(name)).unwrap()
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < limit, || format!("{what} took {e:?}, limit {limit:?}"))
}

fn cfg(mode: Mode, dir: &tempfile::TempDir) -> EngineConfig {
    EngineConfig {
        mode,
        spill_dir: dir.path().join(format!("spill-{}", mode.name())),
        ..EngineConfig::default()
    }
}

/// Criterion 1: the classification chain for LR, the symbolic fixed-length example,
/// phased refinement for PR and the recursive list.
fn classification_golden_suite() -> Outcome {
    let t = Instant::now();
    let load = |n: &str| {
        let p = parse_program(&corpus_source(n)).unwrap();
        let a = Analysis::new(&p).unwrap();
        let r = classify_program(&p, &a).unwrap();
        (p, a, r)
    };

    let (lp, _, lr) = load("lr");
    let golden = "\
DenseVector local RuntimeFixed
DenseVector stage1 StaticFixed
DenseVector stage2 StaticFixed
LabeledPoint local Variable
LabeledPoint stage1 StaticFixed
LabeledPoint stage2 StaticFixed
Array[double] local RuntimeFixed
Array[double] stage1 RuntimeFixed
Array[double] stage2 RuntimeFixed
";
    ensure(lr.render(&lp, false) == golden, || {
        format!("LR verdicts differ:\n{}", lr.render(&lp, false))
    })?;
    let dv = &lr.local["DenseVector"];
    ensure(
        dv.evidence
            .iter()
            .any(|e| e.contains("DenseVector.data is final")),
        || {
            format!(
                "DenseVector evidence does not cite the final field: {:?}",
                dv.evidence
            )
        },
    )?;
    let lpv = &lr.local["LabeledPoint"];
    ensure(
        lpv.evidence
            .iter()
            .any(|e| e.contains("LabeledPoint.features is not final")),
        || format!("LabeledPoint evidence: {:?}", lpv.evidence),
    )?;

    let (sp, sa, sr) = load("symcp");
    ensure(sr.local("Row") == Some(SizeType::Variable), || {
        "Row should be locally Variable".into()
    })?;
    ensure(
        sr.stage("Row", "stage1") == Some(SizeType::StaticFixed),
        || "Row should refine to StaticFixed".into(),
    )?;
    let st = sp.job.stage("stage1").unwrap();
    let scope = Scope::stage(&sp, &sa, st).unwrap();
    let fl = is_fixed_length("Array[long]", Some(("Row", "cells")), &scope, &sa);
    let lens: Vec<String> = fl.lengths.iter().map(|(_, v)| v.to_string()).collect();
    ensure(
        fl.fixed && lens == ["Symbol(1) + 1", "Symbol(1) + 1"],
        || format!("Row.cells lengths {lens:?}, fixed={}", fl.fixed),
    )?;
    ensure(
        fl.lengths
            .iter()
            .all(|(_, v)| matches!(v, SymbolicValue::Sym { offset: 1, .. })),
        || "lengths are not Symbol + 1".into(),
    )?;

    let (_, _, pr) = load("pr");
    let want = [
        (pr.phase("Adj", "stage1", "build"), SizeType::Variable),
        (pr.phase("Adj", "stage1", "persist"), SizeType::RuntimeFixed),
        (pr.stage("Adj", "stage2"), SizeType::RuntimeFixed),
    ];
    ensure(want.iter().all(|(got, w)| *got == Some(*w)), || {
        format!("PR Adj verdicts {want:?}")
    })?;

    let (_, _, ln) = load("listnode");
    ensure(ln.local("ListNode") == Some(SizeType::RecurDef), || {
        "ListNode should be RecurDef".into()
    })?;
    within(t, Duration::from_secs(1), "classification")?;
    Ok(format!(
        "LR chain, Symbol(1) + 1 lengths, PR phases, ListNode RecurDef in {:?}",
        t.elapsed()
    ))
}

/// Criterion 2: 100 randomized oracle runs per corpus program, no violations.
fn soundness() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut runs = 0;
    let mut instances = 0;
    for name in CORPUS {
        let p = prepare(name);
        for seed in 0..100u64 {
            let c = EngineConfig {
                oracle: true,
                ..cfg(Mode::Object, &dir)
            };
            let out = if WORKLOADS.contains(&name) {
                run_workload(name, &p, &Params::small(seed), None, c)
            } else {
                run_random(&p, seed, 1 + (seed as usize * 7) % 40, c)
            }
            .map_err(|e| format!("{name} seed {seed}: {e}"))?;
            let trace = out.oracle.as_ref().unwrap();
            let mut v = check_soundness(&p.plan.report, trace);
            v.extend(check_call_graphs(&p.program, &p.analysis, trace).unwrap());
            ensure(v.is_empty(), || format!("{name} seed {seed}: {v:?}"))?;
            runs += 1;
            instances += trace.instances.len();
        }
    }
    within(t, Duration::from_secs(60), "soundness runs")?;
    Ok(format!(
        "{runs} runs, {instances} instances observed, 0 violations in {:?}",
        t.elapsed()
    ))
}

/// Criterion 3: object and decomposed runs of the four workloads agree, 5 seeds.
fn mode_equivalence() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    for seed in 1..=5u64 {
        let params = Params {
            seed,
            ..Params::default()
        };
        for name in WORKLOADS {
            let p = Prepared::workload(name).unwrap();
            let o = run_workload(name, &p, &params, None, cfg(Mode::Object, &dir))
                .map_err(|e| e.to_string())?;
            let d = run_workload(name, &p, &params, None, cfg(Mode::Decomposed, &dir))
                .map_err(|e| e.to_string())?;
            ensure(o.digest == d.digest, || {
                format!(
                    "{name} seed {seed}: {} vs {}",
                    &o.digest[..12],
                    &d.digest[..12]
                )
            })?;
        }
    }
    within(t, Duration::from_secs(120), "mode equivalence")?;
    Ok(format!(
        "4 workloads x 5 seeds identical in {:?}",
        t.elapsed()
    ))
}

/// Distinct tokens per contiguous input slice, summed: the keys each
/// map-side buffer holds once.
fn wc_key_oracle(tokens: &[Datum], parts: usize) -> u64 {
    (0..parts)
        .map(|m| {
            let (lo, hi) = (m * tokens.len() / parts, (m + 1) * tokens.len() / parts);
            tokens[lo..hi].iter().collect::<BTreeSet<_>>().len() as u64
        })
        .sum()
}

/// Criterion 4: pages are all returned after unpersist and at job end; WC reuses its
/// value segments in place.
fn reclamation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let params = Params::default();
    let mut unpersists = 0;
    for name in WORKLOADS {
        let p = Prepared::workload(name).unwrap();
        let out: RunOutcome = run_workload(name, &p, &params, None, cfg(Mode::Decomposed, &dir))
            .map_err(|e| e.to_string())?;
        ensure(out.final_live_pages == 0, || {
            format!("{name}: {} pages live at job end", out.final_live_pages)
        })?;
        ensure(out.metrics.peak_pages > 0, || {
            format!("{name}: no pages were ever used")
        })?;
        for e in &out.events {
            if let Event::Unpersist {
                container,
                live_pages,
            } = e
            {
                ensure(*live_pages == 0, || {
                    format!("{name}: {live_pages} pages live after unpersist {container}")
                })?;
                unpersists += 1;
            }
        }
    }
    for name in &CORPUS[4..] {
        let p = prepare(name);
        let out = run_random(&p, 11, 40, cfg(Mode::Decomposed, &dir)).map_err(|e| e.to_string())?;
        ensure(out.final_live_pages == 0, || {
            format!("{name}: pages live at job end")
        })?;
    }

    let p = Prepared::workload("wc").unwrap();
    let c = cfg(Mode::Decomposed, &dir);
    let parts = c.partitions;
    let tokens = gen_wc(&params);
    let keys = wc_key_oracle(&tokens, parts);
    let mut s = Session::new(&p.program, &p.analysis, &p.plan, c).unwrap();
    s.set_input("tokens", tokens).unwrap();
    s.run_stage("stage1").unwrap();
    let stat = s
        .shuffle_stats("counts")
        .ok_or("no shuffle statistics for counts")?;
    ensure(stat.runs == 0, || {
        "the WC shuffle spilled at the default budget".into()
    })?;
    ensure(
        stat.keys == keys && stat.appended_segments == 2 * keys,
        || {
            format!(
                "appended {} segments for {} keys, oracle {} keys",
                stat.appended_segments, stat.keys, keys
            )
        },
    )?;
    s.finish(Vec::new()).unwrap();
    Ok(format!(
        "0 live pages at every job end and after {unpersists} unpersists; WC appended {} segments = 2 x {keys} keys",
        2 * keys
    ))
}

/// Independent footprint oracle over the static reference graph:
/// (primitive bytes, modelled object bytes with 16-byte headers and 8-byte
/// references). Arrays have `len` elements.
fn footprint_oracle(ty: &str, program: &Program, sets: &TypeSets, len: u64) -> (u64, u64) {
    let prim = |t: &str| match t {
        "bool" | "byte" => Some(1),
        "char" | "short" => Some(2),
        "int" | "float" => Some(4),
        "long" | "double" => Some(8),
        _ => None,
    };
    if let Some(n) = prim(ty) {
        return (n, n);
    }
    if let Some(elem) = ty.strip_prefix("Array[").and_then(|r| r.strip_suffix(']')) {
        return match prim(elem) {
            Some(n) => (n * len, 16 + n * len),
            None => {
                let (d, m) = footprint_oracle(elem, program, sets, len);
                (d * len, 16 + (8 + m) * len)
            }
        };
    }
    let (mut data, mut model) = (0, 16);
    for (f, declared, _) in program.fields_of(ty) {
        if let Some(n) = prim(&declared) {
            data += n;
            model += n;
            continue;
        }
        let members: Vec<String> = sets.of(ty, &f).into_iter().collect();
        assert_eq!(members.len(), 1, "{ty}.{f} has type-set {members:?}");
        let (d, m) = footprint_oracle(&members[0], program, sets, len);
        data += d;
        model += 8 + m;
    }
    (data, model)
}

/// Criterion 5: LR cache bytes per element versus the object model.
fn footprint() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = Prepared::workload("lr").unwrap();
    let (want_data, want_model) = footprint_oracle(
        "LabeledPoint",
        &p.program,
        &p.analysis.type_sets,
        LR_DIMS as u64,
    );
    ensure(want_data == 100, || format!("oracle data size {want_data}"))?;
    let params = Params {
        lr_points: 2000,
        ..Params::default()
    };
    let mut s = Session::new(
        &p.program,
        &p.analysis,
        &p.plan,
        cfg(Mode::Decomposed, &dir),
    )
    .unwrap();
    s.set_input("lines", gen_lr(&params)).unwrap();
    s.run_stage("stage1").unwrap();
    let blocks = s.cache_blocks("points").unwrap();
    let bytes: u64 = blocks.iter().map(|b| b.used_bytes(s.memory())).sum();
    let n: u64 = blocks.iter().map(|b| b.len() as u64).sum();
    ensure(n == 2000 && bytes == want_data * n, || {
        format!("{bytes} bytes for {n} points")
    })?;
    let recs = s.cache_records("points").unwrap();
    for d in &recs {
        let m = d.modeled_bytes(&p.program);
        ensure(m == want_model, || {
            format!("modelled {m} bytes, oracle {want_model}")
        })?;
    }
    s.finish(Vec::new()).unwrap();
    ensure(2 * want_model >= 3 * want_data, || {
        format!("object model {want_model} is under 150% of {want_data}")
    })?;
    Ok(format!(
        "decomposed {} bytes/element, object model {want_model} bytes/element (+{}%)",
        bytes / n,
        (want_model - want_data) * 100 / want_data
    ))
}

/// Criterion 6: shrinking the budget forces spills and evictions without changing
/// any output digest.
fn spill_equivalence() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let params = Params {
        seed: 5,
        wc_tokens: 20_000,
        lr_points: 2000,
        lr_iterations: 3,
        km_points: 2000,
        km_iterations: 2,
        pr_edges: 4000,
        pr_iterations: 2,
        ..Params::default()
    };
    let page = 1024;
    let mut lines = Vec::new();
    let mut reached = Vec::new();
    for name in WORKLOADS {
        let p = Prepared::workload(name).unwrap();
        let base = EngineConfig {
            partitions: 2,
            ..cfg(Mode::Object, &dir)
        };
        let want = run_workload(name, &p, &params, None, base)
            .map_err(|e| e.to_string())?
            .digest;
        let mut pages = 256;
        let (mut spills, mut evictions) = (0, 0);
        while pages >= 4 {
            let c = EngineConfig {
                page_size: page,
                budget: pages * page,
                partitions: 2,
                ..cfg(Mode::Decomposed, &dir)
            };
            let out = run_workload(name, &p, &params, None, c)
                .map_err(|e| format!("{name} at {pages} pages: {e}"))?;
            ensure(out.digest == want, || {
                format!("{name}: digest changed at {pages} pages")
            })?;
            ensure(out.final_live_pages == 0, || {
                format!("{name}: pages live at {pages} pages")
            })?;
            spills = out.metrics.spill_runs;
            evictions = out.metrics.evictions;
            if spills >= 3 && evictions >= 1 {
                reached.push(name);
                break;
            }
            pages /= 2;
        }
        lines.push(format!("{name}@{pages}p:{spills}s/{evictions}e"));
    }
    ensure(
        reached.contains(&"kmeans") && reached.contains(&"pr"),
        || {
            format!(
                "spill and eviction targets not reached: {}",
                lines.join(" ")
            )
        },
    )?;
    within(t, Duration::from_secs(60), "spill equivalence")?;
    Ok(format!(
        "digests unchanged; {} in {:?}",
        lines.join(" "),
        t.elapsed()
    ))
}

/// Criterion 7: trace cost of a sealed cache of 10^5 elements.
fn trace_cost() -> Outcome {
    const N: usize = 100_000;
    let dir = tempfile::tempdir().unwrap();
    let p = Prepared::workload("lr").unwrap();
    let params = Params {
        lr_points: N,
        ..Params::default()
    };
    let input = gen_lr(&params);
    let mut costs = Vec::new();
    for mode in [Mode::Decomposed, Mode::Object] {
        let mut s = Session::new(&p.program, &p.analysis, &p.plan, cfg(mode, &dir)).unwrap();
        s.set_input("lines", input.clone()).unwrap();
        s.run_stage("stage1").unwrap();
        let pages = s.live_pages() as u64;
        let sealed = s.trace_cost();
        s.set_broadcast("weights", Datum::doubles(&[0.0; LR_DIMS]));
        s.run_stage("stage2").unwrap();
        let epoch = s
            .metrics()
            .samples
            .iter()
            .filter(|x| x.stage == "stage2")
            .map(|x| x.trace_cost)
            .max()
            .unwrap_or(0);
        s.finish(Vec::new()).unwrap();
        costs.push((pages, sealed, epoch));
    }
    let (pages, dec, dec_epoch) = costs[0];
    let (_, obj, obj_epoch) = costs[1];
    ensure(
        pages > 0 && dec <= pages + 16 && dec_epoch <= pages + 16,
        || format!("decomposed trace cost {dec}/{dec_epoch} over {pages} pages"),
    )?;
    ensure(obj >= N as u64 && obj_epoch >= N as u64, || {
        format!("object trace cost {obj}/{obj_epoch} < {N}")
    })?;
    Ok(format!("decomposed {dec} (epoch {dec_epoch}) <= {pages} pages + 16; object {obj} (epoch {obj_epoch}) >= {N}"))
}

/// Criterion 8: page store properties, 10^4 random cases each.
fn pagestore_properties() -> Outcome {
    let n = props::CASES;
    props::encode_decode_round_trip(n)?;
    props::segments_never_overlap_or_span_pages(n)?;
    props::pages_are_freed_exactly_once(n)?;
    props::scan_finds_every_segment_in_order(n)?;
    Ok(format!(
        "round trip, non-overlap/no-spanning, free-exactly-once, scan completeness: {n} cases each"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("classification golden suite", classification_golden_suite),
        ("soundness against the data-size oracle", soundness),
        ("mode equivalence", mode_equivalence),
        ("reclamation", reclamation),
        ("footprint model", footprint),
        ("spill/eviction equivalence", spill_equivalence),
        ("trace-cost proxy", trace_cost),
        ("pagestore property suite", pagestore_properties),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match r {
            Ok(detail) => println!(
                "criterion {} PASS  {name}: {detail} [{:?}]",
                i + 1,
                t.elapsed()
            ),
            Err(why) => {
                failed += 1;
                println!(
                    "criterion {} FAIL  {name}: {why} [{:?}]",
                    i + 1,
                    t.elapsed()
                );
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
