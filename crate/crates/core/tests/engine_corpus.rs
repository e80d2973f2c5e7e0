//! The small corpus programs executed end to end.

use segmem::classify::SizeType;
use segmem::containers::Event;
use segmem::datum::Datum;
use segmem::engine::workloads::{run_random, Prepared};
use segmem::engine::{check_soundness, Decision, EngineConfig, Mode, Origin, Session};

fn prepare(name: &str) -> Prepared {
    let path = format!("{}/corpus/{name}.ir", env!("CARGO_MANIFEST_DIR"));
    Prepared::from_source(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn cfg(mode: Mode, dir: &tempfile::TempDir) -> EngineConfig {
    EngineConfig {
        mode,
        oracle: mode == Mode::Object,
        page_size: 256,
        budget: 256 * 64,
        spill_dir: dir.path().join("spill"),
        ..EngineConfig::default()
    }
}

#[test]
fn random_runs_agree_across_modes_for_every_small_program() {
    let dir = tempfile::tempdir().unwrap();
    for name in [
        "listnode",
        "symcp",
        "vectors",
        "listappend",
        "sharing",
        "resize",
    ] {
        let p = prepare(name);
        for seed in 0..10 {
            let o = run_random(&p, seed, 30, cfg(Mode::Object, &dir)).unwrap();
            let d = run_random(&p, seed, 30, cfg(Mode::Decomposed, &dir)).unwrap();
            assert_eq!(o.digest, d.digest, "{name} seed {seed}");
            assert_eq!(d.final_live_pages, 0, "{name} seed {seed}");
            assert!(check_soundness(&p.plan.report, o.oracle.as_ref().unwrap()).is_empty());
        }
    }
}

#[test]
fn widened_hists_are_reconstructed_as_objects() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare("resize");
    assert_eq!(
        p.plan.container("hists").unwrap().reconstruct_in,
        vec!["stage2/grow".to_string()]
    );
    let d = run_random(&p, 3, 30, cfg(Mode::Decomposed, &dir)).unwrap();
    assert!(d.metrics.reconstructions > 0);
    assert!(d
        .events
        .iter()
        .any(|e| matches!(e, Event::Reconstruct { .. })));
}

#[test]
fn recursive_lists_stay_objects() {
    let p = prepare("listnode");
    let c = p.plan.container("lists").unwrap();
    assert_eq!(c.verdict, SizeType::RecurDef);
    assert!(!c.decision.uses_pages());
}

#[test]
fn vectors_of_two_lengths_keep_their_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare("vectors");
    assert_eq!(
        p.plan.report.stage("DenseVector", "stage1"),
        Some(SizeType::RuntimeFixed)
    );
    let xs = [-2.0, 1.5, 0.0, 3.0, -0.5, 7.0];
    let mut s = Session::new(&p.program, &p.analysis, &p.plan, cfg(Mode::Object, &dir)).unwrap();
    s.set_input(
        "lines",
        xs.iter().map(|&x| Datum::doubles(&[x, 1.0])).collect(),
    )
    .unwrap();
    s.run_stage("stage1").unwrap();
    s.run_stage("stage2").unwrap();
    let trace = s.oracle().unwrap().clone();
    let built = || {
        trace
            .of_type("DenseVector")
            .filter(|i| i.origin == Origin::New)
    };
    assert_eq!(
        trace.of_type("DenseVector").count(),
        2 * xs.len(),
        "built once, read back once"
    );
    let mut sizes: Vec<u64> = built().map(|i| i.timeline[0]).collect();
    sizes.sort();
    // Oracle: 9 doubles when x > 0, otherwise 5.
    let mut want: Vec<u64> = xs.iter().map(|&x| if x > 0.0 { 72 } else { 40 }).collect();
    want.sort();
    assert_eq!(sizes, want);
    assert!(trace.of_type("DenseVector").all(|i| i.timeline.len() == 1));
    assert!(check_soundness(&p.plan.report, &trace).is_empty());
    s.finish(Vec::new()).unwrap();
}

#[test]
fn appended_bags_grow_one_long_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare("listappend");
    assert_eq!(
        p.plan.report.stage("Bag", "stage1"),
        Some(SizeType::Variable)
    );
    let mut s = Session::new(&p.program, &p.analysis, &p.plan, cfg(Mode::Object, &dir)).unwrap();
    s.set_input("lines", vec![Datum::longs(&[4, 5, 6]), Datum::longs(&[9])])
        .unwrap();
    s.run_stage("stage1").unwrap();
    let trace = s.oracle().unwrap().clone();
    let mut finals: Vec<u64> = trace
        .of_type("Bag")
        .map(|i| *i.timeline.last().unwrap())
        .collect();
    finals.sort();
    assert_eq!(finals, vec![8, 24]);
    for i in trace.of_type("Bag") {
        assert!(
            i.timeline.windows(2).all(|w| w[1] == w[0] + 8),
            "{:?}",
            i.timeline
        );
    }
    assert!(check_soundness(&p.plan.report, &trace).is_empty());
    s.finish(Vec::new()).unwrap();
}

#[test]
fn derived_point_containers_reuse_the_primary_pages() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare("sharing");
    assert_eq!(
        p.plan.container("copy").unwrap().decision,
        Decision::Share {
            primary: "points".into()
        }
    );
    assert!(matches!(
        p.plan.container("pos").unwrap().decision,
        Decision::Pointers { .. }
    ));
    assert!(matches!(
        p.plan.container("sorted").unwrap().decision,
        Decision::Pointers { .. }
    ));

    let lines: Vec<Datum> = (0..200)
        .map(|i| Datum::doubles(&[(i % 7) as f64 - 3.0, i as f64]))
        .collect();
    let mut s = Session::new(
        &p.program,
        &p.analysis,
        &p.plan,
        cfg(Mode::Decomposed, &dir),
    )
    .unwrap();
    s.set_input("lines", lines.clone()).unwrap();
    s.run_stage("stage1").unwrap();
    let after_points = s.live_pages();
    assert!(after_points > 0);
    s.run_stage("stage2").unwrap();
    assert_eq!(
        s.live_pages(),
        after_points,
        "a shared copy allocates no pages"
    );
    s.run_stage("stage3").unwrap();
    s.run_stage("stage4").unwrap();

    let points = s.cache_records("points").unwrap();
    assert_eq!(s.cache_records("copy").unwrap(), points);
    let positive: Vec<Datum> = points
        .iter()
        .filter(|d| d.fields().unwrap()[0].as_float().unwrap() > 0.0)
        .cloned()
        .collect();
    assert_eq!(s.cache_records("pos").unwrap(), positive);

    s.unpersist("points").unwrap();
    assert_eq!(
        s.cache_records("copy").unwrap(),
        points,
        "the copy keeps the pages alive"
    );
    s.unpersist("copy").unwrap();
    s.unpersist("pos").unwrap();
    assert_eq!(s.live_pages(), 0);
    let out = s.finish(Vec::new()).unwrap();
    assert!(out.events.iter().any(|e| matches!(e, Event::Share { .. })));
}
