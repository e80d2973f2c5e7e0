use segmem::engine::workloads::{run_workload, Params, Prepared, WORKLOADS};
use segmem::engine::{EngineConfig, Mode};

fn cfg(mode: Mode, dir: &std::path::Path) -> EngineConfig {
    EngineConfig {
        mode,
        spill_dir: dir.to_path_buf(),
        ..EngineConfig::default()
    }
}

#[test]
fn small_workloads_agree_across_modes() {
    for name in WORKLOADS {
        let prep = Prepared::workload(name).unwrap();
        let p = Params::small(3);
        let dir = tempfile::tempdir().unwrap();
        let a = run_workload(name, &prep, &p, None, cfg(Mode::Object, dir.path())).unwrap();
        let b = run_workload(name, &prep, &p, None, cfg(Mode::Decomposed, dir.path())).unwrap();
        assert_eq!(a.digest, b.digest, "{name}");
        assert_eq!(a.final_live_pages, 0, "{name}");
        assert_eq!(b.final_live_pages, 0, "{name}");
        assert!(b.metrics.peak_pages > 0, "{name} used no pages");
    }
}
