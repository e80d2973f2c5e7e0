use segmem::classify::{classify_program, SizeType};
use segmem::ir::{parse_program, Analysis};

fn load(name: &str) -> (segmem::ir::Program, Analysis) {
    let path = format!("{}/corpus/{name}", env!("CARGO_MANIFEST_DIR"));
    let p = parse_program(&std::fs::read_to_string(path).unwrap()).unwrap();
    let a = Analysis::new(&p).unwrap();
    (p, a)
}

#[test]
fn lr_points_are_static_fixed_in_the_parse_stage() {
    let (p, a) = load("lr.ir");
    let r = classify_program(&p, &a).unwrap();
    print!("{}", r.render(&p, true));
    assert_eq!(r.local("LabeledPoint"), Some(SizeType::Variable));
    assert_eq!(r.local("DenseVector"), Some(SizeType::RuntimeFixed));
    assert_eq!(
        r.stage("LabeledPoint", "stage1"),
        Some(SizeType::StaticFixed)
    );
    assert_eq!(
        r.stage("LabeledPoint", "stage2"),
        Some(SizeType::StaticFixed)
    );
}

#[test]
fn lr_layout_offsets() {
    use segmem::classify::{is_fixed_length, Scope, SymbolicValue};
    use segmem::pagestore::{compute_data_size, compute_layout, DataSize};
    let (p, a) = load("lr.ir");
    let st = p.job.stage("stage1").unwrap();
    let scope = Scope::phase(&p, &a, st, &st.phases[0]).unwrap();
    let cl = |t: &str, via: Option<(&str, &str)>| match is_fixed_length(t, via, &scope, &a)
        .lengths
        .first()
    {
        Some((_, SymbolicValue::Const(n))) if is_fixed_length(t, via, &scope, &a).fixed => {
            Some(*n as usize)
        }
        _ => None,
    };
    let l = compute_layout("LabeledPoint", SizeType::StaticFixed, &p, &a.type_sets, &cl).unwrap();
    println!("{:?}", l.offset_table());
    assert_eq!(compute_data_size(&l), DataSize::Const(100));
}
