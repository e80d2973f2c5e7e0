//! Randomized properties of the page store and the segment codec, shared
//! by the property test target and the acceptance suite.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use segmem::datum::Datum;
use segmem::ir::PrimKind;
use segmem::pagestore::{
    compute_data_size, decode_object, encode_object, ArrayLen, DataSize, FieldLayout, GroupId,
    Layout, PageStore, SegmentRef, StoreError,
};

pub const CASES: u32 = 10_000;

fn check<S: Strategy>(
    cases: u32,
    s: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new(cfg)
        .run(&s, test)
        .map_err(|e| e.to_string())
}

fn prim_kind() -> impl Strategy<Value = PrimKind> {
    prop::sample::select(PrimKind::ALL.to_vec())
}

fn layout() -> impl Strategy<Value = Layout> {
    let leaf = prim_kind().prop_map(Layout::Prim);
    leaf.prop_recursive(4, 24, 4, |inner| {
        prop_oneof![
            (prop::collection::vec(inner.clone(), 1..4), any::<bool>()).prop_map(|(ls, rev)| {
                let n = ls.len();
                let fields = ls
                    .into_iter()
                    .enumerate()
                    .map(|(i, layout)| FieldLayout {
                        name: format!("f{i}"),
                        index: if rev { n - 1 - i } else { i },
                        offset: None,
                        layout,
                    })
                    .collect();
                Layout::Struct {
                    ty: "S".into(),
                    declared: n,
                    fields,
                }
            }),
            (inner, prop::option::of(0usize..5)).prop_map(|(elem, n)| Layout::Array {
                ty: "A".into(),
                elem: Box::new(elem),
                len: n.map_or(ArrayLen::Prefixed, ArrayLen::Const),
            }),
        ]
    })
}

fn prim_value(k: PrimKind) -> BoxedStrategy<Datum> {
    match k {
        PrimKind::Bool => (0i64..=1).prop_map(Datum::Int).boxed(),
        PrimKind::Byte => any::<i8>().prop_map(|v| Datum::Int(v as i64)).boxed(),
        PrimKind::Char => any::<u16>().prop_map(|v| Datum::Int(v as i64)).boxed(),
        PrimKind::Short => any::<i16>().prop_map(|v| Datum::Int(v as i64)).boxed(),
        PrimKind::Int => any::<i32>().prop_map(|v| Datum::Int(v as i64)).boxed(),
        PrimKind::Long => any::<i64>().prop_map(Datum::Int).boxed(),
        PrimKind::Float => {
            (prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::INFINITE)
                .prop_map(|v| Datum::Float(v as f64))
                .boxed()
        }
        PrimKind::Double => any::<f64>().prop_map(Datum::Float).boxed(),
    }
}

fn value_for(l: &Layout) -> BoxedStrategy<Datum> {
    match l {
        Layout::Prim(k) => prim_value(*k),
        Layout::Struct {
            ty,
            declared,
            fields,
        } => {
            let ty = ty.clone();
            let declared = *declared;
            let idx: Vec<usize> = fields.iter().map(|f| f.index).collect();
            fields
                .iter()
                .map(|f| value_for(&f.layout))
                .collect::<Vec<_>>()
                .prop_map(move |vals| {
                    let mut out = vec![Datum::Null; declared];
                    for (i, v) in idx.iter().zip(vals) {
                        out[*i] = v;
                    }
                    Datum::obj(&ty, out)
                })
                .boxed()
        }
        Layout::Array { ty, elem, len } => {
            let ty = ty.clone();
            let n = match len {
                ArrayLen::Const(n) => *n..*n + 1,
                ArrayLen::Prefixed => 0..5,
            };
            prop::collection::vec(value_for(elem), n)
                .prop_map(move |es| Datum::array(&ty, es))
                .boxed()
        }
    }
}

fn layout_and_value() -> impl Strategy<Value = (Layout, Datum)> {
    layout().prop_flat_map(|l| {
        let v = value_for(&l);
        (Just(l), v)
    })
}

/// Independent size oracle: sums primitive widths and length prefixes.
fn oracle_len(l: &Layout, d: &Datum) -> usize {
    match (l, d) {
        (Layout::Prim(k), _) => k.size(),
        (Layout::Struct { fields, .. }, Datum::Obj { fields: vals, .. }) => fields
            .iter()
            .map(|f| oracle_len(&f.layout, &vals[f.index]))
            .sum(),
        (Layout::Array { elem, len, .. }, Datum::Array { elems, .. }) => {
            let prefix = if *len == ArrayLen::Prefixed { 4 } else { 0 };
            prefix + elems.iter().map(|e| oracle_len(elem, e)).sum::<usize>()
        }
        _ => unreachable!("generated values match their layouts"),
    }
}

/// Encoding then decoding returns the value; lengths agree with an
/// independent size count.
pub fn encode_decode_round_trip(cases: u32) -> Result<(), String> {
    check(
        cases,
        (layout_and_value(), 64usize..512),
        |((l, d), page_size)| {
            let bytes = encode_object(&d, &l).unwrap();
            prop_assert_eq!(bytes.len(), oracle_len(&l, &d));
            prop_assert_eq!(l.encoded_len(&d).unwrap(), bytes.len());
            prop_assert_eq!(l.segment_len(&bytes).unwrap(), bytes.len());
            if let Some(n) = l.static_size() {
                prop_assert_eq!(n, bytes.len());
                prop_assert_eq!(compute_data_size(&l), DataSize::Const(n));
            }
            let (back, used) = decode_object(&bytes, &l).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&back, &d);

            if bytes.len() <= page_size {
                let mut store = PageStore::new(page_size, page_size * 4).unwrap();
                let g = store.allocate_group("t").unwrap();
                let s = store.append(g, &bytes).unwrap();
                let stored = store.read(g, s, bytes.len()).unwrap().into_owned();
                prop_assert_eq!(decode_object(&stored, &l).unwrap().0, d);
            }
            Ok(())
        },
    )
}

/// Appended segments stay inside one page and never overlap.
pub fn segments_never_overlap_or_span_pages(cases: u32) -> Result<(), String> {
    let input = (
        8usize..256,
        prop::collection::vec((0usize..3, 0.0f64..1.0), 1..64),
    );
    check(cases, input, |(page_size, appends)| {
        let mut store = PageStore::new(page_size, page_size * (appends.len() + 3)).unwrap();
        let groups: Vec<GroupId> = (0..3)
            .map(|i| store.allocate_group(&format!("g{i}")).unwrap())
            .collect();
        let mut placed: Vec<(usize, SegmentRef, usize, u8)> = Vec::new();
        for (seq, (gi, frac)) in appends.iter().enumerate() {
            let len = 1 + ((page_size - 1) as f64 * frac) as usize;
            let tag = seq as u8;
            let s = store.append(groups[*gi], &vec![tag; len]).unwrap();
            placed.push((*gi, s, len, tag));
        }
        let mut by_page: BTreeMap<(usize, u32), Vec<(u32, usize)>> = BTreeMap::new();
        for &(gi, s, len, tag) in &placed {
            prop_assert!(
                s.offset() as usize + len <= page_size,
                "segment spans a page boundary"
            );
            let got = store.read(groups[gi], s, len).unwrap();
            prop_assert!(
                got.iter().all(|&b| b == tag),
                "segment bytes were overwritten"
            );
            by_page
                .entry((gi, s.page()))
                .or_default()
                .push((s.offset(), len));
        }
        for segs in by_page.values_mut() {
            segs.sort();
            for w in segs.windows(2) {
                prop_assert!(
                    w[0].0 as usize + w[0].1 <= w[1].0 as usize,
                    "segments overlap"
                );
            }
        }
        let slots: usize = groups
            .iter()
            .map(|g| store.info(*g).unwrap().pages.len())
            .sum();
        prop_assert_eq!(slots, store.live_pages());
        let mut all: Vec<u32> = groups
            .iter()
            .flat_map(|g| store.info(*g).unwrap().pages.clone())
            .collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), slots, "a page slot belongs to two groups");
        Ok(())
    })
}

/// Pages return to the store exactly when the last reference goes.
pub fn pages_are_freed_exactly_once(cases: u32) -> Result<(), String> {
    check(
        cases,
        prop::collection::vec((0u8..4, 0usize..4, 0usize..4), 1..80),
        |ops| {
            let page_size = 32;
            let mut store = PageStore::new(page_size, page_size * 400).unwrap();
            let groups: Vec<GroupId> = (0..4)
                .map(|i| store.allocate_group(&format!("g{i}")).unwrap())
                .collect();
            // Model: reference counts and dependency edges (only from higher to lower ids).
            let mut rc = [1u32; 4];
            // References held by the test itself; dependency references belong to the store.
            let mut own = [1u32; 4];
            let mut deps: Vec<Vec<usize>> = vec![Vec::new(); 4];
            fn drop_ref(i: usize, rc: &mut [u32; 4], deps: &mut [Vec<usize>]) {
                rc[i] -= 1;
                if rc[i] == 0 {
                    for d in std::mem::take(&mut deps[i]) {
                        drop_ref(d, rc, deps);
                    }
                }
            }
            for (op, a, b) in ops {
                let live_before = store.live_pages();
                match op {
                    0 => {
                        let r = store.append(groups[a], &[a as u8; 10]);
                        prop_assert_eq!(r.is_ok(), rc[a] > 0);
                    }
                    1 => {
                        let r = store.retain(groups[a]);
                        if rc[a] > 0 {
                            rc[a] += 1;
                            own[a] += 1;
                            prop_assert_eq!(r.unwrap(), rc[a]);
                        } else {
                            prop_assert_eq!(r, Err(StoreError::DeadGroup(groups[a].0)));
                        }
                    }
                    2 => {
                        if own[a] > 0 {
                            own[a] -= 1;
                            let mut dying = rc;
                            let mut dd = deps.clone();
                            drop_ref(a, &mut dying, &mut dd);
                            let freed: usize = (0..4)
                                .filter(|&i| rc[i] > 0 && dying[i] == 0)
                                .map(|i| store.info(groups[i]).unwrap().pages.len())
                                .sum();
                            let r = store.release(groups[a]);
                            prop_assert_eq!(r.unwrap(), rc[a] - 1);
                            rc = dying;
                            deps = dd;
                            prop_assert_eq!(store.live_pages(), live_before - freed);
                        } else if rc[a] == 0 {
                            prop_assert_eq!(
                                store.release(groups[a]),
                                Err(StoreError::DeadGroup(groups[a].0))
                            );
                            prop_assert_eq!(store.live_pages(), live_before);
                        }
                    }
                    _ => {
                        let (hi, lo) = (a.max(b), a.min(b));
                        if hi != lo && rc[hi] > 0 && rc[lo] > 0 {
                            store.add_dependency(groups[hi], groups[lo]).unwrap();
                            rc[lo] += 1;
                            deps[hi].push(lo);
                        }
                    }
                }
                for i in 0..4 {
                    prop_assert_eq!(store.is_live(groups[i]), rc[i] > 0);
                    if rc[i] > 0 {
                        prop_assert_eq!(store.info(groups[i]).unwrap().ref_count, rc[i]);
                    }
                }
                let held: usize = (0..4)
                    .filter(|&i| rc[i] > 0)
                    .map(|i| store.info(groups[i]).unwrap().pages.len())
                    .sum();
                prop_assert_eq!(held, store.live_pages());
            }
            for i in (0..4).rev() {
                while own[i] > 0 {
                    own[i] -= 1;
                    store.release(groups[i]).unwrap();
                    drop_ref(i, &mut rc, &mut deps);
                }
            }
            prop_assert_eq!(store.live_pages(), 0);
            prop_assert_eq!(store.stats.pages_allocated, store.stats.pages_freed);
            Ok(())
        },
    )
}

/// A scan yields every appended segment, in order.
pub fn scan_finds_every_segment_in_order(cases: u32) -> Result<(), String> {
    check(
        cases,
        (16usize..128, prop::collection::vec(0.0f64..1.0, 0..60)),
        |(page_size, lens)| {
            let l = Layout::Array {
                ty: "A".into(),
                elem: Box::new(Layout::Prim(PrimKind::Byte)),
                len: ArrayLen::Prefixed,
            };
            let mut store = PageStore::new(page_size, page_size * (lens.len() + 2)).unwrap();
            let g = store.allocate_group("scan").unwrap();
            let mut want = Vec::new();
            let mut values = Vec::new();
            for (i, f) in lens.iter().enumerate() {
                let n = ((page_size - 4) as f64 * f) as usize;
                let d = Datum::array(
                    "A",
                    (0..n).map(|j| Datum::Int(((i + j) % 100) as i64)).collect(),
                );
                let bytes = encode_object(&d, &l).unwrap();
                want.push(store.append(g, &bytes).unwrap());
                values.push((d, bytes.len()));
            }
            let got = store
                .scan(g, &mut |b| l.segment_len(b).map_err(StoreError::from))
                .unwrap();
            prop_assert_eq!(&got, &want);
            for (s, (d, n)) in got.iter().zip(&values) {
                let bytes = store.read(g, *s, *n).unwrap().into_owned();
                prop_assert_eq!(&decode_object(&bytes, &l).unwrap().0, d);
            }
            Ok(())
        },
    )
}
