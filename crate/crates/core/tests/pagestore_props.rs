//! Page store and codec properties, 10^4 random cases each.

#[path = "support/pagestore.rs"]
mod props;

use props::CASES;

#[test]
fn encode_decode_round_trip() {
    props::encode_decode_round_trip(CASES).unwrap();
}

#[test]
fn segments_never_overlap_or_span_pages() {
    props::segments_never_overlap_or_span_pages(CASES).unwrap();
}

#[test]
fn pages_are_freed_exactly_once() {
    props::pages_are_freed_exactly_once(CASES).unwrap();
}

#[test]
fn scan_finds_every_segment_in_order() {
    props::scan_finds_every_segment_in_order(CASES).unwrap();
}
