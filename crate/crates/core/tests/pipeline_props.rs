mod common {
    pub mod props;
}

use common::props;

const CASES: u32 = 256;

#[test]
fn flicker_merge_is_idempotent() {
    props::flicker_idempotent(CASES).unwrap();
}

#[test]
fn flicker_merge_is_commutative() {
    props::flicker_commutative(CASES).unwrap();
}

#[test]
fn flicker_merge_is_associative() {
    props::flicker_associative(CASES).unwrap();
}

#[test]
fn shift_drops_exactly_the_delay() {
    props::shift_length(CASES).unwrap();
}

#[test]
fn zero_shift_is_identity() {
    props::shift_identity(CASES).unwrap();
}

#[test]
fn same_sign_shifts_compose() {
    props::shift_composition(CASES).unwrap();
}

#[test]
fn filter_is_monotone_in_fraction() {
    props::filter_monotone(CASES).unwrap();
}

#[test]
fn archives_round_trip_bit_exactly() {
    props::archive_round_trip(CASES).unwrap();
}
