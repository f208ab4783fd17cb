mod common;

use std::collections::HashMap;

use common::*;
use devsurv::reconcile::{reconcile_registry, MatchStatus};
use proptest::prelude::*;

#[test]
fn fixture_reproduces_reported_proportions() {
    let (extracted, registry) = reconcile_fixture();
    let s = reconcile_registry(&extracted, &registry, 30).summary;
    assert_eq!(s.n_keys, 100);
    assert_eq!(
        (
            s.agreement,
            s.conflict,
            s.missing_in_registry,
            s.missing_in_extraction
        ),
        (72, 17, 6, 5)
    );
    assert_eq!(
        (
            s.agreement_fraction,
            s.conflict_fraction,
            s.missingness_fraction
        ),
        (0.72, 0.17, 0.11)
    );
}

#[test]
fn tolerance_zero_splits_shifted_pairs() {
    let (extracted, registry) = reconcile_fixture();
    let s = reconcile_registry(&extracted, &registry, 0).summary;
    // the 72 agreeing pairs are 3 days apart
    assert_eq!((s.agreement, s.conflict), (0, 17));
    assert_eq!(s.n_keys, 100 + 72);
}

fn status_counts(keys: &[devsurv::reconcile::KeyResult]) -> HashMap<MatchStatus, usize> {
    let mut out = HashMap::new();
    for k in keys {
        *out.entry(k.status).or_default() += 1;
    }
    out
}

proptest! {
    #[test]
    fn swapping_sources_swaps_missing_statuses(a in arb_records(), b in arb_records(), tol in 0i64..60) {
        let x = reconcile_registry(&a, &b, tol).summary;
        let y = reconcile_registry(&b, &a, tol).summary;
        prop_assert_eq!((x.agreement, x.conflict), (y.agreement, y.conflict));
        prop_assert_eq!(x.missing_in_registry, y.missing_in_extraction);
        prop_assert_eq!(x.missing_in_extraction, y.missing_in_registry);
    }

    #[test]
    fn wider_tolerance_never_loses_matches(a in arb_records(), b in arb_records(), t1 in 0i64..60, extra in 0i64..60) {
        let matched = |t: i64| {
            let s = reconcile_registry(&a, &b, t).summary;
            s.agreement + s.conflict
        };
        prop_assert!(matched(t1 + extra) >= matched(t1));
    }

    #[test]
    fn every_record_lands_in_one_key(a in arb_records(), b in arb_records(), tol in 0i64..60) {
        let r = reconcile_registry(&a, &b, tol);
        let c = status_counts(&r.keys);
        let get = |s| c.get(&s).copied().unwrap_or(0);
        let pairs = get(MatchStatus::Agreement) + get(MatchStatus::Conflict);
        prop_assert_eq!(pairs + get(MatchStatus::MissingInRegistry), a.len());
        prop_assert_eq!(pairs + get(MatchStatus::MissingInExtraction), b.len());
        if r.summary.n_keys > 0 {
            let total = r.summary.agreement_fraction + r.summary.conflict_fraction + r.summary.missingness_fraction;
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
