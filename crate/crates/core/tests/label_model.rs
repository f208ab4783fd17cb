use devsurv::synth::{gen_label_matrix, LfSpec};
use devsurv::weaksup::{
    fit_label_model, posterior_labels, soft_majority_vote, LabelMatrix, LabelModelConfig, Vote,
};
use proptest::prelude::*;

fn specs(acc: &[f64], beta: f64) -> Vec<LfSpec> {
    acc.iter()
        .map(|&a| LfSpec {
            accuracy: a,
            propensity: beta,
        })
        .collect()
}

#[test]
fn recovers_five_lf_accuracies() {
    let truth = [0.9, 0.8, 0.75, 0.7, 0.6];
    let (m, _) = gen_label_matrix(10_000, &specs(&truth, 0.5), 0.5, 42).unwrap();
    let fit = fit_label_model(&m, &LabelModelConfig::default()).unwrap();
    for (a, t) in fit.accuracies.iter().zip(truth) {
        assert!((a - t).abs() <= 0.05, "fitted {a} vs {t}");
    }
    for b in &fit.propensities {
        assert!((b - 0.5).abs() < 0.03);
    }
}

#[test]
fn posterior_calibration_bucket() {
    let truth = [0.9, 0.8, 0.75, 0.7, 0.6];
    let (m, gold) = gen_label_matrix(10_000, &specs(&truth, 0.5), 0.5, 5).unwrap();
    let fit = fit_label_model(&m, &LabelModelConfig::default()).unwrap();
    let post = posterior_labels(&fit, &m).unwrap();
    let bucket: Vec<bool> = post
        .iter()
        .zip(&gold)
        .filter(|(p, _)| (0.85..=0.95).contains(&p.p_true))
        .map(|(_, y)| *y)
        .collect();
    assert!(!bucket.is_empty());
    let frac = bucket.iter().filter(|y| **y).count() as f64 / bucket.len() as f64;
    assert!((0.8..=1.0).contains(&frac), "{frac}");
}

#[test]
fn em_log_likelihood_never_decreases() {
    let (m, _) = gen_label_matrix(2_000, &specs(&[0.85, 0.65, 0.7, 0.55], 0.6), 0.5, 9).unwrap();
    let fit = fit_label_model(&m, &LabelModelConfig::default()).unwrap();
    for w in fit.diagnostics.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
    assert!(fit.diagnostics.converged);
}

fn arb_matrix() -> impl Strategy<Value = LabelMatrix> {
    let vote = prop_oneof![Just(Vote::True), Just(Vote::False), Just(Vote::Abstain)];
    (1usize..5).prop_flat_map(move |m| {
        prop::collection::vec(prop::collection::vec(vote.clone(), m), 1..40)
            .prop_filter("needs some signal", |rows| {
                rows.iter().flatten().any(|v| !v.is_abstain())
            })
            .prop_map(|rows| LabelMatrix::from_rows(&rows).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn column_permutation_is_equivariant(m in arb_matrix(), seed in any::<u64>()) {
        let k = m.m();
        let mut perm: Vec<usize> = (0..k).collect();
        // deterministic shuffle from the seed
        for i in (1..k).rev() {
            perm.swap(i, (seed as usize).wrapping_mul(i + 7) % (i + 1));
        }
        let pm = m.select_columns(&perm).unwrap();
        let cfg = LabelModelConfig::default();
        let a = fit_label_model(&m, &cfg).unwrap();
        let b = fit_label_model(&pm, &cfg).unwrap();
        for (new_j, &old_j) in perm.iter().enumerate() {
            prop_assert!((b.accuracies[new_j] - a.accuracies[old_j]).abs() < 1e-9);
            prop_assert!((b.propensities[new_j] - a.propensities[old_j]).abs() < 1e-12);
        }
        let pa = posterior_labels(&a, &m).unwrap();
        let pb = posterior_labels(&b, &pm).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!((x.p_true - y.p_true).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicating_rows_keeps_parameters(m in arb_matrix()) {
        let rows: Vec<Vec<Vote>> = m.rows().chain(m.rows()).map(|r| r.to_vec()).collect();
        let dm = LabelMatrix::from_rows(&rows).unwrap();
        let cfg = LabelModelConfig::default();
        let a = fit_label_model(&m, &cfg).unwrap();
        let b = fit_label_model(&dm, &cfg).unwrap();
        for (x, y) in a.accuracies.iter().zip(&b.accuracies) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert_eq!(&a.propensities, &b.propensities);
    }

    #[test]
    fn clipped_ranges_and_monotone_em(m in arb_matrix()) {
        let fit = fit_label_model(&m, &LabelModelConfig::default()).unwrap();
        for a in &fit.accuracies {
            prop_assert!((0.01..=0.99).contains(a));
        }
        for (j, b) in fit.propensities.iter().enumerate() {
            let cov = m.column(j).filter(|v| !v.is_abstain()).count() as f64 / m.n() as f64;
            prop_assert!((b - cov).abs() < 1e-12);
        }
        for w in fit.diagnostics.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
        for p in posterior_labels(&fit, &m).unwrap() {
            prop_assert!((0.0..=1.0).contains(&p.p_true));
        }
    }

    #[test]
    fn smv_ignores_silent_column(m in arb_matrix()) {
        let mut rows: Vec<Vec<Vote>> = m.rows().map(|r| r.to_vec()).collect();
        for r in &mut rows {
            r.push(Vote::Abstain);
        }
        let wide = LabelMatrix::from_rows(&rows).unwrap();
        let a: Vec<f64> = soft_majority_vote(&m).iter().map(|l| l.p_true).collect();
        let b: Vec<f64> = soft_majority_vote(&wide).iter().map(|l| l.p_true).collect();
        prop_assert_eq!(a, b);
    }
}
