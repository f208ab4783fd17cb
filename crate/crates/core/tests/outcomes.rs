mod common;

use common::*;
use devsurv::outcomes::{
    choose_other_cutoff, collapse_rare, cox_fit, km_estimate, logrank_test, merge_events, nb_fit,
    ttest_welch, CoxConfig, Event, EventClass, EventSource, NbConfig, SurvivalDataset,
    OTHER_SYSTEM,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, Poisson};

#[test]
fn km_matches_brute_force_product_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (times, events) = random_survival(&mut rng, 50);
    let curve = &km_estimate(&SurvivalDataset::from_times(&times, &events, None), None).unwrap()[0];
    for &t in &times {
        assert_eq!(
            curve.survival_at(t),
            brute_km(&times, &events, t),
            "t = {t}"
        );
    }
}

#[test]
fn logrank_duplicated_groups_is_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, e) = random_survival(&mut rng, 40);
    let times: Vec<f64> = t.iter().chain(&t).copied().collect();
    let events: Vec<bool> = e.iter().chain(&e).copied().collect();
    let groups: Vec<&str> = (0..80).map(|i| if i < 40 { "a" } else { "b" }).collect();
    let r = logrank_test(
        &SurvivalDataset::from_times(&times, &events, Some(&groups)),
        "group",
    )
    .unwrap();
    assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
}

fn ks_uniform(mut p: Vec<f64>) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    p.iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn logrank_null_p_values_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let exp = Exp::new(0.1).unwrap();
    let ps: Vec<f64> = (0..1000)
        .map(|_| {
            let times: Vec<f64> = (0..100).map(|_| exp.sample(&mut rng)).collect();
            let events: Vec<bool> = (0..100).map(|_| rng.random_bool(0.7)).collect();
            let groups: Vec<&str> = (0..100)
                .map(|_| if rng.random_bool(0.5) { "a" } else { "b" })
                .collect();
            logrank_test(
                &SurvivalDataset::from_times(&times, &events, Some(&groups)),
                "group",
            )
            .unwrap()
            .p_value
        })
        .collect();
    let d = ks_uniform(ps);
    assert!(d < 0.05, "KS distance {d}");
}

#[test]
fn cox_matches_golden_section_oracle() {
    let (times, events, x) = binary_fixture(8);
    let ds = SurvivalDataset::from_times(&times, &events, None)
        .with_covariates(vec!["x".into()], x.iter().map(|v| vec![*v]).collect());
    let fit = cox_fit(&ds, &CoxConfig::default(), None).unwrap();
    let oracle = golden_max(
        |b| brute_partial_loglik(&times, &events, &x, b),
        -10.0,
        10.0,
    );
    let beta = fit.coefficients[0].beta;
    assert!((beta - oracle).abs() < 1e-3, "{beta} vs {oracle}");
}

fn two_covariate_dataset(seed: u64, n: usize) -> SurvivalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut rows = Vec::new();
    for _ in 0..n {
        let x1: f64 = normal.sample(&mut rng);
        let x2 = f64::from(u8::from(rng.random_bool(0.4)));
        let rate = 0.01 * (0.5 * x1 - 0.3 * x2).exp();
        let t: f64 = Exp::new(rate).unwrap().sample(&mut rng);
        let c: f64 = Exp::new(0.005).unwrap().sample(&mut rng);
        times.push(t.min(c).ceil());
        events.push(t <= c);
        rows.push(vec![x1, x2]);
    }
    SurvivalDataset::from_times(&times, &events, None)
        .with_covariates(vec!["x1".into(), "x2".into()], rows)
}

#[test]
fn cox_location_and_scale_invariance() {
    let ds = two_covariate_dataset(9, 300);
    let base = cox_fit(&ds, &CoxConfig::default(), None).unwrap();
    let mut shifted = ds.clone();
    let mut scaled = ds.clone();
    for s in &mut shifted.subjects {
        s.x[0] += 17.0;
    }
    for s in &mut scaled.subjects {
        s.x[0] *= 4.0;
    }
    let a = cox_fit(&shifted, &CoxConfig::default(), None).unwrap();
    let b = cox_fit(&scaled, &CoxConfig::default(), None).unwrap();
    for j in 0..2 {
        assert!((a.coefficients[j].beta - base.coefficients[j].beta).abs() < 1e-8);
    }
    assert!((b.coefficients[0].beta * 4.0 - base.coefficients[0].beta).abs() < 1e-8);
    assert!((b.coefficients[0].p_value - base.coefficients[0].p_value).abs() < 1e-10);
    assert!((b.coefficients[1].beta - base.coefficients[1].beta).abs() < 1e-8);
    let again = cox_fit(&ds, &CoxConfig::default(), None).unwrap();
    assert_eq!(again, base);
}

#[test]
fn cox_recovers_simulated_hazard_ratio() {
    let ds = hazard_ratio_dataset(10, 2000, 2.0);
    let hr = cox_fit(&ds, &CoxConfig::default(), None)
        .unwrap()
        .coefficients[0]
        .hazard_ratio;
    assert!((1.7..=2.4).contains(&hr), "{hr}");
}

#[test]
fn nb_recovers_simulated_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (y, rows) = simulate_counts(&mut rng, 5000, (0.5, -1.0), Some(2.0));
    let fit = nb_fit(&y, &["x".into()], &rows, None, &NbConfig::default()).unwrap();
    assert!((fit.coefficients[0].coef - 0.5).abs() < 0.1);
    assert!((fit.coefficients[1].coef + 1.0).abs() < 0.1);
    assert!((fit.theta - 2.0).abs() < 0.5, "{}", fit.theta);
}

#[test]
fn nb_on_poisson_data_matches_poisson_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (y, rows) = simulate_counts(&mut rng, 5000, (0.5, -1.0), None);
    let fit = nb_fit(&y, &["x".into()], &rows, None, &NbConfig::default()).unwrap();
    assert!(fit.theta > 100.0, "{}", fit.theta);
    let oracle = poisson_oracle(&y, &rows);
    for j in 0..2 {
        let rel = (fit.coefficients[j].irr / oracle[j].exp() - 1.0).abs();
        assert!(rel < 0.02, "coefficient {j}: {rel}");
    }
}

#[test]
fn aic_cutoff_groups_rare_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // three common systems with distinct rates; four rare systems sharing one
    let spec: [(&str, usize, f64); 7] = [
        ("A", 400, 1.0),
        ("B", 400, 2.0),
        ("C", 400, 0.5),
        ("r1", 20, 3.0),
        ("r2", 25, 3.0),
        ("r3", 30, 3.0),
        ("r4", 35, 3.0),
    ];
    let mut y = Vec::new();
    let mut systems = Vec::new();
    for (name, n, mu) in spec {
        for _ in 0..n {
            let lambda = Gamma::new(3.0, mu / 3.0).unwrap().sample(&mut rng);
            y.push(Poisson::new(lambda).unwrap().sample(&mut rng) as u64);
            systems.push(name.to_string());
        }
    }
    let rows = vec![vec![]; y.len()];
    let cutoffs = [0, 40, 1000];
    let choice = choose_other_cutoff(
        &y,
        &systems,
        Some("A"),
        &[],
        &rows,
        None,
        &cutoffs,
        &NbConfig::default(),
    )
    .unwrap();
    assert_eq!(choice.cutoff, 40);
    let collapsed = collapse_rare(&systems, 40);
    for (orig, grouped) in systems.iter().zip(&collapsed) {
        assert_eq!(grouped == OTHER_SYSTEM, orig.starts_with('r'));
    }
    // reported AICs agree with refits and the argmin
    let min = choice
        .aic
        .iter()
        .filter_map(|a| a.1)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(choice.fit.aic, min);
    for (cut, aic) in &choice.aic {
        let refit = choose_other_cutoff(
            &y,
            &systems,
            Some("A"),
            &[],
            &rows,
            None,
            &[*cut],
            &NbConfig::default(),
        )
        .unwrap();
        assert_eq!(Some(refit.fit.aic), *aic);
    }
}

#[test]
fn welch_null_rejection_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let normal = Normal::new(3.0, 2.0).unwrap();
    let rejections = (0..1000)
        .filter(|_| {
            let a: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..25).map(|_| normal.sample(&mut rng)).collect();
            ttest_welch(&a, &b).unwrap().p_value < 0.05
        })
        .count();
    let rate = rejections as f64 / 1000.0;
    assert!((rate - 0.05).abs() <= 0.02, "{rate}");
}

#[test]
fn merge_count_fixture() {
    let (coded, text) = merge_fixture();
    assert_eq!((coded.len(), text.len()), (78, 504));
    let m = merge_events(&coded, &text, 90);
    assert_eq!((m.events.len(), m.matched), (519, 63));
    assert!(m.events.len() as f64 / coded.len() as f64 > 6.0);
}

fn event_strategy(source: EventSource) -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec((0usize..4, 0u64..400, 0usize..3), 0..25).prop_map(move |v| {
        let classes = [
            EventClass::Revision,
            EventClass::Infection,
            EventClass::Pain,
        ];
        v.into_iter()
            .enumerate()
            .map(|(k, (p, d, c))| Event {
                event_class: classes[c],
                ..revision(p, d, source, k)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn merge_accounting_and_order_independence(
        coded in event_strategy(EventSource::Coded),
        text in event_strategy(EventSource::Text),
        window in 0i64..120,
        rot in 0usize..25,
    ) {
        let m = merge_events(&coded, &text, window);
        let distinct = |v: &[Event]| {
            let s: std::collections::HashSet<_> = v.iter().map(|e| (&e.patient_id, e.event_class, e.date)).collect();
            s.len()
        };
        prop_assert_eq!(m.events.len(), distinct(&coded) + distinct(&text) - m.matched);
        let mut c2 = coded.clone();
        let mut t2 = text.clone();
        c2.reverse();
        if !t2.is_empty() {
            let k = rot % t2.len();
            t2.rotate_left(k);
        }
        let m2 = merge_events(&c2, &t2, window);
        prop_assert_eq!(m.events.len(), m2.events.len());
        prop_assert_eq!(m.matched, m2.matched);
    }

    #[test]
    fn km_is_monotone_and_starts_at_one(
        data in prop::collection::vec((1u32..30, any::<bool>()), 1..60)
    ) {
        let times: Vec<f64> = data.iter().map(|d| f64::from(d.0)).collect();
        let events: Vec<bool> = data.iter().map(|d| d.1).collect();
        let c = &km_estimate(&SurvivalDataset::from_times(&times, &events, None), None).unwrap()[0];
        prop_assert_eq!(c.survival_at(0.0), 1.0);
        prop_assert!(c.points.windows(2).all(|w| w[1].survival <= w[0].survival));
        prop_assert!(c.points.iter().all(|p| (0.0..=1.0).contains(&p.survival)));
    }

    #[test]
    fn nb_intercept_only_matches_sample_mean(
        y in prop::collection::vec(0u64..12, 5..80).prop_filter("nonzero", |v| v.iter().any(|x| *x > 0))
    ) {
        let fit = nb_fit(&y, &[], &vec![vec![]; y.len()], None, &NbConfig::default()).unwrap();
        let mean = y.iter().sum::<u64>() as f64 / y.len() as f64;
        prop_assert!((fit.coefficients[0].irr - mean).abs() < 1e-6 * mean.max(1.0));
    }
}
