//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use chrono::{Days, NaiveDate};
use devsurv::classifier::{FeatureConfig, FeatureVector};
use devsurv::corpus::{parse_datetime, preprocess, Document, PreprocessConfig, RawNote};
use devsurv::extraction::{generate_candidates, Extractor, RelationCandidate, RelationType};
use devsurv::outcomes::{Event, EventClass, EventSource, SurvivalDataset};
use devsurv::reconcile::{ComponentRole, RegistryRecord};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};

pub const FIGURE_NOTE: &str = "HISTORY OF PRESENT ILLNESS:\n\n60 yo male with infected R hip (MRSA) s/p previous hip replacement.\n\nPAST MEDICAL HISTORY:\n\nHx right Zimmer Biomet hip 1/1/05 complicated by infection.\n";

pub fn figure_document() -> Document {
    preprocess(
        RawNote {
            note_id: "n1".into(),
            patient_id: "p1".into(),
            note_datetime: parse_datetime("2008-07-01T18:11:00Z").unwrap(),
            note_type: "progress".into(),
            text: FIGURE_NOTE.into(),
        },
        &PreprocessConfig::default(),
    )
}

pub fn figure_candidates(extractor: &Extractor) -> Vec<RelationCandidate> {
    extractor
        .annotate(&figure_document())
        .into_iter()
        .flat_map(|s| generate_candidates(&Arc::new(s), RelationType::ImplantComplication))
        .collect()
}

// survival

pub fn random_survival(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    // integer times so ties occur
    let times = (0..n)
        .map(|_| f64::from(rng.random_range(1..15u32)))
        .collect();
    let events = (0..n).map(|_| rng.random_bool(0.6)).collect();
    (times, events)
}

/// Product-limit estimate at `t` straight from the definition.
pub fn brute_km(times: &[f64], events: &[bool], t: f64) -> f64 {
    let mut distinct = times.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut s = 1.0;
    for &u in distinct.iter().filter(|u| **u <= t) {
        let at_risk = times.iter().filter(|x| **x >= u).count() as f64;
        let deaths = times
            .iter()
            .zip(events)
            .filter(|(x, e)| **x == u && **e)
            .count() as f64;
        s *= 1.0 - deaths / at_risk;
    }
    s
}

/// Breslow partial likelihood straight from its definition.
pub fn brute_partial_loglik(times: &[f64], events: &[bool], x: &[f64], beta: f64) -> f64 {
    (0..times.len())
        .filter(|&i| events[i])
        .map(|i| {
            let risk: f64 = (0..times.len())
                .filter(|&j| times[j] >= times[i])
                .map(|j| (beta * x[j]).exp())
                .sum();
            beta * x[i] - risk.ln()
        })
        .sum()
}

pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-9 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    (lo + hi) / 2.0
}

/// 20 subjects, binary covariate, tied integer times.
pub fn binary_fixture(seed: u64) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..20).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
    let times = x
        .iter()
        .map(|xi| (Exp::new(0.1 * (0.7 * xi).exp()).unwrap().sample(&mut rng) * 10.0).ceil())
        .collect();
    let events = (0..20).map(|_| rng.random_bool(0.75)).collect();
    (times, events, x)
}

/// Exponential times with hazard ratio `hr` for x = 1 and uniform censoring.
pub fn hazard_ratio_dataset(seed: u64, n: usize, hr: f64) -> SurvivalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut rows = Vec::new();
    for i in 0..n {
        let x = f64::from(u8::from(i % 2 == 1));
        let t: f64 = Exp::new(0.001 * hr.powf(x)).unwrap().sample(&mut rng);
        let c = rng.random_range(200.0..3000.0);
        times.push(t.min(c).ceil());
        events.push(t <= c);
        rows.push(vec![x]);
    }
    SurvivalDataset::from_times(&times, &events, None).with_covariates(vec!["x".into()], rows)
}

// counts

pub fn simulate_counts(
    rng: &mut ChaCha8Rng,
    n: usize,
    beta: (f64, f64),
    theta: Option<f64>,
) -> (Vec<u64>, Vec<Vec<f64>>) {
    let mut y = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(0.0..1.5);
        let mu = (beta.0 + beta.1 * x).exp();
        let lambda = match theta {
            Some(th) => Gamma::new(th, mu / th).unwrap().sample(rng),
            None => mu,
        };
        let count = if lambda > 0.0 {
            Poisson::new(lambda).unwrap().sample(rng) as u64
        } else {
            0
        };
        y.push(count);
        rows.push(vec![x]);
    }
    (y, rows)
}

/// Poisson regression with one covariate by Newton's method.
pub fn poisson_oracle(y: &[u64], rows: &[Vec<f64>]) -> DVector<f64> {
    let n = y.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { rows[i][0] });
    let yv = DVector::from_iterator(n, y.iter().map(|v| *v as f64));
    let mut b = DVector::zeros(2);
    for _ in 0..100 {
        let mu = (&x * &b).map(f64::exp);
        let g = x.transpose() * (&yv - &mu);
        let mut wx = x.clone();
        for (i, mut row) in wx.row_iter_mut().enumerate() {
            row *= mu[i];
        }
        let h = x.transpose() * wx;
        let step = h.lu().solve(&g).unwrap();
        b += &step;
        if step.norm() < 1e-12 {
            break;
        }
    }
    b
}

// events

pub fn revision(p: usize, day: u64, source: EventSource, k: usize) -> Event {
    Event {
        patient_id: format!("p{p:04}"),
        event_class: EventClass::Revision,
        date: NaiveDate::from_ymd_opt(2005, 1, 1).unwrap() + Days::new(day),
        source,
        provenance: format!("{source:?}{k}"),
    }
}

/// 78 coded and 504 text events; 63 coded events have a text twin 20 days
/// later, the other 15 coded and 441 text events stand alone.
pub fn merge_fixture() -> (Vec<Event>, Vec<Event>) {
    let mut coded = Vec::new();
    let mut text = Vec::new();
    for p in 0..63 {
        coded.push(revision(p, 100, EventSource::Coded, p));
        text.push(revision(p, 120, EventSource::Text, p));
    }
    for p in 63..78 {
        coded.push(revision(p, 100, EventSource::Coded, p));
    }
    for p in 78..519 {
        text.push(revision(p, 300, EventSource::Text, p));
    }
    (coded, text)
}

// reconciliation

pub fn registry_record(
    patient: usize,
    day: u64,
    manufacturer: &str,
    model: &str,
) -> RegistryRecord {
    RegistryRecord {
        patient_id: format!("p{patient:03}"),
        surgery_date: NaiveDate::from_ymd_opt(2004, 3, 1).unwrap() + Days::new(day),
        component_role: ComponentRole::Acetabular,
        manufacturer: manufacturer.into(),
        model: model.into(),
    }
}

pub fn arb_records() -> impl Strategy<Value = Vec<RegistryRecord>> {
    let models = ["Pinnacle", "Trilogy", "Trident"];
    prop::collection::vec((0usize..4, 0u64..120, 0usize..3), 0..12).prop_map(move |v| {
        v.into_iter()
            .map(|(p, d, m)| registry_record(p, d, "Maker", models[m]))
            .collect()
    })
}

/// 100 keys: 72 equal pairs, 17 pairs with a different model, 6 records
/// only in the extraction and 5 only in the registry.
pub fn reconcile_fixture() -> (Vec<RegistryRecord>, Vec<RegistryRecord>) {
    let mut extracted = Vec::new();
    let mut registry = Vec::new();
    for p in 0..72 {
        extracted.push(registry_record(p, p as u64, "DePuy", "Pinnacle"));
        registry.push(registry_record(p, p as u64 + 3, "DePuy", "Pinnacle"));
    }
    for p in 72..89 {
        extracted.push(registry_record(p, 10, "Zimmer", "Trilogy"));
        registry.push(registry_record(p, 10, "Zimmer", "Continuum"));
    }
    for p in 89..95 {
        extracted.push(registry_record(p, 20, "Stryker", "Trident"));
    }
    for p in 95..100 {
        registry.push(registry_record(p, 20, "Stryker", "Trident"));
    }
    (extracted, registry)
}

// classifier

pub const DIMS_LOG2: u32 = 3;

pub fn small_features() -> FeatureConfig {
    FeatureConfig {
        dims_log2: DIMS_LOG2,
        ..Default::default()
    }
}

pub fn random_vectors(
    rng: &mut ChaCha8Rng,
    n: usize,
    soft: bool,
) -> (Vec<FeatureVector>, Vec<f64>) {
    let d = 1u32 << DIMS_LOG2;
    let xs: Vec<FeatureVector> = (0..n)
        .map(|_| {
            let mut pairs = Vec::new();
            for i in 0..d {
                if rng.random_bool(0.5) {
                    pairs.push((i, rng.random_range(-2.0..2.0)));
                }
            }
            FeatureVector::from_pairs(pairs)
        })
        .collect();
    let ps = (0..n)
        .map(|_| {
            if soft {
                rng.random_range(0.0..1.0)
            } else {
                f64::from(u8::from(rng.random_bool(0.5)))
            }
        })
        .collect();
    (xs, ps)
}

/// Newton's method on the dense regularised logistic loss; returns weights
/// followed by the bias.
pub fn newton_oracle(xs: &[FeatureVector], ps: &[f64], lambda: f64) -> DVector<f64> {
    let d = 1usize << DIMS_LOG2;
    let n = xs.len();
    let mut design = DMatrix::<f64>::zeros(n, d + 1);
    for (i, x) in xs.iter().enumerate() {
        for &(j, v) in &x.entries {
            design[(i, j as usize)] = v;
        }
        design[(i, d)] = 1.0;
    }
    let mut theta = DVector::<f64>::zeros(d + 1);
    let mut pen = DMatrix::<f64>::identity(d + 1, d + 1) * (2.0 * lambda);
    pen[(d, d)] = 0.0;
    for _ in 0..100 {
        let z = &design * &theta;
        let mu = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let r = &mu - DVector::from_column_slice(ps);
        let g = design.transpose() * r + &pen * &theta;
        let wts = mu.map(|m| m * (1.0 - m));
        let h = design.transpose() * DMatrix::from_diagonal(&wts) * &design + &pen;
        let step = h.lu().solve(&g).unwrap();
        theta -= &step;
        if step.norm() < 1e-13 {
            break;
        }
    }
    theta
}

/// Largest relative gap between the analytic gradient and central
/// differences of the objective.
pub fn gradient_check(seed: u64, instances: usize) -> f64 {
    use devsurv::classifier::{gradient, objective};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 1usize << DIMS_LOG2;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (xs, ps) = random_vectors(&mut rng, 15, true);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-1.0..1.0);
        let lambda = rng.random_range(0.0..2.0);
        let (g, gb) = gradient(&w, b, &xs, &ps, lambda);
        let h = 1e-5;
        for j in 0..=d {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            let (mut bp, mut bm) = (b, b);
            if j < d {
                wp[j] += h;
                wm[j] -= h;
            } else {
                bp += h;
                bm -= h;
            }
            let fd = (objective(&wp, bp, &xs, &ps, lambda) - objective(&wm, bm, &xs, &ps, lambda))
                / (2.0 * h);
            let an = if j < d { g[j] } else { gb };
            worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8));
        }
    }
    worst
}
