//! Acceptance criteria as a plain binary: one PASS/FAIL line per criterion,
//! nonzero exit if any fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use devsurv::classifier::{train_vectors, TrainConfig};
use devsurv::corpus::{ingest_notes, OnMalformed, PreprocessConfig};
use devsurv::eval::{round1, Metrics};
use devsurv::extraction::{Extractor, RelationType};
use devsurv::outcomes::{
    cox_fit, km_estimate, logrank_test, merge_events, nb_fit, CoxConfig, NbConfig, SurvivalDataset,
};
use devsurv::pipeline::{annotate_notes, run_pipeline, PipelineConfig};
use devsurv::reconcile::{reconcile_registry, MatchStatus};
use devsurv::synth::{gen_corpus, gen_label_matrix, read_gold_relations, LfSpec, SynthConfig};
use devsurv::weaksup::lfs::starter_lfs;
use devsurv::weaksup::{
    apply_lfs, fit_label_model, posterior_labels, soft_majority_vote, LabelModelConfig, Vote,
};
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)*));
        }
    };
}

fn metric_arithmetic() -> Result<String, String> {
    let rows = [(96.3, 98.5, 97.4), (80.2, 82.6, 81.4), (82.7, 62.3, 71.1)];
    let mut shown = Vec::new();
    for (p, r, reported) in rows {
        let f = round1(Metrics::from_precision_recall(p, r).f1);
        ensure!(
            (f - reported).abs() <= 0.05,
            "({p}, {r}) gives {f}, expected {reported}"
        );
        shown.push(format!("{f:.1}"));
    }
    Ok(shown.join(" "))
}

fn figure_fidelity() -> Result<String, String> {
    let doc = figure_document();
    let headers: Vec<&str> = doc
        .sections
        .iter()
        .map(|s| s.canonical_header.as_str())
        .collect();
    ensure!(
        headers == ["HISTORY OF PRESENT ILLNESS", "PAST MEDICAL HISTORY"],
        "sections {headers:?}"
    );
    let cands = figure_candidates(&Extractor::bundled());
    ensure!(cands.len() >= 2, "{} candidates", cands.len());
    let (m, _) = apply_lfs(&cands[..2], &starter_lfs()).map_err(|e| e.to_string())?;
    use Vote::{Abstain as A, False as F, True as T};
    ensure!(m.row(0) == [T, A, A], "first votes {:?}", m.row(0));
    ensure!(m.row(1) == [A, F, F], "second votes {:?}", m.row(1));
    let smv: Vec<f64> = soft_majority_vote(&m).iter().map(|l| l.p_true).collect();
    ensure!(smv == [1.0, 0.0], "smv {smv:?}");
    Ok("votes (1,-,-) (-,0,0), smv 1 0".into())
}

fn label_model_recovery() -> Result<String, String> {
    let truth = [0.6, 0.7, 0.75, 0.8, 0.9];
    let specs: Vec<LfSpec> = truth
        .iter()
        .map(|&a| LfSpec {
            accuracy: a,
            propensity: 0.5,
        })
        .collect();
    let mut worst_err: f64 = 0.0;
    let mut worst_bucket: f64 = 1.0;
    for seed in 1..=5 {
        let (m, gold) = gen_label_matrix(10_000, &specs, 0.5, seed).map_err(|e| e.to_string())?;
        let fit = fit_label_model(&m, &LabelModelConfig::default()).map_err(|e| e.to_string())?;
        for (a, t) in fit.accuracies.iter().zip(truth) {
            worst_err = worst_err.max((a - t).abs());
        }
        let post = posterior_labels(&fit, &m).map_err(|e| e.to_string())?;
        let bucket: Vec<bool> = post
            .iter()
            .zip(&gold)
            .filter(|(p, _)| (0.85..=0.95).contains(&p.p_true))
            .map(|(_, y)| *y)
            .collect();
        ensure!(!bucket.is_empty(), "seed {seed}: empty calibration bucket");
        let frac = bucket.iter().filter(|y| **y).count() as f64 / bucket.len() as f64;
        worst_bucket = worst_bucket.min(frac);
    }
    ensure!(worst_err <= 0.05, "accuracy error {worst_err:.3}");
    ensure!(
        (0.8..=1.0).contains(&worst_bucket),
        "bucket fraction {worst_bucket:.3}"
    );
    Ok(format!(
        "max |alpha err| {worst_err:.3}, min bucket fraction {worst_bucket:.3}"
    ))
}

fn benchmark_corpus(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        n_patients: 300,
        ..SynthConfig::default()
    }
}

fn weak_supervision_benefit() -> Result<String, String> {
    let mut lines = Vec::new();
    for seed in 1..=3 {
        let c = gen_corpus(&benchmark_corpus(seed)).map_err(|e| e.to_string())?;
        let gold = c.gold_labels(RelationType::PainAnatomy);
        let sentences =
            annotate_notes(c.notes, &PreprocessConfig::default(), &Extractor::bundled());
        let run = run_pipeline(&sentences, &gold, &PipelineConfig::default(), None)
            .map_err(|e| e.to_string())?;
        let (clf, smv) = (run.classifier, run.majority_vote);
        let gain = clf.recall - smv.recall;
        let drop = smv.precision - clf.precision;
        ensure!(
            gain >= 10.0 && drop <= 10.0,
            "seed {seed}: recall gain {gain:.1}, precision drop {drop:.1}"
        );
        lines.push(format!("seed {seed} +{gain:.1}R/{:+.1}P", -drop));
    }
    Ok(lines.join(", "))
}

fn classifier_correctness() -> Result<String, String> {
    let grad = gradient_check(1, 10);
    ensure!(grad < 1e-5, "gradient relative error {grad:e}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (xs, ps) = random_vectors(&mut rng, 20, false);
    let cfg = TrainConfig {
        epochs: 20_000,
        batch_size: 0,
        learning_rate: 0.5,
        lr_decay: 0.0,
        lambda: 1.0,
        seed: 0,
    };
    let m = train_vectors(&xs, &ps, &cfg, &small_features()).map_err(|e| e.to_string())?;
    let oracle = newton_oracle(&xs, &ps, cfg.lambda);
    let d = 1usize << DIMS_LOG2;
    let gap = (0..d)
        .map(|j| (m.weights[j] - oracle[j]).abs())
        .chain([(m.bias - oracle[d]).abs()])
        .fold(0.0, f64::max);
    ensure!(gap < 1e-3, "max weight gap {gap:e}");
    Ok(format!("gradient err {grad:.1e}, oracle gap {gap:.1e}"))
}

fn merge_arithmetic() -> Result<String, String> {
    let (coded, text) = merge_fixture();
    let m = merge_events(&coded, &text, 90);
    ensure!(
        m.matched == 63 && m.events.len() == 519,
        "{} events, {} matched",
        m.events.len(),
        m.matched
    );
    let ratio = m.events.len() as f64 / coded.len() as f64;
    ensure!(ratio > 6.0, "ratio {ratio}");
    Ok(format!("519 events, ratio {ratio:.2}"))
}

fn survival_oracles() -> Result<String, String> {
    let (times, events, x) = binary_fixture(8);
    let ds = SurvivalDataset::from_times(&times, &events, None)
        .with_covariates(vec!["x".into()], x.iter().map(|v| vec![*v]).collect());
    let beta = cox_fit(&ds, &CoxConfig::default(), None)
        .map_err(|e| e.to_string())?
        .coefficients[0]
        .beta;
    let oracle = golden_max(
        |b| brute_partial_loglik(&times, &events, &x, b),
        -10.0,
        10.0,
    );
    ensure!((beta - oracle).abs() < 1e-3, "cox {beta} vs {oracle}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, e) = random_survival(&mut rng, 50);
    let curve = &km_estimate(&SurvivalDataset::from_times(&t, &e, None), None)
        .map_err(|e| e.to_string())?[0];
    for &u in &t {
        ensure!(
            curve.survival_at(u) == brute_km(&t, &e, u),
            "km differs at {u}"
        );
    }

    let doubled_t: Vec<f64> = t.iter().chain(&t).copied().collect();
    let doubled_e: Vec<bool> = e.iter().chain(&e).copied().collect();
    let groups: Vec<&str> = (0..100).map(|i| if i < 50 { "a" } else { "b" }).collect();
    let lr = logrank_test(
        &SurvivalDataset::from_times(&doubled_t, &doubled_e, Some(&groups)),
        "group",
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        lr.statistic == 0.0 && lr.p_value == 1.0,
        "logrank {} p {}",
        lr.statistic,
        lr.p_value
    );

    let hr = cox_fit(
        &hazard_ratio_dataset(10, 2000, 2.0),
        &CoxConfig::default(),
        None,
    )
    .map_err(|e| e.to_string())?
    .coefficients[0]
        .hazard_ratio;
    ensure!((1.7..=2.4).contains(&hr), "HR {hr}");
    Ok(format!("cox gap {:.1e}, HR {hr:.2}", (beta - oracle).abs()))
}

fn count_regression() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (y, rows) = simulate_counts(&mut rng, 5000, (0.5, -1.0), Some(2.0));
    let fit =
        nb_fit(&y, &["x".into()], &rows, None, &NbConfig::default()).map_err(|e| e.to_string())?;
    let b0 = fit.coefficients[0].coef;
    let b1 = fit.coefficients[1].coef;
    ensure!(
        (b0 - 0.5).abs() <= 0.1 && (b1 + 1.0).abs() <= 0.1,
        "beta ({b0}, {b1})"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (y, rows) = simulate_counts(&mut rng, 5000, (0.5, -1.0), None);
    let fit =
        nb_fit(&y, &["x".into()], &rows, None, &NbConfig::default()).map_err(|e| e.to_string())?;
    let oracle = poisson_oracle(&y, &rows);
    let rel = (0..2)
        .map(|j| (fit.coefficients[j].irr / oracle[j].exp() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure!(rel < 0.02, "IRR gap {rel}");

    let y: Vec<u64> = (0..200).map(|i| (i * 7 % 11) as u64).collect();
    let mean = y.iter().sum::<u64>() as f64 / y.len() as f64;
    let fit = nb_fit(&y, &[], &vec![vec![]; y.len()], None, &NbConfig::default())
        .map_err(|e| e.to_string())?;
    let irr = fit.coefficients[0].irr;
    ensure!((irr - mean).abs() <= 0.01, "intercept {irr} vs mean {mean}");
    Ok(format!(
        "beta ({b0:.3}, {b1:.3}), IRR gap {:.2}%",
        rel * 100.0
    ))
}

fn reconciliation() -> Result<String, String> {
    let (extracted, registry) = reconcile_fixture();
    let s = reconcile_registry(&extracted, &registry, 30).summary;
    let pct = |f: f64| (f * 100.0).round();
    let shown = (
        pct(s.agreement_fraction),
        pct(s.conflict_fraction),
        pct(s.missingness_fraction),
    );
    ensure!(shown == (72.0, 17.0, 11.0), "percentages {shown:?}");

    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(
            &(arb_records(), arb_records(), 0i64..60, 0i64..60),
            |(a, b, tol, extra)| {
                let x = reconcile_registry(&a, &b, tol);
                let y = reconcile_registry(&b, &a, tol).summary;
                let xs = &x.summary;
                if (
                    xs.agreement,
                    xs.conflict,
                    xs.missing_in_registry,
                    xs.missing_in_extraction,
                ) != (
                    y.agreement,
                    y.conflict,
                    y.missing_in_extraction,
                    y.missing_in_registry,
                ) {
                    return Err(TestCaseError::fail("swap is not symmetric"));
                }
                let wide = reconcile_registry(&a, &b, tol + extra).summary;
                if wide.agreement + wide.conflict < xs.agreement + xs.conflict {
                    return Err(TestCaseError::fail("wider tolerance lost matches"));
                }
                let mut counts: HashMap<MatchStatus, usize> = HashMap::new();
                for k in &x.keys {
                    *counts.entry(k.status).or_default() += 1;
                }
                let get = |s| counts.get(&s).copied().unwrap_or(0);
                let pairs = get(MatchStatus::Agreement) + get(MatchStatus::Conflict);
                if pairs + get(MatchStatus::MissingInRegistry) != a.len()
                    || pairs + get(MatchStatus::MissingInExtraction) != b.len()
                {
                    return Err(TestCaseError::fail("records not accounted for"));
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())?;
    Ok("72/17/11, 256 property cases".into())
}

fn end_to_end_once(dir: &std::path::Path) -> Result<Metrics, String> {
    let c = gen_corpus(&benchmark_corpus(42)).map_err(|e| e.to_string())?;
    c.write_to_dir(dir).map_err(|e| e.to_string())?;
    let notes =
        ingest_notes(dir.join("notes.jsonl"), OnMalformed::Abort).map_err(|e| e.to_string())?;
    let file = std::fs::File::open(dir.join("gold_relations.csv")).map_err(|e| e.to_string())?;
    let gold: Vec<(String, bool)> = read_gold_relations(file)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|g| g.relation == RelationType::PainAnatomy)
        .map(|g| (g.candidate_id, g.label))
        .collect();
    let sentences = annotate_notes(
        notes.notes,
        &PreprocessConfig::default(),
        &Extractor::bundled(),
    );
    let run = run_pipeline(&sentences, &gold, &PipelineConfig::default(), None)
        .map_err(|e| e.to_string())?;
    Ok(run.classifier)
}

fn end_to_end() -> Result<String, String> {
    let a = end_to_end_once(tempfile::tempdir().map_err(|e| e.to_string())?.path())?;
    let b = end_to_end_once(tempfile::tempdir().map_err(|e| e.to_string())?.path())?;
    ensure!(a == b, "reruns differ: {} vs {}", a.display(), b.display());
    ensure!(a.f1 >= 90.0, "{}", a.display());
    Ok(a.display())
}

fn main() {
    let criteria: [(&str, Check, Option<Duration>); 10] = [
        (
            "metric arithmetic",
            metric_arithmetic,
            Some(Duration::from_secs(1)),
        ),
        (
            "worked example fidelity",
            figure_fidelity,
            Some(Duration::from_secs(1)),
        ),
        (
            "label model recovery",
            label_model_recovery,
            Some(Duration::from_secs(30)),
        ),
        (
            "weak supervision benefit",
            weak_supervision_benefit,
            Some(Duration::from_secs(120)),
        ),
        ("classifier correctness", classifier_correctness, None),
        (
            "event merge arithmetic",
            merge_arithmetic,
            Some(Duration::from_secs(1)),
        ),
        (
            "survival oracles",
            survival_oracles,
            Some(Duration::from_secs(60)),
        ),
        (
            "count regression",
            count_regression,
            Some(Duration::from_secs(60)),
        ),
        ("reconciliation", reconciliation, None),
        ("end to end", end_to_end, Some(Duration::from_secs(300))),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > *l => Err(format!("took {elapsed:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({elapsed:.2?}) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({elapsed:.2?}) {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
