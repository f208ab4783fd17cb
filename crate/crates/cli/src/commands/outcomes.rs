use std::collections::HashSet;
use std::fs::File;

use devsurv::classifier::read_predictions_csv;
use devsurv::extraction::TaggedSentence;
use devsurv::outcomes::{
    assemble_records, build_count_dataset, build_survival_dataset, choose_other_cutoff,
    covariate_design, cox_fit, events_from_candidates, forest_rows, km_estimate, logrank_test,
    merge_events, rates_by_revision, read_codes, read_events, read_patients, select_cohort,
    ttest_welch, write_events, write_forest_csv, Cohort, CovariateSpec, CoxFit, Event,
    SurvivalDataset,
};
use devsurv::reconcile::{load_registry, reconcile_registry, records_from_mentions};
use serde::Serialize;

use super::{names, Ctx};
use crate::error::{CliError, CliResult};

fn csv_rows<T: Serialize>(rows: &[T], w: &mut Vec<u8>) -> devsurv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()
        .map_err(|e| devsurv::Error::Format(e.to_string()))
}

pub fn reconcile(ctx: &mut Ctx) -> CliResult<String> {
    let sentences: Vec<TaggedSentence> = ctx.ws.read_jsonl(names::SENTENCES)?;
    let registry_path = ctx.cfg.input(&ctx.cfg.paths.registry, "paths.registry")?;
    ctx.ws.external(&registry_path)?;
    let catalog = ctx.cfg.catalog()?;
    let (extracted, unresolved) = records_from_mentions(&sentences, &catalog);
    if !unresolved.is_empty() {
        log::info!(
            "{} implant mentions without a catalog entry skipped",
            unresolved.len()
        );
    }
    let registry: Vec<_> = load_registry(&registry_path)?
        .iter()
        .map(|r| catalog.normalize(r))
        .collect();
    let report = reconcile_registry(
        &extracted,
        &registry,
        ctx.cfg.outcomes.reconcile_tolerance_days,
    );
    ctx.ws
        .write_with(names::RECONCILIATION, |w| report.write_csv(w))?;
    ctx.ws
        .write_json(names::RECONCILIATION_SUMMARY, &report.summary)?;
    let s = report.summary;
    Ok(format!(
        "reconcile: {} keys, agreement {:.1}%, conflict {:.1}%, missing {:.1}%",
        s.n_keys,
        100.0 * s.agreement_fraction,
        100.0 * s.conflict_fraction,
        100.0 * s.missingness_fraction
    ))
}

fn build_cohort(ctx: &mut Ctx) -> CliResult<Cohort> {
    let patients_path = ctx.cfg.input(&ctx.cfg.paths.patients, "paths.patients")?;
    let codes_path = ctx.cfg.input(&ctx.cfg.paths.codes, "paths.codes")?;
    ctx.ws.external(&patients_path)?;
    ctx.ws.external(&codes_path)?;
    let open = |p: &std::path::Path| File::open(p).map_err(|e| CliError::io(p, e));
    let records = assemble_records(
        read_patients(open(&patients_path)?)?,
        read_codes(open(&codes_path)?)?,
    )?;
    Ok(select_cohort(&records, &ctx.cfg.outcomes.codes)?)
}

/// The cohort for downstream commands; `cohort` must have run.
fn cohort_artifact(ctx: &mut Ctx) -> CliResult<Cohort> {
    ctx.ws.artifact(names::COHORT)?;
    build_cohort(ctx)
}

#[derive(Serialize)]
struct CohortRow<'a> {
    patient_id: &'a str,
    index_date: chrono::NaiveDate,
    last_contact_date: chrono::NaiveDate,
    implant_system: &'a str,
}

pub fn cohort(ctx: &mut Ctx) -> CliResult<String> {
    let cohort = build_cohort(ctx)?;
    let rows: Vec<CohortRow> = cohort
        .members
        .iter()
        .map(|m| CohortRow {
            patient_id: &m.record.info.patient_id,
            index_date: m.index_date,
            last_contact_date: m.record.info.last_contact_date,
            implant_system: m.record.info.implant_system.as_deref().unwrap_or(""),
        })
        .collect();
    ctx.ws.write_with(names::COHORT, |w| csv_rows(&rows, w))?;
    ctx.ws.write_with(names::CODED_EVENTS, |w| {
        write_events(&cohort.coded_revisions, w)
    })?;
    Ok(format!(
        "cohort: {} patients, {} coded revisions",
        cohort.members.len(),
        cohort.coded_revisions.len()
    ))
}

pub fn events_merge(ctx: &mut Ctx) -> CliResult<String> {
    let coded = read_events(ctx.ws.open_artifact(names::CODED_EVENTS)?)?;
    let mut text = Vec::new();
    let mut used = Vec::new();
    for relation in ctx.cfg.outcomes.event_relations.clone() {
        if !ctx.ws.has_artifact(&names::predictions(relation)) {
            log::info!("no predictions for {relation}; skipped");
            continue;
        }
        let preds = read_predictions_csv(ctx.ws.open_artifact(&names::predictions(relation))?)?;
        let positive: HashSet<String> = preds
            .into_iter()
            .filter(|p| p.predicted_label == 1)
            .map(|p| p.candidate_id)
            .collect();
        let cs = ctx.candidates(relation)?;
        text.extend(events_from_candidates(&cs, &|id| positive.contains(id)));
        used.push(relation.to_string());
    }
    if used.is_empty() {
        let first = ctx.cfg.pipeline.relation;
        return Err(CliError::missing(
            ctx.ws.path(&names::predictions(first)),
            "run `devsurv predict` for at least one relation in outcomes.event_relations",
        ));
    }
    text.sort();
    let merged = merge_events(&coded, &text, ctx.cfg.outcomes.merge_window_days);
    ctx.ws
        .write_with(names::TEXT_EVENTS, |w| write_events(&text, w))?;
    ctx.ws
        .write_with(names::EVENTS, |w| write_events(&merged.events, w))?;
    Ok(format!(
        "events merge: {} coded + {} text ({}) -> {} events, {} matched",
        coded.len(),
        text.len(),
        used.join(", "),
        merged.events.len(),
        merged.matched
    ))
}

fn survival_dataset(ctx: &mut Ctx, spec: &CovariateSpec) -> CliResult<SurvivalDataset> {
    let cohort = cohort_artifact(ctx)?;
    let events: Vec<Event> = read_events(ctx.ws.open_artifact(names::EVENTS)?)?;
    let outcome = ctx.cfg.outcomes.outcome_class()?;
    Ok(build_survival_dataset(&cohort, &events, outcome, spec)?)
}

#[derive(Serialize)]
struct KmRow<'a> {
    group: &'a str,
    time: f64,
    n_risk: usize,
    n_events: usize,
    n_censored: usize,
    survival: f64,
    std_err: f64,
}

pub fn km(ctx: &mut Ctx, group_by: Option<String>) -> CliResult<String> {
    let ds = survival_dataset(ctx, &CovariateSpec::none())?;
    let curves = km_estimate(&ds, group_by.as_deref())?;
    let rows: Vec<KmRow> = curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(|p| KmRow {
                group: c.group.as_deref().unwrap_or("all"),
                time: p.time,
                n_risk: p.n_risk,
                n_events: p.n_events,
                n_censored: p.n_censored,
                survival: p.survival,
                std_err: p.std_err,
            })
        })
        .collect();
    ctx.ws.write_with(names::KM, |w| csv_rows(&rows, w))?;
    Ok(format!(
        "survival km: {} subjects, {} events, {} curve(s)",
        ds.len(),
        ds.n_events(),
        curves.len()
    ))
}

pub fn logrank(ctx: &mut Ctx, group_by: &str) -> CliResult<String> {
    let ds = survival_dataset(ctx, &CovariateSpec::none())?;
    let r = logrank_test(&ds, group_by)?;
    ctx.ws.write_json(names::LOGRANK, &r)?;
    Ok(format!(
        "survival logrank: {} groups by {group_by}, chi2 {:.3} on {} df, p {:.4}",
        r.groups.len(),
        r.statistic,
        r.df,
        r.p_value
    ))
}

#[derive(Serialize)]
struct CoefRow<'a> {
    name: &'a str,
    estimate: f64,
    se: f64,
    ratio: f64,
    ci_low: f64,
    ci_high: f64,
    p: f64,
}

pub fn cox(ctx: &mut Ctx) -> CliResult<String> {
    let spec = ctx.cfg.outcomes.covariates.clone();
    let ds = survival_dataset(ctx, &spec)?;
    let group = spec.implant_system.then_some("implant_system");
    let fit = cox_fit(&ds, &ctx.cfg.outcomes.cox, group)?;
    for c in fit
        .coefficients
        .iter()
        .filter(|c| !(c.ci_low > 0.0 && c.ci_high.is_finite()))
    {
        log::warn!(
            "{}: hazard ratio is not estimable (beta {:.2}, se {:.1}); the group likely has no events",
            c.name,
            c.beta,
            c.se
        );
    }
    ctx.ws.write_json(names::COX, &fit)?;
    let rows: Vec<CoefRow> = fit
        .coefficients
        .iter()
        .map(|c| CoefRow {
            name: &c.name,
            estimate: c.beta,
            se: c.se,
            ratio: c.hazard_ratio,
            ci_low: c.ci_low,
            ci_high: c.ci_high,
            p: c.p_value,
        })
        .collect();
    ctx.ws
        .write_with(names::COX_COEFFICIENTS, |w| csv_rows(&rows, w))?;
    Ok(format!(
        "survival cox: {} subjects, {} events, {} coefficients, log-likelihood {:.3}",
        fit.n,
        fit.n_events,
        fit.coefficients.len(),
        fit.log_likelihood
    ))
}

#[derive(Serialize)]
struct CutoffRow {
    cutoff: usize,
    aic: Option<f64>,
}

pub fn nb(ctx: &mut Ctx) -> CliResult<String> {
    let cohort = cohort_artifact(ctx)?;
    let events = read_events(ctx.ws.open_artifact(names::EVENTS)?)?;
    let o = ctx.cfg.outcomes.clone();
    let class = o.count_event_class()?;
    let ds = build_count_dataset(&cohort, &events, class, &o.covariates, o.count_window_days);
    let systems: Vec<String> = ds
        .levels
        .iter()
        .map(|l| l["implant_system"].clone())
        .collect();
    let others = CovariateSpec {
        implant_system: false,
        ..o.covariates.clone()
    };
    let (columns, rows) = covariate_design(&ds.levels, &others);
    let choice = if o.covariates.implant_system {
        choose_other_cutoff(
            &ds.counts,
            &systems,
            o.covariates.implant_reference.as_deref(),
            &columns,
            &rows,
            Some(&ds.exposure),
            &o.other_cutoffs,
            &o.nb,
        )?
    } else {
        let fit =
            devsurv::outcomes::nb_fit(&ds.counts, &columns, &rows, Some(&ds.exposure), &o.nb)?;
        devsurv::outcomes::CutoffChoice {
            cutoff: 0,
            aic: vec![(0, Some(fit.aic))],
            fit,
            system_columns: vec![],
        }
    };
    ctx.ws.write_json(names::NB, &choice)?;
    let coefs: Vec<CoefRow> = choice
        .fit
        .coefficients
        .iter()
        .map(|c| CoefRow {
            name: &c.name,
            estimate: c.coef,
            se: c.se,
            ratio: c.irr,
            ci_low: c.ci_low,
            ci_high: c.ci_high,
            p: c.p_value,
        })
        .collect();
    ctx.ws
        .write_with(names::NB_COEFFICIENTS, |w| csv_rows(&coefs, w))?;
    let cut_rows: Vec<CutoffRow> = choice
        .aic
        .iter()
        .map(|(cutoff, aic)| CutoffRow {
            cutoff: *cutoff,
            aic: *aic,
        })
        .collect();
    ctx.ws
        .write_with(names::NB_CUTOFFS, |w| csv_rows(&cut_rows, w))?;
    Ok(format!(
        "regression nb: {} patients, {class} counts, other-cutoff {}, theta {:.3}, AIC {:.2}",
        choice.fit.n, choice.cutoff, choice.fit.theta, choice.fit.aic
    ))
}

#[derive(Serialize)]
struct TTestReport {
    event_class: String,
    n_revised: usize,
    n_unrevised: usize,
    #[serde(flatten)]
    result: devsurv::outcomes::TTestResult,
}

pub fn ttest(ctx: &mut Ctx) -> CliResult<String> {
    let cohort = cohort_artifact(ctx)?;
    let events = read_events(ctx.ws.open_artifact(names::EVENTS)?)?;
    let class = ctx.cfg.outcomes.count_event_class()?;
    let (revised, other) = rates_by_revision(&cohort, &events, class);
    let result = ttest_welch(&revised, &other)?;
    let report = TTestReport {
        event_class: class.to_string(),
        n_revised: revised.len(),
        n_unrevised: other.len(),
        result,
    };
    ctx.ws.write_json(names::TTEST, &report)?;
    let r = &report.result;
    Ok(format!(
        "ttest: {class} per year, revised {:.3} (n={}) vs unrevised {:.3} (n={}), t {:.3}, p {:.4}",
        r.mean_a, report.n_revised, r.mean_b, report.n_unrevised, r.t, r.p_value
    ))
}

pub fn forest(ctx: &mut Ctx) -> CliResult<String> {
    let fit: CoxFit = ctx.ws.read_json(names::COX)?;
    let spec = ctx.cfg.outcomes.covariates.clone();
    let ds = survival_dataset(ctx, &spec)?;
    if ds.len() != fit.n {
        log::warn!(
            "cox.json covers {} subjects but the current data give {}; rerun `survival cox`",
            fit.n,
            ds.len()
        );
    }
    let rows = forest_rows(&ds, &fit);
    ctx.ws
        .write_with(names::FOREST, |w| write_forest_csv(&rows, w))?;
    Ok(format!("report forest: {} implant systems", rows.len()))
}
