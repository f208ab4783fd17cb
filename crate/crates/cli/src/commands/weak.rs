use std::collections::HashMap;

use devsurv::classifier::{
    predictions, read_predictions_csv, select_threshold, train_noise_aware, write_predictions_csv,
    ClassifierModel,
};
use devsurv::eval::{pr_curve, prf1, Metrics};
use devsurv::pipeline::{covered_rows, majority_decision, LabelSource};
use devsurv::weaksup::lfs::default_lfs;
use devsurv::weaksup::{
    apply_lfs, fit_label_model, lf_statistics, posterior_labels, read_labels_csv,
    soft_majority_vote, write_labels_csv, LabelMatrix, ProbabilisticLabel,
};

use super::{gold_for, in_split, names, Ctx};
use crate::cli::{RelationArg, SourceArg, SplitArg};
use crate::error::{CliError, CliResult};

pub fn lf_apply(ctx: &mut Ctx, arg: RelationArg, split: SplitArg) -> CliResult<String> {
    let relation = ctx.relation(arg);
    let all = ctx.candidates(relation)?;
    let splits = ctx.splits()?;
    let cs = in_split(&all, &splits, split);
    let lfs = default_lfs(relation);
    let (matrix, diag) = apply_lfs(&cs, &lfs)?;
    if diag.total_errors() > 0 {
        log::warn!(
            "{} labeling-function failures counted as abstentions",
            diag.total_errors()
        );
    }
    let covered = covered_rows(&matrix).len();
    ctx.ws
        .write_with(&names::label_matrix(relation, split.as_str()), |w| {
            matrix.write_csv(w)
        })?;
    Ok(format!(
        "lf apply: {} {} candidates x {} functions, {covered} covered",
        matrix.n(),
        split.as_str(),
        matrix.m()
    ))
}

pub fn lf_stats(
    ctx: &mut Ctx,
    arg: RelationArg,
    split: SplitArg,
    no_gold: bool,
) -> CliResult<String> {
    let relation = ctx.relation(arg);
    let lfs = default_lfs(relation);
    if lfs.is_empty() {
        return Err(devsurv::Error::InvalidInput(format!(
            "no labeling functions registered for {relation}"
        ))
        .into());
    }
    let all = ctx.candidates(relation)?;
    let splits = ctx.splits()?;
    let cs = in_split(&all, &splits, split);
    if cs.is_empty() {
        return Err(devsurv::Error::InvalidInput(format!(
            "no {relation} candidates in the {} split",
            split.as_str()
        ))
        .into());
    }
    let gold = if no_gold { None } else { ctx.gold(relation)? };
    let gold = gold.map(|g| -> HashMap<String, bool> {
        cs.iter()
            .zip(gold_for(&cs, &g))
            .map(|(c, y)| (c.candidate_id.clone(), y))
            .collect()
    });
    let (matrix, _) = apply_lfs(&cs, &lfs)?;
    let stats = lf_statistics(&matrix, gold.as_ref())?;
    ctx.ws
        .write_with(&names::lf_stats(relation), |w| stats.write_csv(w))?;
    print!("{}", stats.to_table());
    Ok(format!(
        "lf stats: {} functions on {} {} candidates{}",
        stats.per_lf.len(),
        stats.n,
        split.as_str(),
        if stats.has_gold() { ", with gold" } else { "" }
    ))
}

pub fn labelmodel_fit(
    ctx: &mut Ctx,
    arg: RelationArg,
    source: Option<SourceArg>,
) -> CliResult<String> {
    let relation = ctx.relation(arg);
    let matrix = LabelMatrix::read_csv(
        ctx.ws
            .open_artifact(&names::label_matrix(relation, "train"))?,
    )?;
    let source = match source {
        Some(SourceArg::LabelModel) => LabelSource::LabelModel,
        Some(SourceArg::MajorityVote) => LabelSource::MajorityVote,
        None => ctx.cfg.pipeline.label_source,
    };
    let (labels, detail) = match source {
        LabelSource::LabelModel => {
            let lm = fit_label_model(&matrix, &ctx.cfg.pipeline.label_model)?;
            let labels = posterior_labels(&lm, &matrix)?;
            ctx.ws.write_bytes(
                &names::label_model(relation),
                format!("{}\n", lm.to_json()?).as_bytes(),
            )?;
            let detail = format!(
                "label model, {} EM iterations, accuracies [{}]",
                lm.diagnostics.iterations,
                lm.accuracies
                    .iter()
                    .map(|a| format!("{a:.2}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            (labels, detail)
        }
        LabelSource::MajorityVote => (
            soft_majority_vote(&matrix),
            "soft majority vote".to_string(),
        ),
    };
    ctx.ws
        .write_with(&names::labels(relation), |w| write_labels_csv(&labels, w))?;
    let positive = labels.iter().filter(|l| majority_decision(l)).count();
    Ok(format!(
        "labelmodel fit: {} labels from {detail}; {positive} lean positive",
        labels.len()
    ))
}

fn read_model(
    ctx: &mut Ctx,
    relation: devsurv::extraction::RelationType,
) -> CliResult<ClassifierModel> {
    let bin = ctx.ws.open_artifact(&names::model_bin(relation))?;
    let sidecar_path = ctx.ws.artifact(&names::model_json(relation))?;
    let sidecar =
        std::fs::read_to_string(&sidecar_path).map_err(|e| CliError::io(&sidecar_path, e))?;
    Ok(ClassifierModel::read(bin, &sidecar)?)
}

pub fn train(ctx: &mut Ctx, arg: RelationArg) -> CliResult<String> {
    let relation = ctx.relation(arg);
    let all = ctx.candidates(relation)?;
    let splits = ctx.splits()?;
    let train = in_split(&all, &splits, SplitArg::Train);
    let matrix = LabelMatrix::read_csv(
        ctx.ws
            .open_artifact(&names::label_matrix(relation, "train"))?,
    )?;
    let labels = read_labels_csv(ctx.ws.open_artifact(&names::labels(relation))?)?;
    let ids: Vec<&str> = train.iter().map(|c| c.candidate_id.as_str()).collect();
    let matrix_ids: Vec<&str> = matrix.candidate_ids().iter().map(String::as_str).collect();
    if ids != matrix_ids {
        return Err(devsurv::Error::InvalidInput(
            "training candidates and label matrix disagree; rerun `lf apply` and `labelmodel fit`"
                .into(),
        )
        .into());
    }
    let p = &ctx.cfg.pipeline;
    let keep: Vec<usize> = if p.drop_uncovered {
        covered_rows(&matrix)
    } else {
        (0..train.len()).collect()
    };
    let kept: Vec<_> = keep.iter().map(|&i| train[i].clone()).collect();
    let by_id: HashMap<&str, &ProbabilisticLabel> = labels
        .iter()
        .map(|l| (l.candidate_id.as_str(), l))
        .collect();
    let kept_labels: Vec<ProbabilisticLabel> = kept
        .iter()
        .filter_map(|c| by_id.get(c.candidate_id.as_str()).map(|l| (*l).clone()))
        .collect();
    let (train_cfg, features, tune) = (p.train.clone(), p.features.clone(), p.tune_threshold);
    let mut model = train_noise_aware(&kept, &kept_labels, &train_cfg, &features)?;

    let mut tuned = "default threshold".to_string();
    if tune {
        match ctx.gold(relation)? {
            Some(gold) => {
                let dev = in_split(&all, &splits, SplitArg::Dev);
                if !dev.is_empty() {
                    let scores = model.predict_all(&dev, &features)?;
                    match select_threshold(&scores, &gold_for(&dev, &gold)) {
                        Ok((t, f1)) => {
                            model.threshold = t;
                            tuned = format!("threshold {t:.2} tuned on dev (F1 {:.1})", 100.0 * f1);
                        }
                        Err(devsurv::Error::SingleClass) => {
                            log::warn!(
                                "dev gold has one class; keeping threshold {}",
                                model.threshold
                            )
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            None => log::warn!(
                "paths.gold_relations is not set; keeping threshold {}",
                model.threshold
            ),
        }
    }
    let mut bin = Vec::new();
    model
        .write_binary(&mut bin)
        .map_err(|e| devsurv::Error::Format(e.to_string()))?;
    ctx.ws.write_bytes(&names::model_bin(relation), &bin)?;
    let mut sidecar = model.sidecar_json()?;
    sidecar.push('\n');
    ctx.ws
        .write_bytes(&names::model_json(relation), sidecar.as_bytes())?;
    Ok(format!(
        "train: {} of {} training candidates used, {tuned}",
        kept.len(),
        train.len()
    ))
}

pub fn predict(ctx: &mut Ctx, arg: RelationArg) -> CliResult<String> {
    let relation = ctx.relation(arg);
    let model = read_model(ctx, relation)?;
    let cs = ctx.candidates(relation)?;
    let scores = model.predict_all(&cs, &model.metadata.features)?;
    let preds = predictions(&cs, &scores, model.threshold);
    ctx.ws.write_with(&names::predictions(relation), |w| {
        write_predictions_csv(&preds, w)
    })?;
    let pos = preds.iter().filter(|p| p.predicted_label == 1).count();
    Ok(format!(
        "predict: {} candidates scored, {pos} positive",
        preds.len()
    ))
}

pub fn eval(ctx: &mut Ctx, arg: RelationArg) -> CliResult<String> {
    let relation = ctx.relation(arg);
    let all = ctx.candidates(relation)?;
    let splits = ctx.splits()?;
    let gold = ctx.require_gold(relation)?;
    let preds = read_predictions_csv(ctx.ws.open_artifact(&names::predictions(relation))?)?;
    let test = in_split(&all, &splits, SplitArg::Test);
    let test_gold: Vec<(String, bool)> = test
        .iter()
        .zip(gold_for(&test, &gold))
        .map(|(c, y)| (c.candidate_id.clone(), y))
        .collect();
    let by_id: HashMap<&str, _> = preds.iter().map(|p| (p.candidate_id.as_str(), p)).collect();
    let mut decisions = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    for c in &test {
        let p = by_id.get(c.candidate_id.as_str()).ok_or_else(|| {
            devsurv::Error::InvalidInput(format!(
                "no prediction for {}; rerun `predict`",
                c.candidate_id
            ))
        })?;
        decisions.push((c.candidate_id.clone(), f64::from(p.predicted_label)));
        scores.push(p.score);
    }
    let classifier = prf1(&decisions, &test_gold, 0.5)?;
    let (matrix, _) = apply_lfs(&test, &default_lfs(relation))?;
    let smv: Vec<(String, f64)> = soft_majority_vote(&matrix)
        .iter()
        .map(|l| {
            (
                l.candidate_id.clone(),
                if majority_decision(l) { 1.0 } else { 0.0 },
            )
        })
        .collect();
    let majority = prf1(&smv, &test_gold, 0.5)?;
    let rows = vec![
        ("classifier".to_string(), classifier),
        ("majority_vote".to_string(), majority),
    ];
    ctx.ws
        .write_with(&names::metrics(relation), |w| Metrics::write_csv(&rows, w))?;
    let gold_flags: Vec<bool> = test_gold.iter().map(|g| g.1).collect();
    let ap = match pr_curve(&scores, &gold_flags) {
        Ok(curve) => {
            ctx.ws
                .write_with(&names::pr_curve(relation), |w| curve.write_csv(w))?;
            format!(", AP {:.3}", curve.average_precision)
        }
        Err(e) => {
            log::warn!("no PR curve: {e}");
            String::new()
        }
    };
    Ok(format!(
        "eval: {relation} test F1 {:.1} (P {:.1}, R {:.1}) vs majority vote F1 {:.1}{ap}",
        classifier.f1, classifier.precision, classifier.recall, majority.f1
    ))
}
