use std::sync::Arc;

use devsurv::corpus::{ingest_notes, OnMalformed, RawNote};
use devsurv::extraction::TaggedSentence;
use devsurv::pipeline::{annotate_notes, candidates_for, split_by_fraction};
use serde::Serialize;

use super::{names, Ctx};
use crate::cli::{MalformedArg, RelationArg};
use crate::error::CliResult;

#[derive(Serialize)]
struct IngestReport {
    notes: usize,
    skipped: Vec<String>,
}

pub fn ingest(ctx: &mut Ctx, on_malformed: MalformedArg) -> CliResult<String> {
    let path = ctx.cfg.input(&ctx.cfg.paths.notes, "paths.notes")?;
    ctx.ws.external(&path)?;
    let mode = match on_malformed {
        MalformedArg::Skip => OnMalformed::Skip,
        MalformedArg::Abort => OnMalformed::Abort,
    };
    let outcome = ingest_notes(&path, mode)?;
    for e in &outcome.skipped {
        log::warn!("skipped record: {e}");
    }
    ctx.ws.write_jsonl(names::NOTES, &outcome.notes)?;
    let report = IngestReport {
        notes: outcome.notes.len(),
        skipped: outcome.skipped.iter().map(ToString::to_string).collect(),
    };
    ctx.ws.write_json(names::INGEST_REPORT, &report)?;
    Ok(format!(
        "ingest: {} notes, {} skipped",
        report.notes,
        report.skipped.len()
    ))
}

pub fn tag(ctx: &mut Ctx) -> CliResult<String> {
    let notes: Vec<RawNote> = ctx.ws.read_jsonl(names::NOTES)?;
    let n_notes = notes.len();
    let preprocess = ctx.cfg.preprocess_config()?;
    let extractor = ctx.cfg.extractor()?;
    let sentences = annotate_notes(notes, &preprocess, &extractor);
    let mut note_ids: Vec<String> = sentences.iter().map(|s| s.note_id.clone()).collect();
    note_ids.sort();
    note_ids.dedup();
    let p = &ctx.cfg.pipeline;
    let splits = split_by_fraction(&note_ids, p.split_seed, p.train_fraction, p.dev_fraction)?;
    let mentions: usize = sentences.iter().map(|s| s.mentions.len()).sum();
    let plain: Vec<&TaggedSentence> = sentences.iter().map(|s| s.as_ref()).collect();
    ctx.ws.write_jsonl(names::SENTENCES, &plain)?;
    ctx.ws.write_json(names::SPLITS, &splits)?;
    Ok(format!(
        "tag: {n_notes} notes, {} sentences, {mentions} mentions; split {}/{}/{} notes",
        sentences.len(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    ))
}

pub fn candidates(ctx: &mut Ctx, arg: RelationArg) -> CliResult<String> {
    let relation = ctx.relation(arg);
    let sentences: Vec<TaggedSentence> = ctx.ws.read_jsonl(names::SENTENCES)?;
    let sentences: Vec<Arc<TaggedSentence>> = sentences.into_iter().map(Arc::new).collect();
    let cs = candidates_for(&sentences, relation);
    ctx.ws.write_jsonl(&names::candidates(relation), &cs)?;
    Ok(format!("candidates: {} {relation} candidates", cs.len()))
}
