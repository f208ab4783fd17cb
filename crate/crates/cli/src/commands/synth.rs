use std::path::PathBuf;

use devsurv::synth::{gen_corpus, SynthConfig};

use super::Ctx;
use crate::error::CliResult;

pub fn gen(
    ctx: &mut Ctx,
    dir: Option<PathBuf>,
    seed: Option<u64>,
    patients: Option<usize>,
) -> CliResult<String> {
    let cfg = SynthConfig {
        seed: seed.unwrap_or(ctx.cfg.synth.seed),
        n_patients: patients.unwrap_or(ctx.cfg.synth.n_patients),
        ..ctx.cfg.synth.clone()
    };
    let dir = dir.unwrap_or_else(|| ctx.ws.path("synth"));
    let corpus = gen_corpus(&cfg)?;
    corpus.write_to_dir(&dir)?;
    let positives = corpus.gold_relations.iter().filter(|g| g.label).count();
    Ok(format!(
        "synth gen: {} patients, {} notes, {} gold relations ({positives} positive), {} registry rows in {}",
        corpus.patients.len(),
        corpus.notes.len(),
        corpus.gold_relations.len(),
        corpus.registry.len(),
        dir.display()
    ))
}
