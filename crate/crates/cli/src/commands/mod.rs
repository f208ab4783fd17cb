mod outcomes;
mod synth;
mod text;
mod weak;

use std::collections::{HashMap, HashSet};
use std::fs::File;

use devsurv::eval::Splits;
use devsurv::extraction::{RelationCandidate, RelationType};
use devsurv::synth::read_gold_relations;

use crate::cli::{
    Command, EventsCommand, LabelModelCommand, LfCommand, RegressionCommand, RelationArg,
    ReportCommand, SplitArg, SurvivalCommand, SynthCommand,
};
use crate::config::ProjectConfig;
use crate::error::{CliError, CliResult};
use crate::workspace::Workspace;

pub struct Ctx {
    pub cfg: ProjectConfig,
    pub ws: Workspace,
}

impl Ctx {
    pub fn relation(&self, arg: RelationArg) -> RelationType {
        arg.relation.unwrap_or(self.cfg.pipeline.relation)
    }

    pub fn candidates(&mut self, relation: RelationType) -> CliResult<Vec<RelationCandidate>> {
        self.ws.read_jsonl(&names::candidates(relation))
    }

    pub fn splits(&mut self) -> CliResult<Splits> {
        self.ws.read_json(names::SPLITS)
    }

    /// Candidate-level gold for one relation, when configured.
    pub fn gold(&mut self, relation: RelationType) -> CliResult<Option<HashMap<String, bool>>> {
        let Some(path) = self.cfg.paths.gold_relations.clone() else {
            return Ok(None);
        };
        let path = self.ws.external(&path)?;
        let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Some(
            read_gold_relations(file)?
                .into_iter()
                .filter(|g| g.relation == relation)
                .map(|g| (g.candidate_id, g.label))
                .collect(),
        ))
    }

    pub fn require_gold(&mut self, relation: RelationType) -> CliResult<HashMap<String, bool>> {
        self.gold(relation)?.ok_or_else(|| {
            CliError::config("paths.gold_relations is not set; this command needs gold labels")
        })
    }
}

/// Artifact file names.
pub mod names {
    use devsurv::extraction::RelationType;

    pub const NOTES: &str = "notes.jsonl";
    pub const INGEST_REPORT: &str = "ingest_report.json";
    pub const SENTENCES: &str = "sentences.jsonl";
    pub const SPLITS: &str = "splits.json";
    pub const RECONCILIATION: &str = "reconciliation.csv";
    pub const RECONCILIATION_SUMMARY: &str = "reconciliation_summary.json";
    pub const COHORT: &str = "cohort.csv";
    pub const CODED_EVENTS: &str = "coded_events.csv";
    pub const TEXT_EVENTS: &str = "text_events.csv";
    pub const EVENTS: &str = "events.csv";
    pub const KM: &str = "km.csv";
    pub const LOGRANK: &str = "logrank.json";
    pub const COX: &str = "cox.json";
    pub const COX_COEFFICIENTS: &str = "cox_coefficients.csv";
    pub const NB: &str = "nb.json";
    pub const NB_COEFFICIENTS: &str = "nb_coefficients.csv";
    pub const NB_CUTOFFS: &str = "nb_cutoffs.csv";
    pub const TTEST: &str = "ttest.json";
    pub const FOREST: &str = "forest.csv";

    pub fn candidates(r: RelationType) -> String {
        format!("candidates.{r}.jsonl")
    }
    pub fn label_matrix(r: RelationType, split: &str) -> String {
        format!("label_matrix.{r}.{split}.csv")
    }
    pub fn lf_stats(r: RelationType) -> String {
        format!("lf_stats.{r}.csv")
    }
    pub fn label_model(r: RelationType) -> String {
        format!("label_model.{r}.json")
    }
    pub fn labels(r: RelationType) -> String {
        format!("labels.{r}.csv")
    }
    pub fn model_bin(r: RelationType) -> String {
        format!("model.{r}.bin")
    }
    pub fn model_json(r: RelationType) -> String {
        format!("model.{r}.json")
    }
    pub fn predictions(r: RelationType) -> String {
        format!("predictions.{r}.csv")
    }
    pub fn metrics(r: RelationType) -> String {
        format!("metrics.{r}.csv")
    }
    pub fn pr_curve(r: RelationType) -> String {
        format!("pr_curve.{r}.csv")
    }
}

/// Candidates whose note falls in `split`.
pub fn in_split(
    cs: &[RelationCandidate],
    splits: &Splits,
    split: SplitArg,
) -> Vec<RelationCandidate> {
    let ids: HashSet<&str> = match split {
        SplitArg::Train => splits.train.iter().map(String::as_str).collect(),
        SplitArg::Dev => splits.dev.iter().map(String::as_str).collect(),
        SplitArg::Test => splits.test.iter().map(String::as_str).collect(),
        SplitArg::All => return cs.to_vec(),
    };
    cs.iter()
        .filter(|c| ids.contains(c.note_id()))
        .cloned()
        .collect()
}

/// Gold for each candidate; ids absent from gold are negative.
pub fn gold_for(cs: &[RelationCandidate], gold: &HashMap<String, bool>) -> Vec<bool> {
    cs.iter()
        .map(|c| gold.get(&c.candidate_id).copied().unwrap_or(false))
        .collect()
}

/// Runs one command against an opened workspace and returns its summary line.
pub fn run(command: Command, ctx: &mut Ctx) -> CliResult<String> {
    match command {
        Command::Ingest { on_malformed } => text::ingest(ctx, on_malformed),
        Command::Tag => text::tag(ctx),
        Command::Candidates(r) => text::candidates(ctx, r),
        Command::Lf(LfCommand::Apply { relation, split }) => weak::lf_apply(ctx, relation, split),
        Command::Lf(LfCommand::Stats {
            relation,
            split,
            no_gold,
        }) => weak::lf_stats(ctx, relation, split, no_gold),
        Command::Labelmodel(LabelModelCommand::Fit { relation, source }) => {
            weak::labelmodel_fit(ctx, relation, source)
        }
        Command::Train(r) => weak::train(ctx, r),
        Command::Predict(r) => weak::predict(ctx, r),
        Command::Eval(r) => weak::eval(ctx, r),
        Command::Reconcile => outcomes::reconcile(ctx),
        Command::Cohort => outcomes::cohort(ctx),
        Command::Events(EventsCommand::Merge) => outcomes::events_merge(ctx),
        Command::Survival(SurvivalCommand::Km { group_by }) => outcomes::km(ctx, group_by),
        Command::Survival(SurvivalCommand::Logrank { group_by }) => {
            outcomes::logrank(ctx, &group_by)
        }
        Command::Survival(SurvivalCommand::Cox) => outcomes::cox(ctx),
        Command::Regression(RegressionCommand::Nb) => outcomes::nb(ctx),
        Command::Ttest => outcomes::ttest(ctx),
        Command::Synth(SynthCommand::Gen {
            dir,
            seed,
            patients,
        }) => synth::gen(ctx, dir, seed, patients),
        Command::Report(ReportCommand::Forest) => outcomes::forest(ctx),
    }
}
