use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use devsurv::extraction::RelationType;

use crate::error::EXIT_CODE_HELP;

fn parse_relation(s: &str) -> Result<RelationType, String> {
    s.parse().map_err(|e: devsurv::Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "devsurv",
    version,
    about = "Extract implant events from clinical notes with weak supervision and run device-surveillance statistics",
    after_help = EXIT_CODE_HELP
)]
pub struct Cli {
    /// Project configuration (TOML). Defaults to ./devsurv.toml when present.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only errors on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct RelationArg {
    /// pain-anatomy or implant-complication; defaults to pipeline.relation.
    #[arg(long, value_parser = parse_relation)]
    pub relation: Option<RelationType>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

impl SplitArg {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MalformedArg {
    Skip,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    LabelModel,
    MajorityVote,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the notes file and copy it into the output directory.
    /// Writes notes.jsonl and ingest_report.json.
    Ingest {
        /// What to do with records that fail to parse.
        #[arg(long, value_enum, default_value = "skip")]
        on_malformed: MalformedArg,
    },
    /// Sectionize, split, tag entities and apply context rules.
    /// Reads notes.jsonl; writes sentences.jsonl and splits.json.
    Tag,
    /// Generate relation candidates. Reads sentences.jsonl; writes candidates.<relation>.jsonl.
    Candidates(RelationArg),
    /// Labeling functions.
    #[command(subcommand)]
    Lf(LfCommand),
    /// Label model.
    #[command(subcommand)]
    Labelmodel(LabelModelCommand),
    /// Train the noise-aware classifier on the training split.
    /// Reads candidates, label_matrix.<relation>.train.csv and labels.<relation>.csv; writes model.<relation>.bin/.json.
    Train(RelationArg),
    /// Score every candidate. Writes predictions.<relation>.csv.
    Predict(RelationArg),
    /// Score the test split against gold; writes metrics.<relation>.csv and pr_curve.<relation>.csv.
    Eval(RelationArg),
    /// Compare implants found in notes with the registry. Writes reconciliation.csv and reconciliation_summary.json.
    Reconcile,
    /// Select the arthroplasty cohort from coded procedures. Writes cohort.csv and coded_events.csv.
    Cohort,
    /// Event assembly.
    #[command(subcommand)]
    Events(EventsCommand),
    /// Survival analysis of time to first outcome event.
    #[command(subcommand)]
    Survival(SurvivalCommand),
    /// Count regression.
    #[command(subcommand)]
    Regression(RegressionCommand),
    /// Welch t-test of yearly event rates, revised versus unrevised patients. Writes ttest.json.
    Ttest,
    /// Synthetic data.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Reports built from fitted models.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Subcommand)]
pub enum LfCommand {
    /// Apply the labeling functions to one split. Writes label_matrix.<relation>.<split>.csv.
    Apply {
        #[command(flatten)]
        relation: RelationArg,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Per-function coverage, overlap, conflict and (with gold) accuracy on a split.
    /// Prints a table and writes lf_stats.<relation>.csv.
    Stats {
        #[command(flatten)]
        relation: RelationArg,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitArg,
        /// Ignore paths.gold_relations even when set.
        #[arg(long)]
        no_gold: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum LabelModelCommand {
    /// Fit the label model on the training matrix and write training labels.
    /// Writes label_model.<relation>.json and labels.<relation>.csv.
    Fit {
        #[command(flatten)]
        relation: RelationArg,
        /// Label source; defaults to pipeline.label_source.
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EventsCommand {
    /// Turn positive predictions into text events and merge them with coded revisions.
    /// Writes text_events.csv and events.csv.
    Merge,
}

#[derive(Debug, Subcommand)]
pub enum SurvivalCommand {
    /// Kaplan-Meier curves. Writes km.csv.
    Km {
        /// Covariate level to group by (implant_system, sex, age_band, ...).
        #[arg(long)]
        group_by: Option<String>,
    },
    /// Log-rank test across groups. Writes logrank.json.
    Logrank {
        #[arg(long, default_value = "implant_system")]
        group_by: String,
    },
    /// Cox proportional hazards with the configured covariates. Writes cox.json and cox_coefficients.csv.
    Cox,
}

#[derive(Debug, Subcommand)]
pub enum RegressionCommand {
    /// Negative binomial regression of yearly event counts with rare systems grouped by AIC.
    /// Writes nb.json, nb_coefficients.csv and nb_cutoffs.csv.
    Nb,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate a synthetic corpus with gold labels, registry, patients and codes.
    Gen {
        /// Target directory; defaults to <output_dir>/synth.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Per-system forest table from the Cox fit. Writes forest.csv.
    Forest,
}

impl Command {
    /// Name recorded in the manifest.
    pub fn name(&self) -> String {
        match self {
            Command::Ingest { .. } => "ingest".into(),
            Command::Tag => "tag".into(),
            Command::Candidates(_) => "candidates".into(),
            Command::Lf(LfCommand::Apply { .. }) => "lf apply".into(),
            Command::Lf(LfCommand::Stats { .. }) => "lf stats".into(),
            Command::Labelmodel(_) => "labelmodel fit".into(),
            Command::Train(_) => "train".into(),
            Command::Predict(_) => "predict".into(),
            Command::Eval(_) => "eval".into(),
            Command::Reconcile => "reconcile".into(),
            Command::Cohort => "cohort".into(),
            Command::Events(_) => "events merge".into(),
            Command::Survival(SurvivalCommand::Km { .. }) => "survival km".into(),
            Command::Survival(SurvivalCommand::Logrank { .. }) => "survival logrank".into(),
            Command::Survival(SurvivalCommand::Cox) => "survival cox".into(),
            Command::Regression(_) => "regression nb".into(),
            Command::Ttest => "ttest".into(),
            Command::Synth(_) => "synth gen".into(),
            Command::Report(_) => "report forest".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_nested_subcommands() {
        let c = Cli::try_parse_from([
            "devsurv",
            "lf",
            "apply",
            "--relation",
            "implant-complication",
            "--split",
            "dev",
        ])
        .unwrap();
        match c.command {
            Command::Lf(LfCommand::Apply { relation, split }) => {
                assert_eq!(relation.relation, Some(RelationType::ImplantComplication));
                assert_eq!(split, SplitArg::Dev);
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["devsurv", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["devsurv", "candidates", "--relation", "nope"]).is_err());
    }
}
