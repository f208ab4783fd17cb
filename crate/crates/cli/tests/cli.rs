use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use devsurv::corpus::{ingest_notes, OnMalformed, PreprocessConfig};
use devsurv::extraction::{Extractor, RelationType};
use devsurv::pipeline::{annotate_notes, run_pipeline, PipelineConfig};
use devsurv::synth::read_gold_relations;
use tempfile::TempDir;

const CONFIG: &str = r#"
output_dir = "out"

[paths]
notes = "data/notes.jsonl"
gold_relations = "data/gold_relations.csv"
registry = "data/registry.csv"
patients = "data/patients.csv"
codes = "data/codes.csv"
"#;

const TEXT_CHAIN: [&[&str]; 9] = [
    &["ingest"],
    &["tag"],
    &["candidates"],
    &["lf", "apply", "--split", "train"],
    &["lf", "stats"],
    &["labelmodel", "fit"],
    &["train"],
    &["predict"],
    &["eval"],
];

struct Project {
    dir: TempDir,
}

impl Project {
    fn new(seed: u64, patients: usize, extra_config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("devsurv.toml"),
            format!("{CONFIG}{extra_config}"),
        )
        .unwrap();
        let p = Project { dir };
        p.ok(&[
            "synth",
            "gen",
            "--dir",
            "data",
            "--seed",
            &seed.to_string(),
            "--patients",
            &patients.to_string(),
        ]);
        p
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root().join("out").join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_devsurv"));
        for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("DEVSURV_")) {
            cmd.env_remove(k);
        }
        cmd.current_dir(self.root()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "`devsurv {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn text_chain(&self) {
        for args in TEXT_CHAIN {
            self.ok(args);
        }
    }

    fn artifacts(&self) -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(self.root().join("out"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect()
    }
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| {
        panic!(
            "stderr is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn classifier_row(metrics_csv: &Path) -> BTreeMap<String, String> {
    let mut rdr = csv::Reader::from_path(metrics_csv).unwrap();
    let header = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| r.unwrap())
        .find(|r| &r[0] == "classifier")
        .map(|r| {
            header
                .iter()
                .map(String::from)
                .zip(r.iter().map(String::from))
                .collect()
        })
        .unwrap()
}

#[test]
fn text_chain_reproduces_the_library_pipeline() {
    let p = Project::new(42, 300, "");
    p.text_chain();
    let cli = classifier_row(&p.out("metrics.pain-anatomy.csv"));
    let f1: f64 = cli["f1"].parse().unwrap();
    assert!(f1 >= 90.0, "F1 {f1}");

    let data = p.root().join("data");
    let notes = ingest_notes(data.join("notes.jsonl"), OnMalformed::Abort).unwrap();
    let gold: Vec<(String, bool)> =
        read_gold_relations(fs::File::open(data.join("gold_relations.csv")).unwrap())
            .unwrap()
            .into_iter()
            .filter(|g| g.relation == RelationType::PainAnatomy)
            .map(|g| (g.candidate_id, g.label))
            .collect();
    let sentences = annotate_notes(
        notes.notes,
        &PreprocessConfig::default(),
        &Extractor::bundled(),
    );
    let lib = run_pipeline(&sentences, &gold, &PipelineConfig::default(), None)
        .unwrap()
        .classifier;
    assert_eq!(cli["tp"], lib.tp.to_string());
    assert_eq!(cli["fp"], lib.fp.to_string());
    assert_eq!(cli["fn"], lib.fn_.to_string());
    assert_eq!(cli["f1"], format!("{:.1}", lib.f1));
}

#[test]
fn reruns_are_byte_identical() {
    let a = Project::new(5, 80, "");
    let b = Project::new(5, 80, "");
    a.text_chain();
    b.text_chain();
    let (x, y) = (a.artifacts(), b.artifacts());
    assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>());
    for (name, bytes) in &x {
        assert!(bytes == &y[name], "{name} differs between runs");
    }
    assert!(x.contains_key("manifest.json"));
    assert!(!x.contains_key(".devsurv.lock"));
}

#[test]
fn manifest_records_producer_and_inputs() {
    let p = Project::new(3, 40, "");
    p.ok(&["ingest"]);
    p.ok(&["tag"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(p.out("manifest.json")).unwrap()).unwrap();
    let sentences = &manifest["sentences.jsonl"];
    assert_eq!(sentences["command"], "tag");
    assert!(sentences["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("notes.jsonl")));
    assert_eq!(sentences["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn changed_upstream_is_reported_as_stale() {
    let p = Project::new(3, 40, "");
    p.ok(&["ingest"]);
    p.ok(&["tag"]);
    let quiet = p.run(&["candidates"]);
    assert!(!String::from_utf8_lossy(&quiet.stderr).contains("stale"));

    let notes = p.out("notes.jsonl");
    let text = fs::read_to_string(&notes).unwrap();
    let trimmed: Vec<&str> = text.lines().skip(1).collect();
    fs::write(&notes, trimmed.join("\n") + "\n").unwrap();
    let out = p.run(&["candidates"]);
    assert!(out.status.success());
    let warned = String::from_utf8_lossy(&out.stderr);
    assert!(warned.contains("sentences.jsonl is stale"), "{warned}");
}

#[test]
fn missing_notes_path_is_named_in_the_error() {
    let p = Project::new(1, 10, "");
    let out = Command::new(env!("CARGO_BIN_EXE_devsurv"))
        .current_dir(p.root())
        .env("DEVSURV_NOTES", "nowhere/notes.jsonl")
        .arg("ingest")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let err = error_json(&out);
    assert_eq!(err["code"], "missing_input");
    assert!(err["context"]["path"]
        .as_str()
        .unwrap()
        .ends_with("nowhere/notes.jsonl"));
}

#[test]
fn downstream_command_without_upstream_names_the_producer() {
    let p = Project::new(1, 10, "");
    let out = p.run(&["tag"]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_json(&out);
    assert!(err["context"]["hint"]
        .as_str()
        .unwrap()
        .contains("devsurv ingest"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let p = Project::new(1, 10, "");
    let out = p.run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["code"], "usage");
    assert!(p.run(&["--help"]).status.success());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let p = Project::new(1, 10, "");
    let cfg = p.root().join("devsurv.toml");
    fs::write(&cfg, format!("{CONFIG}\n[pipeline]\nsplit_sed = 3\n")).unwrap();
    let out = p.run(&["ingest"]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_json(&out);
    assert_eq!(err["code"], "invalid_config");
    assert!(err["message"].as_str().unwrap().contains("split_sed"));
}

#[test]
fn held_lock_blocks_a_second_command() {
    let p = Project::new(1, 10, "");
    p.ok(&["ingest"]);
    let lock = p.out(".devsurv.lock");
    fs::write(&lock, "12345 tag\n").unwrap();
    let out = p.run(&["tag"]);
    assert_eq!(out.status.code(), Some(7));
    assert_eq!(error_json(&out)["code"], "locked");
    assert_eq!(fs::read_to_string(&lock).unwrap(), "12345 tag\n");
    fs::remove_file(&lock).unwrap();
    p.ok(&["tag"]);
    assert!(!lock.exists());
}

#[test]
fn lf_stats_without_gold_omits_accuracy() {
    let p = Project::new(2, 60, "");
    for args in &TEXT_CHAIN[..3] {
        p.ok(args);
    }
    let table = p.ok(&["lf", "stats", "--no-gold"]);
    let header = table.lines().next().unwrap();
    assert!(
        header.contains("coverage") && !header.contains("accuracy"),
        "{header}"
    );
    for starter in [
        "LF1_contiguous_entities",
        "LF2_historical",
        "LF3_reject_section",
    ] {
        assert!(table.contains(starter), "{starter} missing from\n{table}");
    }
    let covered = table
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().nth(1)?.parse::<f64>().ok())
        .any(|c| c > 0.0);
    assert!(covered, "{table}");

    let with_gold = p.ok(&["lf", "stats"]);
    assert!(with_gold.lines().next().unwrap().contains("accuracy"));
}

#[test]
fn empty_split_is_rejected() {
    let p = Project::new(
        2,
        30,
        "\n[pipeline]\ntrain_fraction = 0.8\ndev_fraction = 0.0\n",
    );
    for args in &TEXT_CHAIN[..3] {
        p.ok(args);
    }
    let out = p.run(&["lf", "stats", "--split", "dev"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(error_json(&out)["message"]
        .as_str()
        .unwrap()
        .contains("dev split"));
}

#[test]
fn outcome_commands_chain_from_extracted_events() {
    let p = Project::new(42, 300, "");
    p.text_chain();
    for args in &TEXT_CHAIN[2..] {
        let mut args = args.to_vec();
        args.extend(["--relation", "implant-complication"]);
        p.ok(&args);
    }
    for args in [
        &["cohort"][..],
        &["events", "merge"],
        &["survival", "km"],
        &["survival", "logrank"],
        &["survival", "cox"],
        &["report", "forest"],
        &["regression", "nb"],
        &["ttest"],
        &["reconcile"],
    ] {
        p.ok(args);
    }
    let forest = fs::read_to_string(p.out("forest.csv")).unwrap();
    assert_eq!(
        forest.lines().next().unwrap(),
        "system,n_patients,n_events,person_years,HR,CI_low,CI_high,p"
    );
    assert!(forest.lines().count() > 2);
    let cox: serde_json::Value =
        serde_json::from_slice(&fs::read(p.out("cox.json")).unwrap()).unwrap();
    assert!(cox["n_events"].as_u64().unwrap() > 0);
    let nb: serde_json::Value =
        serde_json::from_slice(&fs::read(p.out("nb.json")).unwrap()).unwrap();
    assert!(nb.is_object());
    let ttest: serde_json::Value =
        serde_json::from_slice(&fs::read(p.out("ttest.json")).unwrap()).unwrap();
    let pv = ttest["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pv));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(p.out("reconciliation_summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
}

#[test]
fn regression_before_cohort_fails_cleanly() {
    let p = Project::new(1, 10, "");
    let out = p.run(&["regression", "nb"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!p.out(".devsurv.lock").exists());
}

#[test]
fn diverging_cox_coefficient_is_a_model_failure() {
    // In this corpus one implant system has no extracted pain events.
    let p = Project::new(11, 150, "");
    p.text_chain();
    p.ok(&["cohort"]);
    p.ok(&["events", "merge"]);
    let out = p.run(&["survival", "cox"]);
    assert_eq!(out.status.code(), Some(6));
    let err = error_json(&out);
    assert_eq!(err["code"], "model_failure");
    assert!(err["context"]["column"]
        .as_str()
        .unwrap()
        .starts_with("implant_system="));
    assert!(!p.out("cox.json").exists());
}
