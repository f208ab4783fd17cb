//! Project configuration: one TOML file, unknown keys rejected, paths
//! relative to the file. Environment variables may override paths only.

use std::path::{Path, PathBuf};

use devsurv::corpus::{HeaderLexicon, PreprocessConfig};
use devsurv::extraction::AnatomyPositionRules;
use devsurv::extraction::{
    ContextConfig, Dictionary, ExpansionOptions, Extractor, RelationType, Tagger, TriggerLexicon,
};
use devsurv::outcomes::{CodeConfig, CovariateSpec, CoxConfig, EventClass, NbConfig, OutcomeClass};
use devsurv::pipeline::PipelineConfig;
use devsurv::reconcile::ImplantCatalog;
use devsurv::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const DEFAULT_CONFIG_FILE: &str = "devsurv.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub notes: Option<PathBuf>,
    /// Tab-separated term dictionaries; the bundled ones when empty.
    pub dictionaries: Vec<PathBuf>,
    pub trigger_lexicon: Option<PathBuf>,
    pub header_lexicon: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    pub codes: Option<PathBuf>,
    pub implant_catalog: Option<PathBuf>,
    pub manufacturer_aliases: Option<PathBuf>,
    /// Candidate-level gold labels, used for threshold tuning, `lf stats`
    /// and `eval`.
    pub gold_relations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeSettings {
    /// `any` for any complication, or one event class.
    pub outcome: String,
    /// Event class counted by `regression nb` and `ttest`.
    pub count_class: String,
    pub count_window_days: i64,
    pub merge_window_days: i64,
    pub reconcile_tolerance_days: i64,
    /// Minimum patients per implant system before it joins "Other"; the
    /// count regression picks the cutoff with the lowest AIC.
    pub other_cutoffs: Vec<usize>,
    /// Relations whose positive predictions become text events.
    pub event_relations: Vec<RelationType>,
    pub codes: CodeConfig,
    pub covariates: CovariateSpec,
    pub cox: CoxConfig,
    pub nb: NbConfig,
}

impl Default for OutcomeSettings {
    fn default() -> Self {
        OutcomeSettings {
            outcome: "any".into(),
            count_class: "pain".into(),
            count_window_days: 365,
            merge_window_days: 90,
            reconcile_tolerance_days: 30,
            other_cutoffs: vec![0, 10, 20, 50, 100],
            event_relations: RelationType::ALL.to_vec(),
            codes: CodeConfig::default(),
            covariates: CovariateSpec::default(),
            cox: CoxConfig::default(),
            nb: NbConfig::default(),
        }
    }
}

impl OutcomeSettings {
    pub fn outcome_class(&self) -> CliResult<OutcomeClass> {
        self.outcome
            .parse()
            .map_err(|e: devsurv::Error| CliError::config(format!("outcomes.outcome: {e}")))
    }

    pub fn count_event_class(&self) -> CliResult<EventClass> {
        self.count_class
            .parse()
            .map_err(|e: devsurv::Error| CliError::config(format!("outcomes.count_class: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub output_dir: PathBuf,
    pub paths: Paths,
    pub preprocess: PreprocessConfig,
    pub dictionary_expansion: ExpansionOptions,
    pub context: ContextConfig,
    pub pipeline: PipelineConfig,
    pub outcomes: OutcomeSettings,
    pub synth: SynthConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            output_dir: PathBuf::from("out"),
            paths: Paths::default(),
            preprocess: PreprocessConfig::default(),
            dictionary_expansion: ExpansionOptions::default(),
            context: ContextConfig::default(),
            pipeline: PipelineConfig::default(),
            outcomes: OutcomeSettings::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl ProjectConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    /// Reads `path`, or defaults when no path is given and the default file
    /// is absent. Relative paths resolve against the file's directory.
    pub fn load(path: Option<&Path>, env: &dyn Fn(&str) -> Option<String>) -> CliResult<Self> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => CliError::missing(p, "configuration file"),
                    _ => CliError::io(p, e),
                })?;
                let cfg = Self::parse(&text).map_err(|e| match e {
                    CliError::Config { message, .. } => CliError::Config {
                        message,
                        path: Some(p.to_path_buf()),
                    },
                    other => other,
                })?;
                (cfg, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => {
                let default = Path::new(DEFAULT_CONFIG_FILE);
                if default.exists() {
                    return Self::load(Some(default), env);
                }
                (ProjectConfig::default(), PathBuf::new())
            }
        };
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        cfg.resolve_paths(&base);
        cfg.apply_env(env);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        let p = &mut self.paths;
        for d in &mut p.dictionaries {
            resolve(base, d);
        }
        for o in [
            &mut p.notes,
            &mut p.trigger_lexicon,
            &mut p.header_lexicon,
            &mut p.registry,
            &mut p.patients,
            &mut p.codes,
            &mut p.implant_catalog,
            &mut p.manufacturer_aliases,
            &mut p.gold_relations,
        ] {
            resolve_opt(base, o);
        }
    }

    fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) {
        let get = |k: &str| env(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        if let Some(v) = get("DEVSURV_OUTPUT_DIR") {
            self.output_dir = v;
        }
        if let Some(v) = env("DEVSURV_DICTIONARIES").filter(|v| !v.is_empty()) {
            self.paths.dictionaries = std::env::split_paths(&v).collect();
        }
        let p = &mut self.paths;
        let slots: [(&str, &mut Option<PathBuf>); 9] = [
            ("DEVSURV_NOTES", &mut p.notes),
            ("DEVSURV_TRIGGER_LEXICON", &mut p.trigger_lexicon),
            ("DEVSURV_HEADER_LEXICON", &mut p.header_lexicon),
            ("DEVSURV_REGISTRY", &mut p.registry),
            ("DEVSURV_PATIENTS", &mut p.patients),
            ("DEVSURV_CODES", &mut p.codes),
            ("DEVSURV_IMPLANT_CATALOG", &mut p.implant_catalog),
            ("DEVSURV_MANUFACTURER_ALIASES", &mut p.manufacturer_aliases),
            ("DEVSURV_GOLD_RELATIONS", &mut p.gold_relations),
        ];
        for (key, slot) in slots {
            if let Some(v) = get(key) {
                *slot = Some(v);
            }
        }
    }

    fn validate(&self) -> CliResult<()> {
        self.outcomes.outcome_class()?;
        self.outcomes.count_event_class()?;
        let p = &self.pipeline;
        if !(p.train_fraction > 0.0
            && p.dev_fraction >= 0.0
            && p.train_fraction + p.dev_fraction < 1.0)
        {
            return Err(CliError::config(
                "pipeline.train_fraction and pipeline.dev_fraction must leave a nonempty test share",
            ));
        }
        if self.paths.implant_catalog.is_some() != self.paths.manufacturer_aliases.is_some() {
            return Err(CliError::config(
                "paths.implant_catalog and paths.manufacturer_aliases must be set together",
            ));
        }
        if self.outcomes.other_cutoffs.is_empty() {
            return Err(CliError::config("outcomes.other_cutoffs is empty"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn preprocess_config(&self) -> CliResult<PreprocessConfig> {
        let mut cfg = self.preprocess.clone();
        if let Some(p) = &self.paths.header_lexicon {
            require(p, "paths.header_lexicon")?;
            cfg.header_lexicon = HeaderLexicon::load(p)?;
        }
        Ok(cfg)
    }

    pub fn extractor(&self) -> CliResult<Extractor> {
        let tagger = if self.paths.dictionaries.is_empty() {
            Tagger::bundled()
        } else {
            let dicts = self
                .paths
                .dictionaries
                .iter()
                .map(|p| {
                    require(p, "paths.dictionaries")?;
                    Ok(Dictionary::load(p, self.dictionary_expansion)?)
                })
                .collect::<CliResult<Vec<_>>>()?;
            Tagger::new(&dicts, AnatomyPositionRules::default())
        };
        let triggers = match &self.paths.trigger_lexicon {
            Some(p) => {
                require(p, "paths.trigger_lexicon")?;
                TriggerLexicon::load(p)?
            }
            None => TriggerLexicon::bundled(),
        };
        Ok(Extractor::new(tagger, triggers, self.context.clone()))
    }

    pub fn catalog(&self) -> CliResult<ImplantCatalog> {
        match (
            &self.paths.implant_catalog,
            &self.paths.manufacturer_aliases,
        ) {
            (Some(c), Some(a)) => {
                require(c, "paths.implant_catalog")?;
                require(a, "paths.manufacturer_aliases")?;
                Ok(ImplantCatalog::load(c, a)?)
            }
            _ => Ok(ImplantCatalog::bundled()),
        }
    }

    /// A configured input path, which must exist.
    pub fn input(&self, path: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        let p = path
            .as_ref()
            .ok_or_else(|| CliError::config(format!("{key} is not set")))?;
        require(p, key)?;
        Ok(p.clone())
    }
}

pub fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path, what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ProjectConfig::parse("bogus = 1"),
            Err(CliError::Config { .. })
        ));
        assert!(ProjectConfig::parse("[pipeline]\nsplit_seed = 3\nwat = 2").is_err());
        let cfg =
            ProjectConfig::parse("[pipeline]\nsplit_seed = 3\nrelation = \"implant-complication\"")
                .unwrap();
        assert_eq!(cfg.pipeline.split_seed, 3);
        assert_eq!(cfg.pipeline.relation, RelationType::ImplantComplication);
    }

    #[test]
    fn paths_resolve_against_file_and_env_wins() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("p.toml");
        std::fs::write(&file, "output_dir = \"o\"\n[paths]\nnotes = \"n.jsonl\"\n").unwrap();
        let cfg = ProjectConfig::load(Some(&file), &no_env).unwrap();
        assert_eq!(cfg.paths.notes.unwrap(), dir.path().join("n.jsonl"));
        assert_eq!(cfg.output_dir, dir.path().join("o"));
        let env = |k: &str| (k == "DEVSURV_NOTES").then(|| "/elsewhere.jsonl".to_string());
        let cfg = ProjectConfig::load(Some(&file), &env).unwrap();
        assert_eq!(cfg.paths.notes.unwrap(), PathBuf::from("/elsewhere.jsonl"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ProjectConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.pipeline.split_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_outcome_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("p.toml");
        std::fs::write(&file, "[outcomes]\noutcome = \"gout\"\n").unwrap();
        assert!(matches!(
            ProjectConfig::load(Some(&file), &no_env),
            Err(CliError::Config { .. })
        ));
    }
}
