//! Template-built clinical notes with planted entities, gold relation
//! labels, event timelines, registry rows and structured patient data.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Days, NaiveDate, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::RawNote;
use crate::error::{Error, Result};
use crate::extraction::{candidate_id_for_spans, ComplicationCategory, EntityType, RelationType};
use crate::outcomes::{CodedEntry, Event, EventClass, EventSource, PatientRow};
use crate::reconcile::{write_registry, ComponentRole, ImplantCatalog, RegistryRecord};

const PAIN_TERMS: [&str; 8] = [
    "pain",
    "aching",
    "soreness",
    "tenderness",
    "discomfort",
    "sharp pain",
    "dull pain",
    "throbbing",
];

const ANATOMY_TERMS: [(&str, &str); 9] = [
    ("hip", "HIP"),
    ("groin", "GROIN"),
    ("thigh", "THIGH"),
    ("knee", "KNEE"),
    ("buttock", "BUTTOCK"),
    ("lower back", "LOWER_BACK"),
    ("greater trochanter", "GREATER_TROCHANTER"),
    ("lumbar spine", "LUMBAR_SPINE"),
    ("calf", "CALF"),
];

const SIDES: [&str; 3] = ["", "left ", "right "];

fn complication_terms(c: ComplicationCategory) -> &'static [&'static str] {
    match c {
        ComplicationCategory::Revision => &["revision"],
        ComplicationCategory::ComponentWear => {
            &["polyethylene wear", "eccentric wear", "component wear"]
        }
        ComplicationCategory::MechanicalFailure => &[
            "loosening",
            "aseptic loosening",
            "dislocation",
            "instability",
        ],
        ComplicationCategory::ParticleDisease => &["metallosis", "pseudotumor", "particle disease"],
        ComplicationCategory::RadiographicAbnormality => {
            &["osteolysis", "radiolucency", "subsidence"]
        }
        ComplicationCategory::Infection => &["infection", "periprosthetic infection", "purulence"],
    }
}

/// Non-revision complication classes drawn for hazard events.
const EVENT_CATEGORIES: [ComplicationCategory; 5] = [
    ComplicationCategory::ComponentWear,
    ComplicationCategory::MechanicalFailure,
    ComplicationCategory::ParticleDisease,
    ComplicationCategory::RadiographicAbnormality,
    ComplicationCategory::Infection,
];

const FILLER: [&str; 5] = [
    "Vital signs stable.",
    "Continue current medications.",
    "Follow up in clinic as scheduled.",
    "Discussed activity modification.",
    "Ambulating with a steady gait.",
];

/// How a template sentence relates its entities: stated with a cue the
/// labeling functions know, stated in other words, or not related at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Stated,
    Paraphrased,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub relation: RelationType,
    pub kind: TemplateKind,
    /// Canonical section header the sentence is filed under.
    pub section: String,
    /// Text with `{pain}`, `{anat}`, `{anat2}`, `{comp}` or `{implant}` slots.
    pub text: String,
    /// Slot pairs (arg1, arg2) that are truly related.
    #[serde(default)]
    pub related: Vec<(String, String)>,
}

const SLOTS: [(&str, EntityType); 5] = [
    ("pain", EntityType::Pain),
    ("anat", EntityType::Anatomy),
    ("anat2", EntityType::Anatomy),
    ("comp", EntityType::Complication),
    ("implant", EntityType::Implant),
];

fn slot_type(name: &str) -> Option<EntityType> {
    SLOTS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn parse_template(text: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::invalid(format!("unclosed slot in template {text:?}")))?;
        if open > 0 {
            out.push(Piece::Text(&rest[..open]));
        }
        let name = &rest[open + 1..close];
        if slot_type(name).is_none() {
            return Err(Error::invalid(format!(
                "template {text:?} references unknown slot {{{name}}}"
            )));
        }
        out.push(Piece::Slot(name));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    Ok(out)
}

impl TemplateSpec {
    fn new(
        relation: RelationType,
        kind: TemplateKind,
        section: &str,
        text: &str,
        related: &[(&str, &str)],
    ) -> Self {
        TemplateSpec {
            relation,
            kind,
            section: section.to_string(),
            text: text.to_string(),
            related: related
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let slots: Vec<&str> = parse_template(&self.text)?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s),
                Piece::Text(_) => None,
            })
            .collect();
        let (t1, t2) = self.relation.arg_types();
        for (a, b) in &self.related {
            let ok = slots.contains(&a.as_str())
                && slots.contains(&b.as_str())
                && slot_type(a) == Some(t1)
                && slot_type(b) == Some(t2);
            if !ok {
                return Err(Error::invalid(format!(
                    "related pair ({a}, {b}) does not fit template {:?}",
                    self.text
                )));
            }
        }
        if self.kind == TemplateKind::Negative && !self.related.is_empty() {
            return Err(Error::invalid(format!(
                "negative template {:?} lists related slots",
                self.text
            )));
        }
        if self.kind != TemplateKind::Negative && self.related.is_empty() {
            return Err(Error::invalid(format!(
                "template {:?} relates nothing",
                self.text
            )));
        }
        Ok(())
    }
}

pub fn default_templates() -> Vec<TemplateSpec> {
    use RelationType::{ImplantComplication as Ic, PainAnatomy as Pa};
    use TemplateKind::{Negative as N, Paraphrased as P, Stated as S};
    const HPI: &str = "HISTORY OF PRESENT ILLNESS";
    const PE: &str = "PHYSICAL EXAM";
    const PMH: &str = "PAST MEDICAL HISTORY";
    const PSH: &str = "PAST SURGICAL HISTORY";
    const IMG: &str = "IMAGING";
    let pa = [("pain", "anat")];
    let ic = [("comp", "implant")];
    vec![
        TemplateSpec::new(Pa, S, HPI, "She reports {pain} in the {anat}.", &pa),
        TemplateSpec::new(Pa, S, HPI, "Patient describes {pain} in the {anat} with walking.", &pa),
        TemplateSpec::new(Pa, S, HPI, "Complains of {anat} {pain} today.", &[("pain", "anat")]),
        TemplateSpec::new(Pa, S, HPI, "{pain} radiating to the {anat} is reported.", &pa),
        TemplateSpec::new(Pa, S, PE, "Exam shows {pain} over the {anat}.", &pa),
        TemplateSpec::new(Pa, S, HPI, "She reports {pain} in the {anat} but not the {anat2}.", &pa),
        TemplateSpec::new(Pa, P, HPI, "{pain} affecting her {anat} this week.", &pa),
        TemplateSpec::new(Pa, P, HPI, "Ongoing {pain} about her {anat} after walking.", &pa),
        TemplateSpec::new(Pa, P, PE, "Notable {pain} near her {anat}.", &pa),
        TemplateSpec::new(Pa, N, HPI, "She denies {pain} in the {anat}.", &[]),
        TemplateSpec::new(Pa, N, HPI, "No {anat} {pain} today.", &[]),
        TemplateSpec::new(Pa, N, HPI, "Return if {pain} in the {anat} worsens.", &[]),
        TemplateSpec::new(Pa, N, PMH, "Chronic {pain} in the {anat}.", &[]),
        TemplateSpec::new(
            Pa,
            N,
            HPI,
            "{pain} has improved steadily with physical therapy over several months and the {anat} exam today is unremarkable.",
            &[],
        ),
        TemplateSpec::new(Ic, S, IMG, "Radiographs show {comp} of the {implant}.", &ic),
        TemplateSpec::new(Ic, S, IMG, "Imaging notable for {comp} around the {implant}.", &ic),
        TemplateSpec::new(Ic, S, HPI, "Course of the {implant} complicated by {comp}.", &ic),
        TemplateSpec::new(Ic, P, IMG, "Concern for {comp} near her {implant}.", &ic),
        TemplateSpec::new(Ic, N, IMG, "There is no {comp} of the {implant}.", &[]),
        TemplateSpec::new(Ic, N, PSH, "Remote {implant} with {comp}.", &[]),
        TemplateSpec::new(Ic, N, HPI, "Watch for {comp} of the {implant}.", &[]),
    ]
}

/// Section order within a note.
const SECTION_ORDER: [&str; 9] = [
    "PROCEDURE",
    "IMPLANTS",
    "HISTORY OF PRESENT ILLNESS",
    "PAST MEDICAL HISTORY",
    "PAST SURGICAL HISTORY",
    "PHYSICAL EXAM",
    "IMAGING",
    "ASSESSMENT AND PLAN",
    "PLAN",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub acetabular: String,
    pub femoral: String,
    pub weight: f64,
    /// Complications per patient-year.
    pub hazard_per_year: f64,
    pub pain_multiplier: f64,
}

impl SystemSpec {
    fn new(
        acetabular: &str,
        femoral: &str,
        weight: f64,
        hazard_per_year: f64,
        pain_multiplier: f64,
    ) -> Self {
        SystemSpec {
            acetabular: acetabular.into(),
            femoral: femoral.into(),
            weight,
            hazard_per_year,
            pain_multiplier,
        }
    }

    /// `"Depuy Pinnacle + AML"`.
    pub fn name(&self, catalog: &ImplantCatalog) -> Result<String> {
        let (a, f) = self.resolve(catalog)?;
        Ok(format!("{} {} + {}", a.manufacturer, a.model, f.model))
    }

    fn resolve<'c>(
        &self,
        catalog: &'c ImplantCatalog,
    ) -> Result<(
        &'c crate::reconcile::CanonicalImplant,
        &'c crate::reconcile::CanonicalImplant,
    )> {
        let get = |id: &str| {
            catalog
                .resolve(id)
                .ok_or_else(|| Error::UnknownCanonicalId(vec![id.to_string()]))
        };
        Ok((get(&self.acetabular)?, get(&self.femoral)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    /// Follow-up length range in years.
    pub followup_years: (f64, f64),
    pub routine_visits_per_year: f64,
    pub pain_visits_per_year: f64,
    /// Probability that a relation sentence states a true relation.
    pub relation_rate: f64,
    /// Share of true-relation sentences phrased without a known cue.
    pub paraphrase_rate: f64,
    /// Probability that a note carries one unrelated relation sentence.
    pub distractor_rate: f64,
    /// Probability that a complication or revision is written up in a note.
    pub documentation_rate: f64,
    pub revision_probability: f64,
    pub coded_revision_rate: f64,
    pub registry_conflict_rate: f64,
    pub registry_drop_rate: f64,
    pub systems: Vec<SystemSpec>,
    pub templates: Vec<TemplateSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_patients: 200,
            followup_years: (1.0, 8.0),
            routine_visits_per_year: 0.8,
            pain_visits_per_year: 1.2,
            relation_rate: 0.8,
            paraphrase_rate: 0.3,
            distractor_rate: 0.3,
            documentation_rate: 1.0,
            revision_probability: 0.4,
            coded_revision_rate: 0.6,
            registry_conflict_rate: 0.0,
            registry_drop_rate: 0.0,
            systems: vec![
                SystemSpec::new("DP_PINNACLE", "DP_AML", 0.35, 0.03, 1.0),
                SystemSpec::new("ZB_TRILOGY", "ZB_VERSYS", 0.3, 0.03, 1.0),
                SystemSpec::new("ST_TRIDENT", "ST_ACCOLADE", 0.25, 0.06, 1.3),
                SystemSpec::new("DP_ASR", "DP_SUMMIT", 0.1, 0.12, 1.8),
            ],
            templates: default_templates(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, catalog: &ImplantCatalog) -> Result<()> {
        let unit = [
            ("relation_rate", self.relation_rate),
            ("paraphrase_rate", self.paraphrase_rate),
            ("documentation_rate", self.documentation_rate),
            ("revision_probability", self.revision_probability),
            ("coded_revision_rate", self.coded_revision_rate),
            ("registry_conflict_rate", self.registry_conflict_rate),
            ("registry_drop_rate", self.registry_drop_rate),
            ("distractor_rate", self.distractor_rate),
        ];
        if let Some((name, v)) = unit.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("{name} = {v} is outside [0, 1]")));
        }
        let rates = [
            self.routine_visits_per_year,
            self.pain_visits_per_year,
            self.followup_years.0,
        ];
        if rates.iter().any(|r| r.is_nan() || *r < 0.0)
            || self.followup_years.1 < self.followup_years.0
        {
            return Err(Error::invalid(
                "rates and follow-up years must be nonnegative and ordered",
            ));
        }
        if self.systems.is_empty()
            || self
                .systems
                .iter()
                .any(|s| s.weight.is_nan() || s.weight <= 0.0 || s.hazard_per_year < 0.0)
        {
            return Err(Error::invalid(
                "systems need positive weights and nonnegative hazards",
            ));
        }
        for s in &self.systems {
            s.resolve(catalog)?;
        }
        for t in &self.templates {
            t.validate()?;
        }
        for rel in RelationType::ALL {
            for kind in [TemplateKind::Stated, TemplateKind::Negative] {
                if !self
                    .templates
                    .iter()
                    .any(|t| t.relation == rel && t.kind == kind)
                {
                    return Err(Error::invalid(format!("no {kind:?} template for {rel}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRelation {
    pub candidate_id: String,
    pub note_id: String,
    pub relation: RelationType,
    pub arg1: String,
    pub arg2: String,
    pub label: bool,
}

/// Entity span planted by the generator, in note byte offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedMention {
    pub note_id: String,
    pub start: usize,
    pub end: usize,
    pub entity_type: EntityType,
    pub canonical_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub notes: Vec<RawNote>,
    pub gold_relations: Vec<GoldRelation>,
    pub gold_events: Vec<Event>,
    pub registry: Vec<RegistryRecord>,
    pub patients: Vec<PatientRow>,
    pub codes: Vec<CodedEntry>,
    pub planted: Vec<PlantedMention>,
}

pub const NOTES_FILE: &str = "notes.jsonl";
pub const GOLD_RELATIONS_FILE: &str = "gold_relations.csv";
pub const GOLD_EVENTS_FILE: &str = "gold_events.csv";
pub const REGISTRY_FILE: &str = "registry.csv";
pub const PATIENTS_FILE: &str = "patients.csv";
pub const CODES_FILE: &str = "codes.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

impl SynthCorpus {
    /// Gold labels as `(candidate_id, label)` for one relation.
    pub fn gold_labels(&self, relation: RelationType) -> Vec<(String, bool)> {
        self.gold_relations
            .iter()
            .filter(|g| g.relation == relation)
            .map(|g| (g.candidate_id.clone(), g.label))
            .collect()
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(NOTES_FILE);
        let mut w = create(&path)?;
        for n in &self.notes {
            serde_json::to_writer(&mut w, n).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_gold_relations(
            &self.gold_relations,
            create(&dir.join(GOLD_RELATIONS_FILE))?,
        )?;
        crate::outcomes::write_events(&self.gold_events, create(&dir.join(GOLD_EVENTS_FILE))?)?;
        write_registry(&self.registry, create(&dir.join(REGISTRY_FILE))?)?;
        crate::outcomes::write_patients(&self.patients, create(&dir.join(PATIENTS_FILE))?)?;
        crate::outcomes::write_codes(&self.codes, create(&dir.join(CODES_FILE))?)?;
        Ok(())
    }
}

pub fn write_gold_relations<W: Write>(rows: &[GoldRelation], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_gold_relations<R: std::io::Read>(r: R) -> Result<Vec<GoldRelation>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

struct Rendered {
    relation: RelationType,
    section: String,
    text: String,
    /// (slot, start, end, type, canonical id), offsets within `text`.
    mentions: Vec<(String, usize, usize, EntityType, String)>,
    related: Vec<(String, String)>,
}

/// Slot values fixed by the caller; others are drawn at random.
#[derive(Default)]
struct Fill<'a> {
    anat: Option<(&'a str, &'a str)>,
    comp: Option<ComplicationCategory>,
    implant: Option<(&'a str, &'a str)>,
}

fn render(
    t: &TemplateSpec,
    fill: &Fill<'_>,
    implants: &[(&str, &str)],
    rng: &mut ChaCha8Rng,
) -> Result<Rendered> {
    let mut text = String::new();
    let mut mentions = Vec::new();
    let anat = fill
        .anat
        .unwrap_or(*ANATOMY_TERMS.choose(rng).expect("nonempty"));
    let anat2 = loop {
        let a = *ANATOMY_TERMS.choose(rng).expect("nonempty");
        if a.1 != anat.1 {
            break a;
        }
    };
    for piece in parse_template(&t.text)? {
        match piece {
            Piece::Text(s) => text.push_str(s),
            Piece::Slot(name) => {
                let (surface, canonical, side) = match name {
                    "pain" => {
                        let p = *PAIN_TERMS.choose(rng).expect("nonempty");
                        (p.to_string(), String::new(), "")
                    }
                    "anat" | "anat2" => {
                        let a = if name == "anat" { anat } else { anat2 };
                        (
                            a.0.to_string(),
                            a.1.to_string(),
                            *SIDES.choose(rng).expect("nonempty"),
                        )
                    }
                    "comp" => {
                        let cat = fill
                            .comp
                            .unwrap_or(*EVENT_CATEGORIES.choose(rng).expect("nonempty"));
                        let term = *complication_terms(cat).choose(rng).expect("nonempty");
                        (term.to_string(), String::new(), "")
                    }
                    _ => {
                        let i = fill
                            .implant
                            .unwrap_or(*implants.choose(rng).expect("patient has implants"));
                        (i.0.to_string(), i.1.to_string(), "")
                    }
                };
                let start = text.len();
                text.push_str(side);
                text.push_str(&surface);
                if start == 0 {
                    let upper: String = text[..1].to_uppercase();
                    text.replace_range(..1, &upper);
                }
                let ty = slot_type(name).expect("validated slot");
                mentions.push((name.to_string(), start, text.len(), ty, canonical));
            }
        }
    }
    Ok(Rendered {
        relation: t.relation,
        section: t.section.clone(),
        text,
        mentions,
        related: t.related.clone(),
    })
}

struct NoteDraft {
    date: NaiveDate,
    note_type: &'static str,
    sentences: Vec<Rendered>,
    /// Literal lines grouped by section, for operative notes.
    literal: Vec<(String, String)>,
}

impl NoteDraft {
    fn new(date: NaiveDate, note_type: &'static str) -> Self {
        NoteDraft {
            date,
            note_type,
            sentences: vec![],
            literal: vec![],
        }
    }
}

struct PatientOut {
    notes: Vec<RawNote>,
    gold_relations: Vec<GoldRelation>,
    gold_events: Vec<Event>,
    registry: Vec<RegistryRecord>,
    patient: PatientRow,
    codes: Vec<CodedEntry>,
    planted: Vec<PlantedMention>,
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // splitmix64 on the index keeps per-patient streams independent
    let mut z = seed
        ^ (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn pick_template<'t>(
    templates: &'t [TemplateSpec],
    relation: RelationType,
    kind: TemplateKind,
    rng: &mut ChaCha8Rng,
) -> &'t TemplateSpec {
    let pool: Vec<&TemplateSpec> = templates
        .iter()
        .filter(|t| t.relation == relation && t.kind == kind)
        .collect();
    if pool.is_empty() {
        // paraphrases are optional; fall back to stated templates
        let pool: Vec<&TemplateSpec> = templates
            .iter()
            .filter(|t| t.relation == relation && t.kind == TemplateKind::Stated)
            .collect();
        return pool.choose(rng).expect("validated: stated template exists");
    }
    pool.choose(rng).expect("nonempty pool")
}

fn relation_kind(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> TemplateKind {
    if !rng.random_bool(cfg.relation_rate) {
        TemplateKind::Negative
    } else if rng.random_bool(cfg.paraphrase_rate) {
        TemplateKind::Paraphrased
    } else {
        TemplateKind::Stated
    }
}

fn implant_surface(catalog_id: &str) -> &'static str {
    crate::extraction::fixtures::IMPLANTS
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .filter(|f| f.len() >= 2 && f[1] == catalog_id)
        .max_by_key(|f| f[0].len())
        .map_or("prosthesis", |f| f[0])
}

fn days_after(d: NaiveDate, days: u64) -> NaiveDate {
    d + Days::new(days)
}

fn gen_patient(cfg: &SynthConfig, catalog: &ImplantCatalog, index: usize) -> Result<PatientOut> {
    let mut rng = patient_rng(cfg.seed, index);
    let patient_id = format!("p{index:05}");
    let weights: Vec<f64> = cfg.systems.iter().map(|s| s.weight).collect();
    let dist = rand_distr::weighted::WeightedIndex::new(&weights)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let system = &cfg.systems[dist.sample(&mut rng)];
    let (acet, fem) = system.resolve(catalog)?;
    let system_name = system.name(catalog)?;
    let acet_surface = implant_surface(&system.acetabular);
    let fem_surface = implant_surface(&system.femoral);
    let implants = [
        (acet_surface, system.acetabular.as_str()),
        (fem_surface, system.femoral.as_str()),
    ];

    let base = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let index_date = days_after(base, rng.random_range(0..3650));
    let years = rng.random_range(cfg.followup_years.0..=cfg.followup_years.1);
    let follow_days = ((years * 365.25).round() as u64).max(1);
    let last_contact = days_after(index_date, follow_days);

    let mut drafts: Vec<NoteDraft> = Vec::new();
    let mut op = NoteDraft::new(index_date, "operative");
    let side = if rng.random_bool(0.5) {
        "Left"
    } else {
        "Right"
    };
    op.literal.push((
        "PROCEDURE".into(),
        format!("{side} total hip arthroplasty."),
    ));
    let op_implants = implants;

    // hazard-driven complication and optional revision
    let mut coded = Vec::new();
    let mut complication: Option<(ComplicationCategory, NaiveDate)> = None;
    let mut revision: Option<NaiveDate> = None;
    if system.hazard_per_year > 0.0 {
        let t_years: f64 = Exp::new(system.hazard_per_year)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(&mut rng);
        let t_days = (t_years * 365.25).ceil() as u64;
        if t_days >= 1 && t_days <= follow_days {
            let cat = *EVENT_CATEGORIES.choose(&mut rng).expect("nonempty");
            complication = Some((cat, days_after(index_date, t_days)));
            if rng.random_bool(cfg.revision_probability) {
                let r = t_days + rng.random_range(14..180);
                if r <= follow_days {
                    revision = Some(days_after(index_date, r));
                }
            }
        }
    }

    // visit notes
    let visits = |rate: f64, rng: &mut ChaCha8Rng| -> Vec<u64> {
        let lambda = rate * follow_days as f64 / 365.25;
        let n = if lambda > 0.0 {
            Poisson::new(lambda).map_or(0.0, |p| p.sample(rng)) as usize
        } else {
            0
        };
        let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(1..=follow_days)).collect();
        v.sort_unstable();
        v
    };
    let pain_days = visits(cfg.pain_visits_per_year * system.pain_multiplier, &mut rng);
    let routine_days = visits(cfg.routine_visits_per_year, &mut rng);
    // (draft index, relation sentence index) of sentences that document an event
    let mut documented: Vec<(usize, usize, EventClass)> = Vec::new();
    for d in pain_days {
        let mut note = NoteDraft::new(days_after(index_date, d), "progress");
        let kind = relation_kind(cfg, &mut rng);
        let t = pick_template(&cfg.templates, RelationType::PainAnatomy, kind, &mut rng);
        note.sentences
            .push(render(t, &Fill::default(), &implants, &mut rng)?);
        if kind != TemplateKind::Negative {
            documented.push((drafts.len() + 1, 0, EventClass::Pain));
        }
        drafts.push(note);
    }
    for d in routine_days {
        drafts.push(NoteDraft::new(days_after(index_date, d), "progress"));
    }
    let mut write_up = |date: NaiveDate,
                        cat: ComplicationCategory,
                        drafts: &mut Vec<NoteDraft>,
                        rng: &mut ChaCha8Rng|
     -> Result<()> {
        if !rng.random_bool(cfg.documentation_rate) {
            return Ok(());
        }
        let mut note = NoteDraft::new(date, "progress");
        let kind = relation_kind(cfg, rng);
        let t = pick_template(&cfg.templates, RelationType::ImplantComplication, kind, rng);
        let fill = Fill {
            comp: Some(cat),
            ..Fill::default()
        };
        note.sentences.push(render(t, &fill, &implants, rng)?);
        if kind != TemplateKind::Negative {
            documented.push((drafts.len() + 1, 0, EventClass::from(cat)));
        }
        drafts.push(note);
        Ok(())
    };
    if let Some((cat, date)) = complication {
        write_up(date, cat, &mut drafts, &mut rng)?;
    }
    if let Some(date) = revision {
        write_up(date, ComplicationCategory::Revision, &mut drafts, &mut rng)?;
        if rng.random_bool(cfg.coded_revision_rate) {
            let (system_code, code) = if rng.random_bool(0.5) {
                ("CPT", "27134")
            } else {
                ("ICD9", "00.71")
            };
            coded.push(CodedEntry {
                patient_id: patient_id.clone(),
                code_system: system_code.into(),
                code: code.into(),
                date,
            });
        }
    }
    drafts.push(NoteDraft::new(last_contact, "progress"));

    // distractors and filler
    for note in drafts.iter_mut() {
        let k = usize::from(rng.random_bool(cfg.distractor_rate));
        for _ in 0..k {
            let rel = *RelationType::ALL.choose(&mut rng).expect("nonempty");
            let t = pick_template(&cfg.templates, rel, TemplateKind::Negative, &mut rng);
            note.sentences
                .push(render(t, &Fill::default(), &implants, &mut rng)?);
        }
        let filler = *FILLER.choose(&mut rng).expect("nonempty");
        note.literal.push(("PLAN".into(), filler.to_string()));
    }
    drafts.insert(0, op);
    // operative note lists the implanted components
    drafts[0].sentences.clear();
    let implant_lines: Vec<(String, String)> = op_implants
        .iter()
        .zip(["Acetabular shell", "Femoral stem"])
        .map(|((surface, _), label)| ("IMPLANTS".to_string(), format!("{label} is a {surface}.")))
        .collect();
    drafts[0].literal.extend(implant_lines);

    // notes in date order; keep the documented indices pointing at the same drafts
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by_key(|&i| (drafts[i].date, i));

    let mut out = PatientOut {
        notes: vec![],
        gold_relations: vec![],
        gold_events: vec![],
        registry: vec![],
        patient: PatientRow {
            patient_id: patient_id.clone(),
            birth_date: None,
            sex: None,
            race: None,
            ethnicity: None,
            cci: None,
            last_contact_date: last_contact,
            implant_system: Some(system_name),
            bmi: None,
        },
        codes: coded,
        planted: vec![],
    };
    let mut sentence_ids: BTreeMap<(usize, usize), Vec<(String, bool)>> = BTreeMap::new();
    for (r, &i) in order.iter().enumerate() {
        let note_id = format!("{patient_id}_n{r:03}");
        let draft = &drafts[i];
        let (text, placed) = assemble(draft);
        for (k, (rendered, offset)) in draft.sentences.iter().zip(placed).enumerate() {
            let mut ids = Vec::new();
            for m in &rendered.mentions {
                out.planted.push(PlantedMention {
                    note_id: note_id.clone(),
                    start: offset + m.1,
                    end: offset + m.2,
                    entity_type: m.3,
                    canonical_id: m.4.clone(),
                });
            }
            let (t1, t2) = rendered.relation.arg_types();
            for a in rendered.mentions.iter().filter(|m| m.3 == t1) {
                for b in rendered.mentions.iter().filter(|m| m.3 == t2) {
                    let label = rendered.related.iter().any(|(x, y)| *x == a.0 && *y == b.0);
                    let candidate_id = candidate_id_for_spans(
                        &note_id,
                        rendered.relation,
                        (offset + a.1, offset + a.2),
                        (offset + b.1, offset + b.2),
                    );
                    if label {
                        ids.push((candidate_id.clone(), b.4.clone()));
                    }
                    out.gold_relations.push(GoldRelation {
                        candidate_id,
                        note_id: note_id.clone(),
                        relation: rendered.relation,
                        arg1: rendered.text[a.1..a.2].to_string(),
                        arg2: rendered.text[b.1..b.2].to_string(),
                        label,
                    });
                }
            }
            sentence_ids.insert((i, k), ids.into_iter().map(|(c, _)| (c, true)).collect());
        }
        out.notes.push(RawNote {
            note_id,
            patient_id: patient_id.clone(),
            note_datetime: note_time(draft.date, &mut rng),
            note_type: draft.note_type.to_string(),
            text,
        });
    }
    for (draft_index, sentence_index, class) in documented {
        let date = drafts[draft_index].date;
        if let Some(ids) = sentence_ids.get(&(draft_index, sentence_index)) {
            if let Some((cid, _)) = ids.first() {
                out.gold_events.push(Event {
                    patient_id: patient_id.clone(),
                    event_class: class,
                    date,
                    source: EventSource::Text,
                    provenance: cid.clone(),
                });
            }
        }
    }
    for c in &out.codes {
        let matched = out
            .gold_events
            .iter_mut()
            .find(|e| e.event_class == EventClass::Revision && e.date == c.date);
        match matched {
            Some(e) => {
                e.source = EventSource::Both;
                e.provenance = format!("{}:{}|{}", c.code_system, c.code, e.provenance);
            }
            None => out.gold_events.push(Event {
                patient_id: patient_id.clone(),
                event_class: EventClass::Revision,
                date: c.date,
                source: EventSource::Coded,
                provenance: format!("{}:{}", c.code_system, c.code),
            }),
        }
    }
    out.gold_events.sort();
    let primary = if rng.random_bool(0.7) {
        ("CPT", "27130")
    } else {
        ("ICD9", "81.51")
    };
    out.codes.insert(
        0,
        CodedEntry {
            patient_id: patient_id.clone(),
            code_system: primary.0.into(),
            code: primary.1.into(),
            date: index_date,
        },
    );

    // registry rows, optionally corrupted
    for (implant, role) in [
        (acet, ComponentRole::Acetabular),
        (fem, ComponentRole::Femoral),
    ] {
        if rng.random_bool(cfg.registry_drop_rate) {
            continue;
        }
        let mut model = implant.model.clone();
        if rng.random_bool(cfg.registry_conflict_rate) {
            model = format!("{model} II");
        }
        out.registry.push(RegistryRecord {
            patient_id: patient_id.clone(),
            surgery_date: index_date,
            component_role: role,
            manufacturer: implant.manufacturer.clone(),
            model,
        });
    }

    // demographics
    let age_days = rng.random_range((40.0 * 365.25) as u64..(88.0 * 365.25) as u64);
    out.patient.birth_date = index_date.checked_sub_days(Days::new(age_days));
    out.patient.sex = Some(if rng.random_bool(0.55) { "F" } else { "M" }.into());
    let races = ["White", "White", "White", "Asian", "Black", "Other"];
    out.patient.race =
        (!rng.random_bool(0.08)).then(|| races.choose(&mut rng).expect("nonempty").to_string());
    out.patient.ethnicity = (!rng.random_bool(0.1)).then(|| {
        if rng.random_bool(0.15) {
            "Hispanic"
        } else {
            "Non-Hispanic"
        }
        .to_string()
    });
    out.patient.cci = Some(
        Poisson::new(1.2)
            .map_or(0.0f64, |p| p.sample(&mut rng))
            .min(9.0) as i64,
    );
    let bmi: f64 = Normal::new(29.0, 5.0).map_or(29.0, |n| n.sample(&mut rng));
    out.patient.bmi = Some((bmi.clamp(16.0, 60.0) * 10.0).round() / 10.0);
    Ok(out)
}

fn note_time(date: NaiveDate, rng: &mut ChaCha8Rng) -> DateTime<Utc> {
    date.and_hms_opt(rng.random_range(7..18), rng.random_range(0..60), 0)
        .expect("valid time")
        .and_utc()
}

/// Note text and the byte offset at which each rendered sentence starts.
fn assemble(draft: &NoteDraft) -> (String, Vec<usize>) {
    let mut text = String::new();
    let mut offsets = vec![0; draft.sentences.len()];
    for section in SECTION_ORDER {
        let literal: Vec<&str> = draft
            .literal
            .iter()
            .filter(|(s, _)| s == section)
            .map(|(_, t)| t.as_str())
            .collect();
        let rendered: Vec<usize> = (0..draft.sentences.len())
            .filter(|&k| draft.sentences[k].section == section)
            .collect();
        if literal.is_empty() && rendered.is_empty() {
            continue;
        }
        text.push_str(section);
        text.push_str(":\n");
        let mut first = true;
        for k in rendered {
            if !first {
                text.push(' ');
            }
            first = false;
            offsets[k] = text.len();
            text.push_str(&draft.sentences[k].text);
        }
        for l in literal {
            if !first {
                text.push(' ');
            }
            first = false;
            text.push_str(l);
        }
        text.push_str("\n\n");
    }
    (text, offsets)
}

/// Generates the whole corpus; patients are independent given the seed.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let catalog = ImplantCatalog::bundled();
    cfg.validate(&catalog)?;
    if let Some(t) = cfg
        .templates
        .iter()
        .find(|t| !SECTION_ORDER.contains(&t.section.as_str()))
    {
        return Err(Error::invalid(format!(
            "template section {:?} is not a known section",
            t.section
        )));
    }
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<PatientOut>> = {
        use rayon::prelude::*;
        (0..cfg.n_patients)
            .into_par_iter()
            .map(|i| gen_patient(cfg, &catalog, i))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<PatientOut>> = (0..cfg.n_patients)
        .map(|i| gen_patient(cfg, &catalog, i))
        .collect();
    let mut out = SynthCorpus::default();
    for p in parts {
        let p = p?;
        out.notes.extend(p.notes);
        out.gold_relations.extend(p.gold_relations);
        out.gold_events.extend(p.gold_events);
        out.registry.extend(p.registry);
        out.patients.push(p.patient);
        out.codes.extend(p.codes);
        out.planted.extend(p.planted);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = out
        .gold_relations
        .iter()
        .find(|g| !seen.insert(g.candidate_id.as_str()))
    {
        return Err(Error::DuplicateId(dup.candidate_id.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_patients: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(
            gen_corpus(&small(3)).unwrap(),
            gen_corpus(&small(3)).unwrap()
        );
        assert_ne!(
            gen_corpus(&small(3)).unwrap().notes,
            gen_corpus(&small(4)).unwrap().notes
        );
    }

    #[test]
    fn zero_relation_rate_gives_no_true_labels() {
        let cfg = SynthConfig {
            relation_rate: 0.0,
            ..small(5)
        };
        let c = gen_corpus(&cfg).unwrap();
        assert!(!c.gold_relations.is_empty());
        assert!(c.gold_relations.iter().all(|g| !g.label));
        assert!(c.gold_events.iter().all(|e| e.source == EventSource::Coded));
    }

    #[test]
    fn unknown_slot_rejected() {
        let mut cfg = small(1);
        cfg.templates.push(TemplateSpec::new(
            RelationType::PainAnatomy,
            TemplateKind::Negative,
            "PLAN",
            "Mild {ache} noted.",
            &[],
        ));
        assert!(gen_corpus(&cfg).is_err());
    }

    #[test]
    fn planted_spans_slice_to_surfaces() {
        let c = gen_corpus(&small(7)).unwrap();
        let text: BTreeMap<&str, &str> = c
            .notes
            .iter()
            .map(|n| (n.note_id.as_str(), n.text.as_str()))
            .collect();
        for p in &c.planted {
            let s = &text[p.note_id.as_str()][p.start..p.end];
            assert!(
                !s.is_empty() && !s.starts_with(' ') && !s.ends_with(' '),
                "{s:?}"
            );
        }
    }

    #[test]
    fn notes_are_dated_within_follow_up() {
        let c = gen_corpus(&small(8)).unwrap();
        for p in &c.patients {
            let dates: Vec<NaiveDate> = c
                .notes
                .iter()
                .filter(|n| n.patient_id == p.patient_id)
                .map(|n| n.note_datetime.date_naive())
                .collect();
            assert_eq!(dates.iter().max(), Some(&p.last_contact_date));
            assert!(dates.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
