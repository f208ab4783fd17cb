//! Cohort selection, event assembly and outcome statistics.

mod cox;
mod design;
mod km;
mod nb;
mod nonfinite;
mod ttest;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{ComplicationCategory, EntityType, RelationCandidate, RelationType};

pub use cox::{cox_fit, cox_partial_log_likelihood, CoxCoefficient, CoxConfig, CoxFit, ScoreTest};
pub use design::{encode_categorical, CategoricalEncoding};
pub use km::{km_estimate, logrank_test, KmPoint, LogRankResult, SurvivalCurve};
pub use nb::{
    choose_other_cutoff, collapse_rare, nb_fit, CutoffChoice, NbCoefficient, NbConfig, NbFit,
    OTHER_SYSTEM,
};
pub use ttest::{ttest_welch, TTestResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    Revision,
    ComponentWear,
    MechanicalFailure,
    ParticleDisease,
    RadiographicAbnormality,
    Infection,
    Pain,
}

impl EventClass {
    pub const ALL: [EventClass; 7] = [
        EventClass::Revision,
        EventClass::ComponentWear,
        EventClass::MechanicalFailure,
        EventClass::ParticleDisease,
        EventClass::RadiographicAbnormality,
        EventClass::Infection,
        EventClass::Pain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::Revision => "revision",
            EventClass::ComponentWear => "component_wear",
            EventClass::MechanicalFailure => "mechanical_failure",
            EventClass::ParticleDisease => "particle_disease",
            EventClass::RadiographicAbnormality => "radiographic_abnormality",
            EventClass::Infection => "infection",
            EventClass::Pain => "pain",
        }
    }

    pub fn is_complication(self) -> bool {
        self != EventClass::Pain
    }
}

impl From<ComplicationCategory> for EventClass {
    fn from(c: ComplicationCategory) -> Self {
        match c {
            ComplicationCategory::Revision => EventClass::Revision,
            ComplicationCategory::ComponentWear => EventClass::ComponentWear,
            ComplicationCategory::MechanicalFailure => EventClass::MechanicalFailure,
            ComplicationCategory::ParticleDisease => EventClass::ParticleDisease,
            ComplicationCategory::RadiographicAbnormality => EventClass::RadiographicAbnormality,
            ComplicationCategory::Infection => EventClass::Infection,
        }
    }
}

impl FromStr for EventClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace([' ', '-'], "_");
        EventClass::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown event class {s:?}")))
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventSource {
    Coded,
    Text,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub patient_id: String,
    #[serde(rename = "class")]
    pub event_class: EventClass,
    pub date: NaiveDate,
    pub source: EventSource,
    /// Code or candidate id the event came from.
    pub provenance: String,
}

pub fn read_events<R: Read>(r: R) -> Result<Vec<Event>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<Event>().enumerate() {
        let e = row?;
        if e.provenance.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: k + 2,
                field: Some("provenance".into()),
                message: "provenance must be nonempty".into(),
            });
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_events<W: Write>(events: &[Event], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for e in events {
        wtr.serialize(e)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedEntry {
    pub patient_id: String,
    pub code_system: String,
    pub code: String,
    pub date: NaiveDate,
}

/// Row of the per-patient CSV. Empty optional fields read as missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub birth_date: Option<NaiveDate>,
    pub sex: Option<String>,
    pub race: Option<String>,
    pub ethnicity: Option<String>,
    pub cci: Option<i64>,
    pub last_contact_date: NaiveDate,
    /// Implant systems separated by ';'.
    #[serde(default)]
    pub implant_system: Option<String>,
    #[serde(default)]
    pub bmi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub info: PatientRow,
    pub codes: Vec<CodedEntry>,
}

impl PatientRecord {
    pub fn implant_systems(&self) -> Vec<String> {
        self.info
            .implant_system
            .as_deref()
            .unwrap_or_default()
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }
}

pub fn read_patients<R: Read>(r: R) -> Result<Vec<PatientRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_patients<W: Write>(rows: &[PatientRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_codes<R: Read>(r: R) -> Result<Vec<CodedEntry>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_codes<W: Write>(rows: &[CodedEntry], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Joins patient rows with their coded entries. Codes for unknown patients
/// are an error.
pub fn assemble_records(
    patients: Vec<PatientRow>,
    codes: Vec<CodedEntry>,
) -> Result<Vec<PatientRecord>> {
    let mut by_id: BTreeMap<String, PatientRecord> = BTreeMap::new();
    for p in patients {
        let id = p.patient_id.clone();
        if by_id
            .insert(
                id.clone(),
                PatientRecord {
                    info: p,
                    codes: vec![],
                },
            )
            .is_some()
        {
            return Err(Error::DuplicateId(id));
        }
    }
    for c in codes {
        by_id
            .get_mut(&c.patient_id)
            .ok_or_else(|| Error::invalid(format!("code for unknown patient {:?}", c.patient_id)))?
            .codes
            .push(c);
    }
    let mut out: Vec<PatientRecord> = by_id.into_values().collect();
    for r in &mut out {
        r.codes
            .sort_by(|a, b| (a.date, &a.code).cmp(&(b.date, &b.code)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeRef {
    pub system: String,
    pub code: String,
}

impl CodeRef {
    pub fn new(system: &str, code: &str) -> Self {
        CodeRef {
            system: system.trim().to_uppercase(),
            code: normalize_code(code),
        }
    }

    fn matches(&self, e: &CodedEntry) -> bool {
        self.system == e.code_system.trim().to_uppercase() && self.code == normalize_code(&e.code)
    }
}

/// Codes compare without dots or surrounding space, case-insensitively.
pub fn normalize_code(code: &str) -> String {
    code.trim().replace('.', "").to_uppercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodeConfig {
    pub primary: Vec<CodeRef>,
    pub revision: Vec<CodeRef>,
}

impl Default for CodeConfig {
    fn default() -> Self {
        let refs = |sys: &str, codes: &[&str]| {
            codes
                .iter()
                .map(|c| CodeRef::new(sys, c))
                .collect::<Vec<_>>()
        };
        let mut primary = refs("ICD9", &["81.51"]);
        primary.extend(refs("CPT", &["27130", "27132"]));
        let mut revision = refs("ICD9", &["81.53", "00.70", "00.71", "00.72", "00.73"]);
        revision.extend(refs("CPT", &["27134", "27137", "27138"]));
        CodeConfig { primary, revision }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub record: PatientRecord,
    pub index_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub members: Vec<CohortMember>,
    pub coded_revisions: Vec<Event>,
}

/// Patients with at least one primary code; index date is the earliest.
/// Revision codes dated after the index become coded revision events.
pub fn select_cohort(records: &[PatientRecord], codes: &CodeConfig) -> Result<Cohort> {
    if codes.primary.is_empty() {
        return Err(Error::invalid(
            "code configuration lists no primary procedure codes",
        ));
    }
    let mut members = Vec::new();
    let mut coded_revisions = Vec::new();
    for r in records {
        let Some(index_date) = r
            .codes
            .iter()
            .filter(|e| codes.primary.iter().any(|c| c.matches(e)))
            .map(|e| e.date)
            .min()
        else {
            continue;
        };
        for e in r.codes.iter().filter(|e| e.date > index_date) {
            if codes.revision.iter().any(|c| c.matches(e)) {
                coded_revisions.push(Event {
                    patient_id: r.info.patient_id.clone(),
                    event_class: EventClass::Revision,
                    date: e.date,
                    source: EventSource::Coded,
                    provenance: format!(
                        "{}:{}",
                        e.code_system.trim().to_uppercase(),
                        e.code.trim()
                    ),
                });
            }
        }
        members.push(CohortMember {
            record: r.clone(),
            index_date,
        });
    }
    Ok(Cohort {
        members,
        coded_revisions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CciCategory {
    None,
    Low,
    Moderate,
    High,
}

impl CciCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            CciCategory::None => "none",
            CciCategory::Low => "low",
            CciCategory::Moderate => "moderate",
            CciCategory::High => "high",
        }
    }
}

pub fn categorize_cci(cci: i64) -> Result<CciCategory> {
    match cci {
        i64::MIN..=-1 => Err(Error::invalid(format!("negative CCI {cci}"))),
        0 => Ok(CciCategory::None),
        1 => Ok(CciCategory::Low),
        2 => Ok(CciCategory::Moderate),
        _ => Ok(CciCategory::High),
    }
}

/// Whole years between two dates.
pub fn age_years(birth: NaiveDate, at: NaiveDate) -> i32 {
    let mut age = at.year() - birth.year();
    if (at.month(), at.day()) < (birth.month(), birth.day()) {
        age -= 1;
    }
    age
}

pub fn age_band(age: i32) -> &'static str {
    match age {
        i32::MIN..=39 => "<40",
        40..=49 => "40-49",
        50..=59 => "50-59",
        60..=69 => "60-69",
        70..=79 => "70-79",
        _ => "80+",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeResult {
    pub events: Vec<Event>,
    pub matched: usize,
    /// Within-source duplicates removed before matching.
    pub duplicates_removed: usize,
}

fn dedupe(mut events: Vec<Event>) -> (Vec<Event>, usize) {
    events.sort();
    let before = events.len();
    events.dedup_by(|a, b| {
        a.patient_id == b.patient_id && a.event_class == b.event_class && a.date == b.date
    });
    let removed = before - events.len();
    (events, removed)
}

/// Row indices into the coded and text event lists.
type IndexPair = (Vec<usize>, Vec<usize>);

/// Merges coded and text events of the same patient and class whose dates
/// lie within `window_days`, closest pairs first; the merged event keeps
/// the earlier date and has source `Both`.
pub fn merge_events(coded: &[Event], text: &[Event], window_days: i64) -> MergeResult {
    let (coded, rc) = dedupe(coded.to_vec());
    let (text, rt) = dedupe(text.to_vec());
    let mut groups: BTreeMap<(&str, EventClass), IndexPair> = BTreeMap::new();
    for (i, e) in coded.iter().enumerate() {
        groups
            .entry((&e.patient_id, e.event_class))
            .or_default()
            .0
            .push(i);
    }
    for (i, e) in text.iter().enumerate() {
        groups
            .entry((&e.patient_id, e.event_class))
            .or_default()
            .1
            .push(i);
    }
    let mut used_c = vec![false; coded.len()];
    let mut used_t = vec![false; text.len()];
    let mut out = Vec::with_capacity(coded.len() + text.len());
    let mut matched = 0;
    for (cs, ts) in groups.values() {
        let mut pairs: Vec<(i64, usize, usize)> = cs
            .iter()
            .flat_map(|&i| ts.iter().map(move |&j| (i, j)))
            .map(|(i, j)| ((coded[i].date - text[j].date).num_days().abs(), i, j))
            .filter(|p| p.0 <= window_days)
            .collect();
        // indices follow sorted order, so this is a total, input-order-free ranking
        pairs.sort();
        for (_, i, j) in pairs {
            if used_c[i] || used_t[j] {
                continue;
            }
            used_c[i] = true;
            used_t[j] = true;
            matched += 1;
            out.push(Event {
                patient_id: coded[i].patient_id.clone(),
                event_class: coded[i].event_class,
                date: coded[i].date.min(text[j].date),
                source: EventSource::Both,
                provenance: format!("{}|{}", coded[i].provenance, text[j].provenance),
            });
        }
    }
    out.extend(
        coded
            .iter()
            .zip(&used_c)
            .filter(|(_, u)| !**u)
            .map(|(e, _)| e.clone()),
    );
    out.extend(
        text.iter()
            .zip(&used_t)
            .filter(|(_, u)| !**u)
            .map(|(e, _)| e.clone()),
    );
    out.sort_by(|a, b| {
        (&a.patient_id, a.date, a.event_class, a.source).cmp(&(
            &b.patient_id,
            b.date,
            b.event_class,
            b.source,
        ))
    });
    MergeResult {
        events: out,
        matched,
        duplicates_removed: rc + rt,
    }
}

/// Text events from positively classified candidates, dated by the note.
/// Implant-complication candidates take the complication's subcategory;
/// pain-anatomy candidates become pain events, at most one per note and
/// anatomy site.
pub fn events_from_candidates(
    candidates: &[RelationCandidate],
    positive: &dyn Fn(&str) -> bool,
) -> Vec<Event> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for c in candidates.iter().filter(|c| positive(&c.candidate_id)) {
        let class = match c.relation_type {
            RelationType::ImplantComplication => {
                let comp = if c.arg1.entity_type == EntityType::Complication {
                    &c.arg1
                } else {
                    &c.arg2
                };
                match comp.subcategory {
                    Some(s) => EventClass::from(s),
                    None => continue,
                }
            }
            RelationType::PainAnatomy => EventClass::Pain,
        };
        let dedupe_key = match class {
            EventClass::Pain => format!("{}|{}", c.note_id(), c.arg2.canonical_id),
            _ => format!("{}|{}|{}", c.note_id(), class, c.arg2.canonical_id),
        };
        if seen.insert(dedupe_key) {
            out.push(Event {
                patient_id: c.context.patient_id.clone(),
                event_class: class,
                date: c.context.note_datetime.date_naive(),
                source: EventSource::Text,
                provenance: c.candidate_id.clone(),
            });
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeClass {
    /// Any of the six complication classes.
    AnyComplication,
    Class(EventClass),
}

impl OutcomeClass {
    pub fn matches(self, c: EventClass) -> bool {
        match self {
            OutcomeClass::AnyComplication => c.is_complication(),
            OutcomeClass::Class(k) => k == c,
        }
    }
}

impl FromStr for OutcomeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().replace([' ', '-'], "_").as_str() {
            "any" | "any_complication" => Ok(OutcomeClass::AnyComplication),
            _ => s.parse().map(OutcomeClass::Class),
        }
    }
}

/// Which covariates enter the design, and their reference levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSpec {
    pub implant_system: bool,
    /// Defaults to the most frequent system.
    pub implant_reference: Option<String>,
    /// Drop patients without exactly one implant system when systems are used.
    pub single_implant_only: bool,
    pub age: bool,
    pub sex: bool,
    pub race: bool,
    pub ethnicity: bool,
    pub cci: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec {
            implant_system: true,
            implant_reference: None,
            single_implant_only: true,
            age: true,
            sex: true,
            race: true,
            ethnicity: true,
            cci: true,
        }
    }
}

impl CovariateSpec {
    pub fn none() -> Self {
        CovariateSpec {
            implant_system: false,
            implant_reference: None,
            single_implant_only: false,
            age: false,
            sex: false,
            race: false,
            ethnicity: false,
            cci: false,
        }
    }
}

pub const UNKNOWN_LEVEL: &str = "Unknown";

/// Categorical levels of a cohort member, keyed by covariate name. Missing
/// values become the "Unknown" level.
pub fn covariate_levels(m: &CohortMember) -> BTreeMap<String, String> {
    let info = &m.record.info;
    let or_unknown = |v: &Option<String>| {
        v.as_deref()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .unwrap_or(UNKNOWN_LEVEL)
            .to_string()
    };
    let systems = m.record.implant_systems();
    let mut out = BTreeMap::new();
    out.insert(
        "implant_system".to_string(),
        match systems.len() {
            1 => systems[0].clone(),
            0 => UNKNOWN_LEVEL.to_string(),
            _ => "Multiple".to_string(),
        },
    );
    out.insert(
        "age_band".to_string(),
        info.birth_date
            .map_or(UNKNOWN_LEVEL, |b| age_band(age_years(b, m.index_date)))
            .to_string(),
    );
    out.insert("sex".to_string(), or_unknown(&info.sex));
    out.insert("race".to_string(), or_unknown(&info.race));
    out.insert("ethnicity".to_string(), or_unknown(&info.ethnicity));
    out.insert(
        "cci".to_string(),
        info.cci
            .and_then(|c| categorize_cci(c).ok())
            .map_or(UNKNOWN_LEVEL, CciCategory::as_str)
            .to_string(),
    );
    out
}

/// Builds the one-hot design for the covariates selected in `spec`.
pub fn covariate_design(
    levels: &[BTreeMap<String, String>],
    spec: &CovariateSpec,
) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut add = |key: &str, reference: Option<&str>| {
        let values: Vec<String> = levels.iter().map(|l| l[key].clone()).collect();
        let enc = encode_categorical(key, &values, reference);
        names.extend(enc.names);
        cols.extend(enc.columns);
    };
    if spec.implant_system {
        add("implant_system", spec.implant_reference.as_deref());
    }
    if spec.age {
        add("age_band", Some("40-49"));
    }
    if spec.sex {
        add("sex", None);
    }
    if spec.race {
        add("race", None);
    }
    if spec.ethnicity {
        add("ethnicity", None);
    }
    if spec.cci {
        add("cci", Some("none"));
    }
    let n = levels.len();
    let rows = (0..n)
        .map(|i| cols.iter().map(|c| c[i]).collect())
        .collect();
    (names, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSubject {
    pub patient_id: String,
    /// Days from index surgery.
    pub time: f64,
    pub event: bool,
    pub x: Vec<f64>,
    pub levels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    pub columns: Vec<String>,
    pub subjects: Vec<SurvivalSubject>,
    pub excluded_nonpositive_time: usize,
    pub excluded_implant_count: usize,
}

impl SurvivalDataset {
    /// Dataset without covariates, for tests and simple curves.
    pub fn from_times(times: &[f64], events: &[bool], groups: Option<&[&str]>) -> Self {
        let subjects = times
            .iter()
            .zip(events)
            .enumerate()
            .map(|(i, (&t, &e))| {
                let mut levels = BTreeMap::new();
                if let Some(g) = groups {
                    levels.insert("group".to_string(), g[i].to_string());
                }
                SurvivalSubject {
                    patient_id: format!("s{i}"),
                    time: t,
                    event: e,
                    x: vec![],
                    levels,
                }
            })
            .collect();
        SurvivalDataset {
            columns: vec![],
            subjects,
            excluded_nonpositive_time: 0,
            excluded_implant_count: 0,
        }
    }

    pub fn with_covariates(mut self, columns: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        for (s, x) in self.subjects.iter_mut().zip(rows) {
            s.x = x;
        }
        self.columns = columns;
        self
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }
}

fn first_event_dates(events: &[Event], outcome: OutcomeClass) -> HashMap<&str, Vec<NaiveDate>> {
    let mut by_patient: HashMap<&str, Vec<NaiveDate>> = HashMap::new();
    for e in events.iter().filter(|e| outcome.matches(e.event_class)) {
        by_patient.entry(&e.patient_id).or_default().push(e.date);
    }
    for v in by_patient.values_mut() {
        v.sort();
    }
    by_patient
}

fn restricted_members<'a>(
    cohort: &'a Cohort,
    spec: &CovariateSpec,
) -> (Vec<&'a CohortMember>, usize) {
    let mut dropped = 0;
    let members = cohort
        .members
        .iter()
        .filter(|m| {
            let keep = !(spec.implant_system && spec.single_implant_only)
                || m.record.implant_systems().len() == 1;
            dropped += usize::from(!keep);
            keep
        })
        .collect();
    (members, dropped)
}

/// Time from index surgery to the first matching event on or after the
/// index date (event) or to last contact (censored). Subjects whose time
/// is not positive are dropped and counted.
pub fn build_survival_dataset(
    cohort: &Cohort,
    events: &[Event],
    outcome: OutcomeClass,
    spec: &CovariateSpec,
) -> Result<SurvivalDataset> {
    let firsts = first_event_dates(events, outcome);
    let (members, excluded_implant_count) = restricted_members(cohort, spec);
    let mut kept = Vec::new();
    let mut nonpositive = 0;
    for m in members {
        let first = firsts
            .get(m.record.info.patient_id.as_str())
            .and_then(|ds| ds.iter().find(|d| **d >= m.index_date));
        let (end, event) = match first {
            Some(d) => (*d, true),
            None => (m.record.info.last_contact_date, false),
        };
        let time = (end - m.index_date).num_days();
        if time <= 0 {
            nonpositive += 1;
            continue;
        }
        kept.push((m, time as f64, event));
    }
    if nonpositive > 0 {
        log::warn!("{nonpositive} subjects with nonpositive follow-up time excluded");
    }
    let levels: Vec<BTreeMap<String, String>> =
        kept.iter().map(|(m, _, _)| covariate_levels(m)).collect();
    let (columns, rows) = covariate_design(&levels, spec);
    let subjects = kept
        .into_iter()
        .zip(rows)
        .zip(levels)
        .map(|(((m, time, event), x), levels)| SurvivalSubject {
            patient_id: m.record.info.patient_id.clone(),
            time,
            event,
            x,
            levels,
        })
        .collect();
    Ok(SurvivalDataset {
        columns,
        subjects,
        excluded_nonpositive_time: nonpositive,
        excluded_implant_count,
    })
}

/// Per-patient event counts in a post-index window, with follow-up exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDataset {
    pub patient_ids: Vec<String>,
    pub counts: Vec<u64>,
    /// Years of follow-up inside the window.
    pub exposure: Vec<f64>,
    /// Events of the same class in the equal-length window before index.
    pub baseline_counts: Vec<u64>,
    pub levels: Vec<BTreeMap<String, String>>,
}

pub fn build_count_dataset(
    cohort: &Cohort,
    events: &[Event],
    class: EventClass,
    spec: &CovariateSpec,
    window_days: i64,
) -> CountDataset {
    let (members, _) = restricted_members(cohort, spec);
    let mut by_patient: HashMap<&str, Vec<NaiveDate>> = HashMap::new();
    for e in events.iter().filter(|e| e.event_class == class) {
        by_patient.entry(&e.patient_id).or_default().push(e.date);
    }
    let mut out = CountDataset {
        patient_ids: vec![],
        counts: vec![],
        exposure: vec![],
        baseline_counts: vec![],
        levels: vec![],
    };
    for m in members {
        let follow = (m.record.info.last_contact_date - m.index_date)
            .num_days()
            .clamp(0, window_days);
        if follow == 0 {
            continue;
        }
        let dates = by_patient
            .get(m.record.info.patient_id.as_str())
            .map_or(&[][..], Vec::as_slice);
        let days = |d: &NaiveDate| (*d - m.index_date).num_days();
        out.patient_ids.push(m.record.info.patient_id.clone());
        out.counts.push(
            dates
                .iter()
                .filter(|d| (1..=follow).contains(&days(d)))
                .count() as u64,
        );
        out.baseline_counts.push(
            dates
                .iter()
                .filter(|d| (-window_days..0).contains(&days(d)))
                .count() as u64,
        );
        out.exposure.push(follow as f64 / 365.0);
        out.levels.push(covariate_levels(m));
    }
    out
}

/// Event rate per follow-up year for patients with and without a coded
/// revision; for revised patients follow-up stops at the first revision.
pub fn rates_by_revision(
    cohort: &Cohort,
    events: &[Event],
    class: EventClass,
) -> (Vec<f64>, Vec<f64>) {
    let mut revision: HashMap<&str, NaiveDate> = HashMap::new();
    for e in &cohort.coded_revisions {
        revision
            .entry(&e.patient_id)
            .and_modify(|d| *d = (*d).min(e.date))
            .or_insert(e.date);
    }
    let mut by_patient: HashMap<&str, Vec<NaiveDate>> = HashMap::new();
    for e in events.iter().filter(|e| e.event_class == class) {
        by_patient.entry(&e.patient_id).or_default().push(e.date);
    }
    let (mut revised, mut other) = (Vec::new(), Vec::new());
    for m in &cohort.members {
        let id = m.record.info.patient_id.as_str();
        let end = revision
            .get(id)
            .copied()
            .unwrap_or(m.record.info.last_contact_date);
        let days = (end - m.index_date).num_days();
        if days <= 0 {
            continue;
        }
        let n = by_patient.get(id).map_or(0, |ds| {
            ds.iter()
                .filter(|d| **d > m.index_date && **d <= end)
                .count()
        });
        let rate = n as f64 / (days as f64 / 365.0);
        if revision.contains_key(id) {
            revised.push(rate);
        } else {
            other.push(rate);
        }
    }
    (revised, other)
}


/// One row of the implant-system forest table; the reference system has
/// no CI or p value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub system: String,
    pub n_patients: usize,
    pub n_events: usize,
    pub person_years: f64,
    #[serde(rename = "HR")]
    pub hazard_ratio: f64,
    #[serde(rename = "CI_low")]
    pub ci_low: Option<f64>,
    #[serde(rename = "CI_high")]
    pub ci_high: Option<f64>,
    pub p: Option<f64>,
}

pub fn forest_rows(ds: &SurvivalDataset, fit: &CoxFit) -> Vec<ForestRow> {
    let mut by_system: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for s in &ds.subjects {
        let key = s
            .levels
            .get("implant_system")
            .map_or(UNKNOWN_LEVEL, String::as_str);
        let e = by_system.entry(key).or_default();
        e.0 += 1;
        e.1 += usize::from(s.event);
        e.2 += s.time / 365.25;
    }
    by_system
        .into_iter()
        .map(|(system, (n_patients, n_events, person_years))| {
            let coef = fit
                .coefficients
                .iter()
                .find(|c| c.name == format!("implant_system={system}"));
            ForestRow {
                system: system.to_string(),
                n_patients,
                n_events,
                person_years,
                hazard_ratio: coef.map_or(1.0, |c| c.hazard_ratio),
                ci_low: coef.map(|c| c.ci_low),
                ci_high: coef.map(|c| c.ci_high),
                p: coef.map(|c| c.p_value),
            }
        })
        .collect()
}

pub fn write_forest_csv<W: Write>(rows: &[ForestRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
