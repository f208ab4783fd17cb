//! Implant canonicalization and comparison of extracted implants with a
//! registry snapshot.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{fixtures, EntityMention, EntityType, TaggedSentence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentRole {
    Acetabular,
    Femoral,
    Other,
}

impl ComponentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentRole::Acetabular => "acetabular",
            ComponentRole::Femoral => "femoral",
            ComponentRole::Other => "other",
        }
    }
}

impl FromStr for ComponentRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "acetabular" => Ok(ComponentRole::Acetabular),
            "femoral" => Ok(ComponentRole::Femoral),
            "other" => Ok(ComponentRole::Other),
            o => Err(Error::invalid(format!("unknown component role {o:?}"))),
        }
    }
}

impl fmt::Display for ComponentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub patient_id: String,
    pub surgery_date: NaiveDate,
    pub component_role: ComponentRole,
    pub manufacturer: String,
    pub model: String,
}

pub fn read_registry<R: Read>(r: R) -> Result<Vec<RegistryRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<RegistryRecord>().enumerate() {
        let rec = row?;
        if rec.manufacturer.trim().is_empty() || rec.model.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: k + 2,
                field: Some("manufacturer/model".into()),
                message: "manufacturer and model must be nonempty".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<Vec<RegistryRecord>> {
    let p = path.as_ref();
    read_registry(std::fs::File::open(p).map_err(|e| Error::io(p, e))?)
}

pub fn write_registry<W: Write>(records: &[RegistryRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalImplant {
    pub manufacturer: String,
    pub model: String,
    pub component_role: ComponentRole,
}

/// Implant canonical ids resolved to manufacturer/model, with manufacturer
/// aliases collapsed.
#[derive(Debug, Clone, Default)]
pub struct ImplantCatalog {
    by_id: HashMap<String, CanonicalImplant>,
    aliases: HashMap<String, String>,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').map(str::trim).collect()))
}

impl ImplantCatalog {
    /// `catalog`: canonical_id, manufacturer, model, component_role (tab
    /// separated). `aliases`: alias, canonical manufacturer.
    pub fn parse(catalog: &str, aliases: &str) -> Result<Self> {
        let mut out = ImplantCatalog::default();
        for (line, f) in data_lines(aliases) {
            if f.len() < 2 || f[0].is_empty() || f[1].is_empty() {
                return Err(Error::MalformedRecord {
                    line,
                    field: None,
                    message: "expected alias<TAB>manufacturer".into(),
                });
            }
            out.aliases.insert(f[0].to_lowercase(), f[1].to_string());
        }
        for (line, f) in data_lines(catalog) {
            if f.len() < 4 {
                return Err(Error::MalformedRecord {
                    line,
                    field: None,
                    message: "expected canonical_id, manufacturer, model, component_role".into(),
                });
            }
            let role = f[3].parse().map_err(|_| Error::MalformedRecord {
                line,
                field: Some("component_role".into()),
                message: format!("unknown role {:?}", f[3]),
            })?;
            let implant = CanonicalImplant {
                manufacturer: out.manufacturer(f[1]),
                model: f[2].to_string(),
                component_role: role,
            };
            out.by_id.insert(f[0].to_string(), implant);
        }
        Ok(out)
    }

    pub fn load(catalog: impl AsRef<Path>, aliases: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::parse(&read(catalog.as_ref())?, &read(aliases.as_ref())?)
    }

    pub fn bundled() -> Self {
        Self::parse(fixtures::IMPLANT_CATALOG, fixtures::MANUFACTURER_ALIASES)
            .expect("bundled catalog parses")
    }

    /// Canonical manufacturer name; unknown names pass through trimmed.
    pub fn manufacturer(&self, name: &str) -> String {
        let key = name.trim().to_lowercase();
        self.aliases
            .get(&key)
            .cloned()
            .unwrap_or_else(|| name.trim().to_string())
    }

    pub fn resolve(&self, canonical_id: &str) -> Option<&CanonicalImplant> {
        self.by_id.get(canonical_id)
    }

    pub fn canonicalize_implant(&self, mention: &EntityMention) -> Result<CanonicalImplant> {
        if mention.entity_type != EntityType::Implant {
            return Err(Error::invalid(format!(
                "{:?} is not an implant mention",
                mention.surface
            )));
        }
        self.resolve(&mention.canonical_id)
            .cloned()
            .ok_or_else(|| Error::UnknownCanonicalId(vec![mention.canonical_id.clone()]))
    }

    /// Registry-style record with the manufacturer collapsed through the aliases.
    pub fn normalize(&self, r: &RegistryRecord) -> RegistryRecord {
        RegistryRecord {
            manufacturer: self.manufacturer(&r.manufacturer),
            model: r.model.trim().to_string(),
            ..r.clone()
        }
    }
}

/// One record per (patient, component role, manufacturer, model) from the
/// implant mentions of tagged sentences, dated by the earliest note that
/// mentions it. Mentions whose canonical id is not in the catalog (generic
/// terms) are skipped and returned separately.
pub fn records_from_mentions(
    sentences: &[TaggedSentence],
    catalog: &ImplantCatalog,
) -> (Vec<RegistryRecord>, Vec<String>) {
    let mut earliest: BTreeMap<(String, ComponentRole, String, String), NaiveDate> =
        BTreeMap::new();
    let mut unresolved = Vec::new();
    for s in sentences {
        for m in s
            .mentions
            .iter()
            .filter(|m| m.entity_type == EntityType::Implant)
        {
            match catalog.canonicalize_implant(m) {
                Ok(c) => {
                    let key = (
                        s.patient_id.clone(),
                        c.component_role,
                        c.manufacturer,
                        c.model,
                    );
                    let d = s.note_datetime.date_naive();
                    earliest
                        .entry(key)
                        .and_modify(|e| *e = (*e).min(d))
                        .or_insert(d);
                }
                Err(_) => unresolved.push(m.canonical_id.clone()),
            }
        }
    }
    unresolved.sort();
    unresolved.dedup();
    let records = earliest
        .into_iter()
        .map(
            |((patient_id, component_role, manufacturer, model), surgery_date)| RegistryRecord {
                patient_id,
                surgery_date,
                component_role,
                manufacturer,
                model,
            },
        )
        .collect();
    (records, unresolved)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    Agreement,
    Conflict,
    MissingInRegistry,
    MissingInExtraction,
}

impl MatchStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchStatus::Agreement => "agreement",
            MatchStatus::Conflict => "conflict",
            MatchStatus::MissingInRegistry => "missing_in_registry",
            MatchStatus::MissingInExtraction => "missing_in_extraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyResult {
    pub patient_id: String,
    pub component_role: ComponentRole,
    pub extracted: Option<RegistryRecord>,
    pub registry: Option<RegistryRecord>,
    pub status: MatchStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReconciliationSummary {
    pub n_keys: usize,
    pub agreement: usize,
    pub conflict: usize,
    pub missing_in_registry: usize,
    pub missing_in_extraction: usize,
    pub agreement_fraction: f64,
    pub conflict_fraction: f64,
    /// Both missing statuses together.
    pub missingness_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconciliationReport {
    pub keys: Vec<KeyResult>,
    pub summary: ReconciliationSummary,
}

impl ReconciliationReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "patient_id",
            "component_role",
            "status",
            "extracted_date",
            "extracted_manufacturer",
            "extracted_model",
            "registry_date",
            "registry_manufacturer",
            "registry_model",
        ])?;
        let cols = |r: &Option<RegistryRecord>| match r {
            Some(r) => [
                r.surgery_date.to_string(),
                r.manufacturer.clone(),
                r.model.clone(),
            ],
            None => Default::default(),
        };
        for k in &self.keys {
            let mut row = vec![
                k.patient_id.clone(),
                k.component_role.to_string(),
                k.status.as_str().to_string(),
            ];
            row.extend(cols(&k.extracted));
            row.extend(cols(&k.registry));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

fn identity(r: &RegistryRecord) -> (String, String) {
    (r.manufacturer.to_lowercase(), r.model.to_lowercase())
}

/// Same ordering whichever side each record came from.
fn pair_key(
    a: &RegistryRecord,
    b: &RegistryRecord,
) -> (
    i64,
    NaiveDate,
    NaiveDate,
    (String, String),
    (String, String),
) {
    let diff = (a.surgery_date - b.surgery_date).num_days().abs();
    let (ia, ib) = (identity(a), identity(b));
    let (lo_d, hi_d) = if a.surgery_date <= b.surgery_date {
        (a.surgery_date, b.surgery_date)
    } else {
        (b.surgery_date, a.surgery_date)
    };
    let (lo_i, hi_i) = if ia <= ib { (ia, ib) } else { (ib, ia) };
    (diff, lo_d, hi_d, lo_i, hi_i)
}

/// Matches records on patient and component role with surgery dates within
/// `date_tolerance_days`, pairing closest dates first. Matched pairs agree
/// when manufacturer and model are equal (case-insensitive); unmatched
/// records are missing from the other source. Inputs should already be
/// normalized through the same catalog.
/// Row indices into the extracted and registry record lists.
type IndexPair = (Vec<usize>, Vec<usize>);

pub fn reconcile_registry(
    extracted: &[RegistryRecord],
    registry: &[RegistryRecord],
    date_tolerance_days: i64,
) -> ReconciliationReport {
    let mut groups: BTreeMap<(&str, ComponentRole), IndexPair> = BTreeMap::new();
    for (i, r) in extracted.iter().enumerate() {
        groups
            .entry((&r.patient_id, r.component_role))
            .or_default()
            .0
            .push(i);
    }
    for (i, r) in registry.iter().enumerate() {
        groups
            .entry((&r.patient_id, r.component_role))
            .or_default()
            .1
            .push(i);
    }
    let mut keys = Vec::new();
    for ((patient, role), (xs, ys)) in groups {
        let mut pairs: Vec<(usize, usize)> = xs
            .iter()
            .flat_map(|&i| ys.iter().map(move |&j| (i, j)))
            .filter(|&(i, j)| {
                (extracted[i].surgery_date - registry[j].surgery_date)
                    .num_days()
                    .abs()
                    <= date_tolerance_days
            })
            .collect();
        pairs.sort_by_cached_key(|&(i, j)| pair_key(&extracted[i], &registry[j]));
        let mut used_x = vec![false; extracted.len()];
        let mut used_y = vec![false; registry.len()];
        let mut group_keys = Vec::new();
        for (i, j) in pairs {
            if used_x[i] || used_y[j] {
                continue;
            }
            used_x[i] = true;
            used_y[j] = true;
            let status = if identity(&extracted[i]) == identity(&registry[j]) {
                MatchStatus::Agreement
            } else {
                MatchStatus::Conflict
            };
            group_keys.push(KeyResult {
                patient_id: patient.to_string(),
                component_role: role,
                extracted: Some(extracted[i].clone()),
                registry: Some(registry[j].clone()),
                status,
            });
        }
        for &i in xs.iter().filter(|&&i| !used_x[i]) {
            group_keys.push(KeyResult {
                patient_id: patient.to_string(),
                component_role: role,
                extracted: Some(extracted[i].clone()),
                registry: None,
                status: MatchStatus::MissingInRegistry,
            });
        }
        for &j in ys.iter().filter(|&&j| !used_y[j]) {
            group_keys.push(KeyResult {
                patient_id: patient.to_string(),
                component_role: role,
                extracted: None,
                registry: Some(registry[j].clone()),
                status: MatchStatus::MissingInExtraction,
            });
        }
        keys.extend(group_keys);
    }
    let count = |s: MatchStatus| keys.iter().filter(|k| k.status == s).count();
    let n = keys.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let (a, c, mr, me) = (
        count(MatchStatus::Agreement),
        count(MatchStatus::Conflict),
        count(MatchStatus::MissingInRegistry),
        count(MatchStatus::MissingInExtraction),
    );
    ReconciliationReport {
        summary: ReconciliationSummary {
            n_keys: n,
            agreement: a,
            conflict: c,
            missing_in_registry: mr,
            missing_in_extraction: me,
            agreement_fraction: frac(a),
            conflict_fraction: frac(c),
            missingness_fraction: frac(mr + me),
        },
        keys,
    }
}
