//! Dictionary tagging, ConText-style attributes and within-sentence
//! relation candidates.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{tokenize, DateMention, Direction, Document, Sentence, Token};
use crate::error::{Error, Result};

pub mod fixtures {
    //! Bundled mini dictionaries and lexicons, used by tests, the synthetic
    //! corpus generator and as CLI defaults.
    pub const PAIN: &str = include_str!("../resources/dictionaries/pain.tsv");
    pub const ANATOMY: &str = include_str!("../resources/dictionaries/anatomy.tsv");
    pub const COMPLICATIONS: &str = include_str!("../resources/dictionaries/complications.tsv");
    pub const IMPLANTS: &str = include_str!("../resources/dictionaries/implants.tsv");
    pub const TRIGGERS: &str = include_str!("../resources/triggers.tsv");
    pub const IMPLANT_CATALOG: &str = include_str!("../resources/implant_catalog.tsv");
    pub const MANUFACTURER_ALIASES: &str = include_str!("../resources/manufacturer_aliases.tsv");
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Implant,
    Complication,
    Pain,
    Anatomy,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [
        EntityType::Implant,
        EntityType::Complication,
        EntityType::Pain,
        EntityType::Anatomy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Implant => "implant",
            EntityType::Complication => "complication",
            EntityType::Pain => "pain",
            EntityType::Anatomy => "anatomy",
        }
    }
}

impl FromStr for EntityType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown entity type {s:?}")))
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplicationCategory {
    Revision,
    ComponentWear,
    MechanicalFailure,
    ParticleDisease,
    RadiographicAbnormality,
    Infection,
}

impl ComplicationCategory {
    pub const ALL: [ComplicationCategory; 6] = [
        ComplicationCategory::Revision,
        ComplicationCategory::ComponentWear,
        ComplicationCategory::MechanicalFailure,
        ComplicationCategory::ParticleDisease,
        ComplicationCategory::RadiographicAbnormality,
        ComplicationCategory::Infection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComplicationCategory::Revision => "revision",
            ComplicationCategory::ComponentWear => "component wear",
            ComplicationCategory::MechanicalFailure => "mechanical failure",
            ComplicationCategory::ParticleDisease => "particle disease",
            ComplicationCategory::RadiographicAbnormality => "radiographic abnormality",
            ComplicationCategory::Infection => "infection",
        }
    }
}

impl FromStr for ComplicationCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('_', " ").to_lowercase();
        ComplicationCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown complication subcategory {s:?}")))
    }
}

/// Lowercased, token-normalized lookup key shared by dictionaries and triggers.
pub fn term_key(term: &str) -> String {
    tokenize(term)
        .iter()
        .map(|t| t.text.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens_key(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.text.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictEntry {
    pub term: String,
    pub canonical_id: String,
    pub entity_type: EntityType,
    pub subcategory: Option<ComplicationCategory>,
    /// False for variants produced by expansion.
    pub explicit: bool,
    pub line: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionOptions {
    pub strip_punctuation: bool,
    pub plurals: bool,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        ExpansionOptions {
            strip_punctuation: true,
            plurals: true,
        }
    }
}

impl ExpansionOptions {
    pub fn none() -> Self {
        ExpansionOptions {
            strip_punctuation: false,
            plurals: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dictionary {
    pub source: String,
    pub version: String,
    entries: HashMap<String, DictEntry>,
    max_tokens: usize,
}

impl Dictionary {
    pub fn load(path: impl AsRef<Path>, expansion: ExpansionOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut dict = Self::parse(&text, expansion)?;
        if dict.source.is_empty() {
            dict.source = path.display().to_string();
        }
        Ok(dict)
    }

    /// Tab-separated `term, canonical_id, entity_type[, subcategory]`.
    /// `# source:` and `# version:` comment lines fill the metadata.
    pub fn parse(text: &str, expansion: ExpansionOptions) -> Result<Self> {
        let mut dict = Dictionary::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("source:") {
                    dict.source = v.trim().to_string();
                } else if let Some(v) = comment.strip_prefix("version:") {
                    dict.version = v.trim().to_string();
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let bad = |msg: String| Error::MalformedRecord {
                line: line_no,
                field: None,
                message: msg,
            };
            if cols.len() < 3 {
                return Err(bad(format!(
                    "expected at least 3 tab-separated columns, got {}",
                    cols.len()
                )));
            }
            let (term, canonical_id) = (cols[0], cols[1]);
            if term.is_empty() || term_key(term).is_empty() {
                return Err(bad("empty term".into()));
            }
            if canonical_id.is_empty() {
                return Err(bad("empty canonical_id".into()));
            }
            let entity_type: EntityType = cols[2].parse().map_err(|e: Error| bad(e.to_string()))?;
            let subcategory = match cols.get(3).filter(|s| !s.is_empty()) {
                Some(s) => Some(
                    s.parse::<ComplicationCategory>()
                        .map_err(|e| bad(e.to_string()))?,
                ),
                None => None,
            };
            if (entity_type == EntityType::Complication) != subcategory.is_some() {
                return Err(bad(format!(
                    "subcategory is required for complications and forbidden otherwise (term {term:?})"
                )));
            }
            dict.insert_explicit(DictEntry {
                term: term.to_string(),
                canonical_id: canonical_id.to_string(),
                entity_type,
                subcategory,
                explicit: true,
                line: line_no,
            })?;
        }
        dict.expand(expansion);
        Ok(dict)
    }

    fn insert_explicit(&mut self, entry: DictEntry) -> Result<()> {
        let key = term_key(&entry.term);
        if let Some(prev) = self.entries.get(&key) {
            if prev.entity_type != entry.entity_type {
                return Err(Error::DictionaryConflict {
                    term: entry.term,
                    first_line: prev.line,
                    first: prev.entity_type.to_string(),
                    second_line: entry.line,
                    second: entry.entity_type.to_string(),
                });
            }
            log::warn!(
                "duplicate dictionary term {:?} at line {}; keeping line {}",
                entry.term,
                entry.line,
                prev.line
            );
            return Ok(());
        }
        self.max_tokens = self.max_tokens.max(key.split(' ').count());
        self.entries.insert(key, entry);
        Ok(())
    }

    fn expand(&mut self, opts: ExpansionOptions) {
        let mut explicit: Vec<DictEntry> = self.entries.values().cloned().collect();
        explicit.sort_by_key(|e| e.line);
        for e in explicit {
            let mut variants = Vec::new();
            if opts.strip_punctuation {
                let spaced: String = e
                    .term
                    .chars()
                    .map(|c| {
                        if c.is_alphanumeric() || c.is_whitespace() {
                            c
                        } else {
                            ' '
                        }
                    })
                    .collect();
                let squeezed: String = e
                    .term
                    .chars()
                    .filter(|c| c.is_alphanumeric() || c.is_whitespace())
                    .collect();
                variants.push(spaced);
                variants.push(squeezed);
            }
            if opts.plurals {
                let last = e.term.split_whitespace().last().unwrap_or_default();
                if last.chars().all(char::is_alphabetic) && !last.to_lowercase().ends_with('s') {
                    variants.push(format!("{}s", e.term));
                }
            }
            for v in variants {
                let key = term_key(&v);
                if key.is_empty() || self.entries.contains_key(&key) {
                    continue;
                }
                self.max_tokens = self.max_tokens.max(key.split(' ').count());
                self.entries.insert(
                    key,
                    DictEntry {
                        term: v,
                        explicit: false,
                        ..e.clone()
                    },
                );
            }
        }
    }

    pub fn get(&self, term: &str) -> Option<&DictEntry> {
        self.entries.get(&term_key(term))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DictEntry> {
        self.entries.values()
    }

    /// Explicit entries in file order.
    pub fn explicit_entries(&self) -> Vec<&DictEntry> {
        let mut v: Vec<&DictEntry> = self.entries.values().filter(|e| e.explicit).collect();
        v.sort_by_key(|e| e.line);
        v
    }

    pub fn fixture(text: &str) -> Self {
        Self::parse(text, ExpansionOptions::default()).expect("bundled dictionary is valid")
    }

    /// The four bundled mini dictionaries.
    pub fn bundled() -> Vec<Dictionary> {
        [
            fixtures::PAIN,
            fixtures::ANATOMY,
            fixtures::COMPLICATIONS,
            fixtures::IMPLANTS,
        ]
        .into_iter()
        .map(Dictionary::fixture)
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Negated,
    Historical,
    Hypothetical,
}

impl Attribute {
    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Negated => "negated",
            Attribute::Historical => "historical",
            Attribute::Hypothetical => "hypothetical",
        }
    }
}

impl FromStr for Attribute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "negation" | "negated" => Ok(Attribute::Negated),
            "historical" | "history" => Ok(Attribute::Historical),
            "hypothetical" => Ok(Attribute::Hypothetical),
            other => Err(Error::invalid(format!(
                "unknown trigger category {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub sentence_index: usize,
    pub start: usize,
    pub end: usize,
    /// Token range within the sentence, end exclusive.
    pub token_start: usize,
    pub token_end: usize,
    pub surface: String,
    pub entity_type: EntityType,
    pub canonical_id: String,
    pub subcategory: Option<ComplicationCategory>,
    pub attributes: BTreeSet<Attribute>,
}

impl EntityMention {
    pub fn has(&self, attr: Attribute) -> bool {
        self.attributes.contains(&attr)
    }
}

/// Laterality and position words absorbed into anatomy spans.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AnatomyPositionRules {
    pattern: Regex,
}

impl AnatomyPositionRules {
    pub fn new(pattern: &str) -> Result<Self> {
        let anchored = format!("(?i)^(?:{pattern})$");
        Regex::new(&anchored)
            .map(|pattern| AnatomyPositionRules { pattern })
            .map_err(|e| Error::invalid(format!("bad anatomy position pattern: {e}")))
    }

    pub fn is_modifier(&self, token: &str) -> bool {
        self.pattern.is_match(token)
    }

    fn source(&self) -> String {
        let s = self.pattern.as_str();
        s.strip_prefix("(?i)^(?:")
            .and_then(|s| s.strip_suffix(")$"))
            .unwrap_or(s)
            .to_string()
    }
}

impl Default for AnatomyPositionRules {
    fn default() -> Self {
        Self::new(
            "left|right|bilateral|lateral|medial|proximal|distal|anterior|posterior|superior|inferior|r|l|rt|lt",
        )
        .expect("default position pattern compiles")
    }
}

impl TryFrom<String> for AnatomyPositionRules {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<AnatomyPositionRules> for String {
    fn from(r: AnatomyPositionRules) -> Self {
        r.source()
    }
}

/// Longest-match dictionary tagger over one or more dictionaries.
#[derive(Debug, Clone)]
pub struct Tagger {
    index: HashMap<String, Vec<DictEntry>>,
    max_tokens: usize,
    position_rules: AnatomyPositionRules,
}

impl Tagger {
    pub fn new(dictionaries: &[Dictionary], position_rules: AnatomyPositionRules) -> Self {
        let mut index: HashMap<String, Vec<DictEntry>> = HashMap::new();
        let mut max_tokens = 0;
        for d in dictionaries {
            max_tokens = max_tokens.max(d.max_tokens);
            for (key, e) in &d.entries {
                let slot = index.entry(key.clone()).or_default();
                if !slot.iter().any(|x| x.entity_type == e.entity_type) {
                    slot.push(e.clone());
                }
            }
        }
        Tagger {
            index,
            max_tokens,
            position_rules,
        }
    }

    pub fn bundled() -> Self {
        Self::new(&Dictionary::bundled(), AnatomyPositionRules::default())
    }

    fn lookup(&self, key: &str, ty: EntityType) -> Option<&DictEntry> {
        self.index
            .get(key)
            .and_then(|v| v.iter().find(|e| e.entity_type == ty))
    }

    /// Left-to-right, longest match first, per entity type. Same-type mentions
    /// never overlap; mentions of different types may.
    pub fn tag(&self, sentence: &Sentence) -> Vec<EntityMention> {
        let toks = &sentence.tokens;
        let mut out = Vec::new();
        for ty in EntityType::ALL {
            let mut i = 0;
            let mut typed: Vec<EntityMention> = Vec::new();
            while i < toks.len() {
                let longest = (1..=self.max_tokens.min(toks.len() - i))
                    .rev()
                    .find_map(|n| {
                        self.lookup(&tokens_key(&toks[i..i + n]), ty)
                            .map(|e| (n, e))
                    });
                match longest {
                    Some((n, entry)) => {
                        typed.push(make_mention(sentence, i, i + n, entry));
                        i += n;
                    }
                    None => i += 1,
                }
            }
            if ty == EntityType::Anatomy {
                self.absorb_modifiers(sentence, &mut typed);
            }
            out.extend(typed);
        }
        out.sort_by_key(|m| (m.start, m.end, m.entity_type));
        out
    }

    fn absorb_modifiers(&self, sentence: &Sentence, mentions: &mut [EntityMention]) {
        let mut prev_end = 0;
        for m in mentions.iter_mut() {
            let mut ts = m.token_start;
            while ts > prev_end
                && self
                    .position_rules
                    .is_modifier(&sentence.tokens[ts - 1].text)
            {
                ts -= 1;
            }
            if ts != m.token_start {
                m.token_start = ts;
                m.start = sentence.tokens[ts].start;
                m.surface = slice_sentence(sentence, m.start, m.end).to_string();
            }
            prev_end = m.token_end;
        }
    }
}

fn slice_sentence(sentence: &Sentence, start: usize, end: usize) -> &str {
    &sentence.text[start - sentence.start..end - sentence.start]
}

fn make_mention(sentence: &Sentence, ts: usize, te: usize, entry: &DictEntry) -> EntityMention {
    let start = sentence.tokens[ts].start;
    let end = sentence.tokens[te - 1].end;
    EntityMention {
        sentence_index: sentence.index,
        start,
        end,
        token_start: ts,
        token_end: te,
        surface: slice_sentence(sentence, start, end).to_string(),
        entity_type: entry.entity_type,
        canonical_id: entry.canonical_id.clone(),
        subcategory: entry.subcategory,
        attributes: BTreeSet::new(),
    }
}

pub fn tag_entities(
    sentence: &Sentence,
    dictionaries: &[Dictionary],
    position_rules: &AnatomyPositionRules,
) -> Vec<EntityMention> {
    Tagger::new(dictionaries, position_rules.clone()).tag(sentence)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeDirection {
    Forward,
    Backward,
    Bidirectional,
}

impl FromStr for ScopeDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "forward" => Ok(ScopeDirection::Forward),
            "backward" => Ok(ScopeDirection::Backward),
            "bidirectional" | "both" => Ok(ScopeDirection::Bidirectional),
            other => Err(Error::invalid(format!(
                "unknown trigger direction {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerEntry {
    pub phrase: String,
    pub category: Attribute,
    pub direction: ScopeDirection,
    pub terminators: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<TriggerEntry>", into = "Vec<TriggerEntry>")]
pub struct TriggerLexicon {
    entries: Vec<TriggerEntry>,
    index: HashMap<String, usize>,
    max_tokens: usize,
}

impl TryFrom<Vec<TriggerEntry>> for TriggerLexicon {
    type Error = Error;
    fn try_from(v: Vec<TriggerEntry>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TriggerLexicon> for Vec<TriggerEntry> {
    fn from(l: TriggerLexicon) -> Self {
        l.entries
    }
}

impl TriggerLexicon {
    pub fn new(entries: Vec<TriggerEntry>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut max_tokens = 0;
        for (i, e) in entries.iter().enumerate() {
            let key = term_key(&e.phrase);
            if key.is_empty() {
                return Err(Error::invalid("empty trigger phrase"));
            }
            max_tokens = max_tokens.max(key.split(' ').count());
            index.entry(key).or_insert(i);
        }
        Ok(TriggerLexicon {
            entries,
            index,
            max_tokens,
        })
    }

    /// Tab-separated `trigger, category, direction, terminators`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::MalformedRecord {
                line: i + 1,
                field: None,
                message: msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(bad("expected trigger, category, direction".into()));
            }
            let terminators = cols
                .get(3)
                .map(|t| {
                    t.split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect()
                })
                .unwrap_or_default();
            entries.push(TriggerEntry {
                phrase: cols[0].trim().to_string(),
                category: cols[1].parse().map_err(|e: Error| bad(e.to_string()))?,
                direction: cols[2].parse().map_err(|e: Error| bad(e.to_string()))?,
                terminators,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn bundled() -> Self {
        Self::parse(fixtures::TRIGGERS).expect("bundled trigger lexicon is valid")
    }

    pub fn entries(&self) -> &[TriggerEntry] {
        &self.entries
    }

    /// Longest-match, non-overlapping trigger occurrences.
    pub fn find(&self, tokens: &[Token]) -> Vec<TriggerHit> {
        let mut hits = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let found = (1..=self.max_tokens.min(tokens.len() - i))
                .rev()
                .find_map(|n| {
                    self.index
                        .get(&tokens_key(&tokens[i..i + n]))
                        .map(|&e| (n, e))
                });
            match found {
                Some((n, e)) => {
                    hits.push(TriggerHit {
                        token_start: i,
                        token_end: i + n,
                        entry: e,
                        category: self.entries[e].category,
                        direction: self.entries[e].direction,
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        hits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerHit {
    pub token_start: usize,
    pub token_end: usize,
    pub entry: usize,
    pub category: Attribute,
    pub direction: ScopeDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    /// Trigger scope, in tokens.
    pub window: usize,
    /// Canonical headers whose mentions are historical.
    pub historical_headers: Vec<String>,
    /// A past date at least this many days before the note marks the
    /// sentence's mentions historical.
    pub historical_min_days: i64,
    /// Terminators applied to every trigger in addition to its own.
    pub global_terminators: Vec<String>,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            window: 6,
            historical_headers: vec![
                "PAST MEDICAL HISTORY".into(),
                "PAST SURGICAL HISTORY".into(),
            ],
            historical_min_days: 30,
            global_terminators: [
                "but",
                "however",
                "although",
                "though",
                "except",
                "aside from",
                "yet",
                ";",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

fn contains_phrase(tokens: &[Token], phrase_keys: &[Vec<String>]) -> bool {
    let lower: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    phrase_keys.iter().any(|p| {
        !p.is_empty() && p.len() <= lower.len() && lower.windows(p.len()).any(|w| w == p.as_slice())
    })
}

/// Returns the mentions with context attributes added. Rules: trigger scope
/// (within `window` tokens on the trigger's side, before a terminator),
/// historical section headers, and old past dates in the same sentence.
/// Attributes are only ever added.
pub fn apply_context(
    sentence: &Sentence,
    mentions: &[EntityMention],
    lexicon: &TriggerLexicon,
    section_header: Option<&str>,
    dates: &[DateMention],
    config: &ContextConfig,
) -> Vec<EntityMention> {
    let hits = lexicon.find(&sentence.tokens);
    apply_context_with_hits(
        sentence,
        mentions,
        lexicon,
        &hits,
        section_header,
        dates,
        config,
    )
}

fn apply_context_with_hits(
    sentence: &Sentence,
    mentions: &[EntityMention],
    lexicon: &TriggerLexicon,
    hits: &[TriggerHit],
    section_header: Option<&str>,
    dates: &[DateMention],
    config: &ContextConfig,
) -> Vec<EntityMention> {
    let global: Vec<Vec<String>> = config
        .global_terminators
        .iter()
        .map(|t| term_key(t).split(' ').map(str::to_string).collect())
        .collect();
    let in_historical_section = section_header.is_some_and(|h| {
        config
            .historical_headers
            .iter()
            .any(|x| x.eq_ignore_ascii_case(h))
    });
    let old_date = dates.iter().any(|d| {
        d.start >= sentence.start
            && d.end <= sentence.end
            && d.delta_bin.direction == Direction::Past
            && -d.delta_days >= config.historical_min_days
            && d.delta_days != 0
    });

    mentions
        .iter()
        .map(|m| {
            let mut m = m.clone();
            for hit in hits {
                if hit.token_start < m.token_end && m.token_start < hit.token_end {
                    continue;
                }
                let entry = &lexicon.entries[hit.entry];
                let mut terms: Vec<Vec<String>> = entry
                    .terminators
                    .iter()
                    .map(|t| term_key(t).split(' ').map(str::to_string).collect())
                    .collect();
                terms.extend(global.iter().cloned());
                let forward = matches!(
                    hit.direction,
                    ScopeDirection::Forward | ScopeDirection::Bidirectional
                ) && m.token_start >= hit.token_end
                    && m.token_start < hit.token_end + config.window
                    && !contains_phrase(&sentence.tokens[hit.token_end..m.token_start], &terms);
                let backward = matches!(
                    hit.direction,
                    ScopeDirection::Backward | ScopeDirection::Bidirectional
                ) && m.token_end <= hit.token_start
                    && m.token_end + config.window > hit.token_start
                    && !contains_phrase(&sentence.tokens[m.token_end..hit.token_start], &terms);
                if forward || backward {
                    m.attributes.insert(hit.category);
                }
            }
            if in_historical_section || old_date {
                m.attributes.insert(Attribute::Historical);
            }
            m
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    #[serde(rename = "pain-anatomy")]
    PainAnatomy,
    #[serde(rename = "implant-complication")]
    ImplantComplication,
}

impl RelationType {
    pub const ALL: [RelationType; 2] =
        [RelationType::PainAnatomy, RelationType::ImplantComplication];

    /// (arg1 type, arg2 type).
    pub fn arg_types(self) -> (EntityType, EntityType) {
        match self {
            RelationType::PainAnatomy => (EntityType::Pain, EntityType::Anatomy),
            RelationType::ImplantComplication => (EntityType::Complication, EntityType::Implant),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::PainAnatomy => "pain-anatomy",
            RelationType::ImplantComplication => "implant-complication",
        }
    }
}

impl FromStr for RelationType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RelationType::ALL
            .into_iter()
            .find(|r| r.as_str() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown relation type {s:?}")))
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sentence with all the markup labeling functions and features read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub note_id: String,
    pub patient_id: String,
    pub note_datetime: DateTime<Utc>,
    pub sentence: Sentence,
    pub section_header: Option<String>,
    pub dates: Vec<DateMention>,
    pub triggers: Vec<TriggerHit>,
    pub mentions: Vec<EntityMention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationCandidate {
    pub candidate_id: String,
    pub relation_type: RelationType,
    pub arg1: EntityMention,
    pub arg2: EntityMention,
    pub context: Arc<TaggedSentence>,
}

impl RelationCandidate {
    pub fn note_id(&self) -> &str {
        &self.context.note_id
    }

    pub fn section_header(&self) -> Option<&str> {
        self.context.section_header.as_deref()
    }

    /// Token range strictly between the two arguments.
    pub fn between_range(&self) -> (usize, usize) {
        let (a, b) = if self.arg1.token_start <= self.arg2.token_start {
            (&self.arg1, &self.arg2)
        } else {
            (&self.arg2, &self.arg1)
        };
        let s = a.token_end.min(b.token_start);
        (s, b.token_start.max(s))
    }
}

pub fn candidate_id(
    note_id: &str,
    relation: RelationType,
    arg1: &EntityMention,
    arg2: &EntityMention,
) -> String {
    candidate_id_for_spans(
        note_id,
        relation,
        (arg1.start, arg1.end),
        (arg2.start, arg2.end),
    )
}

/// Same id from byte spans alone, for callers that know where entities sit
/// in the note text.
pub fn candidate_id_for_spans(
    note_id: &str,
    relation: RelationType,
    arg1: (usize, usize),
    arg2: (usize, usize),
) -> String {
    let mut h = Sha256::new();
    h.update(note_id.as_bytes());
    h.update(b"\x1f");
    h.update(relation.as_str().as_bytes());
    h.update(format!("\x1f{}:{}\x1f{}:{}", arg1.0, arg1.1, arg2.0, arg2.1).as_bytes());
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Typed Cartesian product of the sentence's mentions, ordered by arg1 span
/// then arg2 span.
pub fn generate_candidates(
    sentence: &Arc<TaggedSentence>,
    relation: RelationType,
) -> Vec<RelationCandidate> {
    let (t1, t2) = relation.arg_types();
    let mut a1: Vec<&EntityMention> = sentence
        .mentions
        .iter()
        .filter(|m| m.entity_type == t1)
        .collect();
    let mut a2: Vec<&EntityMention> = sentence
        .mentions
        .iter()
        .filter(|m| m.entity_type == t2)
        .collect();
    a1.sort_by_key(|m| (m.start, m.end));
    a2.sort_by_key(|m| (m.start, m.end));
    let mut out = Vec::with_capacity(a1.len() * a2.len());
    for x in &a1 {
        for y in &a2 {
            out.push(RelationCandidate {
                candidate_id: candidate_id(&sentence.note_id, relation, x, y),
                relation_type: relation,
                arg1: (*x).clone(),
                arg2: (*y).clone(),
                context: Arc::clone(sentence),
            });
        }
    }
    out
}

/// Bundles tagger, trigger lexicon and context rules to annotate documents.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub tagger: Tagger,
    pub triggers: TriggerLexicon,
    pub context: ContextConfig,
}

impl Extractor {
    pub fn new(tagger: Tagger, triggers: TriggerLexicon, context: ContextConfig) -> Self {
        Extractor {
            tagger,
            triggers,
            context,
        }
    }

    pub fn bundled() -> Self {
        Self::new(
            Tagger::bundled(),
            TriggerLexicon::bundled(),
            ContextConfig::default(),
        )
    }

    pub fn annotate_sentence(&self, doc: &Document, sentence: &Sentence) -> TaggedSentence {
        let header = doc.section_of(sentence).map(|s| s.canonical_header.clone());
        let dates: Vec<DateMention> = doc.dates_in(sentence).cloned().collect();
        let raw = self.tagger.tag(sentence);
        let hits = self.triggers.find(&sentence.tokens);
        let mentions = apply_context_with_hits(
            sentence,
            &raw,
            &self.triggers,
            &hits,
            header.as_deref(),
            &dates,
            &self.context,
        );
        TaggedSentence {
            note_id: doc.note.note_id.clone(),
            patient_id: doc.note.patient_id.clone(),
            note_datetime: doc.note.note_datetime,
            sentence: sentence.clone(),
            section_header: header,
            dates,
            triggers: hits,
            mentions,
        }
    }

    pub fn annotate(&self, doc: &Document) -> Vec<TaggedSentence> {
        doc.sentences
            .iter()
            .map(|s| self.annotate_sentence(doc, s))
            .collect()
    }
}
