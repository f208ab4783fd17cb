//! Note ingestion and document markup: sentence splitting, tokenization,
//! section headers, and relative date bins.
//!
//! All spans are byte offsets into the note text, so `&text[start..end]`
//! always reproduces the stored surface string.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDate, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNKNOWN_SECTION: &str = "UNKNOWN";

const DEFAULT_HEADER_LEXICON: &str = include_str!("../resources/header_lexicon.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawNote {
    pub note_id: String,
    pub patient_id: String,
    pub note_datetime: DateTime<Utc>,
    pub note_type: String,
    pub text: String,
}

/// What to do with a record that fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnMalformed {
    #[default]
    Skip,
    Abort,
}

/// Streams notes from line-delimited JSON. Malformed records surface as
/// `Err(MalformedRecord)` items and iteration continues; a duplicate
/// `note_id` also surfaces as an error, which callers must treat as fatal.
pub struct NoteReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    seen: HashMap<String, usize>,
}

impl<R: BufRead> NoteReader<R> {
    pub fn new(reader: R) -> Self {
        NoteReader {
            lines: reader.lines(),
            line_no: 0,
            seen: HashMap::new(),
        }
    }
}

impl<R: BufRead> Iterator for NoteReader<R> {
    type Item = Result<RawNote>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(Error::MalformedRecord {
                        line: self.line_no,
                        field: None,
                        message: e.to_string(),
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let note = match parse_note_record(&line, self.line_no) {
                Ok(n) => n,
                Err(e) => return Some(Err(e)),
            };
            if let Some(&first_line) = self.seen.get(&note.note_id) {
                return Some(Err(Error::DuplicateNoteId {
                    note_id: note.note_id,
                    line: self.line_no,
                    first_line,
                }));
            }
            self.seen.insert(note.note_id.clone(), self.line_no);
            return Some(Ok(note));
        }
    }
}

fn parse_note_record(line: &str, line_no: usize) -> Result<RawNote> {
    let malformed = |field: Option<&str>, message: String| Error::MalformedRecord {
        line: line_no,
        field: field.map(str::to_string),
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed(None, format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(None, "record is not a JSON object".into()))?;
    let field = |name: &str| -> Result<String> {
        match obj.get(name) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(malformed(
                Some(name),
                format!("field {name:?} must be a string"),
            )),
            None => Err(malformed(Some(name), format!("missing field {name:?}"))),
        }
    };
    let note_id = field("note_id")?;
    if note_id.is_empty() {
        return Err(malformed(Some("note_id"), "note_id is empty".into()));
    }
    let patient_id = field("patient_id")?;
    let raw_dt = field("note_datetime")?;
    let note_datetime = parse_datetime(&raw_dt).ok_or_else(|| {
        malformed(
            Some("note_datetime"),
            format!("unparseable note_datetime {raw_dt:?}"),
        )
    })?;
    let note_type = field("note_type")?;
    let text = field("text")?;
    Ok(RawNote {
        note_id,
        patient_id,
        note_datetime,
        note_type,
        text,
    })
}

/// Accepts RFC 3339, naive `YYYY-MM-DDTHH:MM:SS` (taken as UTC) and bare dates.
pub fn parse_datetime(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(naive.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|n| n.and_utc())
}

#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub notes: Vec<RawNote>,
    /// Records dropped under [`OnMalformed::Skip`].
    pub skipped: Vec<Error>,
}

pub fn ingest_notes(path: impl AsRef<Path>, on_malformed: OnMalformed) -> Result<IngestOutcome> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), on_malformed)
}

pub fn ingest_reader<R: BufRead>(reader: R, on_malformed: OnMalformed) -> Result<IngestOutcome> {
    let mut out = IngestOutcome::default();
    for item in NoteReader::new(reader) {
        match item {
            Ok(note) => out.notes.push(note),
            Err(e @ Error::DuplicateNoteId { .. }) => return Err(e),
            Err(e) if on_malformed == OnMalformed::Abort => return Err(e),
            Err(e) => {
                log::warn!("skipping record: {e}");
                out.skipped.push(e);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub tokens: Vec<Token>,
    /// Index into [`Document::sections`].
    pub section: Option<usize>,
}

impl Sentence {
    /// Index of the first token starting at or after `offset`.
    pub fn token_at_or_after(&self, offset: usize) -> usize {
        self.tokens.partition_point(|t| t.start < offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpan {
    pub header_text: String,
    pub canonical_header: String,
    /// Span of the header line itself (empty for a synthetic UNKNOWN section).
    pub header_start: usize,
    pub header_end: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Past,
    Future,
}

/// A signed relative-time bucket. `bucket` indexes the scheme's ranges,
/// 0 being the closest to the note date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeltaBin {
    pub direction: Direction,
    pub bucket: usize,
}

/// Upper bounds (in days, inclusive) of each bucket; the final bucket is
/// open-ended. A delta exactly on a bound falls in the smaller bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinScheme {
    pub upper_bounds_days: Vec<i64>,
}

impl Default for BinScheme {
    fn default() -> Self {
        BinScheme {
            upper_bounds_days: vec![1, 7, 30, 365, 1825],
        }
    }
}

impl BinScheme {
    pub fn bin(&self, delta_days: i64) -> DeltaBin {
        let direction = if delta_days <= 0 {
            Direction::Past
        } else {
            Direction::Future
        };
        let magnitude = delta_days.abs();
        let bucket = self
            .upper_bounds_days
            .iter()
            .position(|&ub| magnitude <= ub)
            .unwrap_or(self.upper_bounds_days.len());
        DeltaBin { direction, bucket }
    }

    pub fn bucket_count(&self) -> usize {
        self.upper_bounds_days.len() + 1
    }

    /// Lower bound in days of `bucket` (exclusive except for bucket 0).
    pub fn lower_bound(&self, bucket: usize) -> i64 {
        if bucket == 0 {
            0
        } else {
            self.upper_bounds_days[bucket - 1]
        }
    }

    pub fn label(&self, bin: DeltaBin) -> String {
        let sign = match bin.direction {
            Direction::Past => '-',
            Direction::Future => '+',
        };
        let lo = self.lower_bound(bin.bucket);
        match self.upper_bounds_days.get(bin.bucket) {
            Some(&hi) if lo % 365 == 0 && hi % 365 == 0 && lo > 0 => {
                format!("{sign}{}-{} years", lo / 365, hi / 365)
            }
            Some(&hi) => format!("{sign}{lo}-{hi} days"),
            None if lo % 365 == 0 && lo > 0 => format!("{sign}{}+ years", lo / 365),
            None => format!("{sign}{lo}+ days"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateMention {
    pub surface: String,
    pub resolved_date: NaiveDate,
    pub delta_days: i64,
    pub delta_bin: DeltaBin,
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderEntry {
    pub canonical: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<HeaderEntry>", into = "Vec<HeaderEntry>")]
pub struct HeaderLexicon {
    entries: Vec<HeaderEntry>,
    index: HashMap<String, usize>,
}

fn normalize_header(s: &str) -> String {
    let trimmed = s.trim().trim_end_matches(':').trim();
    trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl HeaderLexicon {
    pub fn new(entries: Vec<HeaderEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("header lexicon must not be empty"));
        }
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            for name in std::iter::once(&e.canonical).chain(&e.aliases) {
                index.entry(normalize_header(name)).or_insert(i);
            }
        }
        Ok(HeaderLexicon { entries, index })
    }

    /// Parses the plain-text format: `canonical[\talias|alias...]`, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|l| {
                let mut cols = l.splitn(2, '\t');
                let canonical = cols.next().unwrap_or_default().trim().to_string();
                let aliases = cols
                    .next()
                    .map(|a| {
                        a.split('|')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect()
                    })
                    .unwrap_or_default();
                HeaderEntry { canonical, aliases }
            })
            .collect();
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn lookup(&self, line: &str) -> Option<&str> {
        self.index
            .get(&normalize_header(line))
            .map(|&i| self.entries[i].canonical.as_str())
    }

    pub fn entries(&self) -> &[HeaderEntry] {
        &self.entries
    }
}

impl Default for HeaderLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_HEADER_LEXICON).expect("bundled header lexicon is valid")
    }
}

impl TryFrom<Vec<HeaderEntry>> for HeaderLexicon {
    type Error = Error;
    fn try_from(v: Vec<HeaderEntry>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<HeaderLexicon> for Vec<HeaderEntry> {
    fn from(l: HeaderLexicon) -> Self {
        l.entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Lowercased words (including their trailing '.') that never end a sentence.
    pub abbreviations: Vec<String>,
    pub header_lexicon: HeaderLexicon,
    pub bins: BinScheme,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            abbreviations: [
                "dr.", "mr.", "mrs.", "ms.", "vs.", "s/p", "e.g.", "i.e.", "approx.", "pt.", "st.",
                "no.", "fig.", "etc.", "hx.", "yrs.", "mos.", "wks.", "min.", "max.",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            header_lexicon: HeaderLexicon::default(),
            bins: BinScheme::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub note: RawNote,
    pub sentences: Vec<Sentence>,
    pub sections: Vec<SectionSpan>,
    pub dates: Vec<DateMention>,
}

impl Document {
    pub fn text(&self) -> &str {
        &self.note.text
    }

    pub fn section_of(&self, sentence: &Sentence) -> Option<&SectionSpan> {
        sentence.section.map(|i| &self.sections[i])
    }

    pub fn dates_in(&self, sentence: &Sentence) -> impl Iterator<Item = &DateMention> {
        let (s, e) = (sentence.start, sentence.end);
        self.dates
            .iter()
            .filter(move |d| d.start >= s && d.end <= e)
    }
}

pub fn preprocess(note: RawNote, config: &PreprocessConfig) -> Document {
    let text = note.text.as_str();
    let sections = detect_sections(text, &config.header_lexicon);
    let header_spans: Vec<(usize, usize)> = sections
        .iter()
        .filter(|s| s.header_end > s.header_start)
        .map(|s| (s.header_start, s.header_end))
        .collect();
    let abbreviations: HashSet<&str> = config.abbreviations.iter().map(String::as_str).collect();
    let mut sentences: Vec<Sentence> = split_sentences(text, &header_spans, &abbreviations)
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| Sentence {
            index,
            start,
            end,
            text: text[start..end].to_string(),
            tokens: tokenize_at(&text[start..end], start),
            section: None,
        })
        .collect();
    for s in &mut sentences {
        s.section = sections
            .iter()
            .position(|sec| sec.start <= s.start && s.start < sec.end.max(sec.start + 1));
    }
    let dates = normalize_dates(text, note.note_datetime, &config.bins);
    Document {
        note,
        sentences,
        sections,
        dates,
    }
}

/// Splits into whitespace-delimited chunks, then separates punctuation.
/// Runs of alphanumerics joined by `/ - . '` (or `:` between digits) stay one
/// token, so "s/p", "1/1/05" and "2008-07-01" survive intact.
pub fn tokenize(text: &str) -> Vec<Token> {
    tokenize_at(text, 0)
}

fn tokenize_at(text: &str, base: usize) -> Vec<Token> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let push = |tokens: &mut Vec<Token>, s: usize, e: usize| {
        tokens.push(Token {
            text: text[s..e].to_string(),
            start: base + s,
            end: base + e,
        })
    };
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphanumeric() {
            let start = pos;
            let mut j = i + 1;
            while j < chars.len() {
                let cj = chars[j].1;
                if cj.is_alphanumeric() {
                    j += 1;
                    continue;
                }
                let joins = matches!(cj, '/' | '-' | '.' | '\'')
                    || (cj == ':' && chars[j - 1].1.is_ascii_digit());
                let next_ok = chars.get(j + 1).is_some_and(|&(_, n)| {
                    n.is_alphanumeric() && (cj != ':' || n.is_ascii_digit())
                });
                if joins && next_ok {
                    j += 2;
                } else {
                    break;
                }
            }
            let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
            push(&mut tokens, start, end);
            i = j;
        } else {
            let end = chars.get(i + 1).map_or(text.len(), |&(p, _)| p);
            push(&mut tokens, pos, end);
            i += 1;
        }
    }
    tokens
}

fn line_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == '\n' {
            spans.push((start, i));
            start = i + 1;
        }
    }
    if start <= text.len() {
        spans.push((start, text.len()));
    }
    spans
}

/// Trimmed span of a line, or None for a blank line.
fn trimmed(text: &str, (s, e): (usize, usize)) -> Option<(usize, usize)> {
    let line = &text[s..e];
    let lead = line.len() - line.trim_start().len();
    let tail = line.len() - line.trim_end().len();
    (lead + tail < line.len()).then(|| (s + lead, e - tail))
}

fn is_shouting_header(line: &str) -> bool {
    if !line.ends_with(':') {
        return false;
    }
    let letters: Vec<char> = line.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() {
        return false;
    }
    let upper = letters.iter().filter(|c| c.is_uppercase()).count();
    upper * 5 >= letters.len() * 4
}

/// A line is a header when it matches the lexicon (case-insensitively, with
/// or without a trailing colon) or is at least 80% uppercase letters and ends
/// with ':'. Each section runs to the next header or the end of the text.
pub fn detect_sections(text: &str, lexicon: &HeaderLexicon) -> Vec<SectionSpan> {
    let mut headers: Vec<(usize, usize, String)> = Vec::new();
    for span in line_spans(text) {
        let Some((s, e)) = trimmed(text, span) else {
            continue;
        };
        let line = &text[s..e];
        if let Some(canonical) = lexicon.lookup(line) {
            headers.push((s, e, canonical.to_string()));
        } else if is_shouting_header(line) {
            headers.push((s, e, UNKNOWN_SECTION.to_string()));
        }
    }

    let mut sections = Vec::new();
    let first_header = headers.first().map_or(text.len(), |h| h.0);
    if !text[..first_header].trim().is_empty() {
        sections.push(SectionSpan {
            header_text: String::new(),
            canonical_header: UNKNOWN_SECTION.to_string(),
            header_start: 0,
            header_end: 0,
            start: 0,
            end: first_header,
        });
    }
    for (i, (s, e, canonical)) in headers.iter().enumerate() {
        let end = headers.get(i + 1).map_or(text.len(), |h| h.0);
        sections.push(SectionSpan {
            header_text: text[*s..*e].to_string(),
            canonical_header: canonical.clone(),
            header_start: *s,
            header_end: *e,
            start: *s,
            end,
        });
    }
    sections
}

/// Sentence boundaries: terminal '.', '!' or '?' followed by whitespace,
/// blank lines, and header lines (always their own sentence). A period that
/// closes a listed abbreviation is not a boundary.
fn split_sentences(
    text: &str,
    header_spans: &[(usize, usize)],
    abbreviations: &HashSet<&str>,
) -> Vec<(usize, usize)> {
    // Blocks separated by blank lines and header lines.
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut block_start: Option<usize> = None;
    let mut block_end = 0;
    for span in line_spans(text) {
        let trimmed_span = trimmed(text, span);
        let is_header = trimmed_span.is_some_and(|t| header_spans.contains(&t));
        if trimmed_span.is_none() || is_header {
            if let Some(bs) = block_start.take() {
                blocks.push((bs, block_end));
            }
            if let (true, Some(t)) = (is_header, trimmed_span) {
                blocks.push(t);
            }
            continue;
        }
        if block_start.is_none() {
            block_start = Some(span.0);
        }
        block_end = span.1;
    }
    if let Some(bs) = block_start {
        blocks.push((bs, block_end));
    }

    let mut out = Vec::new();
    for (bs, be) in blocks {
        let block = &text[bs..be];
        let chars: Vec<(usize, char)> = block.char_indices().collect();
        let mut seg_start = 0;
        let mut i = 0;
        while i < chars.len() {
            let (pos, c) = chars[i];
            if matches!(c, '.' | '!' | '?') {
                let mut j = i + 1;
                while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | ')' | '"' | '\'') {
                    j += 1;
                }
                let at_end = j >= chars.len();
                let followed_by_space = at_end || chars[j].1.is_whitespace();
                if followed_by_space
                    && !(c == '.' && closes_abbreviation(block, pos, abbreviations))
                {
                    let end = chars.get(j).map_or(block.len(), |&(p, _)| p);
                    if let Some((s, e)) = trimmed(block, (seg_start, end)) {
                        out.push((bs + s, bs + e));
                    }
                    seg_start = end;
                    i = j;
                    continue;
                }
            }
            i += 1;
        }
        if let Some((s, e)) = trimmed(block, (seg_start, block.len())) {
            out.push((bs + s, bs + e));
        }
    }
    out
}

fn closes_abbreviation(block: &str, period_pos: usize, abbreviations: &HashSet<&str>) -> bool {
    let word_start = block[..period_pos]
        .rfind(char::is_whitespace)
        .map_or(0, |p| p + 1);
    let word = block[word_start..=period_pos]
        .trim_start_matches(['(', '[', '"', '\''])
        .to_lowercase();
    abbreviations.contains(word.as_str())
}

fn date_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?xi)
            \b(?P<iy>\d{4})-(?P<im>\d{1,2})-(?P<id>\d{1,2})\b
            | \b(?P<m>\d{1,2})/(?P<d>\d{1,2})/(?P<y>\d{4}|\d{2})\b
            | \b(?P<mon>jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?
                 |aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)
                \.?[\s-]+(?P<my>\d{4})\b
            ",
        )
        .expect("date regex compiles")
    })
}

fn month_number(name: &str) -> Option<u32> {
    let key: String = name.to_lowercase().chars().take(3).collect();
    let months = [
        "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
    ];
    months.iter().position(|m| *m == key).map(|i| i as u32 + 1)
}

/// Two-digit years pivot at 50: 00-49 → 20xx, 50-99 → 19xx.
pub fn expand_two_digit_year(yy: i32) -> i32 {
    if yy <= 49 {
        2000 + yy
    } else {
        1900 + yy
    }
}

/// Finds unambiguous dates (M/D/YYYY, M/D/YY, YYYY-MM-DD, Month YYYY) and
/// bins their offset from the note date. Invalid calendar dates are skipped.
pub fn normalize_dates(
    text: &str,
    note_datetime: DateTime<Utc>,
    bins: &BinScheme,
) -> Vec<DateMention> {
    let note_date = note_datetime.date_naive();
    let mut out = Vec::new();
    for caps in date_regex().captures_iter(text) {
        let whole = caps.get(0).expect("group 0");
        let num = |name: &str| caps.name(name).and_then(|m| m.as_str().parse::<i64>().ok());
        let resolved = if let (Some(y), Some(m), Some(d)) = (num("iy"), num("im"), num("id")) {
            NaiveDate::from_ymd_opt(y as i32, m as u32, d as u32)
        } else if let (Some(m), Some(d), Some(ystr)) = (num("m"), num("d"), caps.name("y")) {
            let y = ystr.as_str().parse::<i32>().ok();
            let year = match (ystr.as_str().len(), y) {
                (2, Some(yy)) => Some(expand_two_digit_year(yy)),
                (4, Some(yyyy)) => Some(yyyy),
                _ => None,
            };
            year.and_then(|y| NaiveDate::from_ymd_opt(y, m as u32, d as u32))
        } else if let (Some(mon), Some(y)) = (caps.name("mon"), num("my")) {
            month_number(mon.as_str()).and_then(|m| NaiveDate::from_ymd_opt(y as i32, m, 1))
        } else {
            None
        };
        let Some(resolved_date) = resolved else {
            continue;
        };
        let delta_days = (resolved_date - note_date).num_days();
        let delta_bin = bins.bin(delta_days);
        out.push(DateMention {
            surface: whole.as_str().to_string(),
            resolved_date,
            delta_days,
            delta_bin,
            label: bins.label(delta_bin),
            start: whole.start(),
            end: whole.end(),
        });
    }
    out
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Past => "past",
            Direction::Future => "future",
        })
    }
}
