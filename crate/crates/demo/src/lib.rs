//! Browser demo over the extraction and statistics library. Each operation
//! has a plain Rust form, used by the tests, and a `wasm_bindgen` export
//! that takes and returns JSON strings.

use std::sync::Arc;

use devsurv::corpus::{PreprocessConfig, RawNote};
use devsurv::extraction::{EntityType, Extractor, RelationType, TaggedSentence};
use devsurv::outcomes::{km_estimate, SurvivalDataset};
use devsurv::pipeline::{annotate_notes, candidates_for, majority_decision};
use devsurv::weaksup::lfs::default_lfs;
use devsurv::weaksup::{apply_lfs, soft_majority_vote, Vote};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Segment {
    pub text: String,
    /// Index into the sentence's mentions when this piece is a mention.
    pub mention: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct MentionView {
    pub surface: String,
    pub entity_type: EntityType,
    pub canonical_id: String,
    pub attributes: Vec<&'static str>,
}

#[derive(Debug, Serialize)]
pub struct SentenceView {
    pub section: Option<String>,
    pub segments: Vec<Segment>,
    pub mentions: Vec<MentionView>,
}

#[derive(Debug, Serialize)]
pub struct CandidateView {
    pub arg1: String,
    pub arg2: String,
    pub sentence: String,
    pub votes: Vec<(String, Vote)>,
    pub p_true: f64,
    pub positive: bool,
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub time: f64,
    pub n_risk: usize,
    pub survival: f64,
}

fn annotate(text: &str) -> Vec<Arc<TaggedSentence>> {
    let note = RawNote {
        note_id: "demo".into(),
        patient_id: "demo".into(),
        note_datetime: Default::default(),
        note_type: "clinic".into(),
        text: text.to_string(),
    };
    annotate_notes(
        vec![note],
        &PreprocessConfig::default(),
        &Extractor::bundled(),
    )
}

/// Cuts the sentence text at mention boundaries. Overlapping mentions keep
/// the earlier one.
fn segments(s: &TaggedSentence) -> Vec<Segment> {
    let base = s.sentence.start;
    let text = &s.sentence.text;
    let mut order: Vec<usize> = (0..s.mentions.len()).collect();
    order.sort_by_key(|&i| (s.mentions[i].start, s.mentions[i].end));
    let mut out = Vec::new();
    let mut at = 0;
    for i in order {
        let m = &s.mentions[i];
        let (a, b) = (m.start - base, m.end - base);
        if a < at || b > text.len() {
            continue;
        }
        if a > at {
            out.push(Segment {
                text: text[at..a].to_string(),
                mention: None,
            });
        }
        out.push(Segment {
            text: text[a..b].to_string(),
            mention: Some(i),
        });
        at = b;
    }
    if at < text.len() {
        out.push(Segment {
            text: text[at..].to_string(),
            mention: None,
        });
    }
    out
}

pub fn tag(text: &str) -> Vec<SentenceView> {
    annotate(text)
        .iter()
        .map(|s| SentenceView {
            section: s.section_header.clone(),
            segments: segments(s),
            mentions: s
                .mentions
                .iter()
                .map(|m| MentionView {
                    surface: m.surface.clone(),
                    entity_type: m.entity_type,
                    canonical_id: m.canonical_id.clone(),
                    attributes: m.attributes.iter().map(|a| a.as_str()).collect(),
                })
                .collect(),
        })
        .collect()
}

pub fn label(text: &str, relation: &str) -> Result<Vec<CandidateView>, String> {
    let relation: RelationType = relation
        .parse()
        .map_err(|e: devsurv::Error| e.to_string())?;
    let sentences = annotate(text);
    let cs = candidates_for(&sentences, relation);
    let lfs = default_lfs(relation);
    let (matrix, _) = apply_lfs(&cs, &lfs).map_err(|e| e.to_string())?;
    let labels = soft_majority_vote(&matrix);
    Ok(cs
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (c, l))| CandidateView {
            arg1: c.arg1.surface.clone(),
            arg2: c.arg2.surface.clone(),
            sentence: c.context.sentence.text.clone(),
            votes: lfs
                .iter()
                .zip(matrix.row(i))
                .map(|(lf, v)| (lf.id().to_string(), *v))
                .collect(),
            p_true: l.p_true,
            positive: majority_decision(l),
        })
        .collect())
}

/// Kaplan-Meier estimate from lines of `time,event` with event 0 or 1.
pub fn survival(table: &str) -> Result<Vec<CurvePoint>, String> {
    let mut times = Vec::new();
    let mut events = Vec::new();
    for (n, line) in table.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = || -> Option<(f64, bool)> {
            let (t, e) = line.split_once(',')?;
            let t: f64 = t.trim().parse().ok()?;
            let e = match e.trim() {
                "1" => true,
                "0" => false,
                _ => return None,
            };
            (t.is_finite() && t >= 0.0).then_some((t, e))
        };
        let (t, e) = parse()
            .ok_or_else(|| format!("line {}: expected `time,event` with event 0 or 1", n + 1))?;
        times.push(t);
        events.push(e);
    }
    if times.is_empty() {
        return Err("no rows".into());
    }
    let ds = SurvivalDataset::from_times(&times, &events, None);
    let curve = km_estimate(&ds, None).map_err(|e| e.to_string())?.remove(0);
    Ok(curve
        .points
        .iter()
        .map(|p| CurvePoint {
            time: p.time,
            n_risk: p.n_risk,
            survival: p.survival,
        })
        .collect())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = tagNote)]
pub fn tag_note(text: &str) -> Result<String, JsError> {
    to_json(&tag(text))
}

#[wasm_bindgen(js_name = labelCandidates)]
pub fn label_candidates(text: &str, relation: &str) -> Result<String, JsError> {
    to_json(&label(text, relation).map_err(|e| JsError::new(&e))?)
}

#[wasm_bindgen(js_name = kaplanMeier)]
pub fn kaplan_meier(table: &str) -> Result<String, JsError> {
    to_json(&survival(table).map_err(|e| JsError::new(&e))?)
}
