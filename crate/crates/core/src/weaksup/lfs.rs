//! Starter labeling functions and builders for new ones.

use regex::Regex;

use super::primitives::{self, between_words, contains_phrase, lower};
use super::{BoxedLf, FnLf, LfError, Vote};
use crate::extraction::{Attribute, RelationCandidate, RelationType};

/// Which argument(s) an attribute test looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgSelector {
    First,
    Second,
    Either,
}

impl ArgSelector {
    fn test(self, c: &RelationCandidate, attr: Attribute) -> bool {
        match self {
            ArgSelector::First => c.arg1.has(attr),
            ArgSelector::Second => c.arg2.has(attr),
            ArgSelector::Either => c.arg1.has(attr) || c.arg2.has(attr),
        }
    }
}

/// Text region a pattern is matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Content words between the arguments.
    Between,
    /// Raw tokens between the arguments.
    BetweenRaw,
    Left(usize),
    Right(usize),
    Sentence,
}

impl Scope {
    fn words(self, c: &RelationCandidate) -> Vec<String> {
        match self {
            Scope::Between => between_words(c),
            Scope::BetweenRaw => lower(primitives::between_tokens(c)),
            Scope::Left(k) => lower(primitives::left_window(c, k)),
            Scope::Right(k) => lower(primitives::right_window(c, k)),
            Scope::Sentence => lower(primitives::tokens(c)),
        }
    }
}

fn boxed<F>(id: &str, relation: Option<RelationType>, f: F) -> BoxedLf
where
    F: Fn(&RelationCandidate) -> Result<Vote, LfError> + Send + Sync + 'static,
{
    Box::new(FnLf::new(id, relation, f))
}

/// TRUE when nothing but punctuation, asides, other entities, trigger
/// phrases or dates separate the arguments.
pub fn contiguous_entities(id: &str) -> BoxedLf {
    boxed(id, None, |c| {
        Ok(if between_words(c).is_empty() {
            Vote::True
        } else {
            Vote::Abstain
        })
    })
}

/// FALSE when the event argument (arg1) is historical.
pub fn historical(id: &str) -> BoxedLf {
    attribute(
        id,
        None,
        Attribute::Historical,
        ArgSelector::First,
        Vote::False,
    )
}

/// FALSE for candidates in any of the given canonical sections.
pub fn reject_section(id: &str, headers: &[&str]) -> BoxedLf {
    section(id, None, headers, Vote::False)
}

pub fn attribute(
    id: &str,
    relation: Option<RelationType>,
    attr: Attribute,
    args: ArgSelector,
    vote: Vote,
) -> BoxedLf {
    boxed(id, relation, move |c| {
        Ok(if args.test(c, attr) {
            vote
        } else {
            Vote::Abstain
        })
    })
}

pub fn section(id: &str, relation: Option<RelationType>, headers: &[&str], vote: Vote) -> BoxedLf {
    let headers: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    boxed(id, relation, move |c| {
        let hit = primitives::section_header(c)
            .is_some_and(|s| headers.iter().any(|h| h.eq_ignore_ascii_case(s)));
        Ok(if hit { vote } else { Vote::Abstain })
    })
}

/// Votes when any of `phrases` (case-insensitive, token aligned) occurs in `scope`.
pub fn keywords(
    id: &str,
    relation: Option<RelationType>,
    phrases: &[&str],
    scope: Scope,
    vote: Vote,
) -> BoxedLf {
    let phrases: Vec<String> = phrases.iter().map(|p| p.to_lowercase()).collect();
    boxed(id, relation, move |c| {
        let words = scope.words(c);
        Ok(if phrases.iter().any(|p| contains_phrase(&words, p)) {
            vote
        } else {
            Vote::Abstain
        })
    })
}

/// Votes when the space-joined words of `scope` match `pattern`.
pub fn pattern(
    id: &str,
    relation: Option<RelationType>,
    pattern: &str,
    scope: Scope,
    vote: Vote,
) -> Result<BoxedLf, regex::Error> {
    let re = Regex::new(pattern)?;
    Ok(boxed(id, relation, move |c| {
        Ok(if re.is_match(&scope.words(c).join(" ")) {
            vote
        } else {
            Vote::Abstain
        })
    }))
}

/// Votes when more than `max` tokens separate the arguments.
pub fn distant(id: &str, relation: Option<RelationType>, max: usize, vote: Vote) -> BoxedLf {
    boxed(id, relation, move |c| {
        Ok(if primitives::token_distance(c) > max {
            vote
        } else {
            Vote::Abstain
        })
    })
}

/// Votes when another mention of the arg2 type sits between the arguments,
/// which usually means arg1 belongs to the nearer one.
pub fn intervening_mention(id: &str, relation: Option<RelationType>, vote: Vote) -> BoxedLf {
    boxed(id, relation, move |c| {
        let (s, e) = c.between_range();
        let hit =
            c.context.mentions.iter().any(|m| {
                m.entity_type == c.arg2.entity_type && m.token_start >= s && m.token_end <= e
            });
        Ok(if hit { vote } else { Vote::Abstain })
    })
}

pub const HISTORICAL_SECTIONS: [&str; 3] = [
    "PAST MEDICAL HISTORY",
    "PAST SURGICAL HISTORY",
    "FAMILY HISTORY",
];

/// The three general-purpose functions: contiguous entities, historical
/// event, rejected section.
pub fn starter_lfs() -> Vec<BoxedLf> {
    vec![
        contiguous_entities("LF1_contiguous_entities"),
        historical("LF2_historical"),
        reject_section("LF3_reject_section", &HISTORICAL_SECTIONS),
    ]
}

/// Starter functions plus relation-specific ones.
pub fn default_lfs(relation: RelationType) -> Vec<BoxedLf> {
    let r = Some(relation);
    let mut lfs = starter_lfs();
    lfs.push(attribute(
        "LF_negated",
        r,
        Attribute::Negated,
        ArgSelector::Either,
        Vote::False,
    ));
    lfs.push(attribute(
        "LF_hypothetical",
        r,
        Attribute::Hypothetical,
        ArgSelector::First,
        Vote::False,
    ));
    lfs.push(intervening_mention("LF_intervening", r, Vote::False));
    match relation {
        RelationType::PainAnatomy => {
            lfs.push(keywords(
                "LF_pain_located",
                r,
                &[
                    "in the",
                    "of the",
                    "over the",
                    "at the",
                    "along the",
                    "around the",
                ],
                Scope::Between,
                Vote::True,
            ));
            lfs.push(keywords(
                "LF_pain_radiating",
                r,
                &[
                    "radiating to",
                    "radiates to",
                    "radiating into",
                    "referred to",
                ],
                Scope::Between,
                Vote::True,
            ));
            lfs.push(keywords(
                "LF_pain_reported",
                r,
                &["reports", "complains of", "describes", "exam shows"],
                Scope::Left(3),
                Vote::True,
            ));
            lfs.push(distant("LF_far_apart", r, 10, Vote::False));
        }
        RelationType::ImplantComplication => {
            lfs.push(keywords(
                "LF_complication_of",
                r,
                &[
                    "of the",
                    "around the",
                    "at the",
                    "of left",
                    "of right",
                    "involving",
                ],
                Scope::Between,
                Vote::True,
            ));
            lfs.push(keywords(
                "LF_complicated_by",
                r,
                &["complicated by", "with", "due to", "secondary to"],
                Scope::Between,
                Vote::True,
            ));
            lfs.push(keywords(
                "LF_imaging_finding",
                r,
                &["show", "shows", "notable for", "demonstrates"],
                Scope::Left(3),
                Vote::True,
            ));
            lfs.push(distant("LF_far_apart", r, 12, Vote::False));
        }
    }
    lfs
}
