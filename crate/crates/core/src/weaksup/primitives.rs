//! Read-only views of a candidate that labeling functions and features are
//! written against.

use crate::corpus::{DeltaBin, Token};
use crate::extraction::{EntityMention, RelationCandidate};

/// Arguments in sentence order.
pub fn ordered_args(c: &RelationCandidate) -> (&EntityMention, &EntityMention) {
    if (c.arg1.token_start, c.arg1.token_end) <= (c.arg2.token_start, c.arg2.token_end) {
        (&c.arg1, &c.arg2)
    } else {
        (&c.arg2, &c.arg1)
    }
}

pub fn tokens(c: &RelationCandidate) -> &[Token] {
    &c.context.sentence.tokens
}

/// Raw tokens strictly between the two arguments.
pub fn between_tokens(c: &RelationCandidate) -> &[Token] {
    let (s, e) = c.between_range();
    &tokens(c)[s..e]
}

/// Number of tokens between the arguments; 0 when adjacent or overlapping.
pub fn token_distance(c: &RelationCandidate) -> usize {
    let (s, e) = c.between_range();
    e - s
}

/// Up to `k` tokens before the earlier argument.
pub fn left_window(c: &RelationCandidate, k: usize) -> &[Token] {
    let (a, _) = ordered_args(c);
    &tokens(c)[a.token_start.saturating_sub(k)..a.token_start]
}

/// Up to `k` tokens after the later argument.
pub fn right_window(c: &RelationCandidate, k: usize) -> &[Token] {
    let (a, b) = ordered_args(c);
    let end = a.token_end.max(b.token_end);
    let toks = tokens(c);
    &toks[end..(end + k).min(toks.len())]
}

fn is_word(t: &Token) -> bool {
    t.text.chars().any(char::is_alphanumeric)
}

/// Lowercased content words between the arguments. Punctuation,
/// parenthesized asides, other entity mentions, context trigger phrases and
/// dates are left out, so "infected R hip (MRSA) s/p previous hip
/// replacement" has no words between "infected" and "hip replacement".
pub fn between_words(c: &RelationCandidate) -> Vec<String> {
    let (s, e) = c.between_range();
    let ctx = &c.context;
    let toks = &ctx.sentence.tokens;
    let mut skip = vec![false; e.saturating_sub(s)];
    let mut mark = |from: usize, to: usize| {
        for i in from.max(s)..to.min(e) {
            skip[i - s] = true;
        }
    };
    for m in &ctx.mentions {
        mark(m.token_start, m.token_end);
    }
    for h in &ctx.triggers {
        mark(h.token_start, h.token_end);
    }
    for d in &ctx.dates {
        for (i, t) in toks.iter().enumerate().take(e).skip(s) {
            if t.start < d.end && d.start < t.end {
                mark(i, i + 1);
            }
        }
    }
    let mut depth = 0usize;
    let mut out = Vec::new();
    for (k, t) in toks[s..e].iter().enumerate() {
        match t.text.as_str() {
            "(" | "[" => depth += 1,
            ")" | "]" => depth = depth.saturating_sub(1),
            _ if depth == 0 && !skip[k] && is_word(t) => out.push(t.text.to_lowercase()),
            _ => {}
        }
    }
    out
}

pub fn section_header(c: &RelationCandidate) -> Option<&str> {
    c.section_header()
}

/// Relative-time bins of the dates in the candidate's sentence.
pub fn date_bins(c: &RelationCandidate) -> Vec<DeltaBin> {
    c.context.dates.iter().map(|d| d.delta_bin).collect()
}

/// Lowercased token texts of a slice.
pub fn lower(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.text.to_lowercase()).collect()
}

/// Whether `phrase` (already lowercased, space separated) occurs as a token
/// sequence in `words`.
pub fn contains_phrase(words: &[String], phrase: &str) -> bool {
    let p: Vec<&str> = phrase.split_whitespace().collect();
    !p.is_empty()
        && p.len() <= words.len()
        && words
            .windows(p.len())
            .any(|w| w.iter().zip(&p).all(|(a, b)| a == b))
}
