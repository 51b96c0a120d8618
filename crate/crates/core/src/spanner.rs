//! Candidate answer spans: recognized entities plus every n-gram of up to
//! three tokens.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Passage;
use crate::textproc::{EntityKind, EntityRecognizer};

pub const MAX_NGRAM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanSource {
    Entity,
    Datetime,
    Number,
    Quoted,
    Ngram,
}

impl From<EntityKind> for SpanSource {
    fn from(k: EntityKind) -> Self {
        match k {
            EntityKind::Name => SpanSource::Entity,
            EntityKind::Number => SpanSource::Number,
            EntityKind::Datetime => SpanSource::Datetime,
            EntityKind::Quoted => SpanSource::Quoted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSpan {
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
    pub sources: BTreeSet<SpanSource>,
}

impl CandidateSpan {
    pub fn token_len(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn offsets(&self) -> (usize, usize) {
        (self.token_start, self.token_end)
    }
}

/// Union of entity spans and all 1..=3-grams, deduplicated by token offsets
/// and sorted by `(token_start, token_end)`. Entity spans are not length-capped.
pub fn generate_candidates(p: &Passage, recognizer: &dyn EntityRecognizer) -> Vec<CandidateSpan> {
    let mut spans: BTreeMap<(usize, usize), BTreeSet<SpanSource>> = BTreeMap::new();
    let t = p.tokens.len();
    for n in 1..=MAX_NGRAM.min(t) {
        for s in 0..=t - n {
            spans
                .entry((s, s + n))
                .or_default()
                .insert(SpanSource::Ngram);
        }
    }
    for m in recognizer.recognize(&p.tokens, &p.text) {
        spans
            .entry((m.span.token_start, m.span.token_end))
            .or_default()
            .insert(m.kind.into());
    }
    spans
        .into_iter()
        .map(|((s, e), sources)| {
            let (cs, ce) = (p.tokens[s].char_start, p.tokens[e - 1].char_end);
            CandidateSpan {
                token_start: s,
                token_end: e,
                char_start: cs,
                char_end: ce,
                text: p.text[cs..ce].to_string(),
                sources,
            }
        })
        .collect()
}

/// Number of n-gram candidates for `t` tokens plus the distinct `extra`
/// spans longer than three tokens.
pub fn count_candidates(t: usize, extra: &[(usize, usize)]) -> usize {
    let ngrams: usize = (1..=MAX_NGRAM.min(t)).map(|n| t - n + 1).sum();
    let long: HashSet<_> = extra.iter().filter(|(s, e)| e - s > MAX_NGRAM).collect();
    ngrams + long.len()
}
