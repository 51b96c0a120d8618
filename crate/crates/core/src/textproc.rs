//! Entity recognition, question masking and wh-keyword extraction.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, AnswerSpan, Question, Token, MASK_TOKEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Name,
    Number,
    Datetime,
    Quoted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub span: AnswerSpan,
    pub kind: EntityKind,
}

/// Anything that can find entity mentions in a tokenized text. The rule-based
/// [`RuleRecognizer`] is the default; a learned tagger can be plugged in.
pub trait EntityRecognizer: Send + Sync {
    /// Mentions must be pairwise non-overlapping and sorted by start.
    fn recognize(&self, tokens: &[Token], text: &str) -> Vec<EntityMention>;
}

/// Lowercased surface forms, stored as token sequences.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: HashSet<Vec<String>>,
    max_len: usize,
}

impl Gazetteer {
    pub fn new<I, S>(forms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Gazetteer::default();
        for f in forms {
            g.insert(f.as_ref());
        }
        g
    }

    pub fn insert(&mut self, form: &str) {
        let toks: Vec<String> = tokenize(form)
            .into_iter()
            .map(|t| t.text.to_lowercase())
            .collect();
        if toks.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(toks.len());
        self.entries.insert(toks);
    }

    /// One UTF-8 surface form per line; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Gazetteer::new(
            text.lines().map(str::trim).filter(|l| !l.is_empty()),
        ))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Length of the longest entry starting at token `i`.
    fn longest_match(&self, lower: &[String], i: usize) -> Option<usize> {
        (1..=self.max_len.min(lower.len() - i))
            .rev()
            .find(|&n| self.entries.contains(&lower[i..i + n]))
    }
}

const MONTHS: &[&str] = &[
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];
const WEEKDAYS: &[&str] = &[
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
];
const CARDINALS: &[&str] = &[
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
    "thirty",
    "forty",
    "fifty",
    "sixty",
    "seventy",
    "eighty",
    "ninety",
    "hundred",
    "thousand",
    "million",
    "billion",
    "trillion",
];
// function words that may open a sentence-initial capitalized run
const OPENERS: &[&str] = &[
    "a",
    "an",
    "the",
    "in",
    "on",
    "at",
    "of",
    "for",
    "by",
    "to",
    "from",
    "with",
    "and",
    "but",
    "or",
    "if",
    "as",
    "after",
    "before",
    "during",
    "since",
    "this",
    "that",
    "these",
    "those",
    "it",
    "he",
    "she",
    "they",
    "we",
    "i",
    "his",
    "her",
    "their",
    "its",
    "who",
    "what",
    "when",
    "where",
    "which",
    "why",
    "how",
    "whose",
    "whom",
    "is",
    "was",
    "are",
    "were",
    "did",
    "do",
    "does",
    "name",
    "then",
    "there",
    "here",
    "so",
    "yet",
    "also",
    "however",
    "meanwhile",
];

fn is_sentence_end(t: &str) -> bool {
    matches!(t, "." | "!" | "?")
}

fn is_capitalized(t: &str) -> bool {
    t.chars().next().is_some_and(char::is_uppercase)
}

fn is_numeral(t: &str) -> bool {
    let body = t.strip_prefix(['+', '-']).unwrap_or(t);
    let bytes = body.as_bytes();
    !bytes.is_empty()
        && bytes[0].is_ascii_digit()
        && bytes[bytes.len() - 1].is_ascii_digit()
        && bytes
            .iter()
            .all(|b| b.is_ascii_digit() || *b == b'.' || *b == b',')
        && !body.contains(",,")
        && !body.contains("..")
}

fn is_year(t: &str) -> bool {
    t.len() == 4 && t.bytes().all(|b| b.is_ascii_digit())
}

fn is_day_number(t: &str) -> bool {
    let digits = t.trim_end_matches(|c: char| c.is_ascii_alphabetic());
    let suffix = &t[digits.len()..];
    matches!(suffix, "" | "st" | "nd" | "rd" | "th")
        && !digits.is_empty()
        && digits.len() <= 2
        && digits.bytes().all(|b| b.is_ascii_digit())
        && matches!(digits.parse::<u32>(), Ok(1..=31))
}

fn closing_quote(open: &str) -> Option<&'static str> {
    match open {
        "\"" => Some("\""),
        "\u{201c}" => Some("\u{201d}"),
        "\u{2018}" => Some("\u{2019}"),
        _ => None,
    }
}

/// Deterministic rule-based recognizer: capitalized runs and gazetteer
/// entries as names, numerals and spelled cardinals as numbers, month,
/// weekday and year expressions as date-times, and quoted content.
#[derive(Debug, Clone, Default)]
pub struct RuleRecognizer {
    pub gazetteer: Gazetteer,
}

impl RuleRecognizer {
    pub fn new(gazetteer: Gazetteer) -> Self {
        RuleRecognizer { gazetteer }
    }

    fn quoted(&self, tokens: &[Token]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some(close) = closing_quote(&tokens[i].text) {
                if let Some(off) = tokens[i + 1..].iter().position(|t| t.text == close) {
                    let end = i + 1 + off;
                    if end > i + 1 {
                        out.push((i + 1, end));
                    }
                    i = end + 1;
                    continue;
                }
            }
            i += 1;
        }
        out
    }

    fn datetimes(&self, lower: &[String]) -> Vec<(usize, usize)> {
        let n = lower.len();
        let is_month = |i: usize| MONTHS.contains(&lower[i].as_str());
        let mut dt: Vec<bool> = (0..n)
            .map(|i| is_month(i) || WEEKDAYS.contains(&lower[i].as_str()) || is_year(&lower[i]))
            .collect();
        for i in 0..n {
            if is_day_number(&lower[i])
                && ((i > 0 && is_month(i - 1)) || (i + 1 < n && is_month(i + 1)))
            {
                dt[i] = true;
            }
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            if !dt[i] {
                i += 1;
                continue;
            }
            let start = i;
            let mut end = i + 1;
            loop {
                if end < n && dt[end] {
                    end += 1;
                } else if end + 1 < n && lower[end] == "," && dt[end + 1] {
                    end += 2;
                } else {
                    break;
                }
            }
            out.push((start, end));
            i = end;
        }
        out
    }

    fn numbers(&self, lower: &[String]) -> Vec<(usize, usize)> {
        runs(lower.len(), |i| {
            is_numeral(&lower[i]) || CARDINALS.contains(&lower[i].as_str())
        })
    }

    fn names(&self, tokens: &[Token], lower: &[String]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (mut s, e) in runs(tokens.len(), |i| is_capitalized(&tokens[i].text)) {
            let sentence_initial = s == 0 || is_sentence_end(&tokens[s - 1].text);
            if sentence_initial {
                if OPENERS.contains(&lower[s].as_str()) {
                    s += 1;
                } else if e - s == 1 {
                    continue;
                }
            }
            if s < e {
                out.push((s, e));
            }
        }
        let mut i = 0;
        while i < lower.len() {
            match self.gazetteer.longest_match(lower, i) {
                Some(n) => {
                    out.push((i, i + n));
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }
}

fn runs(n: usize, pred: impl Fn(usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if pred(i) {
            let s = i;
            while i < n && pred(i) {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

impl EntityRecognizer for RuleRecognizer {
    fn recognize(&self, tokens: &[Token], text: &str) -> Vec<EntityMention> {
        if tokens.is_empty() {
            return Vec::new();
        }
        let lower: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
        let by_precedence = [
            (EntityKind::Quoted, self.quoted(tokens)),
            (EntityKind::Datetime, self.datetimes(&lower)),
            (EntityKind::Number, self.numbers(&lower)),
            (EntityKind::Name, self.names(tokens, &lower)),
        ];
        let mut taken = vec![false; tokens.len()];
        let mut out = Vec::new();
        for (kind, spans) in by_precedence {
            for (s, e) in spans {
                if taken[s..e].iter().any(|&t| t) {
                    continue;
                }
                taken[s..e].iter_mut().for_each(|t| *t = true);
                let (cs, ce) = (tokens[s].char_start, tokens[e - 1].char_end);
                out.push(EntityMention {
                    span: AnswerSpan {
                        token_start: s,
                        token_end: e,
                        char_start: cs,
                        char_end: ce,
                        text: text[cs..ce].to_string(),
                    },
                    kind,
                });
            }
        }
        out.sort_by_key(|m| m.span.token_start);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedQuestion {
    pub question_id: String,
    pub masked_text: String,
    pub masked_tokens: Vec<Token>,
    pub mask_count: usize,
}

/// Replaces every mention with a single `[MASK]` token. The masked text is
/// the resulting token sequence joined by single spaces.
pub fn mask_question(q: &Question, mentions: &[EntityMention]) -> Result<MaskedQuestion> {
    let mut spans: Vec<(usize, usize)> = mentions
        .iter()
        .map(|m| (m.span.token_start, m.span.token_end))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Precondition(format!(
                "overlapping mentions [{}, {}) and [{}, {}) in question {}",
                w[0].0, w[0].1, w[1].0, w[1].1, q.id
            )));
        }
    }
    if let Some(&(s, e)) = spans.last() {
        if s >= e || e > q.tokens.len() {
            return Err(Error::Precondition(format!(
                "mention [{s}, {e}) out of bounds for question {}",
                q.id
            )));
        }
    }
    let mut pieces: Vec<&str> = Vec::with_capacity(q.tokens.len());
    let mut next = spans.iter().peekable();
    let mut i = 0;
    while i < q.tokens.len() {
        match next.peek() {
            Some(&&(s, e)) if s == i => {
                pieces.push(MASK_TOKEN);
                i = e;
                next.next();
            }
            _ => {
                pieces.push(&q.tokens[i].text);
                i += 1;
            }
        }
    }
    let masked_text = pieces.join(" ");
    let masked_tokens = tokenize(&masked_text);
    let mask_count = masked_tokens
        .iter()
        .filter(|t| t.text == MASK_TOKEN)
        .count();
    Ok(MaskedQuestion {
        question_id: q.id.clone(),
        masked_text,
        masked_tokens,
        mask_count,
    })
}

/// Recognizes entities in `q` and masks them.
pub fn mask_with(q: &Question, recognizer: &dyn EntityRecognizer) -> MaskedQuestion {
    let mentions = recognizer.recognize(&q.tokens, &q.text);
    mask_question(q, &mentions).expect("recognizers return non-overlapping in-bounds mentions")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhKeyword {
    Who,
    What,
    When,
    Where,
    Which,
    Why,
    How,
    Whose,
    Whom,
}

impl WhKeyword {
    pub const ALL: [WhKeyword; 9] = [
        WhKeyword::Who,
        WhKeyword::What,
        WhKeyword::When,
        WhKeyword::Where,
        WhKeyword::Which,
        WhKeyword::Why,
        WhKeyword::How,
        WhKeyword::Whose,
        WhKeyword::Whom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WhKeyword::Who => "who",
            WhKeyword::What => "what",
            WhKeyword::When => "when",
            WhKeyword::Where => "where",
            WhKeyword::Which => "which",
            WhKeyword::Why => "why",
            WhKeyword::How => "how",
            WhKeyword::Whose => "whose",
            WhKeyword::Whom => "whom",
        }
    }
}

impl fmt::Display for WhKeyword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WhKeyword {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let lower = s.to_lowercase();
        WhKeyword::ALL
            .into_iter()
            .find(|w| w.as_str() == lower)
            .ok_or(())
    }
}

/// First token of `q` that is one of the nine wh-words, case-insensitively.
pub fn extract_wh_keyword(q: &Question) -> Option<WhKeyword> {
    q.tokens.iter().find_map(|t| t.text.parse().ok())
}
