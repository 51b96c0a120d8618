//! Cases, passages and questions, plus ingestion of MRQA-format JSONL.
//!
//! All offsets stored on [`Token`] and [`AnswerSpan`] are byte offsets into
//! the owning text. The MRQA format counts Unicode code points with an
//! inclusive end; the conversion happens once, at ingestion.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Literal placeholder produced by question masking. The tokenizer keeps it
/// as a single token.
pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

fn is_split_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Whitespace tokenizer that also peels leading and trailing punctuation off
/// each chunk, one character per token. `[MASK]` survives as one token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut chunk_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                split_chunk(text, s, i, &mut out);
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    if let Some(s) = chunk_start {
        split_chunk(text, s, text.len(), &mut out);
    }
    out
}

fn split_chunk(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let mut pos = start;
    while pos < end {
        match text[pos..end].find(MASK_TOKEN) {
            Some(rel) => {
                split_plain(text, pos, pos + rel, out);
                push(text, pos + rel, pos + rel + MASK_TOKEN.len(), out);
                pos += rel + MASK_TOKEN.len();
            }
            None => {
                split_plain(text, pos, end, out);
                pos = end;
            }
        }
    }
}

fn split_plain(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    if start >= end {
        return;
    }
    let s = &text[start..end];
    let mut lead_end = 0;
    for (i, c) in s.char_indices() {
        if !is_split_punct(c) {
            break;
        }
        push(text, start + i, start + i + c.len_utf8(), out);
        lead_end = i + c.len_utf8();
    }
    if lead_end == s.len() {
        return;
    }
    let mut trail_start = s.len();
    for (i, c) in s.char_indices().rev() {
        if !is_split_punct(c) {
            break;
        }
        trail_start = i;
    }
    push(text, start + lead_end, start + trail_start, out);
    for (i, c) in s[trail_start..].char_indices() {
        let b = start + trail_start + i;
        push(text, b, b + c.len_utf8(), out);
    }
}

fn push(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    out.push(Token {
        text: text[start..end].to_string(),
        char_start: start,
        char_end: end,
    });
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

impl AnswerSpan {
    /// Builds the span covering tokens `[token_start, token_end)` of `passage`.
    pub fn from_tokens(passage: &Passage, token_start: usize, token_end: usize) -> Result<Self> {
        if token_start >= token_end || token_end > passage.tokens.len() {
            return Err(Error::Validation(format!(
                "token span [{token_start}, {token_end}) invalid for passage {} with {} tokens",
                passage.id,
                passage.tokens.len()
            )));
        }
        let char_start = passage.tokens[token_start].char_start;
        let char_end = passage.tokens[token_end - 1].char_end;
        Ok(AnswerSpan {
            token_start,
            token_end,
            char_start,
            char_end,
            text: passage.text[char_start..char_end].to_string(),
        })
    }

    /// Builds a span from byte offsets. The character offsets are kept as
    /// given; the token range is the minimal set of tokens covering them.
    pub fn from_chars(passage: &Passage, char_start: usize, char_end: usize) -> Result<Self> {
        if char_start >= char_end
            || char_end > passage.text.len()
            || !passage.text.is_char_boundary(char_start)
            || !passage.text.is_char_boundary(char_end)
        {
            return Err(Error::Validation(format!(
                "character span [{char_start}, {char_end}) invalid for passage {}",
                passage.id
            )));
        }
        let first = passage.tokens.iter().position(|t| t.char_end > char_start);
        let last = passage.tokens.iter().rposition(|t| t.char_start < char_end);
        match (first, last) {
            (Some(a), Some(b)) if a <= b => Ok(AnswerSpan {
                token_start: a,
                token_end: b + 1,
                char_start,
                char_end,
                text: passage.text[char_start..char_end].to_string(),
            }),
            _ => Err(Error::Validation(format!(
                "character span [{char_start}, {char_end}) covers no token in passage {}",
                passage.id
            ))),
        }
    }

    pub fn token_len(&self) -> usize {
        self.token_end - self.token_start
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TextRecord", into = "TextRecord")]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Passage {
            id: id.into(),
            text,
            tokens,
        }
    }

    /// Passage whose id is derived from its content, so identical contexts
    /// share an id.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let id = content_id(&text);
        Passage::new(id, text)
    }

    pub fn token_texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }
}

impl From<TextRecord> for Passage {
    fn from(r: TextRecord) -> Self {
        Passage::new(r.id, r.text)
    }
}

impl From<Passage> for TextRecord {
    fn from(p: Passage) -> Self {
        TextRecord {
            id: p.id,
            text: p.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TextRecord", into = "TextRecord")]
pub struct Question {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Question {
            id: id.into(),
            text,
            tokens,
        }
    }
}

impl From<TextRecord> for Question {
    fn from(r: TextRecord) -> Self {
        Question::new(r.id, r.text)
    }
}

impl From<Question> for TextRecord {
    fn from(q: Question) -> Self {
        TextRecord {
            id: q.id,
            text: q.text,
        }
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn content_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub question: Question,
    pub answers: Vec<AnswerSpan>,
    pub passage: Passage,
}

impl Case {
    /// Validates the case invariants: a non-empty question, at least one
    /// answer, and every answer matching its passage slice.
    pub fn new(question: Question, answers: Vec<AnswerSpan>, passage: Passage) -> Result<Self> {
        let case = Case {
            question,
            answers,
            passage,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn id(&self) -> &str {
        &self.question.id
    }

    pub fn validate(&self) -> Result<()> {
        let qid = &self.question.id;
        if self.question.text.trim().is_empty() {
            return Err(Error::Validation(format!("question {qid} has empty text")));
        }
        if self.answers.is_empty() {
            return Err(Error::Validation(format!("question {qid} has no answers")));
        }
        let p = &self.passage;
        for a in &self.answers {
            if a.token_start >= a.token_end || a.token_end > p.tokens.len() {
                return Err(Error::Validation(format!(
                    "answer {:?} of {qid} has token span out of bounds",
                    a.text
                )));
            }
            if a.char_end > p.text.len()
                || a.char_start >= a.char_end
                || p.text.get(a.char_start..a.char_end) != Some(a.text.as_str())
            {
                return Err(Error::Validation(format!(
                    "answer {:?} of {qid} does not match passage text at [{}, {})",
                    a.text, a.char_start, a.char_end
                )));
            }
        }
        Ok(())
    }

    /// Distinct answer strings, in first-seen order.
    pub fn answer_texts(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.answers
            .iter()
            .map(|a| a.text.as_str())
            .filter(|t| seen.insert(*t))
            .collect()
    }

    /// Restricts the passage to `radius` tokens on either side of the first
    /// gold answer. Answers falling outside the window are dropped.
    pub fn truncate_context(&self, radius: usize) -> Result<Case> {
        let first = self
            .answers
            .iter()
            .min_by_key(|a| (a.char_start, a.char_end))
            .expect("case has answers");
        let toks = &self.passage.tokens;
        let lo = first.token_start.saturating_sub(radius);
        let hi = (first.token_end + radius).min(toks.len());
        let byte_lo = toks[lo].char_start;
        let byte_hi = toks[hi - 1].char_end;
        let passage = Passage::from_text(&self.passage.text[byte_lo..byte_hi]);
        let answers = self
            .answers
            .iter()
            .filter(|a| a.char_start >= byte_lo && a.char_end <= byte_hi)
            .map(|a| AnswerSpan::from_chars(&passage, a.char_start - byte_lo, a.char_end - byte_lo))
            .collect::<Result<Vec<_>>>()?;
        Case::new(self.question.clone(), answers, passage)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, cases: Vec<Case>) -> Result<Self> {
        let d = Dataset {
            name: name.into(),
            cases,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for c in &self.cases {
            c.validate()?;
            if !ids.insert(c.id()) {
                return Err(Error::Validation(format!(
                    "duplicate question id {} in dataset {}",
                    c.id(),
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, qid: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id() == qid)
    }

    /// Writes the dataset as JSONL: a header line `{"dataset": name}` followed
    /// by one case per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::json!({ "dataset": self.name });
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        for c in &self.cases {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = open_maybe_gz(path)?;
        let file = path.display().to_string();
        let mut name = String::new();
        let mut cases = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                let v: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|e| Error::format(&file, "line", 1, e.to_string()))?;
                if let Some(n) = v.get("dataset").and_then(|n| n.as_str()) {
                    name = n.to_string();
                    continue;
                }
            }
            let case: Case = serde_json::from_str(&line)
                .map_err(|e| Error::format(&file, "line", i as u64 + 1, e.to_string()))?;
            cases.push(case);
        }
        Dataset::new(name, cases)
    }
}

pub(crate) fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

#[derive(Debug, Deserialize)]
struct MrqaLine {
    context: String,
    #[serde(default)]
    qas: Vec<MrqaQa>,
}

#[derive(Debug, Deserialize)]
struct MrqaQa {
    qid: String,
    question: String,
    #[serde(default)]
    detected_answers: Vec<MrqaDetected>,
}

#[derive(Debug, Deserialize)]
struct MrqaDetected {
    text: String,
    char_spans: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number in the source file.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub lines_read: usize,
    pub cases: usize,
    pub skipped_lines: usize,
    pub errors: Vec<LineError>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub summary: IngestSummary,
}

/// Reads an MRQA JSONL file (plain or gzip). One case is produced per
/// (question, context) pair; the answer set is the union of all detected
/// occurrences. Lines that fail to parse or whose offsets disagree with the
/// context are skipped and reported in the summary.
pub fn ingest_mrqa(path: &Path, limit: Option<usize>) -> Result<Ingested> {
    let reader = open_maybe_gz(path)?;
    let mut name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut cases = Vec::new();
    let mut summary = IngestSummary::default();
    let mut seen_ids = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        if limit.is_some_and(|l| cases.len() >= l) {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        summary.lines_read += 1;
        if i == 0 {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                if let Some(h) = v.get("header") {
                    if let Some(ds) = h.get("dataset").and_then(|d| d.as_str()) {
                        name = ds.to_string();
                    }
                    continue;
                }
            }
        }
        let record: MrqaLine = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                summary.skipped_lines += 1;
                summary.errors.push(LineError {
                    line: lineno,
                    message: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        match cases_from_line(record) {
            Ok(line_cases) => {
                for c in line_cases {
                    if limit.is_some_and(|l| cases.len() >= l) {
                        break;
                    }
                    if !seen_ids.insert(c.question.id.clone()) {
                        summary.errors.push(LineError {
                            line: lineno,
                            message: format!("duplicate qid {} dropped", c.question.id),
                        });
                        continue;
                    }
                    cases.push(c);
                }
            }
            Err(e) => {
                summary.skipped_lines += 1;
                summary.errors.push(LineError {
                    line: lineno,
                    message: e.to_string(),
                });
            }
        }
    }
    summary.cases = cases.len();
    Ok(Ingested {
        dataset: Dataset { name, cases },
        summary,
    })
}

fn cases_from_line(record: MrqaLine) -> Result<Vec<Case>> {
    let passage = Passage::from_text(record.context);
    // byte offset of every code point, plus the end
    let bounds: Vec<usize> = passage
        .text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(passage.text.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    let mut out = Vec::with_capacity(record.qas.len());
    for qa in record.qas {
        let mut spans: BTreeMap<(usize, usize), AnswerSpan> = BTreeMap::new();
        for det in &qa.detected_answers {
            for &[s, e_incl] in &det.char_spans {
                if s > e_incl || e_incl >= n_chars {
                    return Err(Error::Validation(format!(
                        "qid {}: char span [{s}, {e_incl}] out of bounds for context of {n_chars} chars",
                        qa.qid
                    )));
                }
                let (bs, be) = (bounds[s], bounds[e_incl + 1]);
                let slice = &passage.text[bs..be];
                if slice != det.text {
                    return Err(Error::Validation(format!(
                        "qid {}: answer {:?} does not match context slice {:?}",
                        qa.qid, det.text, slice
                    )));
                }
                let span = AnswerSpan::from_chars(&passage, bs, be)?;
                spans.entry((bs, be)).or_insert(span);
            }
        }
        if spans.is_empty() {
            return Err(Error::Validation(format!(
                "qid {} has no detected answers",
                qa.qid
            )));
        }
        let question = Question::new(qa.qid, qa.question);
        out.push(Case::new(
            question,
            spans.into_values().collect(),
            passage.clone(),
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub cases: usize,
    pub mean_answers_per_case: f64,
    /// Distinct (question text, answer text) pairs.
    pub unique_pairs: usize,
    /// Pairs answered from at least two distinct passages.
    pub multi_context_pairs: usize,
    pub multi_context_fraction: f64,
    pub max_contexts_per_pair: usize,
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    if d.cases.is_empty() {
        return DatasetStats::default();
    }
    let total_answers: usize = d.cases.iter().map(|c| c.answers.len()).sum();
    let mut contexts: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
    for c in &d.cases {
        for a in c.answer_texts() {
            contexts
                .entry((c.question.text.as_str(), a))
                .or_default()
                .insert(c.passage.id.as_str());
        }
    }
    let multi = contexts.values().filter(|s| s.len() >= 2).count();
    DatasetStats {
        cases: d.cases.len(),
        mean_answers_per_case: total_answers as f64 / d.cases.len() as f64,
        unique_pairs: contexts.len(),
        multi_context_pairs: multi,
        multi_context_fraction: multi as f64 / contexts.len().max(1) as f64,
        max_contexts_per_pair: contexts.values().map(|s| s.len()).max().unwrap_or(0),
    }
}
