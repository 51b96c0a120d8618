//! Answer-string and span-offset metrics with dataset-level aggregation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Case, Dataset};
use crate::error::{Error, Result};
use crate::reuse::PredictionRecord;
use crate::spanner::generate_candidates;
use crate::textproc::EntityRecognizer;

const ARTICLES: &[&str] = &["a", "an", "the"];

/// Lowercases, strips ASCII punctuation, drops the articles `a`, `an`, `the`
/// and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<bool> {
    if golds.is_empty() {
        return Err(Error::Precondition(
            "exact match needs at least one gold answer".into(),
        ));
    }
    let p = normalize_answer(pred);
    Ok(golds.iter().any(|g| normalize_answer(g.as_ref()) == p))
}

fn bag_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Maximum bag-of-tokens F1 against any gold; 0 when `golds` is empty.
pub fn token_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(pred);
    let pt: Vec<&str> = p.split_whitespace().collect();
    golds
        .iter()
        .map(|g| {
            let g = normalize_answer(g.as_ref());
            let gt: Vec<&str> = g.split_whitespace().collect();
            bag_f1(&pt, &gt)
        })
        .fold(0.0, f64::max)
}

/// Half-open index range `[start, end)` inside one passage. The unit
/// (characters or tokens) is up to the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRef {
    pub passage_id: String,
    pub start: usize,
    pub end: usize,
}

impl SpanRef {
    pub fn new(passage_id: impl Into<String>, start: usize, end: usize) -> Self {
        SpanRef {
            passage_id: passage_id.into(),
            start,
            end,
        }
    }

    fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }
}

fn check_golds(pred: &SpanRef, golds: &[SpanRef]) -> Result<()> {
    if golds.is_empty() {
        return Err(Error::Precondition(
            "span metrics need at least one gold span".into(),
        ));
    }
    if let Some(g) = golds.iter().find(|g| g.passage_id != pred.passage_id) {
        return Err(Error::Validation(format!(
            "predicted span is in passage {} but gold span is in passage {}",
            pred.passage_id, g.passage_id
        )));
    }
    Ok(())
}

/// True iff the predicted offsets equal those of some gold occurrence.
pub fn span_em(pred: &SpanRef, golds: &[SpanRef]) -> Result<bool> {
    check_golds(pred, golds)?;
    Ok(golds
        .iter()
        .any(|g| g.start == pred.start && g.end == pred.end))
}

/// Maximum F1 over gold occurrences of the overlap between index sets.
pub fn span_f1(pred: &SpanRef, golds: &[SpanRef]) -> Result<f64> {
    check_golds(pred, golds)?;
    if pred.len() == 0 {
        return Ok(0.0);
    }
    Ok(golds
        .iter()
        .map(|g| {
            let overlap = pred.end.min(g.end).saturating_sub(pred.start.max(g.start));
            if overlap == 0 || g.len() == 0 {
                return 0.0;
            }
            let precision = overlap as f64 / pred.len() as f64;
            let recall = overlap as f64 / g.len() as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanUnit {
    /// Unicode scalar indices into the passage text.
    #[default]
    Char,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    #[default]
    All,
    /// Cases with some gold answer whose normalized text occurs at least
    /// twice in the normalized passage.
    MultiMention,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub span_unit: SpanUnit,
    pub subset: Subset,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub em: f64,
    pub f1: f64,
    pub span_em: f64,
    pub span_f1: f64,
    pub n: usize,
    pub candidate_recall: f64,
    /// Evaluated questions with no prediction; they score 0.
    pub missing: usize,
    /// Predictions whose question is not among the evaluated cases.
    pub unmatched_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub qid: String,
    pub prediction: Option<String>,
    pub golds: Vec<String>,
    pub em: f64,
    pub f1: f64,
    pub span_em: f64,
    pub span_f1: f64,
    pub gold_in_candidates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub result: EvalResult,
    pub instances: Vec<InstanceScore>,
}

fn char_index(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

fn occurrences(hay: &[&str], needle: &[&str]) -> usize {
    if needle.is_empty() || needle.len() > hay.len() {
        return 0;
    }
    hay.windows(needle.len()).filter(|w| *w == needle).count()
}

pub fn is_multi_mention(case: &Case) -> bool {
    let passage = normalize_answer(&case.passage.text);
    let hay: Vec<&str> = passage.split_whitespace().collect();
    case.answers.iter().any(|a| {
        let g = normalize_answer(&a.text);
        let needle: Vec<&str> = g.split_whitespace().collect();
        occurrences(&hay, &needle) >= 2
    })
}

/// True iff some gold token range is among the passage's candidate spans.
pub fn gold_in_candidates(case: &Case, recognizer: &dyn EntityRecognizer) -> bool {
    let spans: BTreeSet<(usize, usize)> = generate_candidates(&case.passage, recognizer)
        .iter()
        .map(|c| c.offsets())
        .collect();
    case.answers
        .iter()
        .any(|a| spans.contains(&(a.token_start, a.token_end)))
}

fn score_instance(
    case: &Case,
    pred: Option<&PredictionRecord>,
    unit: SpanUnit,
) -> Result<InstanceScore> {
    let golds: Vec<String> = case.answer_texts().into_iter().map(String::from).collect();
    let mut s = InstanceScore {
        qid: case.id().to_string(),
        prediction: pred.map(|p| p.answer.clone()),
        golds,
        em: 0.0,
        f1: 0.0,
        span_em: 0.0,
        span_f1: 0.0,
        gold_in_candidates: false,
    };
    let Some(pred) = pred else {
        return Ok(s);
    };
    let text = &case.passage.text;
    let to_ref = |bs: usize, be: usize, ts: usize, te: usize, pid: &str| -> Result<SpanRef> {
        match unit {
            SpanUnit::Token => Ok(SpanRef::new(pid, ts, te)),
            SpanUnit::Char => {
                if be > text.len() || !text.is_char_boundary(bs) || !text.is_char_boundary(be) {
                    return Err(Error::Validation(format!(
                        "offsets [{bs}, {be}) invalid for passage {pid}"
                    )));
                }
                Ok(SpanRef::new(
                    pid,
                    char_index(text, bs),
                    char_index(text, be),
                ))
            }
        }
    };
    let gold_refs = case
        .answers
        .iter()
        .map(|a| {
            to_ref(
                a.char_start,
                a.char_end,
                a.token_start,
                a.token_end,
                &case.passage.id,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pred_ref = if pred.passage_id == case.passage.id {
        to_ref(
            pred.char_start,
            pred.char_end,
            pred.token_start,
            pred.token_end,
            &pred.passage_id,
        )?
    } else {
        SpanRef::new(pred.passage_id.clone(), 0, 0)
    };
    s.em = f64::from(u8::from(exact_match(&pred.answer, &s.golds)?));
    s.f1 = token_f1(&pred.answer, &s.golds);
    s.span_em = f64::from(u8::from(span_em(&pred_ref, &gold_refs)?));
    s.span_f1 = span_f1(&pred_ref, &gold_refs)?;
    Ok(s)
}

/// Scores `predictions` against every case of `dataset` (after the subset
/// filter). Means are reported on a 0-100 scale; candidate recall on 0-1.
/// Duplicate predictions for one question are an error.
pub fn evaluate(
    predictions: &[PredictionRecord],
    dataset: &Dataset,
    recognizer: &dyn EntityRecognizer,
    opts: EvalOptions,
) -> Result<Evaluation> {
    let mut by_qid: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in predictions {
        if by_qid.insert(p.qid.as_str(), p).is_some() {
            return Err(Error::Validation(format!(
                "duplicate prediction for question {}",
                p.qid
            )));
        }
    }
    let cases: Vec<&Case> = dataset
        .cases
        .iter()
        .filter(|c| opts.subset == Subset::All || is_multi_mention(c))
        .collect();
    let mut instances = Vec::with_capacity(cases.len());
    let mut missing = 0;
    for case in &cases {
        let pred = by_qid.get(case.id()).copied();
        if pred.is_none() {
            missing += 1;
        }
        let mut s = score_instance(case, pred, opts.span_unit)?;
        s.gold_in_candidates = gold_in_candidates(case, recognizer);
        instances.push(s);
    }
    let evaluated: BTreeSet<&str> = cases.iter().map(|c| c.id()).collect();
    let unmatched_predictions = by_qid.keys().filter(|q| !evaluated.contains(*q)).count();
    let n = instances.len();
    let mean = |f: &dyn Fn(&InstanceScore) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            instances.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let result = EvalResult {
        em: 100.0 * mean(&|s| s.em),
        f1: 100.0 * mean(&|s| s.f1),
        span_em: 100.0 * mean(&|s| s.span_em),
        span_f1: 100.0 * mean(&|s| s.span_f1),
        n,
        candidate_recall: mean(&|s| f64::from(u8::from(s.gold_in_candidates))),
        missing,
        unmatched_predictions,
    };
    Ok(Evaluation { result, instances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnswerSpan, Passage, Question};
    use crate::textproc::RuleRecognizer;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Telephone!"), "telephone");
        assert_eq!(normalize_answer("Graham Bell"), "graham bell");
        assert_eq!(normalize_answer("a  b"), "b");
        assert_eq!(normalize_answer("  An   apple, the pie "), "apple pie");
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("Graham Bell", &["Graham Bell"]).unwrap());
        assert!(!exact_match("Bell", &["Graham Bell"]).unwrap());
        assert!(exact_match("the telephone", &["telephone"]).unwrap());
        assert!(exact_match::<&str>("x", &[]).is_err());
    }

    #[test]
    fn token_f1_examples() {
        let f = token_f1("Graham Bell", &["Alexander Graham Bell"]);
        assert!((f - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("same words", &["same words"]), 1.0);
        assert_eq!(token_f1("alpha", &["beta"]), 0.0);
        assert_eq!(token_f1("the", &["a"]), 1.0);
        assert_eq!(token_f1("the", &["beta"]), 0.0);
        assert_eq!(token_f1("beta", &["nothing", "beta gamma"]), 2.0 / 3.0);
    }

    #[test]
    fn span_examples() {
        let g = [SpanRef::new("p", 10, 20)];
        assert_eq!(span_f1(&SpanRef::new("p", 10, 20), &g).unwrap(), 1.0);
        assert_eq!(span_f1(&SpanRef::new("p", 15, 25), &g).unwrap(), 0.5);
        assert_eq!(span_f1(&SpanRef::new("p", 20, 30), &g).unwrap(), 0.0);
        assert_eq!(span_f1(&SpanRef::new("p", 12, 12), &g).unwrap(), 0.0);
        assert!(span_em(&SpanRef::new("p", 10, 20), &g).unwrap());
        assert!(!span_em(&SpanRef::new("p", 10, 21), &g).unwrap());
        assert!(span_em(&SpanRef::new("q", 10, 20), &g).is_err());
        assert!(span_f1(&SpanRef::new("p", 1, 2), &[]).is_err());
    }

    fn case(qid: &str, text: &str, spans: &[(usize, usize)]) -> Case {
        let p = Passage::new(format!("p-{qid}"), text);
        let answers = spans
            .iter()
            .map(|&(s, e)| AnswerSpan::from_tokens(&p, s, e).unwrap())
            .collect();
        Case::new(Question::new(qid, "Who wrote it?"), answers, p).unwrap()
    }

    fn record(c: &Case, ts: usize, te: usize) -> PredictionRecord {
        let a = AnswerSpan::from_tokens(&c.passage, ts, te).unwrap();
        PredictionRecord {
            qid: c.id().to_string(),
            passage_id: c.passage.id.clone(),
            answer: a.text,
            char_start: a.char_start,
            char_end: a.char_end,
            token_start: ts,
            token_end: te,
            aggregate: 0.0,
            provenance: vec![],
            per_case_predictions: vec![],
            relaxed_retrieval: false,
        }
    }

    #[test]
    fn span_em_distinguishes_occurrences() {
        let c = case("q", "Bell met Bell .", &[(2, 3)]);
        let r = RuleRecognizer::default();
        let ev = evaluate(
            &[record(&c, 0, 1)],
            &Dataset::new("d", vec![c.clone()]).unwrap(),
            &r,
            EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(ev.result.em, 100.0);
        assert_eq!(ev.result.span_em, 0.0);
        assert_eq!(ev.result.span_f1, 0.0);
    }

    #[test]
    fn evaluate_aggregates() {
        let a = case("a", "Mary wrote the book .", &[(0, 1)]);
        let b = case("b", "John wrote the song .", &[(0, 1)]);
        let d = Dataset::new("d", vec![a.clone(), b.clone()]).unwrap();
        let r = RuleRecognizer::default();
        let perfect = evaluate(
            &[record(&a, 0, 1), record(&b, 0, 1)],
            &d,
            &r,
            EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(perfect.result.em, 100.0);
        assert_eq!(perfect.result.f1, 100.0);
        assert_eq!(perfect.result.span_em, 100.0);
        assert_eq!(perfect.result.span_f1, 100.0);
        assert_eq!(perfect.result.candidate_recall, 1.0);
        let half = evaluate(
            &[record(&a, 0, 1), record(&b, 3, 4)],
            &d,
            &r,
            EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(half.result.em, 50.0);
        let none = evaluate(&[], &d, &r, EvalOptions::default()).unwrap();
        assert_eq!(none.result.em, 0.0);
        assert_eq!(none.result.span_f1, 0.0);
        assert_eq!(none.result.n, 2);
        assert_eq!(none.result.missing, 2);
        assert!(evaluate(
            &[record(&a, 0, 1), record(&a, 0, 1)],
            &d,
            &r,
            EvalOptions::default()
        )
        .is_err());
    }

    #[test]
    fn span_f1_counts_characters_not_bytes() {
        let c = case("q", "Zoë Ångström met Bo .", &[(0, 2)]);
        let pred = record(&c, 1, 2);
        let s = score_instance(&c, Some(&pred), SpanUnit::Char).unwrap();
        // gold covers 12 characters, prediction the last 8 of them
        let expected = 2.0 * (8.0 / 12.0) / (1.0 + 8.0 / 12.0);
        assert!((s.span_f1 - expected).abs() < 1e-12);
        let t = score_instance(&c, Some(&pred), SpanUnit::Token).unwrap();
        assert!((t.span_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multi_mention_subset() {
        let once = case("a", "Mary wrote the book .", &[(0, 1)]);
        let twice = case("b", "Mary met Mary at the book fair .", &[(0, 1)]);
        assert!(!is_multi_mention(&once));
        assert!(is_multi_mention(&twice));
        let d = Dataset::new("d", vec![once, twice]).unwrap();
        let opts = EvalOptions {
            subset: Subset::MultiMention,
            ..EvalOptions::default()
        };
        let ev = evaluate(&[], &d, &RuleRecognizer::default(), opts).unwrap();
        assert_eq!(ev.result.n, 1);
    }

    proptest! {
        #[test]
        fn self_match_and_ordering(words in prop::collection::vec("[a-zA-Z]{1,6}", 1..5),
                                   others in prop::collection::vec("[a-z ]{0,12}", 0..4)) {
            let x = words.join(" ");
            if !normalize_answer(&x).is_empty() {
                prop_assert!(exact_match(&x, &[x.as_str()]).unwrap());
                prop_assert_eq!(token_f1(&x, &[x.as_str()]), 1.0);
            }
            let mut golds = others.clone();
            golds.push(words[0].clone());
            let em = f64::from(u8::from(exact_match(&x, &golds).unwrap()));
            let f1 = token_f1(&x, &golds);
            prop_assert!(f1 >= em);
            let mut rev = golds.clone();
            rev.reverse();
            prop_assert_eq!(exact_match(&x, &golds).unwrap(), exact_match(&x, &rev).unwrap());
            prop_assert_eq!(f1, token_f1(&x, &rev));
        }

        #[test]
        fn span_em_implies_span_f1(start in 0usize..20, len in 1usize..10, extra in prop::collection::vec((0usize..30, 1usize..10), 0..4)) {
            let pred = SpanRef::new("p", start, start + len);
            let mut golds: Vec<SpanRef> = extra.iter().map(|&(s, l)| SpanRef::new("p", s, s + l)).collect();
            golds.push(pred.clone());
            prop_assert!(span_em(&pred, &golds).unwrap());
            prop_assert_eq!(span_f1(&pred, &golds).unwrap(), 1.0);
            let f = span_f1(&pred, &golds[..golds.len() - 1]).unwrap_or(0.0);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
