//! Answer prediction by reusing retrieved cases: every candidate span of the
//! target passage is scored against each retrieved case's answer vectors,
//! the per-case scores are summed, and the best candidate wins.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::casebase::{CaseEntry, Casebase, RetrievalConfig};
use crate::corpus::{Case, Passage, Question};
use crate::encoder::{cosine, dot, Embedding, EncoderBackend};
use crate::error::{Error, Result};
use crate::spanner::{generate_candidates, CandidateSpan};
use crate::textproc::{extract_wh_keyword, mask_with, EntityRecognizer};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Raw inner product.
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => cosine(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    /// Each case's scores are divided by their largest magnitude before
    /// summation, so every case contributes at most 1 per candidate.
    NormalizedSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReuseConfig {
    pub retrieval: RetrievalConfig,
    pub similarity: Similarity,
    pub aggregation: Aggregation,
    /// Retry retrieval without threshold and wh-filter when nothing survives.
    pub fallback_unfiltered: bool,
    /// Leave out the casebase entry whose id equals the query's id.
    pub exclude_self: bool,
}

impl ReuseConfig {
    pub fn new(k: usize) -> Self {
        ReuseConfig {
            retrieval: RetrievalConfig::inference(k),
            similarity: Similarity::Dot,
            aggregation: Aggregation::Sum,
            fallback_unfiltered: true,
            exclude_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub answer_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: CandidateSpan,
    pub per_case: Vec<CaseScore>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerCasePrediction {
    pub case_id: String,
    pub span: CandidateSpan,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub question_id: String,
    pub passage_id: String,
    pub answer: CandidateSpan,
    pub aggregate: f64,
    /// Contribution of every retrieved case to the winning candidate.
    pub provenance: Vec<CaseScore>,
    pub per_case_predictions: Vec<PerCasePrediction>,
    /// True when the filtered retrieval came back empty and the unfiltered
    /// fallback was used.
    pub relaxed_retrieval: bool,
}

/// For each candidate, the best score over the case's answers and the index
/// of the answer attaining it (first index on ties).
pub fn score_against_case(
    cand_vecs: &[Embedding],
    case: &CaseEntry,
    similarity: Similarity,
) -> Result<Vec<(f64, usize)>> {
    score_against_answers(cand_vecs, &case.answer_vecs, similarity)
}

pub fn score_against_answers(
    cand_vecs: &[Embedding],
    answer_vecs: &[Embedding],
    similarity: Similarity,
) -> Result<Vec<(f64, usize)>> {
    if answer_vecs.is_empty() {
        return Err(Error::Precondition("case has no answer vectors".into()));
    }
    cand_vecs
        .iter()
        .map(|c| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, a) in answer_vecs.iter().enumerate() {
                if a.dim() != c.dim() {
                    return Err(Error::DimMismatch {
                        expected: c.dim(),
                        actual: a.dim(),
                    });
                }
                let s = similarity.score(c, a);
                if s > best.0 {
                    best = (s, j);
                }
            }
            Ok(best)
        })
        .collect()
}

/// Ordering used to pick a winner: higher score, then earlier start, then
/// shorter span, then generation order.
fn better(a: (f64, &CandidateSpan, usize), b: (f64, &CandidateSpan, usize)) -> bool {
    match a.0.total_cmp(&b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => {
            (a.1.token_start, a.1.token_len(), a.2) < (b.1.token_start, b.1.token_len(), b.2)
        }
    }
}

fn argmax(cands: &[CandidateSpan], scores: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        best = match best {
            Some((bi, bs)) if !better((s, &cands[i], i), (bs, &cands[bi], bi)) => Some((bi, bs)),
            _ => Some((i, s)),
        };
    }
    best
}

/// Candidate most similar to the case's answer set.
pub fn predict_per_case(
    cands: &[CandidateSpan],
    cand_vecs: &[Embedding],
    case: &CaseEntry,
    similarity: Similarity,
) -> Result<CandidateSpan> {
    if cands.is_empty() {
        return Err(Error::NoCandidates(case.case.passage.id.clone()));
    }
    let scores = score_against_case(cand_vecs, case, similarity)?;
    let (i, _) = argmax(cands, scores.iter().map(|s| s.0)).expect("non-empty");
    Ok(cands[i].clone())
}

/// Scores every candidate against every retrieved case and aggregates.
pub fn score_candidates(
    cands: &[CandidateSpan],
    cand_vecs: &[Embedding],
    cases: &[&CaseEntry],
    similarity: Similarity,
    aggregation: Aggregation,
) -> Result<Vec<ScoredCandidate>> {
    if cand_vecs.len() != cands.len() {
        return Err(Error::Precondition(format!(
            "{} candidates but {} candidate vectors",
            cands.len(),
            cand_vecs.len()
        )));
    }
    let mut per_case: Vec<Vec<(f64, usize)>> = Vec::with_capacity(cases.len());
    for c in cases {
        let mut s = score_against_case(cand_vecs, c, similarity)?;
        if aggregation == Aggregation::NormalizedSum {
            let m = s.iter().fold(0.0f64, |m, x| m.max(x.0.abs()));
            if m > 0.0 {
                s.iter_mut().for_each(|x| x.0 /= m);
            }
        }
        per_case.push(s);
    }
    Ok(cands
        .iter()
        .enumerate()
        .map(|(i, cand)| {
            let scores: Vec<CaseScore> = cases
                .iter()
                .zip(&per_case)
                .map(|(c, s)| CaseScore {
                    case_id: c.id().to_string(),
                    answer_index: s[i].1,
                    score: s[i].0,
                })
                .collect();
            let aggregate = scores.iter().map(|s| s.score).sum();
            ScoredCandidate {
                candidate: cand.clone(),
                per_case: scores,
                aggregate,
            }
        })
        .collect())
}

/// Prediction from already-retrieved cases.
pub fn predict_from_cases(
    question_id: &str,
    passage: &Passage,
    cands: &[CandidateSpan],
    cand_vecs: &[Embedding],
    cases: &[&CaseEntry],
    similarity: Similarity,
    aggregation: Aggregation,
) -> Result<Prediction> {
    if cands.is_empty() {
        return Err(Error::NoCandidates(passage.id.clone()));
    }
    if cases.is_empty() {
        return Err(Error::NoCase(question_id.to_string()));
    }
    let scored = score_candidates(cands, cand_vecs, cases, similarity, aggregation)?;
    let (win, aggregate) = argmax(cands, scored.iter().map(|s| s.aggregate)).expect("non-empty");
    let per_case_predictions = cases
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (i, score) =
                argmax(cands, scored.iter().map(|s| s.per_case[k].score)).expect("non-empty");
            PerCasePrediction {
                case_id: c.id().to_string(),
                span: cands[i].clone(),
                score,
            }
        })
        .collect();
    let winner = &scored[win];
    Ok(Prediction {
        question_id: question_id.to_string(),
        passage_id: passage.id.clone(),
        answer: winner.candidate.clone(),
        aggregate,
        provenance: winner.per_case.clone(),
        per_case_predictions,
        relaxed_retrieval: false,
    })
}

/// Retrieves cases for `q`, scores the candidates of `p` against them and
/// returns the best-aggregated span with full provenance.
pub fn predict(
    q: &Question,
    p: &Passage,
    cb: &Casebase,
    backend: &dyn EncoderBackend,
    recognizer: &dyn EntityRecognizer,
    cfg: &ReuseConfig,
) -> Result<Prediction> {
    let mq = mask_with(q, recognizer);
    let qvec = backend.encode_question(&mq)?;
    let wh = extract_wh_keyword(q);
    let rcfg = if cfg.exclude_self {
        cfg.retrieval.clone().excluding(q.id.clone())
    } else {
        cfg.retrieval.clone()
    };
    let mut hits = cb.retrieve(&qvec, wh, &rcfg)?;
    let mut relaxed = false;
    if hits.is_empty() && cfg.fallback_unfiltered {
        hits = cb.retrieve(&qvec, wh, &rcfg.unfiltered())?;
        relaxed = true;
    }
    if hits.is_empty() {
        return Err(Error::NoCase(q.id.clone()));
    }
    let cands = generate_candidates(p, recognizer);
    if cands.is_empty() {
        return Err(Error::NoCandidates(p.id.clone()));
    }
    let offsets: Vec<_> = cands.iter().map(CandidateSpan::offsets).collect();
    let cand_vecs = backend.encode_spans(p, &offsets)?;
    let cases: Vec<&CaseEntry> = hits.iter().map(|h| h.entry).collect();
    let mut pred = predict_from_cases(
        &q.id,
        p,
        &cands,
        &cand_vecs,
        &cases,
        cfg.similarity,
        cfg.aggregation,
    )?;
    pred.relaxed_retrieval = relaxed;
    Ok(pred)
}

/// Predicts every case of `cases` with up to `jobs` worker threads. Output
/// order follows input order regardless of scheduling.
pub fn predict_all(
    cases: &[Case],
    cb: &Casebase,
    backend: &dyn EncoderBackend,
    recognizer: &dyn EntityRecognizer,
    cfg: &ReuseConfig,
    jobs: usize,
) -> Vec<Result<Prediction>> {
    let run = |c: &Case| predict(&c.question, &c.passage, cb, backend, recognizer, cfg);
    if jobs <= 1 {
        return cases.iter().map(run).collect();
    }
    let chunk = cases.len().div_ceil(jobs).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub case_qid: String,
    pub answer_index: usize,
    pub answer: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCaseRecord {
    pub case_qid: String,
    pub answer: String,
    pub char_start: usize,
    pub char_end: usize,
    pub score: f64,
}

/// One line of the prediction JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: String,
    pub passage_id: String,
    pub answer: String,
    pub char_start: usize,
    pub char_end: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub aggregate: f64,
    pub provenance: Vec<ProvenanceRecord>,
    pub per_case_predictions: Vec<PerCaseRecord>,
    #[serde(default)]
    pub relaxed_retrieval: bool,
}

impl PredictionRecord {
    pub fn from_prediction(pred: &Prediction, cb: &Casebase) -> Self {
        let provenance = pred
            .provenance
            .iter()
            .map(|cs| ProvenanceRecord {
                case_qid: cs.case_id.clone(),
                answer_index: cs.answer_index,
                answer: cb
                    .get(&cs.case_id)
                    .and_then(|e| e.case.answers.get(cs.answer_index))
                    .map(|a| a.text.clone())
                    .unwrap_or_default(),
                score: cs.score,
            })
            .collect();
        PredictionRecord {
            qid: pred.question_id.clone(),
            passage_id: pred.passage_id.clone(),
            answer: pred.answer.text.clone(),
            char_start: pred.answer.char_start,
            char_end: pred.answer.char_end,
            token_start: pred.answer.token_start,
            token_end: pred.answer.token_end,
            aggregate: pred.aggregate,
            provenance,
            per_case_predictions: pred
                .per_case_predictions
                .iter()
                .map(|p| PerCaseRecord {
                    case_qid: p.case_id.clone(),
                    answer: p.span.text.clone(),
                    char_start: p.span.char_start,
                    char_end: p.span.char_end,
                    score: p.score,
                })
                .collect(),
            relaxed_retrieval: pred.relaxed_retrieval,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerSpan;
    use std::collections::BTreeSet;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn cand(s: usize, e: usize) -> CandidateSpan {
        CandidateSpan {
            token_start: s,
            token_end: e,
            char_start: s,
            char_end: e,
            text: format!("{s}-{e}"),
            sources: BTreeSet::new(),
        }
    }

    fn entry(id: &str, answers: &[&[f64]]) -> CaseEntry {
        let p = Passage::new(format!("p{id}"), "a b c d e f");
        let spans = (0..answers.len())
            .map(|i| AnswerSpan::from_tokens(&p, i, i + 1).unwrap())
            .collect();
        CaseEntry {
            case: Case::new(Question::new(id, "who?"), spans, p).unwrap(),
            question_vec: emb(&[1.0, 0.0]),
            answer_vecs: answers.iter().map(|a| emb(a)).collect(),
            wh: None,
        }
    }

    #[test]
    fn max_over_answers() {
        let e = entry("c", &[&[1.2, 0.0], &[0.0, 3.4]]);
        let s = score_against_case(&[emb(&[1.0, 1.0])], &e, Similarity::Dot).unwrap();
        assert_eq!(s, vec![(3.4, 1)]);
        let z = score_against_case(&[emb(&[0.0, 0.0])], &e, Similarity::Dot).unwrap();
        assert_eq!(z[0].0, 0.0);
    }

    #[test]
    fn matching_vector_wins_over_orthogonal() {
        let v = [0.6, 0.8];
        let e = entry("c", &[&v]);
        let cands = vec![cand(0, 1), cand(1, 2)];
        let vecs = vec![emb(&[-0.8, 0.6]), emb(&v)];
        let s = score_against_case(&vecs, &e, Similarity::Dot).unwrap();
        assert!((s[1].0 - 1.0).abs() < 1e-15);
        assert_eq!(
            predict_per_case(&cands, &vecs, &e, Similarity::Dot).unwrap(),
            cands[1]
        );
    }

    #[test]
    fn per_case_ties_and_singletons() {
        let e = entry("c", &[&[1.0, 0.0]]);
        let cands = vec![cand(2, 3), cand(0, 2), cand(0, 1)];
        let vecs = vec![emb(&[1.0, 0.0]); 3];
        assert_eq!(
            predict_per_case(&cands, &vecs, &e, Similarity::Dot).unwrap(),
            cands[2]
        );
        let one = predict_per_case(&cands[..1], &vecs[..1], &e, Similarity::Dot).unwrap();
        assert_eq!(one, cands[0]);
        assert!(predict_per_case(&[], &[], &e, Similarity::Dot).is_err());
    }

    #[test]
    fn aggregate_is_sum_of_per_case_scores() {
        let e1 = entry("x", &[&[1.0, 0.0]]);
        let e2 = entry("y", &[&[0.0, 1.0], &[0.5, 0.5]]);
        let cands = vec![cand(0, 1), cand(1, 2), cand(2, 3)];
        let vecs = vec![emb(&[2.0, 0.0]), emb(&[0.0, 3.0]), emb(&[1.0, 1.0])];
        let p = Passage::new("t", "a b c");
        let pred = predict_from_cases(
            "q",
            &p,
            &cands,
            &vecs,
            &[&e1, &e2],
            Similarity::Dot,
            Aggregation::Sum,
        )
        .unwrap();
        // sums: c0 = 2 + 1 = 3, c1 = 0 + 3 = 3, c2 = 1 + 1 = 2 -> tie broken by start
        assert_eq!(pred.answer, cands[0]);
        assert!((pred.aggregate - 3.0).abs() < 1e-12);
        assert_eq!(pred.provenance.len(), 2);
        assert_eq!(pred.provenance[1].answer_index, 1);
        assert_eq!(pred.per_case_predictions[0].span, cands[0]);
        assert_eq!(pred.per_case_predictions[1].span, cands[1]);
    }

    #[test]
    fn single_case_matches_per_case_prediction() {
        let e = entry("x", &[&[0.3, -1.0]]);
        let cands = vec![cand(0, 1), cand(1, 2), cand(2, 3)];
        let vecs = vec![emb(&[2.0, 0.0]), emb(&[0.0, -3.0]), emb(&[1.0, 1.0])];
        let p = Passage::new("t", "a b c");
        let pred = predict_from_cases(
            "q",
            &p,
            &cands,
            &vecs,
            &[&e],
            Similarity::Dot,
            Aggregation::Sum,
        )
        .unwrap();
        assert_eq!(
            pred.answer,
            predict_per_case(&cands, &vecs, &e, Similarity::Dot).unwrap()
        );
    }

    #[test]
    fn positive_scaling_preserves_argmax() {
        let e1 = entry("x", &[&[1.0, 0.2]]);
        let e2 = entry("y", &[&[-0.4, 1.0]]);
        let cands = vec![cand(0, 1), cand(1, 2), cand(2, 3)];
        let vecs = vec![emb(&[0.5, 0.1]), emb(&[0.2, 0.9]), emb(&[0.7, 0.7])];
        let p = Passage::new("t", "a b c");
        let base = predict_from_cases(
            "q",
            &p,
            &cands,
            &vecs,
            &[&e1, &e2],
            Similarity::Dot,
            Aggregation::Sum,
        )
        .unwrap();
        let c = 3.5;
        let scale = |e: &CaseEntry| CaseEntry {
            answer_vecs: e.answer_vecs.iter().map(|v| v.scaled(c)).collect(),
            ..e.clone()
        };
        let (s1, s2) = (scale(&e1), scale(&e2));
        let svecs: Vec<_> = vecs.iter().map(|v| v.scaled(c)).collect();
        let scaled = predict_from_cases(
            "q",
            &p,
            &cands,
            &svecs,
            &[&s1, &s2],
            Similarity::Dot,
            Aggregation::Sum,
        )
        .unwrap();
        assert_eq!(scaled.answer, base.answer);
        assert!((scaled.aggregate - c * c * base.aggregate).abs() < 1e-12);
    }

    #[test]
    fn normalized_sum_bounds_each_case() {
        let e1 = entry("x", &[&[100.0, 0.0]]);
        let e2 = entry("y", &[&[0.0, 1.0]]);
        let cands = vec![cand(0, 1), cand(1, 2)];
        let vecs = vec![emb(&[1.0, 0.0]), emb(&[0.9, 1.0])];
        let scored = score_candidates(
            &cands,
            &vecs,
            &[&e1, &e2],
            Similarity::Dot,
            Aggregation::NormalizedSum,
        )
        .unwrap();
        for s in &scored {
            assert!(s.per_case.iter().all(|c| c.score.abs() <= 1.0 + 1e-12));
        }
        // raw sum prefers c1 (90 + 1); normalized: c0 = 1 + 0, c1 = 0.9 + 1
        assert!(scored[1].aggregate > scored[0].aggregate);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let p = Passage::new("t", "a");
        let e = entry("x", &[&[1.0, 0.0]]);
        assert!(matches!(
            predict_from_cases("q", &p, &[], &[], &[&e], Similarity::Dot, Aggregation::Sum),
            Err(Error::NoCandidates(_))
        ));
        assert!(matches!(
            predict_from_cases(
                "q",
                &p,
                &[cand(0, 1)],
                &[emb(&[1.0, 0.0])],
                &[],
                Similarity::Dot,
                Aggregation::Sum
            ),
            Err(Error::NoCase(_))
        ));
    }
}
