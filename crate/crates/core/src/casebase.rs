//! The casebase: cases with cached question and answer-span embeddings,
//! searched exhaustively by cosine similarity.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Case, Dataset};
use crate::encoder::{
    read_embedding_files, read_json, write_embedding_files, write_json, Embedding, EmbeddingKey,
    EncoderBackend,
};
use crate::error::{Error, Result};
use crate::textproc::{extract_wh_keyword, mask_with, EntityRecognizer, WhKeyword};

/// Similarity floor applied to training-time retrieval.
pub const TRAIN_SIM_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseEntry {
    pub case: Case,
    pub question_vec: Embedding,
    pub answer_vecs: Vec<Embedding>,
    pub wh: Option<WhKeyword>,
}

impl CaseEntry {
    pub fn id(&self) -> &str {
        self.case.id()
    }
}

/// Masks and encodes one case.
pub fn encode_case(
    case: &Case,
    backend: &dyn EncoderBackend,
    recognizer: &dyn EntityRecognizer,
) -> Result<CaseEntry> {
    let wrap = |e: Error| Error::Build {
        id: case.id().to_string(),
        source: Box::new(e),
    };
    let mq = mask_with(&case.question, recognizer);
    let question_vec = backend.encode_question(&mq).map_err(wrap)?;
    let spans: Vec<_> = case
        .answers
        .iter()
        .map(|a| (a.token_start, a.token_end))
        .collect();
    let answer_vecs = backend.encode_spans(&case.passage, &spans).map_err(wrap)?;
    Ok(CaseEntry {
        case: case.clone(),
        question_vec,
        answer_vecs,
        wh: extract_wh_keyword(&case.question),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    pub k: usize,
    pub sim_threshold: Option<f64>,
    pub use_wh_filter: bool,
    pub exclude_question_id: Option<String>,
}

impl RetrievalConfig {
    /// Test-time retrieval: no threshold, no wh-filter.
    pub fn inference(k: usize) -> Self {
        RetrievalConfig {
            k,
            sim_threshold: None,
            use_wh_filter: false,
            exclude_question_id: None,
        }
    }

    /// Training-time retrieval: similarity floor 0.95 and wh-filter on.
    pub fn training(k: usize) -> Self {
        RetrievalConfig {
            k,
            sim_threshold: Some(TRAIN_SIM_THRESHOLD),
            use_wh_filter: true,
            exclude_question_id: None,
        }
    }

    pub fn excluding(mut self, qid: impl Into<String>) -> Self {
        self.exclude_question_id = Some(qid.into());
        self
    }

    /// Same config with the threshold and wh-filter switched off.
    pub fn unfiltered(&self) -> Self {
        RetrievalConfig {
            sim_threshold: None,
            use_wh_filter: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Validation("retrieval k must be at least 1".into()));
        }
        if let Some(t) = self.sim_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Validation(format!(
                    "similarity threshold {t} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetrievedCase<'a> {
    pub entry: &'a CaseEntry,
    /// Position of the entry in the casebase.
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Casebase {
    entries: Vec<CaseEntry>,
    dim: usize,
    encoder_fingerprint: String,
    by_id: HashMap<String, usize>,
    by_wh: HashMap<Option<WhKeyword>, Vec<usize>>,
}

impl Casebase {
    pub fn empty(dim: usize, encoder_fingerprint: impl Into<String>) -> Self {
        Casebase {
            entries: Vec::new(),
            dim,
            encoder_fingerprint: encoder_fingerprint.into(),
            by_id: HashMap::new(),
            by_wh: HashMap::new(),
        }
    }

    /// Encodes every case of `dataset`, in dataset order.
    pub fn build(
        dataset: &Dataset,
        backend: &dyn EncoderBackend,
        recognizer: &dyn EntityRecognizer,
    ) -> Result<Self> {
        let mut cb = Casebase::empty(backend.dim(), backend.fingerprint());
        for case in &dataset.cases {
            cb.push(encode_case(case, backend, recognizer)?)?;
        }
        Ok(cb)
    }

    /// Appends new cases encoded with `backend`. Existing entries are kept
    /// as they are; the backend must be the one the casebase was built with.
    pub fn augment(
        &self,
        new_cases: &Dataset,
        backend: &dyn EncoderBackend,
        recognizer: &dyn EntityRecognizer,
    ) -> Result<Self> {
        let fp = backend.fingerprint();
        if fp != self.encoder_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.encoder_fingerprint.clone(),
                actual: fp,
            });
        }
        let mut cb = self.clone();
        for case in &new_cases.cases {
            cb.push(encode_case(case, backend, recognizer)?)?;
        }
        Ok(cb)
    }

    pub fn from_entries(
        dim: usize,
        encoder_fingerprint: impl Into<String>,
        entries: Vec<CaseEntry>,
    ) -> Result<Self> {
        let mut cb = Casebase::empty(dim, encoder_fingerprint);
        for e in entries {
            cb.push(e)?;
        }
        Ok(cb)
    }

    fn push(&mut self, entry: CaseEntry) -> Result<()> {
        if entry.question_vec.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: entry.question_vec.dim(),
            });
        }
        if entry.answer_vecs.len() != entry.case.answers.len() {
            return Err(Error::Validation(format!(
                "case {} has {} answers but {} answer vectors",
                entry.id(),
                entry.case.answers.len(),
                entry.answer_vecs.len()
            )));
        }
        if let Some(v) = entry.answer_vecs.iter().find(|v| v.dim() != self.dim) {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        let idx = self.entries.len();
        if self.by_id.insert(entry.id().to_string(), idx).is_some() {
            return Err(Error::Validation(format!(
                "duplicate question id {} in casebase",
                entry.id()
            )));
        }
        self.by_wh.entry(entry.wh).or_default().push(idx);
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[CaseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    pub fn index_of(&self, qid: &str) -> Option<usize> {
        self.by_id.get(qid).copied()
    }

    pub fn get(&self, qid: &str) -> Option<&CaseEntry> {
        self.index_of(qid).map(|i| &self.entries[i])
    }

    /// Top-k entries by cosine similarity to `query_vec` (assumed unit norm),
    /// after self-exclusion, the wh-filter and the similarity floor. Sorted by
    /// score descending, ties in entry order; may return fewer than k.
    pub fn retrieve(
        &self,
        query_vec: &[f64],
        query_wh: Option<WhKeyword>,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<RetrievedCase<'_>>> {
        cfg.validate()?;
        if query_vec.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: query_vec.len(),
            });
        }
        let excluded = cfg
            .exclude_question_id
            .as_deref()
            .and_then(|q| self.index_of(q));
        let pool: Box<dyn Iterator<Item = usize> + '_> = if cfg.use_wh_filter {
            Box::new(self.by_wh.get(&query_wh).into_iter().flatten().copied())
        } else {
            Box::new(0..self.entries.len())
        };
        let mut hits: Vec<RetrievedCase<'_>> = pool
            .filter(|&i| Some(i) != excluded)
            .map(|i| RetrievedCase {
                entry: &self.entries[i],
                index: i,
                score: self.entries[i].question_vec.dot(query_vec),
            })
            .filter(|h| cfg.sim_threshold.is_none_or(|t| h.score >= t))
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        hits.truncate(cfg.k);
        Ok(hits)
    }

    /// Writes the casebase into directory `dir`: `casebase.json`, the
    /// embedding file set `embeddings.*`, and `cases.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rows = Vec::new();
        for e in &self.entries {
            rows.push((
                EmbeddingKey::Question(e.id().to_string()),
                e.question_vec.to_f32(),
            ));
            for (a, v) in e.case.answers.iter().zip(&e.answer_vecs) {
                rows.push((
                    EmbeddingKey::span(e.case.passage.id.clone(), a.token_start, a.token_end),
                    v.to_f32(),
                ));
            }
        }
        write_embedding_files(
            &dir.join(EMBEDDINGS_FILE),
            self.dim,
            &rows,
            Some(&self.encoder_fingerprint),
        )?;
        let cases_path = dir.join(CASES_FILE);
        let file = File::create(&cases_path).map_err(|e| Error::io(&cases_path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(
                &mut w,
                &CaseRecord {
                    case: e.case.clone(),
                    wh: e.wh,
                },
            )?;
            w.write_all(b"\n")
                .map_err(|err| Error::io(&cases_path, err))?;
        }
        w.flush().map_err(|e| Error::io(&cases_path, e))?;
        write_json(
            &dir.join(MANIFEST_FILE),
            &CasebaseManifest {
                dim: self.dim,
                count: self.entries.len(),
                encoder_fingerprint: self.encoder_fingerprint.clone(),
                embeddings: EMBEDDINGS_FILE.into(),
                cases: CASES_FILE.into(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CasebaseManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let (emb, keys, vectors) = read_embedding_files(&dir.join(&manifest.embeddings))?;
        if emb.dim != manifest.dim {
            return Err(Error::DimMismatch {
                expected: manifest.dim,
                actual: emb.dim,
            });
        }
        let cases_path = dir.join(&manifest.cases);
        let cases_file = cases_path.display().to_string();
        let keys_file = dir.join(&emb.keys).display().to_string();
        let reader =
            BufReader::new(File::open(&cases_path).map_err(|e| Error::io(&cases_path, e))?);
        let dim = manifest.dim;
        let row = |i: usize| Embedding::from_f32(&vectors[i * dim..(i + 1) * dim]);
        let mut entries = Vec::with_capacity(manifest.count);
        let mut next_row = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(&cases_path, e))?;
            let rec: CaseRecord = serde_json::from_str(&line).map_err(|e| {
                Error::format(&cases_file, "line", lineno as u64 + 1, e.to_string())
            })?;
            rec.case.validate().map_err(|e| {
                Error::format(&cases_file, "line", lineno as u64 + 1, e.to_string())
            })?;
            let needed = 1 + rec.case.answers.len();
            if next_row + needed > keys.len() {
                return Err(Error::format(
                    &keys_file,
                    "line",
                    keys.len() as u64 + 1,
                    format!("embedding rows exhausted at case {}", rec.case.id()),
                ));
            }
            let expect_q = EmbeddingKey::Question(rec.case.id().to_string());
            if keys[next_row] != expect_q {
                return Err(Error::format(
                    &keys_file,
                    "line",
                    next_row as u64 + 1,
                    format!("expected {expect_q}, found {}", keys[next_row]),
                ));
            }
            let question_vec = row(next_row);
            let mut answer_vecs = Vec::with_capacity(rec.case.answers.len());
            for (j, a) in rec.case.answers.iter().enumerate() {
                let r = next_row + 1 + j;
                let expect =
                    EmbeddingKey::span(rec.case.passage.id.clone(), a.token_start, a.token_end);
                if keys[r] != expect {
                    return Err(Error::format(
                        &keys_file,
                        "line",
                        r as u64 + 1,
                        format!("expected {expect}, found {}", keys[r]),
                    ));
                }
                answer_vecs.push(row(r));
            }
            next_row += needed;
            entries.push(CaseEntry {
                case: rec.case,
                question_vec,
                answer_vecs,
                wh: rec.wh,
            });
        }
        if entries.len() != manifest.count || next_row != keys.len() {
            return Err(Error::format(
                cases_file,
                "line",
                entries.len() as u64 + 1,
                format!(
                    "manifest lists {} cases, found {} ({} of {} embedding rows used)",
                    manifest.count,
                    entries.len(),
                    next_row,
                    keys.len()
                ),
            ));
        }
        Casebase::from_entries(dim, manifest.encoder_fingerprint, entries)
    }
}

pub const MANIFEST_FILE: &str = "casebase.json";
const EMBEDDINGS_FILE: &str = "embeddings.json";
const CASES_FILE: &str = "cases.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct CasebaseManifest {
    dim: usize,
    count: usize,
    encoder_fingerprint: String,
    embeddings: String,
    cases: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseRecord {
    case: Case,
    wh: Option<WhKeyword>,
}
