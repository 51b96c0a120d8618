//! Encoders for masked questions and contextualized passage spans.
//!
//! Two backends implement [`EncoderBackend`]: the trainable hash-bucket
//! [`ToyEncoderParams`], and [`ImportedEmbeddings`], which serves vectors
//! precomputed by an external model.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Passage, Token};
use crate::error::{Error, Result};
use crate::textproc::MaskedQuestion;

/// Fixed-dimension real vector. Values are always finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite embedding value at index {i}"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn from_f32(values: &[f32]) -> Self {
        Embedding(values.iter().map(|&v| v as f64).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Unit-norm copy; the zero vector maps to the first basis vector.
    pub fn normalized(&self) -> Embedding {
        let n = self.norm();
        if n == 0.0 {
            let mut v = vec![0.0; self.0.len()];
            if let Some(first) = v.first_mut() {
                *first = 1.0;
            }
            Embedding(v)
        } else {
            Embedding(self.0.iter().map(|x| x / n).collect())
        }
    }

    pub fn scaled(&self, c: f64) -> Embedding {
        Embedding(self.0.iter().map(|x| x * c).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub trait EncoderBackend: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the parameters behind the vectors; casebases refuse to mix
    /// entries from different fingerprints.
    fn fingerprint(&self) -> String;

    fn trainable(&self) -> bool {
        false
    }

    /// L2-normalized question vector.
    fn encode_question(&self, mq: &MaskedQuestion) -> Result<Embedding>;

    /// One contextualized, unnormalized vector per passage token.
    fn encode_passage_tokens(&self, p: &Passage) -> Result<Vec<Embedding>> {
        let _ = p;
        Err(Error::Unsupported(
            "this backend does not expose per-token vectors".into(),
        ))
    }

    fn encode_span(&self, p: &Passage, token_start: usize, token_end: usize) -> Result<Embedding>;

    fn encode_spans(&self, p: &Passage, spans: &[(usize, usize)]) -> Result<Vec<Embedding>> {
        spans
            .iter()
            .map(|&(s, e)| self.encode_span(p, s, e))
            .collect()
    }
}

fn check_span(p: &Passage, s: usize, e: usize) -> Result<()> {
    if s >= e || e > p.tokens.len() {
        return Err(Error::Precondition(format!(
            "span [{s}, {e}) empty or out of bounds for passage {} with {} tokens",
            p.id,
            p.tokens.len()
        )));
    }
    Ok(())
}

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_VOCAB_BUCKETS: usize = 1 << 15;
pub const DEFAULT_WINDOW: usize = 2;
pub const DEFAULT_SELF_WEIGHT: f64 = 0.7;

/// Trainable hash-bucket encoder. A token's contextual vector is
/// `α·E[h(x_i)] + (1−α)·mean(E[h(x_j)])` over the neighbors `j` within
/// `window` positions; spans are mean-pooled token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams {
    pub dim: usize,
    pub vocab_buckets: usize,
    pub window: usize,
    pub self_weight: f64,
    /// Row-major `vocab_buckets × dim`.
    pub table: Vec<f64>,
}

/// Sparse linear combination of table rows: `(bucket, coefficient)` pairs
/// sorted by bucket.
pub type RowWeights = Vec<(usize, f64)>;

impl ToyEncoderParams {
    pub fn init(
        dim: usize,
        vocab_buckets: usize,
        window: usize,
        self_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        let bound = 0.5 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..dim * vocab_buckets)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let p = ToyEncoderParams {
            dim,
            vocab_buckets,
            window,
            self_weight,
            table,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::init(
            DEFAULT_DIM,
            DEFAULT_VOCAB_BUCKETS,
            DEFAULT_WINDOW,
            DEFAULT_SELF_WEIGHT,
            seed,
        )
        .expect("default toy configuration is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Validation(format!(
                "toy encoder dim {} < 2",
                self.dim
            )));
        }
        if self.vocab_buckets < 1 {
            return Err(Error::Validation(
                "toy encoder needs at least one bucket".into(),
            ));
        }
        if !(self.self_weight > 0.0 && self.self_weight <= 1.0) {
            return Err(Error::Validation(format!(
                "self weight {} outside (0, 1]",
                self.self_weight
            )));
        }
        if self.table.len() != self.dim * self.vocab_buckets {
            return Err(Error::DimMismatch {
                expected: self.dim * self.vocab_buckets,
                actual: self.table.len(),
            });
        }
        if self.table.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "non-finite entry in embedding table".into(),
            ));
        }
        Ok(())
    }

    /// FNV-1a over the lowercased token text.
    pub fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % self.vocab_buckets as u64) as usize
    }

    pub fn buckets(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.bucket(&t.text)).collect()
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn row_mut(&mut self, bucket: usize) -> &mut [f64] {
        &mut self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    fn add_token_weights(
        &self,
        buckets: &[usize],
        i: usize,
        scale: f64,
        acc: &mut BTreeMap<usize, f64>,
    ) {
        let lo = i.saturating_sub(self.window);
        let hi = (i + self.window).min(buckets.len() - 1);
        let n_ctx = hi - lo;
        *acc.entry(buckets[i]).or_default() += scale * self.self_weight;
        if n_ctx > 0 {
            let w = scale * (1.0 - self.self_weight) / n_ctx as f64;
            for (j, &b) in buckets.iter().enumerate().take(hi + 1).skip(lo) {
                if j != i {
                    *acc.entry(b).or_default() += w;
                }
            }
        }
    }

    /// Coefficients of the table rows whose combination is the mean-pooled
    /// span `[s, e)` of a token sequence with the given buckets.
    pub fn span_weights(&self, buckets: &[usize], s: usize, e: usize) -> RowWeights {
        let mut acc = BTreeMap::new();
        let scale = 1.0 / (e - s) as f64;
        for i in s..e {
            self.add_token_weights(buckets, i, scale, &mut acc);
        }
        acc.into_iter().collect()
    }

    pub fn combine(&self, weights: &[(usize, f64)]) -> Embedding {
        let mut out = vec![0.0; self.dim];
        for &(b, c) in weights {
            for (o, r) in out.iter_mut().zip(self.row(b)) {
                *o += c * r;
            }
        }
        Embedding(out)
    }

    fn token_vectors(&self, buckets: &[usize]) -> Vec<Embedding> {
        (0..buckets.len())
            .map(|i| {
                let mut acc = BTreeMap::new();
                self.add_token_weights(buckets, i, 1.0, &mut acc);
                self.combine(&acc.into_iter().collect::<Vec<_>>())
            })
            .collect()
    }

    fn mean_of(&self, vecs: &[Embedding], s: usize, e: usize) -> Embedding {
        let mut out = vec![0.0; self.dim];
        for v in &vecs[s..e] {
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += x;
            }
        }
        let n = (e - s) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Embedding(out)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let stem = file_stem(manifest_path);
        let table_name = format!("{stem}.table.f32");
        let manifest = CheckpointManifest {
            dim: self.dim,
            vocab_buckets: self.vocab_buckets,
            window: self.window,
            self_weight: self.self_weight,
            dtype: "f32le".into(),
            table: table_name.clone(),
        };
        write_f32le(&dir.join(&table_name), self.table.iter().map(|&v| v as f32))?;
        write_json(manifest_path, &manifest)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(manifest_path)?;
        if manifest.dtype != "f32le" {
            return Err(Error::format(
                manifest_path.display().to_string(),
                "byte",
                0,
                format!("unsupported dtype {}", manifest.dtype),
            ));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let table_path = dir.join(&manifest.table);
        let expected = manifest.dim * manifest.vocab_buckets;
        let table = read_f32le(&table_path, expected)?
            .into_iter()
            .map(|v| v as f64)
            .collect();
        let p = ToyEncoderParams {
            dim: manifest.dim,
            vocab_buckets: manifest.vocab_buckets,
            window: manifest.window,
            self_weight: manifest.self_weight,
            table,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dim: usize,
    vocab_buckets: usize,
    window: usize,
    self_weight: f64,
    dtype: String,
    table: String,
}

impl EncoderBackend for ToyEncoderParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.table {
            h.update((*v as f32).to_le_bytes());
        }
        let digest = h.finalize();
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        format!(
            "toy:d={}:v={}:w={}:a={}:{hex}",
            self.dim, self.vocab_buckets, self.window, self.self_weight
        )
    }

    fn trainable(&self) -> bool {
        true
    }

    fn encode_question(&self, mq: &MaskedQuestion) -> Result<Embedding> {
        if mq.masked_tokens.is_empty() {
            return Err(Error::Precondition(format!(
                "question {} is empty",
                mq.question_id
            )));
        }
        let buckets = self.buckets(&mq.masked_tokens);
        let w = self.span_weights(&buckets, 0, buckets.len());
        Ok(self.combine(&w).normalized())
    }

    fn encode_passage_tokens(&self, p: &Passage) -> Result<Vec<Embedding>> {
        Ok(self.token_vectors(&self.buckets(&p.tokens)))
    }

    fn encode_span(&self, p: &Passage, token_start: usize, token_end: usize) -> Result<Embedding> {
        check_span(p, token_start, token_end)?;
        let buckets = self.buckets(&p.tokens);
        Ok(self.combine(&self.span_weights(&buckets, token_start, token_end)))
    }

    fn encode_spans(&self, p: &Passage, spans: &[(usize, usize)]) -> Result<Vec<Embedding>> {
        for &(s, e) in spans {
            check_span(p, s, e)?;
        }
        let vecs = self.encode_passage_tokens(p)?;
        Ok(spans
            .iter()
            .map(|&(s, e)| self.mean_of(&vecs, s, e))
            .collect())
    }
}

/// Row key in an embedding file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmbeddingKey {
    Question(String),
    Span {
        passage_id: String,
        token_start: usize,
        token_end: usize,
    },
}

impl EmbeddingKey {
    pub fn span(passage_id: impl Into<String>, token_start: usize, token_end: usize) -> Self {
        EmbeddingKey::Span {
            passage_id: passage_id.into(),
            token_start,
            token_end,
        }
    }

    fn to_line(&self) -> String {
        match self {
            EmbeddingKey::Question(id) => format!("question\t{id}\t\t"),
            EmbeddingKey::Span {
                passage_id,
                token_start,
                token_end,
            } => format!("span\t{passage_id}\t{token_start}\t{token_end}"),
        }
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["question", id, "", ""] | ["question", id] => {
                Ok(EmbeddingKey::Question(id.to_string()))
            }
            ["span", id, s, e] => {
                let s = s.parse().map_err(|_| format!("bad span start {s:?}"))?;
                let e = e.parse().map_err(|_| format!("bad span end {e:?}"))?;
                Ok(EmbeddingKey::span(*id, s, e))
            }
            _ => Err(format!("unrecognized key line {line:?}")),
        }
    }
}

impl std::fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbeddingKey::Question(id) => write!(f, "question {id}"),
            EmbeddingKey::Span {
                passage_id,
                token_start,
                token_end,
            } => write!(f, "span ({passage_id}, {token_start}, {token_end})"),
        }
    }
}

/// Manifest of an embedding file set. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub vectors: String,
    pub keys: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

/// Writes `manifest_path` plus `<stem>.vectors.f32` and `<stem>.keys.tsv`
/// next to it.
pub fn write_embedding_files(
    manifest_path: &Path,
    dim: usize,
    rows: &[(EmbeddingKey, Vec<f32>)],
    fingerprint: Option<&str>,
) -> Result<EmbeddingManifest> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = file_stem(manifest_path);
    let manifest = EmbeddingManifest {
        dim,
        count: rows.len(),
        dtype: "f32le".into(),
        vectors: format!("{stem}.vectors.f32"),
        keys: format!("{stem}.keys.tsv"),
        fingerprint: fingerprint.map(str::to_string),
    };
    for (k, v) in rows {
        if v.len() != dim {
            return Err(Error::Validation(format!(
                "row {k} has {} values, expected {dim}",
                v.len()
            )));
        }
    }
    write_f32le(
        &dir.join(&manifest.vectors),
        rows.iter().flat_map(|(_, v)| v.iter().copied()),
    )?;
    let mut keys = String::new();
    for (k, _) in rows {
        keys.push_str(&k.to_line());
        keys.push('\n');
    }
    let kp = dir.join(&manifest.keys);
    fs::write(&kp, keys).map_err(|e| Error::io(kp, e))?;
    write_json(manifest_path, &manifest)?;
    Ok(manifest)
}

/// Reads an embedding file set, checking sizes against the manifest.
pub fn read_embedding_files(
    manifest_path: &Path,
) -> Result<(EmbeddingManifest, Vec<EmbeddingKey>, Vec<f32>)> {
    let manifest: EmbeddingManifest = read_json(manifest_path)?;
    if manifest.dtype != "f32le" {
        return Err(Error::format(
            manifest_path.display().to_string(),
            "byte",
            0,
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let vectors = read_f32le(&dir.join(&manifest.vectors), manifest.count * manifest.dim)?;
    let kp = dir.join(&manifest.keys);
    let text = fs::read_to_string(&kp).map_err(|e| Error::io(&kp, e))?;
    let file = kp.display().to_string();
    let mut keys = Vec::with_capacity(manifest.count);
    for (i, line) in text.lines().enumerate() {
        let key =
            EmbeddingKey::parse(line).map_err(|m| Error::format(&file, "line", i as u64 + 1, m))?;
        keys.push(key);
    }
    if keys.len() != manifest.count {
        return Err(Error::format(
            file,
            "line",
            keys.len() as u64 + 1,
            format!(
                "{} keys but manifest count is {}",
                keys.len(),
                manifest.count
            ),
        ));
    }
    Ok((manifest, keys, vectors))
}

/// Backend serving vectors precomputed by an external encoder.
#[derive(Debug, Clone)]
pub struct ImportedEmbeddings {
    dim: usize,
    fingerprint: String,
    index: HashMap<EmbeddingKey, usize>,
    vectors: Vec<f32>,
}

impl ImportedEmbeddings {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, keys, vectors) = read_embedding_files(manifest_path)?;
        let fingerprint = match manifest.fingerprint {
            Some(f) => format!("imported:{f}"),
            None => {
                let mut h = Sha256::new();
                for v in &vectors {
                    h.update(v.to_le_bytes());
                }
                let d = h.finalize();
                let hex: String = d[..8].iter().map(|b| format!("{b:02x}")).collect();
                format!("imported:{hex}")
            }
        };
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.into_iter().enumerate() {
            if let Some(first) = index.insert(k.clone(), i) {
                return Err(Error::format(
                    manifest_path.display().to_string(),
                    "row",
                    i as u64,
                    format!("duplicate key {k} (first at row {first})"),
                ));
            }
        }
        Ok(ImportedEmbeddings {
            dim: manifest.dim,
            fingerprint,
            index,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn lookup(&self, key: &EmbeddingKey) -> Result<Embedding> {
        let row = *self
            .index
            .get(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))?;
        let v = &self.vectors[row * self.dim..(row + 1) * self.dim];
        Embedding::new(v.iter().map(|&x| x as f64).collect())
    }
}

/// Alias matching the constructor name used by the CLI.
pub fn imported_backend(manifest: &Path) -> Result<ImportedEmbeddings> {
    ImportedEmbeddings::load(manifest)
}

impl EncoderBackend for ImportedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn encode_question(&self, mq: &MaskedQuestion) -> Result<Embedding> {
        Ok(self
            .lookup(&EmbeddingKey::Question(mq.question_id.clone()))?
            .normalized())
    }

    fn encode_span(&self, p: &Passage, token_start: usize, token_end: usize) -> Result<Embedding> {
        check_span(p, token_start, token_end)?;
        self.lookup(&EmbeddingKey::span(p.id.clone(), token_start, token_end))
    }
}

pub(crate) fn file_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".into());
    name.strip_suffix(".json").unwrap_or(&name).to_string()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(
            path.display().to_string(),
            "line",
            e.line() as u64,
            e.to_string(),
        )
    })
}

pub(crate) fn write_f32le(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = expected * 4;
    if bytes.len() != want {
        let offset = bytes.len().min(want) as u64;
        return Err(Error::format(
            path.display().to_string(),
            "byte",
            offset,
            format!("expected {want} bytes of f32le data, found {}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
