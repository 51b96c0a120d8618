//! Contrastive fine-tuning of the toy encoder.
//!
//! For a training question with gold spans `gold` and candidate spans
//! `cands`, each span `s` is scored against the answers of the retrieved
//! cases as `m(s) = max over cases, max over answers a of sim(a, s) / tau`.
//! The loss is
//!
//! ```text
//! loss = logsumexp(m(s) for s in cands + gold) - logsumexp(m(s) for s in gold)
//! ```
//!
//! Gradients flow into both the target spans and the retrieved answer spans,
//! all of which are linear in the embedding table.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::casebase::{Casebase, RetrievalConfig, TRAIN_SIM_THRESHOLD};
use crate::corpus::{Case, Dataset, Passage};
use crate::encoder::{dot, EncoderBackend, RowWeights, ToyEncoderParams};
use crate::error::{Error, Result};
use crate::reuse::Similarity;
use crate::spanner::generate_candidates;
use crate::textproc::{extract_wh_keyword, mask_with, EntityRecognizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub k: usize,
    pub sim_threshold: Option<f64>,
    pub use_wh_filter: bool,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub similarity: Similarity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 1.0,
            k: 5,
            sim_threshold: Some(TRAIN_SIM_THRESHOLD),
            use_wh_filter: true,
            lr: 0.5,
            epochs: 10,
            seed: 0,
            grad_clip: Some(5.0),
            similarity: Similarity::Dot,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Validation(format!(
                "temperature {} must be positive",
                self.tau
            )));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Validation(format!(
                "learning rate {} must be non-negative",
                self.lr
            )));
        }
        if self.k < 1 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Validation(format!(
                    "gradient clip {c} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            sim_threshold: self.sim_threshold,
            use_wh_filter: self.use_wh_filter,
            exclude_question_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    /// `logsumexp(m(s) for s in gold)`
    pub positive_term: f64,
    /// `logsumexp(m(s) for s in cands + gold)`
    pub partition_term: f64,
    pub n_positives: usize,
    pub n_candidates: usize,
    pub skipped: bool,
}

impl LossReport {
    fn skipped(n_positives: usize, n_candidates: usize) -> Self {
        LossReport {
            value: 0.0,
            positive_term: 0.0,
            partition_term: 0.0,
            n_positives,
            n_candidates,
            skipped: true,
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss from per-span best scores `m(s)` (already divided by τ).
fn loss_from_scores(scores: &[f64], positive: &[bool]) -> LossReport {
    let pos = log_sum_exp(
        scores
            .iter()
            .zip(positive)
            .filter(|(_, &p)| p)
            .map(|(s, _)| *s),
    );
    let all = log_sum_exp(scores.iter().copied());
    LossReport {
        value: all - pos,
        positive_term: pos,
        partition_term: all,
        n_positives: positive.iter().filter(|&&p| p).count(),
        n_candidates: scores.len(),
        skipped: false,
    }
}

/// The loss given each span's best similarity to the retrieved answers and
/// whether the span is gold.
pub fn soft_nn_loss(best_sims: &[f64], positive: &[bool], tau: f64) -> LossReport {
    let scores: Vec<f64> = best_sims.iter().map(|s| s / tau).collect();
    loss_from_scores(&scores, positive)
}

/// Sparse gradient over rows of the embedding table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub dim: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl Gradient {
    fn new(dim: usize) -> Self {
        Gradient {
            dim,
            rows: BTreeMap::new(),
        }
    }

    fn add_weighted(&mut self, weights: &[(usize, f64)], g: &[f64]) {
        for &(b, c) in weights {
            let row = self.rows.entry(b).or_insert_with(|| vec![0.0; g.len()]);
            for (r, x) in row.iter_mut().zip(g) {
                *r += c * x;
            }
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows.get(&row).map_or(0.0, |r| r[col])
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|&x| x == 0.0)
    }

    pub fn merge(&mut self, other: &Gradient) {
        for (&b, g) in &other.rows {
            let row = self.rows.entry(b).or_insert_with(|| vec![0.0; g.len()]);
            for (r, x) in row.iter_mut().zip(g) {
                *r += x;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.rows.values_mut().flatten().for_each(|x| *x *= c);
    }
}

/// Token buckets and span offsets of a passage; independent of the table
/// values, so it is computed once per run.
#[derive(Debug, Clone)]
struct SpanSet {
    buckets: Vec<usize>,
    spans: Vec<(usize, usize)>,
}

impl SpanSet {
    fn weights(&self, params: &ToyEncoderParams) -> Vec<RowWeights> {
        self.spans
            .iter()
            .map(|&(s, e)| params.span_weights(&self.buckets, s, e))
            .collect()
    }
}

/// A training question: gold spans plus candidate spans of its passage.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub qid: String,
    target: SpanSet,
    positive: Vec<bool>,
}

impl TrainInstance {
    /// Candidates plus gold spans, deduplicated by token offsets.
    pub fn new(case: &Case, params: &ToyEncoderParams, recognizer: &dyn EntityRecognizer) -> Self {
        let gold: BTreeSet<(usize, usize)> = case
            .answers
            .iter()
            .map(|a| (a.token_start, a.token_end))
            .collect();
        let mut spans: BTreeSet<(usize, usize)> = generate_candidates(&case.passage, recognizer)
            .iter()
            .map(|c| c.offsets())
            .collect();
        spans.extend(gold.iter().copied());
        let spans: Vec<_> = spans.into_iter().collect();
        let positive = spans.iter().map(|s| gold.contains(s)).collect();
        TrainInstance {
            qid: case.id().to_string(),
            target: SpanSet {
                buckets: params.buckets(&case.passage.tokens),
                spans,
            },
            positive,
        }
    }

    pub fn n_spans(&self) -> usize {
        self.target.spans.len()
    }
}

/// Gold answer spans of a retrieved case.
#[derive(Debug, Clone)]
pub struct RetrievedAnswers(SpanSet);

impl RetrievedAnswers {
    pub fn new(case: &Case, params: &ToyEncoderParams) -> Self {
        RetrievedAnswers(answer_set(&case.passage, case, params))
    }
}

fn answer_set(p: &Passage, case: &Case, params: &ToyEncoderParams) -> SpanSet {
    SpanSet {
        buckets: params.buckets(&p.tokens),
        spans: case
            .answers
            .iter()
            .map(|a| (a.token_start, a.token_end))
            .collect(),
    }
}

/// `sim(u, v)` and its partial derivatives with respect to `u` and `v`.
fn sim_grad(sim: Similarity, u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match sim {
        Similarity::Dot => (v.to_vec(), u.to_vec()),
        Similarity::Cosine => {
            let nu = dot(u, u).sqrt();
            let nv = dot(v, v).sqrt();
            if nu == 0.0 || nv == 0.0 {
                return (vec![0.0; u.len()], vec![0.0; v.len()]);
            }
            let c = dot(u, v) / (nu * nv);
            let du = u
                .iter()
                .zip(v)
                .map(|(a, b)| b / (nu * nv) - c * a / (nu * nu))
                .collect();
            let dv = u
                .iter()
                .zip(v)
                .map(|(a, b)| a / (nu * nv) - c * b / (nv * nv))
                .collect();
            (du, dv)
        }
    }
}

/// Per-span best answer: `(score / τ, retrieved answer index)` where the index
/// runs over answers of all retrieved cases in scan order.
fn best_matches(
    span_vecs: &[Vec<f64>],
    answer_vecs: &[Vec<f64>],
    sim: Similarity,
    tau: f64,
) -> Vec<(f64, usize)> {
    span_vecs
        .iter()
        .map(|v| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, u) in answer_vecs.iter().enumerate() {
                let s = sim.score(u, v);
                if s > best.0 {
                    best = (s, j);
                }
            }
            (best.0 / tau, best.1)
        })
        .collect()
}

struct Evaluation {
    report: LossReport,
    argmax: Vec<usize>,
    gradient: Option<Gradient>,
}

fn evaluate(
    inst: &TrainInstance,
    retrieved: &[&RetrievedAnswers],
    params: &ToyEncoderParams,
    tau: f64,
    sim: Similarity,
    want_grad: bool,
) -> Evaluation {
    let n_pos = inst.positive.iter().filter(|&&p| p).count();
    let answer_sets: Vec<&SpanSet> = retrieved.iter().map(|r| &r.0).collect();
    let n_answers: usize = answer_sets.iter().map(|a| a.spans.len()).sum();
    if n_answers == 0 || n_pos == 0 {
        return Evaluation {
            report: LossReport::skipped(n_pos, inst.n_spans()),
            argmax: Vec::new(),
            gradient: want_grad.then(|| Gradient::new(params.dim)),
        };
    }
    let span_w = inst.target.weights(params);
    let ans_w: Vec<RowWeights> = answer_sets.iter().flat_map(|a| a.weights(params)).collect();
    let span_vecs: Vec<Vec<f64>> = span_w
        .iter()
        .map(|w| params.combine(w).into_inner())
        .collect();
    let ans_vecs: Vec<Vec<f64>> = ans_w
        .iter()
        .map(|w| params.combine(w).into_inner())
        .collect();
    let best = best_matches(&span_vecs, &ans_vecs, sim, tau);
    let scores: Vec<f64> = best.iter().map(|b| b.0).collect();
    let report = loss_from_scores(&scores, &inst.positive);
    let argmax = best.iter().map(|b| b.1).collect();

    let gradient = want_grad.then(|| {
        let mut grad = Gradient::new(params.dim);
        let (pos_lse, all_lse) = (report.positive_term, report.partition_term);
        let mut ans_grads = vec![vec![0.0; params.dim]; ans_vecs.len()];
        for (i, &(m, j)) in best.iter().enumerate() {
            // dL/dm(s) = softmax over all spans − softmax over positives
            let mut dm = (m - all_lse).exp();
            if inst.positive[i] {
                dm -= (m - pos_lse).exp();
            }
            if dm == 0.0 {
                continue;
            }
            let c = dm / tau;
            let (du, dv) = sim_grad(sim, &ans_vecs[j], &span_vecs[i]);
            let gv: Vec<f64> = dv.iter().map(|x| c * x).collect();
            grad.add_weighted(&span_w[i], &gv);
            for (a, x) in ans_grads[j].iter_mut().zip(&du) {
                *a += c * x;
            }
        }
        for (w, g) in ans_w.iter().zip(&ans_grads) {
            grad.add_weighted(w, g);
        }
        grad
    });
    Evaluation {
        report,
        argmax,
        gradient,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 1.0,
            similarity: Similarity::Dot,
        }
    }
}

/// Loss of `instance` against the answers of `retrieved`, encoded with
/// `params`. An empty retrieval yields a skipped report.
pub fn compute_loss(
    instance: &Case,
    retrieved: &[&Case],
    params: &ToyEncoderParams,
    cfg: LossConfig,
    recognizer: &dyn EntityRecognizer,
) -> LossReport {
    let inst = TrainInstance::new(instance, params, recognizer);
    let answers: Vec<_> = retrieved
        .iter()
        .map(|c| RetrievedAnswers::new(c, params))
        .collect();
    let refs: Vec<_> = answers.iter().collect();
    evaluate(&inst, &refs, params, cfg.tau, cfg.similarity, false).report
}

/// Analytic gradient of [`compute_loss`] with respect to the embedding table.
/// At ties in the max the first attaining answer is used.
pub fn compute_gradient(
    instance: &Case,
    retrieved: &[&Case],
    params: &ToyEncoderParams,
    cfg: LossConfig,
    recognizer: &dyn EntityRecognizer,
) -> (LossReport, Gradient) {
    let inst = TrainInstance::new(instance, params, recognizer);
    let answers: Vec<_> = retrieved
        .iter()
        .map(|c| RetrievedAnswers::new(c, params))
        .collect();
    let refs: Vec<_> = answers.iter().collect();
    let ev = evaluate(&inst, &refs, params, cfg.tau, cfg.similarity, true);
    (ev.report, ev.gradient.expect("gradient requested"))
}

/// Loss and gradient for a prepared instance.
pub fn loss_and_gradient(
    inst: &TrainInstance,
    retrieved: &[&RetrievedAnswers],
    params: &ToyEncoderParams,
    cfg: LossConfig,
) -> (LossReport, Gradient) {
    let ev = evaluate(inst, retrieved, params, cfg.tau, cfg.similarity, true);
    (ev.report, ev.gradient.expect("gradient requested"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub skipped_count: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyEncoderParams,
    pub epochs: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

fn sgd_step(params: &mut ToyEncoderParams, grad: &Gradient, lr: f64, clip: Option<f64>) {
    let mut scale = lr;
    if let Some(c) = clip {
        let n = grad.norm();
        if n > c {
            scale *= c / n;
        }
    }
    if scale == 0.0 {
        return;
    }
    for (&b, g) in &grad.rows {
        for (w, x) in params.row_mut(b).iter_mut().zip(g) {
            *w -= scale * x;
        }
    }
}

/// Fine-tunes `params` on `dataset` with plain SGD, one update per
/// question in a seeded shuffled order. Retrieval uses `cb` with the
/// training filters and self-exclusion; the casebase vectors are
/// re-encoded at every epoch boundary.
pub fn train(
    dataset: &Dataset,
    cb: &Casebase,
    mut params: ToyEncoderParams,
    cfg: &TrainConfig,
    recognizer: &dyn EntityRecognizer,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    if cb.encoder_fingerprint() != params.fingerprint() {
        return Err(Error::Fingerprint {
            expected: cb.encoder_fingerprint().to_string(),
            actual: params.fingerprint(),
        });
    }
    let instances: Vec<TrainInstance> = dataset
        .cases
        .iter()
        .map(|c| TrainInstance::new(c, &params, recognizer))
        .collect();
    let answers: Vec<RetrievedAnswers> = cb
        .entries()
        .iter()
        .map(|e| RetrievedAnswers::new(&e.case, &params))
        .collect();
    let loss_cfg = LossConfig {
        tau: cfg.tau,
        similarity: cfg.similarity,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut cb = cb.clone();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            cb = Casebase::from_entries(
                cb.dim(),
                params.fingerprint(),
                cb.entries()
                    .iter()
                    .map(|e| crate::casebase::encode_case(&e.case, &params, recognizer))
                    .collect::<Result<Vec<_>>>()?,
            )?;
        }
        // retrieval is fixed for the epoch since the casebase is
        let queries = epoch_queries(dataset, &cb, &params, recognizer)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut skipped = 0;
        for &i in &order {
            let case = &dataset.cases[i];
            let (qvec, wh) = &queries[i];
            let rcfg = cfg.retrieval().excluding(case.id());
            let hits = cb.retrieve(qvec, *wh, &rcfg)?;
            if hits.is_empty() {
                skipped += 1;
                continue;
            }
            let retrieved: Vec<&RetrievedAnswers> =
                hits.iter().map(|h| &answers[h.index]).collect();
            let (report, grad) = loss_and_gradient(&instances[i], &retrieved, &params, loss_cfg);
            if report.skipped {
                skipped += 1;
                continue;
            }
            total += report.value;
            sgd_step(&mut params, &grad, cfg.lr, cfg.grad_clip);
        }
        logs.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: total / instances.len() as f64,
            skipped_count: skipped,
            lr: cfg.lr,
        });
    }
    Ok(TrainOutcome {
        params,
        epochs: logs,
    })
}

type Query = (Vec<f64>, Option<crate::textproc::WhKeyword>);

fn epoch_queries(
    dataset: &Dataset,
    cb: &Casebase,
    params: &ToyEncoderParams,
    recognizer: &dyn EntityRecognizer,
) -> Result<Vec<Query>> {
    dataset
        .cases
        .iter()
        .map(|c| match cb.get(c.id()) {
            Some(e) => Ok((e.question_vec.to_vec(), e.wh)),
            None => {
                let v = params.encode_question(&mask_with(&c.question, recognizer))?;
                Ok((v.into_inner(), extract_wh_keyword(&c.question)))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub instances: usize,
    pub checked_entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Instances whose loss and gradient are identically zero; they have no
    /// entries above the relative-error floor.
    pub zero_loss_instances: usize,
    /// Entries where a ±ε step changes which retrieved answer attains the
    /// max, so the loss is not differentiable there.
    pub kink_entries: usize,
    pub epsilon: f64,
}

/// Entries with analytic magnitude at or below this are excluded from the
/// relative-error maximum.
pub const FD_REL_FLOOR: f64 = 1e-8;

/// Small random instance for gradient checking: a ≤10-token target passage,
/// 1–3 retrieved cases with 1–3 answers each, d = 4.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub params: ToyEncoderParams,
    pub target: Case,
    pub retrieved: Vec<Case>,
    pub cfg: LossConfig,
}

const FD_WORDS: &[&str] = &[
    "ada", "bell", "wrote", "built", "the", "engine", "in", "london", "paper", "of", "a", "river",
];

fn random_case(rng: &mut ChaCha8Rng, id: String, max_answers: usize) -> Case {
    let n = rng.gen_range(3..=10);
    let text: Vec<&str> = (0..n)
        .map(|_| *FD_WORDS.choose(rng).expect("non-empty"))
        .collect();
    let passage = Passage::new(format!("p-{id}"), text.join(" "));
    let mut spans = BTreeSet::new();
    for _ in 0..rng.gen_range(1..=max_answers) {
        let len = rng.gen_range(1..=2usize).min(n);
        let s = rng.gen_range(0..=n - len);
        spans.insert((s, s + len));
    }
    let answers = spans
        .into_iter()
        .map(|(s, e)| crate::corpus::AnswerSpan::from_tokens(&passage, s, e).expect("in bounds"))
        .collect();
    Case::new(
        crate::corpus::Question::new(id, "who did it?"),
        answers,
        passage,
    )
    .expect("valid case")
}

impl GradCheckInstance {
    pub fn random(rng: &mut ChaCha8Rng, similarity: Similarity) -> Self {
        let window = rng.gen_range(0..=2);
        let alpha = rng.gen_range(0.3..=1.0);
        let seed = rng.gen();
        let params = ToyEncoderParams::init(4, 16, window, alpha, seed).expect("valid config");
        let target = random_case(rng, "target".into(), 2);
        let retrieved = (0..rng.gen_range(1..=3))
            .map(|k| random_case(rng, format!("r{k}"), 3))
            .collect();
        GradCheckInstance {
            params,
            target,
            retrieved,
            cfg: LossConfig {
                tau: rng.gen_range(0.5..=2.0),
                similarity,
            },
        }
    }
}

/// Compares [`compute_gradient`] with central differences on every table
/// entry of `n_instances` random instances. Half of the instances use the
/// dot product, half cosine similarity.
pub fn finite_difference_check(n_instances: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recognizer = crate::textproc::RuleRecognizer::default();
    let eps = 1e-4;
    let mut report = FdReport {
        instances: n_instances,
        checked_entries: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        zero_loss_instances: 0,
        kink_entries: 0,
        epsilon: eps,
    };
    for n in 0..n_instances {
        let sim = if n % 2 == 0 {
            Similarity::Dot
        } else {
            Similarity::Cosine
        };
        let gc = GradCheckInstance::random(&mut rng, sim);
        let inst = TrainInstance::new(&gc.target, &gc.params, &recognizer);
        let answers: Vec<_> = gc
            .retrieved
            .iter()
            .map(|c| RetrievedAnswers::new(c, &gc.params))
            .collect();
        let refs: Vec<_> = answers.iter().collect();
        let base = evaluate(
            &inst,
            &refs,
            &gc.params,
            gc.cfg.tau,
            gc.cfg.similarity,
            true,
        );
        let grad = base.gradient.expect("gradient requested");
        if base.report.value == 0.0 && grad.is_zero() {
            report.zero_loss_instances += 1;
        }
        let mut p = gc.params.clone();
        for idx in 0..p.table.len() {
            let orig = p.table[idx];
            p.table[idx] = orig + eps;
            let plus = evaluate(&inst, &refs, &p, gc.cfg.tau, gc.cfg.similarity, false);
            p.table[idx] = orig - eps;
            let minus = evaluate(&inst, &refs, &p, gc.cfg.tau, gc.cfg.similarity, false);
            p.table[idx] = orig;
            if plus.argmax != base.argmax || minus.argmax != base.argmax {
                report.kink_entries += 1;
                continue;
            }
            let numeric = (plus.report.value - minus.report.value) / (2.0 * eps);
            let analytic = grad.get(idx / p.dim, idx % p.dim);
            let abs = (analytic - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if analytic.abs() > FD_REL_FLOOR {
                report.checked_entries += 1;
                let rel = abs / analytic.abs().max(numeric.abs());
                report.max_rel_error = report.max_rel_error.max(rel);
            }
        }
    }
    report
}

/// Retrieval hits shared by training: exposed so callers can check that the
/// trainer filters exactly like [`Casebase::retrieve`].
pub fn training_retrieval<'a>(
    cb: &'a Casebase,
    case: &Case,
    cfg: &TrainConfig,
    recognizer: &dyn EntityRecognizer,
    params: &ToyEncoderParams,
) -> Result<Vec<crate::casebase::RetrievedCase<'a>>> {
    let (qvec, wh) = match cb.get(case.id()) {
        Some(e) => (e.question_vec.to_vec(), e.wh),
        None => (
            params
                .encode_question(&mask_with(&case.question, recognizer))?
                .into_inner(),
            extract_wh_keyword(&case.question),
        ),
    };
    cb.retrieve(&qvec, wh, &cfg.retrieval().excluding(case.id()))
}
