//! Lexical-diversity analysis: a sparse similarity graph over masked
//! questions, agglomerative clustering, threshold cuts, per-cluster
//! diversity scores and F1 reports bucketed by diversity.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Case, Dataset};
use crate::encoder::{cosine, Embedding, EncoderBackend};
use crate::error::{Error, Result};
use crate::textproc::{mask_with, EntityRecognizer};

pub const DEFAULT_NEIGHBORS: usize = 20;
pub const DEFAULT_LOWER_BOUND: f64 = 0.9;
pub const DEFAULT_CLUSTERINGS: usize = 6;
pub const DEFAULT_BUCKETS: usize = 8;
const KMEANS_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub neighbors: usize,
    pub lower_bound: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            neighbors: DEFAULT_NEIGHBORS,
            lower_bound: DEFAULT_LOWER_BOUND,
        }
    }
}

/// Directed top-k neighbor lists over question vectors. Each list is sorted
/// by descending score, ties by ascending neighbor index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    pub ids: Vec<String>,
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl SimilarityGraph {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Undirected edges `(i, j, score)` with `i < j` after symmetric closure,
    /// sorted by `(i, j)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut m: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &(j, s) in list {
                let key = (i.min(j), i.max(j));
                let e = m.entry(key).or_insert(s);
                *e = e.max(s);
            }
        }
        m.into_iter().map(|((i, j), s)| (i, j, s)).collect()
    }
}

pub fn encode_questions(
    ds: &Dataset,
    backend: &dyn EncoderBackend,
    recognizer: &dyn EntityRecognizer,
) -> Result<Vec<Embedding>> {
    ds.cases
        .iter()
        .map(|c| backend.encode_question(&mask_with(&c.question, recognizer)))
        .collect()
}

fn top_neighbors(vecs: &[Embedding], i: usize, cfg: GraphConfig) -> Vec<(usize, f64)> {
    let mut list: Vec<(usize, f64)> = vecs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, v)| (j, cosine(&vecs[i], v).min(1.0)))
        .collect();
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    list.truncate(cfg.neighbors);
    list.retain(|&(_, s)| s >= cfg.lower_bound);
    list
}

/// Keeps each node's `neighbors` most similar other nodes, then drops edges
/// scoring below `lower_bound`. Nodes are processed on `jobs` threads.
pub fn graph_from_vectors(
    ids: Vec<String>,
    vecs: &[Embedding],
    cfg: GraphConfig,
    jobs: usize,
) -> Result<SimilarityGraph> {
    if ids.len() != vecs.len() {
        return Err(Error::Precondition(format!(
            "{} ids for {} vectors",
            ids.len(),
            vecs.len()
        )));
    }
    let n = vecs.len();
    let jobs = jobs.max(1).min(n.max(1));
    let chunk = n.div_ceil(jobs).max(1);
    let mut neighbors: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| {
                let hi = (lo + chunk).min(n);
                scope.spawn(move || {
                    (lo..hi)
                        .map(|i| top_neighbors(vecs, i, cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            neighbors.extend(h.join().expect("graph worker panicked"));
        }
    });
    Ok(SimilarityGraph { ids, neighbors })
}

pub fn build_similarity_graph(
    train: &Dataset,
    backend: &dyn EncoderBackend,
    recognizer: &dyn EntityRecognizer,
    cfg: GraphConfig,
    jobs: usize,
) -> Result<SimilarityGraph> {
    let vecs = encode_questions(train, backend, recognizer)?;
    let ids = train.cases.iter().map(|c| c.id().to_string()).collect();
    graph_from_vectors(ids, &vecs, cfg, jobs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

/// One agglomeration step. Leaves are `0..n`; the cluster created by step
/// `t` gets id `n + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub linkage: Linkage,
    pub merges: Vec<Merge>,
}

#[derive(Debug, Clone, Copy, Default)]
struct PairStats {
    sum: f64,
    max: f64,
    min: f64,
    count: usize,
}

impl PairStats {
    fn edge(s: f64) -> Self {
        PairStats {
            sum: s,
            max: s,
            min: s,
            count: 1,
        }
    }

    fn combine(self, o: PairStats) -> PairStats {
        if self.count == 0 {
            return o;
        }
        if o.count == 0 {
            return self;
        }
        PairStats {
            sum: self.sum + o.sum,
            max: self.max.max(o.max),
            min: self.min.min(o.min),
            count: self.count + o.count,
        }
    }

    /// Linkage between clusters of sizes `na` and `nb`; absent edges count
    /// as similarity 0.
    fn linkage(&self, kind: Linkage, na: usize, nb: usize) -> f64 {
        match kind {
            Linkage::Average => self.sum / (na * nb) as f64,
            Linkage::Single => self.max,
            Linkage::Complete => {
                if self.count == na * nb {
                    self.min
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, PartialEq)]
struct Candidate {
    sim: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.sim
            .total_cmp(&o.sim)
            .then_with(|| (o.a, o.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Agglomerates the graph until one cluster remains. At each step the pair
/// with the highest linkage merges, ties going to the lexicographically
/// smallest `(id, id)` pair. Once every remaining linkage is 0 the two
/// smallest active ids merge.
pub fn hac(graph: &SimilarityGraph, linkage: Linkage) -> Result<Dendrogram> {
    let n = graph.len();
    let edges = graph.edges();
    if let Some(&(i, j, s)) = edges.iter().find(|e| !(e.2 >= 0.0)) {
        return Err(Error::Precondition(format!(
            "edge ({i}, {j}) has similarity {s}; clustering needs non-negative scores"
        )));
    }
    let mut adj: Vec<HashMap<usize, PairStats>> = vec![HashMap::new(); n.saturating_mul(2).max(1)];
    let mut size: Vec<usize> = vec![1; n];
    let mut active: std::collections::BTreeSet<usize> = (0..n).collect();
    let mut heap = BinaryHeap::new();
    for &(i, j, s) in &edges {
        adj[i].insert(j, PairStats::edge(s));
        adj[j].insert(i, PairStats::edge(s));
        heap.push(Candidate {
            sim: PairStats::edge(s).linkage(linkage, 1, 1),
            a: i,
            b: j,
        });
    }
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while active.len() > 1 {
        let next = loop {
            match heap.pop() {
                Some(c) if active.contains(&c.a) && active.contains(&c.b) => break Some(c),
                Some(_) => continue,
                None => break None,
            }
        };
        let (a, b, sim) = match next {
            Some(c) if c.sim > 0.0 => (c.a, c.b, c.sim),
            _ => {
                let mut it = active.iter();
                let a = *it.next().expect("two active clusters");
                let b = *it.next().expect("two active clusters");
                (a, b, 0.0)
            }
        };
        let c = n + merges.len();
        let (na, nb) = (size[a], size[b]);
        size.push(na + nb);
        active.remove(&a);
        active.remove(&b);
        let la = std::mem::take(&mut adj[a]);
        let lb = std::mem::take(&mut adj[b]);
        let mut combined: BTreeMap<usize, PairStats> = BTreeMap::new();
        for (x, st) in la.into_iter().chain(lb) {
            if x == a || x == b {
                continue;
            }
            let e = combined.entry(x).or_default();
            *e = e.combine(st);
        }
        for (&x, st) in &combined {
            adj[x].remove(&a);
            adj[x].remove(&b);
            adj[x].insert(c, *st);
            let s = st.linkage(linkage, na + nb, size[x]);
            heap.push(Candidate {
                sim: s,
                a: key(x, c).0,
                b: key(x, c).1,
            });
        }
        adj[c] = combined.into_iter().collect();
        active.insert(c);
        merges.push(Merge {
            a: a.min(b),
            b: a.max(b),
            similarity: sim,
            size: na + nb,
        });
    }
    Ok(Dendrogram { n, linkage, merges })
}

/// Exhaustive agglomeration that recomputes every linkage from leaf pairs
/// at each step. Quadratic per step; meant as a reference for small graphs.
pub fn hac_reference(graph: &SimilarityGraph, linkage: Linkage) -> Dendrogram {
    let n = graph.len();
    let mut sim = vec![vec![None::<f64>; n]; n];
    for (i, j, s) in graph.edges() {
        sim[i][j] = Some(s);
        sim[j][i] = Some(s);
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    while clusters.len() > 1 {
        let ids: Vec<usize> = clusters.keys().copied().collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &a) in ids.iter().enumerate() {
            for &b in &ids[x + 1..] {
                let pairs: Vec<f64> = clusters[&a]
                    .iter()
                    .flat_map(|&i| clusters[&b].iter().map(move |&j| (i, j)))
                    .map(|(i, j)| sim[i][j].unwrap_or(0.0))
                    .collect();
                let s = match linkage {
                    Linkage::Average => pairs.iter().sum::<f64>() / pairs.len() as f64,
                    Linkage::Single => pairs.iter().copied().fold(0.0, f64::max),
                    Linkage::Complete => pairs.iter().copied().fold(f64::INFINITY, f64::min),
                };
                if best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, a, b));
                }
            }
        }
        let (s, a, b) = best.expect("at least one pair");
        let mut members = clusters.remove(&a).unwrap();
        members.extend(clusters.remove(&b).unwrap());
        let size = members.len();
        clusters.insert(n + merges.len(), members);
        merges.push(Merge {
            a,
            b,
            similarity: s,
            size,
        });
    }
    Dendrogram { n, linkage, merges }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatClustering {
    pub threshold: f64,
    /// Position of this cut among the thresholds, 0 being the loosest.
    pub tightness: usize,
    pub ids: Vec<String>,
    /// Dense cluster label per node, numbered by first appearance.
    pub labels: Vec<usize>,
    pub n_clusters: usize,
}

impl FlatClustering {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Applies merges while their similarity is at least `threshold`.
pub fn cut(d: &Dendrogram, threshold: f64, ids: &[String], tightness: usize) -> FlatClustering {
    let total = d.n + d.merges.len();
    let mut parent: Vec<usize> = (0..total).collect();
    for (t, m) in d.merges.iter().enumerate() {
        if m.similarity < threshold {
            break;
        }
        let c = d.n + t;
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = c;
        parent[rb] = c;
    }
    let mut dense: HashMap<usize, usize> = HashMap::new();
    let labels: Vec<usize> = (0..d.n)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = dense.len();
            *dense.entry(r).or_insert(next)
        })
        .collect();
    FlatClustering {
        threshold,
        tightness,
        ids: ids.to_vec(),
        labels,
        n_clusters: dense.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans1d {
    /// Ascending centroids, one per requested cluster.
    pub centroids: Vec<f64>,
    /// Set when there were fewer distinct values than clusters and the
    /// distinct values were repeated to fill the output.
    pub padded: bool,
}

impl KMeans1d {
    /// Index of the nearest centroid; ties go to the lower index.
    pub fn assign(&self, x: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centroids.iter().enumerate() {
            if (x - c).abs() < (x - self.centroids[best]).abs() {
                best = i;
            }
        }
        best
    }
}

/// Lloyd's algorithm in one dimension, seeded at the `(i + 0.5) / k`
/// quantiles of the sorted values and capped at 100 iterations.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<KMeans1d> {
    if k == 0 {
        return Err(Error::Precondition(
            "k-means needs at least one cluster".into(),
        ));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "k-means input contains a non-finite value".into(),
        ));
    }
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        let centroids = if distinct.is_empty() {
            vec![0.0; k]
        } else {
            (0..k)
                .map(|i| distinct[i.min(distinct.len() - 1)])
                .collect()
        };
        return Ok(KMeans1d {
            centroids,
            padded: true,
        });
    }
    let len = sorted.len();
    let mut km = KMeans1d {
        centroids: (0..k)
            .map(|i| {
                sorted[(((i as f64 + 0.5) / k as f64) * len as f64) as usize].min(sorted[len - 1])
            })
            .collect(),
        padded: false,
    };
    for _ in 0..KMEANS_ITERATIONS {
        // sums of offsets from each cluster's first member keep the mean of
        // identical values exact
        let mut first: Vec<Option<f64>> = vec![None; k];
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for &v in &sorted {
            let c = km.assign(v);
            let base = *first[c].get_or_insert(v);
            sums[c] += v - base;
            counts[c] += 1;
        }
        let next: Vec<f64> = (0..k)
            .map(|c| match first[c] {
                Some(base) => base + sums[c] / counts[c] as f64,
                None => km.centroids[c],
            })
            .collect();
        if next == km.centroids {
            break;
        }
        km.centroids = next;
    }
    km.centroids.sort_by(f64::total_cmp);
    Ok(km)
}

/// `c` cut thresholds from 1-D k-means over the graph's edge scores.
pub fn compute_cut_thresholds(graph: &SimilarityGraph, c: usize) -> Result<KMeans1d> {
    let scores: Vec<f64> = graph.edges().into_iter().map(|e| e.2).collect();
    kmeans_1d(&scores, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiversity {
    pub cluster: usize,
    pub unique_token_count: usize,
    pub size: usize,
    pub score: f64,
}

fn unique_tokens<'a>(cases: impl Iterator<Item = &'a Case>) -> HashSet<String> {
    cases
        .flat_map(|c| c.passage.tokens.iter().map(|t| t.text.to_lowercase()))
        .collect()
}

/// Distinct lowercased passage tokens per cluster divided by cluster size.
/// `train` must list cases in the order the clustering's nodes were built.
pub fn cluster_diversity(
    clustering: &FlatClustering,
    train: &Dataset,
) -> Result<Vec<ClusterDiversity>> {
    if clustering.labels.len() != train.len() {
        return Err(Error::Precondition(format!(
            "clustering has {} nodes but the dataset has {} cases",
            clustering.labels.len(),
            train.len()
        )));
    }
    Ok(clustering
        .members()
        .into_iter()
        .enumerate()
        .map(|(cluster, m)| {
            let u = unique_tokens(m.iter().map(|&i| &train.cases[i])).len();
            ClusterDiversity {
                cluster,
                unique_token_count: u,
                size: m.len(),
                score: u as f64 / m.len() as f64,
            }
        })
        .collect())
}

/// Test questions mapped onto train clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestAssignment {
    /// Question id of the first occurrence of each unique test triple.
    pub qids: Vec<String>,
    /// Index of the nearest train question for each entry of `qids`.
    pub nearest_train: Vec<usize>,
    pub duplicates_dropped: usize,
}

impl TestAssignment {
    pub fn labels(&self, clustering: &FlatClustering) -> Vec<usize> {
        self.nearest_train
            .iter()
            .map(|&i| clustering.labels[i])
            .collect()
    }
}

fn triple_key(c: &Case) -> (String, Vec<String>, String) {
    let mut answers: Vec<String> = c.answer_texts().into_iter().map(String::from).collect();
    answers.sort();
    (c.question.text.clone(), answers, c.passage.text.clone())
}

/// Deduplicates the test set by (question, answers, passage) text and links
/// each remaining question to its most similar train question. Ties go to
/// the lower train index.
pub fn assign_test(
    test: &Dataset,
    train_vecs: &[Embedding],
    backend: &dyn EncoderBackend,
    recognizer: &dyn EntityRecognizer,
) -> Result<TestAssignment> {
    if train_vecs.is_empty() {
        return Err(Error::Precondition(
            "diversity analysis needs a non-empty train set".into(),
        ));
    }
    let mut seen = HashSet::new();
    let mut out = TestAssignment {
        qids: Vec::new(),
        nearest_train: Vec::new(),
        duplicates_dropped: 0,
    };
    for c in &test.cases {
        if !seen.insert(triple_key(c)) {
            out.duplicates_dropped += 1;
            continue;
        }
        let v = backend.encode_question(&mask_with(&c.question, recognizer))?;
        let mut best = (0, f64::NEG_INFINITY);
        for (i, t) in train_vecs.iter().enumerate() {
            let s = cosine(&v, t);
            if s > best.1 {
                best = (i, s);
            }
        }
        out.qids.push(c.id().to_string());
        out.nearest_train.push(best.0);
    }
    Ok(out)
}

/// One tightness level: the clustering's diversities and the cluster label
/// of every assigned test question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestClustering {
    pub threshold: f64,
    pub diversities: Vec<ClusterDiversity>,
    pub test_qids: Vec<String>,
    pub test_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringTable {
    pub threshold: f64,
    /// `[bucket][system]` mean F1 (0-100); `None` for buckets without test
    /// questions at this tightness.
    pub bucket_f1: Vec<Vec<Option<f64>>>,
    pub bucket_questions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub systems: Vec<String>,
    pub reference_system: String,
    /// Ascending diversity centroids, one per bucket.
    pub bucket_centroids: Vec<f64>,
    pub buckets_padded: bool,
    pub per_clustering: Vec<ClusteringTable>,
    /// `[bucket][system]` mean over clusterings of the per-clustering F1.
    pub mean_f1: Vec<Vec<Option<f64>>>,
    /// Per system: largest minus smallest bucket of `mean_f1`.
    pub min_max_diff: Vec<f64>,
    /// `[bucket][system]` mean over clusterings of reference F1 minus
    /// system F1.
    pub reference_difference: Vec<Vec<Option<f64>>>,
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Buckets clusters by diversity score (1-D k-means over the scores of all
/// clusters holding at least one test question, pooled across clusterings)
/// and reports mean per-question F1 per bucket and system. `f1[s]` maps
/// question id to F1 in `[0, 1]` for system `s`; missing ids score 0.
pub fn bucket_report(
    clusterings: &[TestClustering],
    systems: &[String],
    f1: &[HashMap<String, f64>],
    buckets: usize,
) -> Result<BucketReport> {
    if systems.is_empty() || systems.len() != f1.len() {
        return Err(Error::Precondition(format!(
            "{} system names for {} F1 tables",
            systems.len(),
            f1.len()
        )));
    }
    let mut pooled = Vec::new();
    for tc in clusterings {
        let used: HashSet<usize> = tc.test_labels.iter().copied().collect();
        pooled.extend(
            tc.diversities
                .iter()
                .filter(|d| used.contains(&d.cluster))
                .map(|d| d.score),
        );
    }
    let km = kmeans_1d(&pooled, buckets)?;
    let ns = systems.len();
    let mut per_clustering = Vec::with_capacity(clusterings.len());
    for tc in clusterings {
        let score_of: HashMap<usize, f64> = tc
            .diversities
            .iter()
            .map(|d| (d.cluster, d.score))
            .collect();
        let mut sums = vec![vec![0.0; ns]; buckets];
        let mut counts = vec![0usize; buckets];
        for (qid, label) in tc.test_qids.iter().zip(&tc.test_labels) {
            let score = *score_of.get(label).ok_or_else(|| {
                Error::Validation(format!("test question {qid} has unknown cluster {label}"))
            })?;
            let b = km.assign(score);
            counts[b] += 1;
            for s in 0..ns {
                sums[b][s] += 100.0 * f1[s].get(qid).copied().unwrap_or(0.0);
            }
        }
        let bucket_f1 = (0..buckets)
            .map(|b| {
                (0..ns)
                    .map(|s| (counts[b] > 0).then(|| sums[b][s] / counts[b] as f64))
                    .collect()
            })
            .collect();
        per_clustering.push(ClusteringTable {
            threshold: tc.threshold,
            bucket_f1,
            bucket_questions: counts,
        });
    }
    let mean_f1: Vec<Vec<Option<f64>>> = (0..buckets)
        .map(|b| {
            (0..ns)
                .map(|s| mean_opt(per_clustering.iter().map(|t| t.bucket_f1[b][s])))
                .collect()
        })
        .collect();
    let min_max_diff = (0..ns)
        .map(|s| {
            let vals: Vec<f64> = mean_f1.iter().filter_map(|row| row[s]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - vals.iter().copied().fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    let reference_difference = (0..buckets)
        .map(|b| {
            (0..ns)
                .map(|s| {
                    mean_opt(per_clustering.iter().map(|t| {
                        let row = &t.bucket_f1[b];
                        row[0].zip(row[s]).map(|(r, x)| r - x)
                    }))
                })
                .collect()
        })
        .collect();
    Ok(BucketReport {
        systems: systems.to_vec(),
        reference_system: systems[0].clone(),
        bucket_centroids: km.centroids,
        buckets_padded: km.padded,
        per_clustering,
        mean_f1,
        min_max_diff,
        reference_difference,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl BucketReport {
    /// Rows `bucket,centroid,system,mean_f1,difference_from_reference`.
    pub fn averaged_csv(&self) -> String {
        let mut out = String::from("bucket,centroid,system,mean_f1,difference_from_reference\n");
        for (b, row) in self.mean_f1.iter().enumerate() {
            for (s, name) in self.systems.iter().enumerate() {
                out.push_str(&format!(
                    "{b},{:.6},{name},{},{}\n",
                    self.bucket_centroids[b],
                    fmt_opt(row[s]),
                    fmt_opt(self.reference_difference[b][s])
                ));
            }
        }
        out
    }

    /// Rows `clustering,threshold,bucket,questions,system,f1`.
    pub fn per_clustering_csv(&self) -> String {
        let mut out = String::from("clustering,threshold,bucket,questions,system,f1\n");
        for (c, t) in self.per_clustering.iter().enumerate() {
            for (b, row) in t.bucket_f1.iter().enumerate() {
                for (s, name) in self.systems.iter().enumerate() {
                    out.push_str(&format!(
                        "{c},{:.6},{b},{},{name},{}\n",
                        t.threshold,
                        t.bucket_questions[b],
                        fmt_opt(row[s])
                    ));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub graph: GraphConfig,
    pub linkage: Linkage,
    pub clusterings: usize,
    pub buckets: usize,
    /// Test question ids left out of the analysis.
    pub exclude: Vec<String>,
    pub jobs: usize,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            graph: GraphConfig::default(),
            linkage: Linkage::Average,
            clusterings: DEFAULT_CLUSTERINGS,
            buckets: DEFAULT_BUCKETS,
            exclude: Vec::new(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityAnalysis {
    pub thresholds: Vec<f64>,
    pub thresholds_padded: bool,
    pub edges: usize,
    pub merges: usize,
    pub test_questions: usize,
    pub test_duplicates_dropped: usize,
    pub clusterings: Vec<TestClustering>,
    pub report: BucketReport,
}

/// Full pipeline from train and test sets to the bucketed F1 report.
pub fn analyze(
    train: &Dataset,
    test: &Dataset,
    systems: &[String],
    f1: &[HashMap<String, f64>],
    backend: &dyn EncoderBackend,
    recognizer: &dyn EntityRecognizer,
    cfg: &DiversityConfig,
) -> Result<DiversityAnalysis> {
    if train.is_empty() {
        return Err(Error::Precondition(
            "diversity analysis needs a non-empty train set".into(),
        ));
    }
    let vecs = encode_questions(train, backend, recognizer)?;
    let ids: Vec<String> = train.cases.iter().map(|c| c.id().to_string()).collect();
    let graph = graph_from_vectors(ids.clone(), &vecs, cfg.graph, cfg.jobs)?;
    let dendro = hac(&graph, cfg.linkage)?;
    let km = compute_cut_thresholds(&graph, cfg.clusterings)?;
    let exclude: HashSet<&str> = cfg.exclude.iter().map(String::as_str).collect();
    let kept = Dataset {
        name: test.name.clone(),
        cases: test
            .cases
            .iter()
            .filter(|c| !exclude.contains(c.id()))
            .cloned()
            .collect(),
    };
    let assignment = assign_test(&kept, &vecs, backend, recognizer)?;
    let mut clusterings = Vec::with_capacity(km.centroids.len());
    for (t, &th) in km.centroids.iter().enumerate() {
        let fc = cut(&dendro, th, &ids, t);
        clusterings.push(TestClustering {
            threshold: th,
            diversities: cluster_diversity(&fc, train)?,
            test_qids: assignment.qids.clone(),
            test_labels: assignment.labels(&fc),
        });
    }
    let report = bucket_report(&clusterings, systems, f1, cfg.buckets)?;
    Ok(DiversityAnalysis {
        thresholds: km.centroids.clone(),
        thresholds_padded: km.padded,
        edges: graph.edges().len(),
        merges: dendro.merges.len(),
        test_questions: assignment.qids.len(),
        test_duplicates_dropped: assignment.duplicates_dropped,
        clusterings,
        report,
    })
}
