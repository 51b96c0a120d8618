use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use casereader::corpus::{dataset_stats, ingest_mrqa, IngestSummary};
use casereader::diversity::{analyze, DiversityConfig, GraphConfig, Linkage};
use casereader::metrics::{Evaluation, SpanUnit, Subset};
use casereader::reuse::predict_all;
use casereader::{
    evaluate, train, Casebase, Dataset, EncoderBackend, EvalOptions, EvalResult, Gazetteer,
    ImportedEmbeddings, PredictionRecord, RetrievalConfig, ReuseConfig, RuleRecognizer,
    ToyEncoderParams, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{manifest_path, sha256_bytes, sibling, write_json, RunManifest};
use crate::{
    AblateKArgs, AnalyzeDiversityArgs, AugmentArgs, BuildCasebaseArgs, Command, EncoderArgs,
    EncoderKind, EvaluateArgs, FilterArgs, IngestArgs, LinkageArg, PredictArgs, RecognizerArgs,
    SpanUnitArg, SubsetArg, TrainArgs,
};

/// Directory where ingested datasets are cached by input hash and options.
pub const CACHE_DIR_ENV: &str = "CASEREADER_CACHE_DIR";

pub fn run(command: &Command) -> Result<RunManifest> {
    match command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::BuildCasebase(a) => cmd_build_casebase(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::AblateK(a) => cmd_ablate_k(a),
        Command::Augment(a) => cmd_augment(a),
        Command::AnalyzeDiversity(a) => cmd_analyze_diversity(a),
    }
}

enum Backend {
    Toy(ToyEncoderParams),
    Imported(ImportedEmbeddings),
}

impl Backend {
    fn load(args: &EncoderArgs) -> Result<Self> {
        match (&args.checkpoint, &args.manifest) {
            (Some(c), None) => Ok(Backend::Toy(
                ToyEncoderParams::load(c)
                    .with_context(|| format!("loading checkpoint {}", c.display()))?,
            )),
            (None, Some(m)) => Ok(Backend::Imported(
                ImportedEmbeddings::load(m)
                    .with_context(|| format!("loading embeddings {}", m.display()))?,
            )),
            _ => bail!("exactly one of --checkpoint or --manifest is required"),
        }
    }

    fn as_dyn(&self) -> &dyn EncoderBackend {
        match self {
            Backend::Toy(p) => p,
            Backend::Imported(e) => e,
        }
    }

    fn source(args: &EncoderArgs) -> &Path {
        args.checkpoint
            .as_deref()
            .or(args.manifest.as_deref())
            .expect("checked by Backend::load")
    }
}

fn recognizer(args: &RecognizerArgs) -> Result<RuleRecognizer> {
    let gazetteer = match &args.gazetteer {
        Some(p) => {
            Gazetteer::load(p).with_context(|| format!("loading gazetteer {}", p.display()))?
        }
        None => Gazetteer::default(),
    };
    Ok(RuleRecognizer::new(gazetteer))
}

fn record_recognizer(m: &mut RunManifest, args: &RecognizerArgs) -> Result<()> {
    if let Some(g) = &args.gazetteer {
        m.input(g)?;
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_casebase(path: &Path) -> Result<Casebase> {
    Casebase::load(path).with_context(|| format!("loading casebase {}", path.display()))
}

fn check_fingerprint(cb: &Casebase, backend: &dyn EncoderBackend) -> Result<()> {
    let fp = backend.fingerprint();
    ensure!(
        cb.encoder_fingerprint() == fp,
        "casebase was encoded with {} but the encoder is {}",
        cb.encoder_fingerprint(),
        fp
    );
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn reuse_config(k: usize, filters: &FilterArgs) -> ReuseConfig {
    let mut cfg = ReuseConfig::new(k);
    if filters.train_filters {
        cfg.retrieval = RetrievalConfig::training(k);
    }
    if filters.no_filters {
        cfg.exclude_self = false;
    }
    cfg
}

fn eval_options(subset: SubsetArg, unit: SpanUnitArg) -> EvalOptions {
    EvalOptions {
        subset: match subset {
            SubsetArg::All => Subset::All,
            SubsetArg::MultiMention => Subset::MultiMention,
        },
        span_unit: match unit {
            SpanUnitArg::Char => SpanUnit::Char,
            SpanUnitArg::Token => SpanUnit::Token,
        },
    }
}

struct PredictionRun {
    records: Vec<PredictionRecord>,
    failed: usize,
    relaxed: usize,
}

/// Predicts every case; failures are reported on stderr and counted.
fn run_predictions(
    dataset: &Dataset,
    cb: &Casebase,
    backend: &dyn EncoderBackend,
    rec: &RuleRecognizer,
    cfg: &ReuseConfig,
    jobs: usize,
) -> PredictionRun {
    let results = predict_all(&dataset.cases, cb, backend, rec, cfg, jobs);
    let mut records = Vec::with_capacity(results.len());
    let mut failed = 0;
    let mut relaxed = 0;
    for (case, r) in dataset.cases.iter().zip(results) {
        match r {
            Ok(p) => {
                relaxed += usize::from(p.relaxed_retrieval);
                records.push(PredictionRecord::from_prediction(&p, cb));
            }
            Err(e) => {
                eprintln!("warning: no prediction for {}: {e}", case.id());
                failed += 1;
            }
        }
    }
    PredictionRun {
        records,
        failed,
        relaxed,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestReport {
    summary: IngestSummary,
    stats: casereader::corpus::DatasetStats,
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("ingest", a)?;
    m.input(&a.input)?;
    create_parent(&a.out)?;
    let cache = std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from);
    let key = format!(
        "{}:{:?}:{:?}",
        m.inputs[0].sha256, a.limit, a.context_window
    );
    let cached = cache.as_ref().map(|dir| {
        dir.join(format!(
            "ingest-{}.jsonl",
            &sha256_bytes(key.as_bytes())[..16]
        ))
    });
    let summary_file = |p: &Path| sibling(p, "summary.json");
    let (dataset, summary) = match cached
        .as_ref()
        .filter(|p| p.exists() && summary_file(p).exists())
    {
        Some(hit) => {
            let summary: IngestSummary =
                serde_json::from_str(&fs::read_to_string(summary_file(hit))?)?;
            m.count("cache_hit", 1);
            (load_dataset(hit)?, summary)
        }
        None => {
            let ingested = m.timed("ingest", || ingest_mrqa(&a.input, a.limit))?;
            let mut dataset = ingested.dataset;
            if let Some(w) = a.context_window {
                dataset.cases = dataset
                    .cases
                    .iter()
                    .map(|c| c.truncate_context(w))
                    .collect::<casereader::Result<_>>()?;
            }
            if let Some(p) = &cached {
                fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                dataset.save(p)?;
                write_json(&summary_file(p), &ingested.summary)?;
            }
            (dataset, ingested.summary)
        }
    };
    for e in &summary.errors {
        eprintln!(
            "warning: {}: line {}: {}",
            a.input.display(),
            e.line,
            e.message
        );
    }
    m.skip("unparseable_lines", summary.skipped_lines);
    m.count("cases", dataset.len());
    dataset.save(&a.out)?;
    m.artifact(&a.out);
    let report = IngestReport {
        summary,
        stats: dataset_stats(&dataset),
    };
    let stats = sibling(&a.out, "stats.json");
    write_json(&stats, &report)?;
    m.artifact(&stats);
    m.write(&manifest_path(&a.out, false))?;
    Ok(m)
}

pub fn cmd_build_casebase(a: &BuildCasebaseArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("build-casebase", a)?;
    m.input(&a.dataset)?;
    record_recognizer(&mut m, &a.recognizer)?;
    let dataset = load_dataset(&a.dataset)?;
    let rec = recognizer(&a.recognizer)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let backend = match (a.encoder, &a.source.checkpoint, &a.source.manifest) {
        (EncoderKind::Toy, Some(c), None) => {
            m.input(c)?;
            Backend::load(&a.source)?
        }
        (EncoderKind::Toy, None, None) => {
            let p =
                ToyEncoderParams::init(a.dim, a.vocab_buckets, a.window, a.self_weight, a.seed)?;
            let path = a.out.join("encoder.json");
            p.save(&path)?;
            m.seed = Some(a.seed);
            m.artifact(&path);
            m.artifact(&sibling(&path, "table.f32"));
            // Reload so the casebase matches the stored f32 table exactly.
            Backend::Toy(ToyEncoderParams::load(&path)?)
        }
        (EncoderKind::Imported, None, Some(mf)) => {
            m.input(mf)?;
            Backend::load(&a.source)?
        }
        (EncoderKind::Toy, _, Some(_)) => bail!("--encoder toy takes --checkpoint, not --manifest"),
        (EncoderKind::Imported, _, _) => bail!("--encoder imported requires --manifest"),
    };
    let cb = m.timed("encode", || {
        Casebase::build(&dataset, backend.as_dyn(), &rec)
    })?;
    cb.save(&a.out)?;
    for f in [
        "casebase.json",
        "embeddings.json",
        "embeddings.vectors.f32",
        "embeddings.keys.tsv",
        "cases.jsonl",
    ] {
        m.artifact(&a.out.join(f));
    }
    m.count("entries", cb.len());
    m.write(&manifest_path(&a.out, true))?;
    Ok(m)
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("train", a)?;
    m.seed = Some(a.seed);
    m.input(&a.dataset)?;
    m.input(&a.casebase)?;
    m.input(&a.checkpoint)?;
    record_recognizer(&mut m, &a.recognizer)?;
    let dataset = load_dataset(&a.dataset)?;
    let cb = load_casebase(&a.casebase)?;
    let params = ToyEncoderParams::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let rec = recognizer(&a.recognizer)?;
    let cfg = TrainConfig {
        tau: a.tau,
        k: a.k,
        sim_threshold: (!a.no_threshold).then_some(a.threshold),
        use_wh_filter: a.wh_filter,
        lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        grad_clip: (!a.no_grad_clip).then_some(a.grad_clip),
        ..TrainConfig::default()
    };
    let outcome = m.timed("train", || train(&dataset, &cb, params, &cfg, &rec))?;
    let log = a
        .log
        .clone()
        .unwrap_or_else(|| sibling(&a.out_checkpoint, "train.jsonl"));
    write_jsonl(&log, &outcome.epochs)?;
    m.artifact(&log);
    for e in &outcome.epochs {
        m.skip(
            &format!("epoch_{}_no_retrieved_case", e.epoch),
            e.skipped_count,
        );
    }
    create_parent(&a.out_checkpoint)?;
    outcome.params.save(&a.out_checkpoint)?;
    m.artifact(&a.out_checkpoint);
    m.artifact(&sibling(&a.out_checkpoint, "table.f32"));
    if let Some(out_cb) = &a.out_casebase {
        let stored = ToyEncoderParams::load(&a.out_checkpoint)?;
        let cases = Dataset {
            name: dataset.name.clone(),
            cases: cb.entries().iter().map(|e| e.case.clone()).collect(),
        };
        let refreshed = m.timed("encode", || Casebase::build(&cases, &stored, &rec))?;
        refreshed.save(out_cb)?;
        m.artifact(out_cb);
    }
    m.count("epochs", outcome.epochs.len());
    m.write(&manifest_path(&a.out_checkpoint, false))?;
    Ok(m)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("predict", a)?;
    m.input(&a.dataset)?;
    m.input(&a.casebase)?;
    let backend = Backend::load(&a.encoder)?;
    m.input(Backend::source(&a.encoder))?;
    record_recognizer(&mut m, &a.recognizer)?;
    let dataset = load_dataset(&a.dataset)?;
    let cb = load_casebase(&a.casebase)?;
    check_fingerprint(&cb, backend.as_dyn())?;
    let rec = recognizer(&a.recognizer)?;
    let cfg = reuse_config(a.k, &a.filters);
    cfg.retrieval.validate()?;
    let run = m.timed("predict", || {
        run_predictions(&dataset, &cb, backend.as_dyn(), &rec, &cfg, a.jobs)
    });
    m.skip("prediction_errors", run.failed);
    m.count("relaxed_retrieval", run.relaxed);
    write_jsonl(&a.out, &run.records)?;
    m.artifact(&a.out);
    m.count("predictions", run.records.len());
    m.write(&manifest_path(&a.out, false))?;
    Ok(m)
}

fn evaluate_file(
    predictions: &[PredictionRecord],
    dataset: &Dataset,
    rec: &RuleRecognizer,
    opts: EvalOptions,
) -> Result<Evaluation> {
    Ok(evaluate(predictions, dataset, rec, opts)?)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("evaluate", a)?;
    m.input(&a.predictions)?;
    m.input(&a.dataset)?;
    record_recognizer(&mut m, &a.recognizer)?;
    let preds = read_predictions(&a.predictions)?;
    let dataset = load_dataset(&a.dataset)?;
    let rec = recognizer(&a.recognizer)?;
    let ev = m.timed("evaluate", || {
        evaluate_file(&preds, &dataset, &rec, eval_options(a.subset, a.span_unit))
    })?;
    create_parent(&a.out)?;
    write_json(&a.out, &ev.result)?;
    m.artifact(&a.out);
    let inst = sibling(&a.out, "instances.jsonl");
    write_jsonl(&inst, &ev.instances)?;
    m.artifact(&inst);
    m.skip("missing_predictions", ev.result.missing);
    m.skip("unmatched_predictions", ev.result.unmatched_predictions);
    m.count("evaluated", ev.result.n);
    m.write(&manifest_path(&a.out, false))?;
    Ok(m)
}

/// One line of the k-ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    #[serde(flatten)]
    pub result: EvalResult,
}

pub fn cmd_ablate_k(a: &AblateKArgs) -> Result<RunManifest> {
    ensure!(!a.ks.is_empty(), "--ks needs at least one value");
    let mut m = RunManifest::new("ablate-k", a)?;
    m.input(&a.dataset)?;
    m.input(&a.casebase)?;
    let backend = Backend::load(&a.encoder)?;
    m.input(Backend::source(&a.encoder))?;
    record_recognizer(&mut m, &a.recognizer)?;
    let dataset = load_dataset(&a.dataset)?;
    let cb = load_casebase(&a.casebase)?;
    check_fingerprint(&cb, backend.as_dyn())?;
    let rec = recognizer(&a.recognizer)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let opts = eval_options(a.subset, a.span_unit);
    let mut rows = Vec::with_capacity(a.ks.len());
    for &k in &a.ks {
        let cfg = reuse_config(k, &a.filters);
        cfg.retrieval.validate()?;
        let run = m.timed(&format!("k={k}"), || {
            run_predictions(&dataset, &cb, backend.as_dyn(), &rec, &cfg, a.jobs)
        });
        m.skip(&format!("k={k}_prediction_errors"), run.failed);
        let path = a.out.join(format!("predictions_k{k}.jsonl"));
        write_jsonl(&path, &run.records)?;
        m.artifact(&path);
        let ev = evaluate_file(&run.records, &dataset, &rec, opts)?;
        rows.push(AblationRow {
            k,
            result: ev.result,
        });
    }
    let json = a.out.join("ablation.json");
    write_json(&json, &rows)?;
    m.artifact(&json);
    let csv = a.out.join("ablation.csv");
    fs::write(&csv, ablation_csv(&rows))?;
    m.artifact(&csv);
    m.count("rows", rows.len());
    m.write(&manifest_path(&a.out, true))?;
    Ok(m)
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,em,f1,span_em,span_f1,n,candidate_recall,missing\n");
    for r in rows {
        let e = &r.result;
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{},{:.4},{}\n",
            r.k, e.em, e.f1, e.span_em, e.span_f1, e.n, e.candidate_recall, e.missing
        ));
    }
    out
}

pub fn cmd_augment(a: &AugmentArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("augment", a)?;
    m.input(&a.casebase)?;
    m.input(&a.new_dataset)?;
    let backend = Backend::load(&a.encoder)?;
    m.input(Backend::source(&a.encoder))?;
    record_recognizer(&mut m, &a.recognizer)?;
    let cb = load_casebase(&a.casebase)?;
    check_fingerprint(&cb, backend.as_dyn())?;
    let mut new = load_dataset(&a.new_dataset)?;
    let available = new.len();
    new.cases.truncate(a.samples);
    let rec = recognizer(&a.recognizer)?;
    let out = m.timed("encode", || cb.augment(&new, backend.as_dyn(), &rec))?;
    out.save(&a.out)?;
    m.artifact(&a.out);
    m.count("existing_entries", cb.len());
    m.count("source_available", available);
    m.count("added_entries", new.len());
    m.count("entries", out.len());
    m.write(&manifest_path(&a.out, true))?;
    Ok(m)
}

fn parse_system(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => bail!("expected NAME=PATH, got {spec:?}"),
    }
}

pub fn cmd_analyze_diversity(a: &AnalyzeDiversityArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("analyze-diversity", a)?;
    m.input(&a.train)?;
    m.input(&a.test)?;
    let backend = Backend::load(&a.encoder)?;
    m.input(Backend::source(&a.encoder))?;
    record_recognizer(&mut m, &a.recognizer)?;
    let train_set = load_dataset(&a.train)?;
    let test_set = load_dataset(&a.test)?;
    let rec = recognizer(&a.recognizer)?;
    let mut names = Vec::new();
    let mut f1 = Vec::new();
    for spec in &a.systems {
        let (name, path) = parse_system(spec)?;
        m.input(&path)?;
        let preds = read_predictions(&path)?;
        let ev = evaluate_file(&preds, &test_set, &rec, EvalOptions::default())?;
        m.skip(&format!("{name}_missing_predictions"), ev.result.missing);
        f1.push(
            ev.instances
                .iter()
                .map(|s| (s.qid.clone(), s.f1))
                .collect::<HashMap<_, _>>(),
        );
        names.push(name);
    }
    let exclude = match &a.exclude {
        Some(p) => {
            m.input(p)?;
            fs::read_to_string(p)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        }
        None => Vec::new(),
    };
    let cfg = DiversityConfig {
        graph: GraphConfig {
            neighbors: a.neighbors,
            lower_bound: a.lower_bound,
        },
        linkage: match a.linkage {
            LinkageArg::Single => Linkage::Single,
            LinkageArg::Complete => Linkage::Complete,
            LinkageArg::Average => Linkage::Average,
        },
        clusterings: a.clusterings,
        buckets: a.buckets,
        exclude,
        jobs: a.jobs,
    };
    let analysis = m.timed("analyze", || {
        analyze(
            &train_set,
            &test_set,
            &names,
            &f1,
            backend.as_dyn(),
            &rec,
            &cfg,
        )
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let json = a.out.join("diversity.json");
    write_json(&json, &analysis)?;
    m.artifact(&json);
    let avg = a.out.join("buckets.csv");
    fs::write(&avg, analysis.report.averaged_csv())?;
    m.artifact(&avg);
    let per = a.out.join("buckets_per_clustering.csv");
    fs::write(&per, analysis.report.per_clustering_csv())?;
    m.artifact(&per);
    m.skip("duplicate_test_questions", analysis.test_duplicates_dropped);
    m.count("test_questions", analysis.test_questions);
    m.count("edges", analysis.edges);
    m.count("clusterings", analysis.clusterings.len());
    m.write(&manifest_path(&a.out, true))?;
    Ok(m)
}
