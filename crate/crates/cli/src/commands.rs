use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt, TryStreamExt};
use perspectra_core::config::{KitConfig, DEFAULT_CONFIG_FILE};
use perspectra_core::corpus::{corpus_stats, load_corpus, save_corpus};
use perspectra_core::llmio::{Endpoint, EndpointKind, FactualityScorer, LlmClient};
use perspectra_core::optimize::{optimize, OptimizerConfig, OptimizerEndpoints};
use perspectra_core::promptkit::{PromptProgram, Strategy};
use perspectra_core::sftprep::export_sft;
use perspectra_core::spaneval::{score_spans, thread_eval_spans, DocKey, EvalSpan};
use perspectra_core::spanid::{average_probabilities, decode_spans, tokenize_words, ProbMatrix, ProbRecord, TokenSeq};
use perspectra_core::summarize::{run_tasks, tasks_from_corpus, tasks_from_spans};
use perspectra_core::summeval::{evaluate_batch, CompositeWeights, MetricReport};
use perspectra_core::{Corpus, Perspective, Split};
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{create_parent, read_json, read_jsonl, read_span_file, read_summaries, write_json, write_jsonl, ThreadSpans};
use crate::error::CliError;

const PROBE_CONCURRENCY: usize = 8;

/// Loaded configuration plus the one shared HTTP client.
pub struct Context {
    pub config: KitConfig,
    client: Arc<LlmClient>,
}

impl Context {
    /// An explicit `path` must exist; the default file is optional.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let config = match path {
            Some(p) => KitConfig::load(p)?,
            None if Path::new(DEFAULT_CONFIG_FILE).exists() => KitConfig::load(Path::new(DEFAULT_CONFIG_FILE))?,
            None => KitConfig::default(),
        };
        let api_key = std::env::var("PERSPECTRA_API_KEY").ok().filter(|k| !k.is_empty());
        let client = Arc::new(LlmClient::new(config.client_config(api_key)));
        Ok(Self { config, client })
    }

    fn split_path(&self, split: Split) -> PathBuf {
        self.config.data_dir().join(format!("{split}.jsonl"))
    }

    fn corpus(&self, split: Split) -> Result<Corpus, CliError> {
        let path = self.split_path(split);
        if !path.exists() {
            return Err(CliError::Input(format!(
                "no {split} split at {}; run `perspectra ingest --split {split}` first",
                path.display()
            )));
        }
        Ok(load_corpus(&path, split)?)
    }

    fn endpoint(&self, name: Option<&str>, kind: EndpointKind) -> Result<Endpoint, CliError> {
        let (_, config) = self.config.resolve(name, kind)?;
        Ok(Endpoint::new(self.client.clone(), config.clone()).with_defaults(self.config.gen_defaults()))
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn warn(message: &str) {
    eprintln!("{}", json!({ "warning": message }));
}

fn load_program(strategy: Strategy, prompt: Option<&Path>) -> Result<PromptProgram, CliError> {
    let Some(path) = prompt else {
        return Ok(PromptProgram::new(strategy));
    };
    let program: PromptProgram = read_json(path)?;
    if program.strategy != strategy {
        return Err(CliError::Input(format!(
            "{} holds a {} program but --strategy is {strategy}",
            path.display(),
            program.strategy
        )));
    }
    program.validate()?;
    Ok(program)
}

pub fn ingest(ctx: &Context, input: &Path, split: Split) -> Result<(), CliError> {
    let corpus = load_corpus(input, split)?;
    let path = ctx.split_path(split);
    create_parent(&path)?;
    save_corpus(&corpus, &path)?;
    print_json(&json!({
        "split": split,
        "path": path.display().to_string(),
        "threads": corpus.threads.len(),
        "spans": corpus.total_spans(),
        "summaries": corpus.total_summaries(),
    }));
    Ok(())
}

pub fn stats(ctx: &Context, split: Split) -> Result<(), CliError> {
    let corpus = ctx.corpus(split)?;
    print!("{}", corpus_stats(&corpus).to_table());
    Ok(())
}

type AnswerKey = (String, usize);

fn answer_tokens(corpus: &Corpus) -> Vec<(AnswerKey, TokenSeq)> {
    corpus
        .threads
        .iter()
        .flat_map(|t| {
            t.answers
                .iter()
                .enumerate()
                .map(|(i, a)| ((t.id.clone(), i), tokenize_words(a)))
        })
        .collect()
}

fn probs_from_dir(dir: &Path, corpus: &Corpus) -> Result<BTreeMap<AnswerKey, Vec<ProbMatrix>>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    files.sort();
    let mut members: BTreeMap<AnswerKey, Vec<ProbMatrix>> = BTreeMap::new();
    for file in &files {
        for record in read_jsonl::<ProbRecord>(file)? {
            let answer = corpus
                .get(&record.thread_id)
                .and_then(|t| t.answers.get(record.answer_index))
                .ok_or_else(|| {
                    CliError::Input(format!(
                        "{}: no answer {} in thread {}",
                        file.display(),
                        record.answer_index,
                        record.thread_id
                    ))
                })?;
            let key = (record.thread_id.clone(), record.answer_index);
            let matrix = record.into_matrix(&tokenize_words(answer))?;
            let slot = members.entry(key.clone()).or_default();
            if slot.iter().any(|m| m.provider_id() == matrix.provider_id()) {
                return Err(CliError::Input(format!(
                    "provider {} appears twice for {} answer {}",
                    matrix.provider_id(),
                    key.0,
                    key.1
                )));
            }
            slot.push(matrix);
        }
    }
    for slot in members.values_mut() {
        slot.sort_by(|a, b| a.provider_id().cmp(b.provider_id()));
    }
    Ok(members)
}

async fn probs_from_endpoints(
    ctx: &Context,
    names: &[&str],
    corpus: &Corpus,
) -> Result<BTreeMap<AnswerKey, Vec<ProbMatrix>>, CliError> {
    let endpoints = names
        .iter()
        .map(|n| Ok((n.to_string(), ctx.config.endpoint(n, EndpointKind::TokenProbs)?.clone())))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut jobs = Vec::new();
    for (key, tokens) in answer_tokens(corpus) {
        if tokens.is_empty() {
            continue;
        }
        for (name, config) in &endpoints {
            jobs.push((key.clone(), tokens.clone(), name.clone(), config.clone()));
        }
    }
    let results: Vec<(AnswerKey, ProbMatrix)> = stream::iter(jobs.into_iter().map(|(key, tokens, name, config)| {
        let client = ctx.client.clone();
        async move {
            let m = client.token_probs(&tokens.source, &tokens.tokens, &config).await?;
            Ok::<_, CliError>((key, ProbMatrix::new(name, m.rows().to_vec())?))
        }
    }))
    .buffered(PROBE_CONCURRENCY)
    .try_collect()
    .await?;
    let mut members: BTreeMap<AnswerKey, Vec<ProbMatrix>> = BTreeMap::new();
    for (key, m) in results {
        members.entry(key).or_default().push(m);
    }
    Ok(members)
}

pub async fn predict_spans(ctx: &Context, split: Split, probs: &str, out: &Path) -> Result<(), CliError> {
    let corpus = ctx.corpus(split)?;
    let dir = Path::new(probs);
    let members = if dir.is_dir() {
        probs_from_dir(dir, &corpus)?
    } else {
        let names: Vec<&str> = probs.split(',').map(str::trim).filter(|n| !n.is_empty()).collect();
        probs_from_endpoints(ctx, &names, &corpus).await?
    };

    let mut providers: Option<BTreeSet<&str>> = None;
    let mut per_thread: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for ((thread_id, answer_index), tokens) in answer_tokens(&corpus) {
        let key = (thread_id.clone(), answer_index);
        let Some(matrices) = members.get(&key) else {
            if tokens.is_empty() {
                continue;
            }
            return Err(CliError::Input(format!("no probabilities for {thread_id} answer {answer_index}")));
        };
        let ids: BTreeSet<&str> = matrices.iter().map(ProbMatrix::provider_id).collect();
        match &providers {
            None => providers = Some(ids),
            Some(expected) if *expected != ids => {
                return Err(CliError::Input(format!(
                    "{thread_id} answer {answer_index} has providers {ids:?}, expected {expected:?}"
                )));
            }
            Some(_) => {}
        }
        let ensemble = average_probabilities(matrices)?;
        let spans = decode_spans(&ensemble, &tokens, answer_index)?;
        per_thread.entry(thread_id).or_default().extend(spans);
    }
    let records: Vec<ThreadSpans> = corpus
        .threads
        .iter()
        .map(|t| ThreadSpans::from_spans(&t.id, per_thread.get(&t.id).map(Vec::as_slice).unwrap_or_default()))
        .collect();
    write_jsonl(out, &records)?;
    print_json(&json!({
        "threads": records.len(),
        "spans": records.iter().map(|r| r.spans.len()).sum::<usize>(),
        "providers": providers.unwrap_or_default(),
        "out": out.display().to_string(),
    }));
    Ok(())
}

pub fn eval_spans(pred: &Path, gold: &Path, report: &Path) -> Result<(), CliError> {
    let gold = load_corpus(gold, Split::Test)?;
    let predicted = read_span_file(pred, &gold)?;
    let tokens: HashMap<DocKey, TokenSeq> = answer_tokens(&gold)
        .into_iter()
        .map(|((thread_id, answer_index), seq)| (DocKey { thread_id, answer_index }, seq))
        .collect();
    let gold_spans: Vec<EvalSpan> = gold.threads.iter().flat_map(thread_eval_spans).collect();
    let pred_spans: Vec<EvalSpan> = predicted
        .iter()
        .flat_map(|(tid, spans)| {
            spans
                .iter()
                .map(|s| EvalSpan::new(tid, s.answer_index, s.start, s.end, s.label))
        })
        .collect();
    let score = score_spans(&pred_spans, &gold_spans, &tokens)?;
    write_json(report, &score)?;
    print_json(&json!({
        "macro_f1": score.macro_f1,
        "strict_f1": score.strict_f1,
        "proportional_f1": score.proportional_f1,
    }));
    Ok(())
}

pub struct SummarizeArgs<'a> {
    pub split: Split,
    pub strategy: Strategy,
    pub prompt: Option<&'a Path>,
    pub endpoint: Option<&'a str>,
    pub spans: Option<&'a Path>,
    pub out: &'a Path,
}

pub async fn summarize(ctx: &Context, args: SummarizeArgs<'_>) -> Result<(), CliError> {
    let program = load_program(args.strategy, args.prompt)?;
    let corpus = ctx.corpus(args.split)?;
    let tasks = match args.spans {
        Some(path) => tasks_from_spans(&corpus, &read_span_file(path, &corpus)?),
        None => tasks_from_corpus(&corpus, false),
    };
    let generator = ctx.endpoint(args.endpoint, EndpointKind::Generation)?;
    let registry = ctx.config.guide_registry()?;
    let results = run_tasks(&tasks, &program, &registry, &generator).await;
    let mut outputs = Vec::with_capacity(results.len());
    for (task, result) in tasks.iter().zip(results) {
        let output = result.map_err(|source| CliError::Task { task: task.id(), source })?;
        if output.keyphrase_warning {
            warn(&format!("{}: keyphrase completion had no list", task.id()));
        }
        outputs.push(output);
    }
    write_jsonl(args.out, &outputs)?;
    print_json(&json!({
        "summaries": outputs.len(),
        "strategy": program.strategy,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct PairReport<'a> {
    thread_id: &'a str,
    perspective: Perspective,
    #[serde(flatten)]
    metrics: &'a MetricReport,
}

#[derive(Debug, Serialize)]
struct SummaryEvalReport<'a> {
    pairs: Vec<PairReport<'a>>,
    means: Option<&'a MetricReport>,
    embedding_model: &'a str,
    weights: CompositeWeights,
    warnings: Vec<String>,
}

pub struct EvalSummArgs<'a> {
    pub pred: &'a Path,
    pub reference: &'a Path,
    pub report: &'a Path,
    pub embedding_endpoint: Option<&'a str>,
    pub factuality_endpoint: Option<&'a str>,
}

pub async fn eval_summ(ctx: &Context, args: EvalSummArgs<'_>) -> Result<(), CliError> {
    let preds = read_summaries(args.pred)?;
    let refs: BTreeMap<_, _> = read_summaries(args.reference)?.into_iter().collect();
    let mut warnings = Vec::new();
    let mut keys = Vec::new();
    let mut pairs = Vec::new();
    for (key, candidate) in preds {
        match refs.get(&key) {
            Some(reference) => {
                pairs.push((candidate, reference.clone()));
                keys.push(key);
            }
            None => warnings.push(format!("{}/{}: no reference summary, skipped", key.0, key.1)),
        }
    }
    let embedder = ctx.endpoint(args.embedding_endpoint, EndpointKind::Embedding)?;
    let factuality = match args.factuality_endpoint {
        Some(name) => Some(ctx.endpoint(Some(name), EndpointKind::Factuality)?),
        None => None,
    };
    let weights = CompositeWeights::default();
    let batch = evaluate_batch(
        &pairs,
        &embedder,
        factuality.as_ref().map(|f| f as &dyn FactualityScorer),
        &weights,
    )
    .await?;
    for w in &warnings {
        warn(w);
    }
    warnings.extend(batch.warnings.iter().cloned());
    let report = SummaryEvalReport {
        pairs: keys
            .iter()
            .zip(&batch.reports)
            .map(|((thread_id, perspective), metrics)| PairReport {
                thread_id,
                perspective: *perspective,
                metrics,
            })
            .collect(),
        means: batch.means.as_ref(),
        embedding_model: &batch.embedding_model,
        weights: batch.weights,
        warnings,
    };
    write_json(args.report, &report)?;
    print_json(&json!({
        "pairs": batch.reports.len(),
        "composite": batch.means.as_ref().map(|m| m.composite),
        "report": args.report.display().to_string(),
    }));
    Ok(())
}

pub struct OptimizeArgs<'a> {
    pub split: Split,
    pub strategy: Strategy,
    pub prompt: Option<&'a Path>,
    pub endpoint: Option<&'a str>,
    pub meta_endpoint: Option<&'a str>,
    pub embedding_endpoint: Option<&'a str>,
    pub iterations: usize,
    pub variants: usize,
    pub minibatch: usize,
    pub full_eval_period: usize,
    pub seed: u64,
    pub out: &'a Path,
    pub trace: Option<&'a Path>,
}

pub async fn run_optimize(ctx: &Context, args: OptimizeArgs<'_>) -> Result<(), CliError> {
    let program = load_program(args.strategy, args.prompt)?;
    let dev = ctx.corpus(args.split)?;
    let task = ctx.endpoint(args.endpoint, EndpointKind::Generation)?;
    let meta = ctx.endpoint(args.meta_endpoint.or(args.endpoint), EndpointKind::Generation)?;
    let embedder = ctx.endpoint(args.embedding_endpoint, EndpointKind::Embedding)?;
    let registry = ctx.config.guide_registry()?;
    let config = OptimizerConfig {
        iterations: args.iterations,
        variants_per_iteration: args.variants,
        minibatch_size: args.minibatch,
        full_eval_period: args.full_eval_period,
        rng_seed: args.seed,
        ..OptimizerConfig::default()
    };
    let endpoints = OptimizerEndpoints {
        task: &task,
        meta: &meta,
        embedder: &embedder,
    };
    let result = optimize(&program, &dev, endpoints, &registry, &config).await?;
    let best = result.best_program(&program)?;
    write_json(args.out, &best)?;
    if let Some(trace) = args.trace {
        write_jsonl(trace, &result.trace)?;
    }
    for record in &result.trace {
        for w in &record.warnings {
            warn(&format!("iteration {}: {w}", record.iteration));
        }
    }
    print_json(&json!({
        "initial_dev_score": result.initial_dev_score,
        "dev_score": result.dev_score,
        "best_index": result.best_index,
        "candidates": result.candidates.len(),
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

pub fn run_export(ctx: &Context, split: Split, strategy: Strategy, prompt: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let program = load_program(strategy, prompt)?;
    let corpus = ctx.corpus(split)?;
    let registry = ctx.config.guide_registry()?;
    create_parent(out)?;
    let summary = export_sft(&corpus, &program, &registry, out)?;
    for task in &summary.skipped_tasks {
        warn(&format!("{task}: perspective has no spans, skipped"));
    }
    print_json(&json!({
        "records": summary.records,
        "skipped": summary.skipped,
        "out": out.display().to_string(),
    }));
    Ok(())
}
