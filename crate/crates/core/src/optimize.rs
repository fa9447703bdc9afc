//! Zero-shot instruction optimization.
//!
//! Each iteration asks a meta model for new instruction sets, scores the
//! unseen ones on a seeded minibatch of (thread, perspective) tasks, and
//! keeps the candidate with the highest shrunken mean score. Every
//! `full_eval_period` iterations the two leaders are re-scored on the whole
//! dev split and the incumbent is pinned to the better of them.

use std::collections::BTreeMap;

use futures::future::join_all;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::Corpus;
use crate::error::{LlmError, MetricError, OptimizeError, SummarizeError};
use crate::llmio::{Embedder, TextGenerator};
use crate::promptkit::{format_numbered_list, GuideRegistry, PromptProgram, Step};
use crate::summarize::{run_task, tasks_from_corpus, SummaryTask};
use crate::summeval::{evaluate_pair, CompositeWeights};

pub const META_PROMPT: &str = include_str!("../../../docs/prompts/meta.txt");

/// Sentences appended to the incumbent's summary instruction when the meta
/// model returns fewer instruction sets than requested.
pub const FALLBACK_SUFFIXES: [&str; 5] = [
    "Be specific.",
    "Keep it brief.",
    "Use plain language.",
    "Stay faithful to the spans.",
    "Avoid repeating yourself.",
];

const FULL_DEV_ID: &str = "full-dev";
const DEV_SAMPLE_STREAM: u64 = u64::MAX;
const HISTORY_LINES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub variants_per_iteration: usize,
    /// Allows `variants_per_iteration` outside 3..=5.
    #[serde(default)]
    pub allow_any_variant_count: bool,
    pub minibatch_size: usize,
    /// 0 disables periodic full-dev re-scoring.
    pub full_eval_period: usize,
    pub rng_seed: u64,
    pub prior_weight: f64,
    pub metric_weights: CompositeWeights,
    /// Dev inputs shown to the meta model.
    pub dev_samples: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            variants_per_iteration: 4,
            allow_any_variant_count: false,
            minibatch_size: 8,
            full_eval_period: 5,
            rng_seed: 42,
            prior_weight: 1.0,
            metric_weights: CompositeWeights::default(),
            dev_samples: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let fail = |m: &str| Err(OptimizeError::Config(m.to_string()));
        if self.iterations < 1 {
            return fail("iterations must be at least 1");
        }
        if self.variants_per_iteration < 1 {
            return fail("variants_per_iteration must be at least 1");
        }
        if !self.allow_any_variant_count && !(3..=5).contains(&self.variants_per_iteration) {
            return fail("variants_per_iteration must be between 3 and 5");
        }
        if self.minibatch_size < 1 {
            return fail("minibatch_size must be at least 1");
        }
        if !(self.prior_weight > 0.0 && self.prior_weight.is_finite()) {
            return fail("prior_weight must be positive");
        }
        let w = &self.metric_weights;
        let weights = [w.rouge_l, w.bleu, w.meteor, w.bertscore];
        if weights.iter().any(|x| x.is_nan() || *x < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("metric_weights must be non-negative and sum to 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub minibatch_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub instructions: BTreeMap<String, String>,
    pub scores: Vec<ScoreEntry>,
    pub prior_mean: f64,
    pub prior_weight: f64,
    pub posterior_mean: f64,
    pub eval_count: usize,
}

impl Candidate {
    pub fn new(instructions: BTreeMap<String, String>, prior_mean: f64, prior_weight: f64) -> Self {
        Self {
            instructions,
            scores: Vec::new(),
            prior_mean,
            prior_weight,
            posterior_mean: prior_mean,
            eval_count: 0,
        }
    }

    pub fn record(&mut self, minibatch_id: impl Into<String>, score: f64) {
        self.scores.push(ScoreEntry {
            minibatch_id: minibatch_id.into(),
            score,
        });
        self.eval_count = self.scores.len();
        self.posterior_mean = posterior(self.prior_mean, self.prior_weight, &self.scores);
    }
}

/// `(w * m0 + sum(scores)) / (w + n)`
pub fn posterior(prior_mean: f64, prior_weight: f64, scores: &[ScoreEntry]) -> f64 {
    let sum: f64 = scores.iter().map(|s| s.score).sum();
    (prior_weight * prior_mean + sum) / (prior_weight + scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub proposals: Vec<BTreeMap<String, String>>,
    pub minibatch_id: String,
    pub minibatch: Vec<String>,
    /// Minibatch score per proposal; `None` for proposals already in the pool.
    pub scores: Vec<Option<f64>>,
    pub incumbent: usize,
    pub incumbent_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_dev: Option<Vec<(usize, f64)>>,
    pub aborted: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best: Candidate,
    pub best_index: usize,
    pub candidates: Vec<Candidate>,
    pub trace: Vec<TraceRecord>,
    pub initial_dev_score: f64,
    pub dev_score: f64,
}

impl OptimizationResult {
    pub fn best_program(&self, base: &PromptProgram) -> Result<PromptProgram, OptimizeError> {
        Ok(base.with_instructions(&self.best.instructions)?)
    }
}

/// Endpoints the optimizer talks to.
#[derive(Clone, Copy)]
pub struct OptimizerEndpoints<'a> {
    pub task: &'a dyn TextGenerator,
    pub meta: &'a dyn TextGenerator,
    pub embedder: &'a dyn Embedder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposals {
    pub variants: Vec<BTreeMap<String, String>>,
    pub parsed: usize,
    pub warnings: Vec<String>,
}

/// `{incumbent}`, `{history}`, `{samples}` and `{count}` filled in.
pub fn render_meta_prompt(
    incumbent: &BTreeMap<String, String>,
    history: &[TraceRecord],
    samples: &[&SummaryTask],
    count: usize,
) -> String {
    let incumbent_json = serde_json::to_string_pretty(incumbent).expect("string map serializes");
    let recent = &history[history.len().saturating_sub(HISTORY_LINES)..];
    let history_text = if recent.is_empty() {
        "(none yet)".to_string()
    } else {
        recent
            .iter()
            .map(|r| {
                let best = r.scores.iter().flatten().copied().fold(f64::NAN, f64::max);
                if r.aborted {
                    format!("iteration {}: aborted, incumbent {:.4}", r.iteration, r.incumbent_score)
                } else if best.is_nan() {
                    format!("iteration {}: no new proposals, incumbent {:.4}", r.iteration, r.incumbent_score)
                } else {
                    format!(
                        "iteration {}: best proposal {:.4}, incumbent {:.4}",
                        r.iteration, best, r.incumbent_score
                    )
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let samples_text = samples
        .iter()
        .map(|t| format!("[{}]\n{}", t.perspective, format_numbered_list(&t.spans)))
        .collect::<Vec<_>>()
        .join("\n\n");
    META_PROMPT
        .trim_end()
        .replace("{incumbent}", &incumbent_json)
        .replace("{history}", &history_text)
        .replace("{samples}", &samples_text)
        .replace("{count}", &count.to_string())
}

fn json_array_region(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    (start < end).then(|| &text[start..=end])
}

/// Instruction sets found in a meta completion. Each must be a JSON object
/// naming at least one known step; missing steps are taken from `incumbent`.
pub fn parse_meta_completion(
    completion: &str,
    incumbent: &BTreeMap<String, String>,
) -> Result<Vec<BTreeMap<String, String>>, String> {
    let region = json_array_region(completion).ok_or("no JSON array in meta completion")?;
    let items: Vec<Value> = serde_json::from_str(region).map_err(|e| format!("meta completion: {e}"))?;
    let mut out = Vec::new();
    for item in items {
        let Value::Object(obj) = item else { continue };
        let mut variant = incumbent.clone();
        let mut known = 0;
        for (step, text) in obj {
            if let (Some(slot), Value::String(text)) = (variant.get_mut(&step), text) {
                if !text.trim().is_empty() {
                    *slot = text.trim().to_string();
                    known += 1;
                }
            }
        }
        if known > 0 {
            out.push(variant);
        }
    }
    Ok(out)
}

/// The `k`-th fallback rewrite of `incumbent` (k from 0): a distinct
/// combination of [`FALLBACK_SUFFIXES`] appended to the summary instruction.
pub fn fallback_variant(incumbent: &BTreeMap<String, String>, k: usize) -> BTreeMap<String, String> {
    let combos = (1usize << FALLBACK_SUFFIXES.len()) - 1;
    let mask = k % combos + 1;
    let suffix: Vec<&str> = FALLBACK_SUFFIXES
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, s)| *s)
        .collect();
    let mut variant = incumbent.clone();
    let slot = variant
        .entry(Step::SummaryGeneration.as_str().to_string())
        .or_default();
    *slot = format!("{} {}", slot.trim_end(), suffix.join(" ")).trim().to_string();
    variant
}

/// One meta call, parsed into exactly `count` instruction sets.
pub async fn propose_variants(
    incumbent: &BTreeMap<String, String>,
    history: &[TraceRecord],
    samples: &[&SummaryTask],
    meta: &dyn TextGenerator,
    count: usize,
) -> Result<Proposals, LlmError> {
    let prompt = render_meta_prompt(incumbent, history, samples, count);
    let completion = meta
        .generate("You are an expert prompt engineer.", &prompt)
        .await?;
    let mut warnings = Vec::new();
    let mut variants = match parse_meta_completion(&completion.text, incumbent) {
        Ok(v) => v,
        Err(e) => {
            warnings.push(e);
            Vec::new()
        }
    };
    let parsed = variants.len();
    if parsed > count {
        variants.truncate(count);
    }
    let mut k = 0;
    while variants.len() < count {
        let candidate = fallback_variant(incumbent, k);
        k += 1;
        if !variants.contains(&candidate) || k > (1 << FALLBACK_SUFFIXES.len()) {
            variants.push(candidate);
        }
    }
    if parsed < count {
        warnings.push(format!("meta model gave {parsed} of {count} instruction sets; padded with fallback rewrites"));
    }
    Ok(Proposals {
        variants,
        parsed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchScore {
    pub score: f64,
    /// Tasks whose generation failed and scored 0.
    pub flagged: Vec<String>,
}

/// Mean composite of `instructions` over `tasks`. A task whose generation
/// fails scores 0 and is flagged; exhausted retries are an error.
pub async fn evaluate_instructions(
    base: &PromptProgram,
    instructions: &BTreeMap<String, String>,
    tasks: &[&SummaryTask],
    endpoints: OptimizerEndpoints<'_>,
    registry: &GuideRegistry,
    weights: &CompositeWeights,
) -> Result<BatchScore, OptimizeError> {
    if tasks.is_empty() {
        return Err(OptimizeError::EmptyMinibatch);
    }
    let program = base.with_instructions(instructions)?;
    let per_task = tasks.iter().map(|task| {
        let program = &program;
        async move {
            let reference = task.reference.as_deref().ok_or(OptimizeError::NoTasks)?;
            match run_task(task, program, registry, endpoints.task).await {
                Ok(out) => {
                    let (report, _) = evaluate_pair(&out.summary, reference, endpoints.embedder, None, weights).await?;
                    Ok::<_, OptimizeError>((report.composite, None))
                }
                Err(SummarizeError::Llm(e @ LlmError::Exhausted { .. })) => Err(e.into()),
                Err(e) => {
                    tracing::warn!(task = %task.id(), error = %e, "generation failed; scoring 0");
                    Ok((0.0, Some(task.id())))
                }
            }
        }
    });
    let results = join_all(per_task).await;
    let mut sum = 0.0;
    let mut flagged = Vec::new();
    for r in results {
        let (score, flag) = r?;
        sum += score;
        flagged.extend(flag);
    }
    Ok(BatchScore {
        score: sum / tasks.len() as f64,
        flagged,
    })
}

/// Scores `candidate` on `tasks` and folds the result into its posterior.
pub async fn score_candidate(
    candidate: &mut Candidate,
    minibatch_id: &str,
    base: &PromptProgram,
    tasks: &[&SummaryTask],
    endpoints: OptimizerEndpoints<'_>,
    registry: &GuideRegistry,
    weights: &CompositeWeights,
) -> Result<BatchScore, OptimizeError> {
    let result = evaluate_instructions(base, &candidate.instructions, tasks, endpoints, registry, weights).await?;
    candidate.record(minibatch_id, result.score);
    Ok(result)
}

/// Task indices for `iteration`, sorted; depends only on seed, iteration
/// and the number of tasks.
pub fn sample_minibatch(seed: u64, iteration: u64, n_tasks: usize, size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let mut picked = sample(&mut rng, n_tasks, size.min(n_tasks)).into_vec();
    picked.sort_unstable();
    picked
}

/// Index of the highest posterior; earlier candidates win ties.
fn leader(pool: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in pool.iter().enumerate() {
        if c.posterior_mean > pool[best].posterior_mean {
            best = i;
        }
    }
    best
}

fn top_two(pool: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        pool[b]
            .posterior_mean
            .total_cmp(&pool[a].posterior_mean)
            .then(a.cmp(&b))
    });
    order.truncate(2);
    order
}

pub async fn optimize(
    program: &PromptProgram,
    dev: &Corpus,
    endpoints: OptimizerEndpoints<'_>,
    registry: &GuideRegistry,
    config: &OptimizerConfig,
) -> Result<OptimizationResult, OptimizeError> {
    config.validate()?;
    program.validate()?;
    let tasks = tasks_from_corpus(dev, true);
    if tasks.is_empty() {
        return Err(OptimizeError::NoTasks);
    }
    let all: Vec<&SummaryTask> = tasks.iter().collect();
    let weights = &config.metric_weights;
    let samples: Vec<&SummaryTask> = sample_minibatch(config.rng_seed, DEV_SAMPLE_STREAM, tasks.len(), config.dev_samples)
        .into_iter()
        .map(|i| &tasks[i])
        .collect();

    let initial = evaluate_instructions(program, &program.instruction_slots, &all, endpoints, registry, weights).await?;
    let mut first = Candidate::new(program.instruction_slots.clone(), initial.score, config.prior_weight);
    first.record(FULL_DEV_ID, initial.score);
    let mut pool = vec![first];
    let mut incumbent = 0;
    let mut trace: Vec<TraceRecord> = Vec::new();

    for iteration in 1..=config.iterations {
        let minibatch_idx = sample_minibatch(config.rng_seed, iteration as u64, tasks.len(), config.minibatch_size);
        let minibatch: Vec<&SummaryTask> = minibatch_idx.iter().map(|&i| &tasks[i]).collect();
        let mut record = TraceRecord {
            iteration,
            proposals: Vec::new(),
            minibatch_id: format!("mb-{iteration}"),
            minibatch: minibatch.iter().map(|t| t.id()).collect(),
            scores: Vec::new(),
            incumbent,
            incumbent_score: pool[incumbent].posterior_mean,
            full_dev: None,
            aborted: false,
            warnings: Vec::new(),
        };

        let proposals = match propose_variants(
            &pool[incumbent].instructions,
            &trace,
            &samples,
            endpoints.meta,
            config.variants_per_iteration,
        )
        .await
        {
            Ok(p) => p,
            Err(e) => {
                record.aborted = true;
                record.warnings.push(format!("meta call failed: {e}"));
                trace.push(record);
                continue;
            }
        };
        record.warnings.extend(proposals.warnings);
        record.proposals = proposals.variants;

        let fresh: Vec<usize> = (0..record.proposals.len())
            .filter(|&i| {
                let p = &record.proposals[i];
                !pool.iter().any(|c| &c.instructions == p) && !record.proposals[..i].contains(p)
            })
            .collect();
        let scored = join_all(fresh.iter().map(|&i| {
            evaluate_instructions(program, &record.proposals[i], &minibatch, endpoints, registry, weights)
        }))
        .await;
        let mut outcomes = Vec::with_capacity(scored.len());
        let mut failure = None;
        for r in scored {
            match r {
                Ok(s) => outcomes.push(s),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failure {
            if matches!(e, OptimizeError::Llm(_) | OptimizeError::Metric(MetricError::Llm(_))) {
                record.aborted = true;
                record.warnings.push(format!("scoring failed: {e}"));
                trace.push(record);
                continue;
            }
            return Err(e);
        }

        record.scores = vec![None; record.proposals.len()];
        for (&i, outcome) in fresh.iter().zip(outcomes) {
            let mut c = Candidate::new(record.proposals[i].clone(), pool[0].prior_mean, config.prior_weight);
            c.record(&record.minibatch_id, outcome.score);
            record.scores[i] = Some(outcome.score);
            for t in outcome.flagged {
                record.warnings.push(format!("proposal {i}: generation failed for {t}"));
            }
            pool.push(c);
        }
        incumbent = leader(&pool);

        if config.full_eval_period > 0 && iteration % config.full_eval_period == 0 {
            let leaders = top_two(&pool);
            let mut full = Vec::new();
            for &i in &leaders {
                let s = evaluate_instructions(program, &pool[i].instructions, &all, endpoints, registry, weights).await?;
                full.push((i, s.score));
            }
            for &(i, s) in &full {
                pool[i].record(format!("{FULL_DEV_ID}-{iteration}"), s);
            }
            let mut pinned = full[0];
            for &(i, s) in &full[1..] {
                if s > pinned.1 {
                    pinned = (i, s);
                }
            }
            incumbent = pinned.0;
            record.full_dev = Some(full);
        }

        record.incumbent = incumbent;
        record.incumbent_score = pool[incumbent].posterior_mean;
        trace.push(record);
    }

    let dev_score = evaluate_instructions(program, &pool[incumbent].instructions, &all, endpoints, registry, weights)
        .await?
        .score;
    Ok(OptimizationResult {
        best: pool[incumbent].clone(),
        best_index: incumbent,
        candidates: pool,
        trace,
        initial_dev_score: initial.score,
        dev_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots() -> BTreeMap<String, String> {
        PromptProgram::new(crate::promptkit::Strategy::CotGuide).instruction_slots
    }

    #[test]
    fn posterior_shrinks_toward_prior() {
        let mut c = Candidate::new(slots(), 0.2, 1.0);
        c.record("a", 0.8);
        c.record("b", 0.5);
        assert!((c.posterior_mean - (0.2 + 0.8 + 0.5) / 3.0).abs() < 1e-12);
        assert_eq!(c.eval_count, 2);
    }

    #[test]
    fn meta_parse_fills_missing_steps() {
        let inc = slots();
        let text = "```json\n[{\"summary_generation\": \"Write it.\"}, {\"bogus\": \"x\"}, 3]\n```";
        let parsed = parse_meta_completion(text, &inc).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0]["summary_generation"], "Write it.");
        assert_eq!(parsed[0]["guide_integration"], inc["guide_integration"]);
        assert!(parse_meta_completion("no json here", &inc).is_err());
    }

    #[test]
    fn fallbacks_are_distinct() {
        let inc = slots();
        let all: Vec<_> = (0..31).map(|k| fallback_variant(&inc, k)).collect();
        for (i, a) in all.iter().enumerate() {
            assert_ne!(a, &inc);
            assert!(!all[..i].contains(a));
        }
    }

    #[test]
    fn minibatches_are_reproducible() {
        assert_eq!(sample_minibatch(7, 1, 30, 8), sample_minibatch(7, 1, 30, 8));
        assert_ne!(sample_minibatch(7, 1, 30, 8), sample_minibatch(7, 2, 30, 8));
        assert_eq!(sample_minibatch(7, 1, 3, 8), vec![0, 1, 2]);
    }

    #[test]
    fn config_bounds() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let c = OptimizerConfig {
            variants_per_iteration: 6,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
        let c = OptimizerConfig {
            allow_any_variant_count: true,
            ..c
        };
        assert!(c.validate().is_ok());
        let c = OptimizerConfig {
            prior_weight: 0.0,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
