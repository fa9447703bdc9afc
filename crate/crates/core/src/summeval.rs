//! Summary relevance metrics and the weighted composite objective.
//!
//! Every metric reads text through [`crate::text::normalize`] and the
//! word tokenizer, so scores ignore case and surrounding whitespace.

use std::collections::HashMap;

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::llmio::{Embedder, FactualityScorer, TokenEmbeddings};
use crate::prf::Prf;
use crate::spanid::tokenize_words;
use crate::text::normalize;

/// Lowercased word and punctuation tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize_words(&normalize(text))
        .tokens
        .into_iter()
        .map(|t| t.text)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// (clipped matches, candidate n-gram total, reference n-gram total)
fn clipped_overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let hits = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    (hits, cand.values().sum(), refs.values().sum())
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    let (hits, c, r) = clipped_overlap(&metric_tokens(candidate), &metric_tokens(reference), n);
    Prf::from_counts(hits as f64, c as f64, r as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    Prf::from_counts(lcs_len(&c, &r) as f64, c.len() as f64, r.len() as f64)
}

const BLEU_ORDER: usize = 4;

/// Sentence BLEU-4. Zero match counts at orders 2..4 are replaced by one
/// match over `total + 1` n-grams; a zero unigram match scores 0.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    bleu_tokens(&c, &r)
}

fn bleu_tokens(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_ORDER {
        let (hits, total, _) = clipped_overlap(c, r, n);
        let p = if hits > 0 {
            hits as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    brevity_penalty(c.len(), r.len()) * (log_sum / BLEU_ORDER as f64).exp()
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus BLEU-4: clipped counts pooled over all pairs, no smoothing.
pub fn corpus_bleu<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let mut hits = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in pairs {
        let c = metric_tokens(cand);
        let r = metric_tokens(reference);
        c_len += c.len();
        r_len += r.len();
        for n in 1..=BLEU_ORDER {
            let (h, t, _) = clipped_overlap(&c, &r, n);
            hits[n - 1] += h;
            totals[n - 1] += t;
        }
    }
    if c_len == 0 || hits.contains(&0) {
        return 0.0;
    }
    let log_sum: f64 = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (h as f64 / t as f64).ln())
        .sum();
    brevity_penalty(c_len, r_len) * (log_sum / BLEU_ORDER as f64).exp()
}

/// Aligned (candidate index, reference index) pairs.
fn align_stage(
    c_keys: &[String],
    r_keys: &[String],
    c_used: &mut [bool],
    r_used: &mut [bool],
    pairs: &mut Vec<(usize, usize)>,
) {
    loop {
        // Longest run of free, equal tokens; earliest in the candidate, then the reference.
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..c_keys.len() {
            for j in 0..r_keys.len() {
                let mut len = 0;
                while i + len < c_keys.len()
                    && j + len < r_keys.len()
                    && !c_used[i + len]
                    && !r_used[j + len]
                    && c_keys[i + len] == r_keys[j + len]
                {
                    len += 1;
                }
                if len > 0 && best.is_none_or(|(_, _, l)| len > l) {
                    best = Some((i, j, len));
                }
            }
        }
        let Some((i, j, len)) = best else { return };
        for k in 0..len {
            c_used[i + k] = true;
            r_used[j + k] = true;
            pairs.push((i + k, j + k));
        }
    }
}

fn count_chunks(pairs: &mut [(usize, usize)]) -> usize {
    pairs.sort_unstable();
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in pairs.iter() {
        if i == 0 || j == 0 || prev != Some((i - 1, j - 1)) {
            chunks += 1;
        }
        prev = Some((i, j));
    }
    chunks
}

/// METEOR with exact and Porter-stem matching stages (no synonyms).
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut c_used = vec![false; c.len()];
    let mut r_used = vec![false; r.len()];
    let mut pairs = Vec::new();
    align_stage(&c, &r, &mut c_used, &mut r_used, &mut pairs);
    let c_stems: Vec<String> = c.iter().map(|t| porter_stemmer::stem(t)).collect();
    let r_stems: Vec<String> = r.iter().map(|t| porter_stemmer::stem(t)).collect();
    align_stage(&c_stems, &r_stems, &mut c_used, &mut r_used, &mut pairs);

    let matches = pairs.len();
    if matches == 0 {
        return 0.0;
    }
    let chunks = count_chunks(&mut pairs);
    let p = matches as f64 / c.len() as f64;
    let rc = matches as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rc / (rc + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy max-cosine matching between two sets of token vectors. Negative
/// best similarities count as 0.
pub fn greedy_match(candidate: &TokenEmbeddings, reference: &TokenEmbeddings) -> Result<Prf, MetricError> {
    let (cv, rv) = (&candidate.vectors, &reference.vectors);
    if cv.is_empty() || rv.is_empty() {
        return Err(MetricError::EmptyText);
    }
    if cv[0].len() != rv[0].len() {
        return Err(MetricError::Embedding(format!(
            "candidate dimension {} differs from reference dimension {}",
            cv[0].len(),
            rv[0].len()
        )));
    }
    let sims: Vec<Vec<f64>> = cv.iter().map(|c| rv.iter().map(|r| cosine(c, r)).collect()).collect();
    let best_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max).clamp(0.0, 1.0);
    let precision = sims.iter().map(|row| best_of(&mut row.iter().copied())).sum::<f64>() / cv.len() as f64;
    let recall = (0..rv.len())
        .map(|j| best_of(&mut sims.iter().map(|row| row[j])))
        .sum::<f64>()
        / rv.len() as f64;
    Ok(Prf::new(precision, recall))
}

pub async fn bertscore(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<Prf, MetricError> {
    let c = normalize(candidate);
    let r = normalize(reference);
    if metric_tokens(&c).is_empty() || metric_tokens(&r).is_empty() {
        return Err(MetricError::EmptyText);
    }
    let ce = embedder.embed(&c).await?;
    let re = embedder.embed(&r).await?;
    greedy_match(&ce, &re)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub rouge_l: f64,
    pub bleu: f64,
    pub meteor: f64,
    pub bertscore: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self {
            rouge_l: 0.25,
            bleu: 0.25,
            meteor: 0.25,
            bertscore: 0.25,
        }
    }
}

/// Sub-scores feeding the composite; any may be missing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartialScores {
    pub rouge_l: Option<f64>,
    pub bleu: Option<f64>,
    pub meteor: Option<f64>,
    pub bertscore: Option<f64>,
}

pub fn composite(scores: &PartialScores, weights: &CompositeWeights) -> Result<f64, MetricError> {
    let get = |v: Option<f64>, name| v.ok_or(MetricError::MissingSubScore(name));
    Ok(weights.rouge_l * get(scores.rouge_l, "rougeL")?
        + weights.bleu * get(scores.bleu, "bleu")?
        + weights.meteor * get(scores.meteor, "meteor")?
        + weights.bertscore * get(scores.bertscore, "bertscore")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
    pub bleu: f64,
    pub meteor: f64,
    pub bertscore: Prf,
    pub alignscore: Option<f64>,
    pub summac: Option<f64>,
    pub composite: f64,
}

/// Relevance metrics that need no network access.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub bleu: f64,
    pub meteor: f64,
}

pub fn lexical_scores(candidate: &str, reference: &str) -> LexicalScores {
    LexicalScores {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
        bleu: bleu(candidate, reference),
        meteor: meteor(candidate, reference),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub reports: Vec<MetricReport>,
    /// Per-field arithmetic means; `None` for an empty batch.
    pub means: Option<MetricReport>,
    pub embedding_model: String,
    pub weights: CompositeWeights,
    pub warnings: Vec<String>,
}

const BATCH_CONCURRENCY: usize = 8;

/// Scores one candidate/reference pair.
pub async fn evaluate_pair(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
    factuality: Option<&dyn FactualityScorer>,
    weights: &CompositeWeights,
) -> Result<(MetricReport, Vec<String>), MetricError> {
    let lex = lexical_scores(candidate, reference);
    let mut warnings = Vec::new();
    let bert = match bertscore(candidate, reference, embedder).await {
        Ok(p) => p,
        Err(MetricError::EmptyText) => {
            warnings.push("empty candidate or reference; bertscore set to 0".to_string());
            Prf::default()
        }
        Err(e) => return Err(e),
    };
    let (alignscore, summac) = match factuality {
        None => (None, None),
        Some(scorer) => match scorer.score(candidate, reference).await {
            Ok(s) => (Some(s.alignscore), Some(s.summac)),
            Err(e) => {
                warnings.push(format!("factuality scorer failed: {e}"));
                (None, None)
            }
        },
    };
    let composite = composite(
        &PartialScores {
            rouge_l: Some(lex.rouge_l.f1),
            bleu: Some(lex.bleu),
            meteor: Some(lex.meteor),
            bertscore: Some(bert.f1),
        },
        weights,
    )?;
    let report = MetricReport {
        rouge1: lex.rouge1,
        rouge2: lex.rouge2,
        rouge_l: lex.rouge_l,
        bleu: lex.bleu,
        meteor: lex.meteor,
        bertscore: bert,
        alignscore,
        summac,
        composite,
    };
    Ok((report, warnings))
}

/// Scores every pair, keeping input order, and averages the results.
pub async fn evaluate_batch(
    pairs: &[(String, String)],
    embedder: &dyn Embedder,
    factuality: Option<&dyn FactualityScorer>,
    weights: &CompositeWeights,
) -> Result<BatchReport, MetricError> {
    let results: Vec<_> = stream::iter(pairs.iter().map(|(c, r)| evaluate_pair(c, r, embedder, factuality, weights)))
        .buffered(BATCH_CONCURRENCY)
        .collect()
        .await;
    let mut reports = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (i, result) in results.into_iter().enumerate() {
        let (report, notes) = result?;
        warnings.extend(notes.into_iter().map(|w| format!("pair {i}: {w}")));
        reports.push(report);
    }
    Ok(BatchReport {
        means: mean_report(&reports),
        reports,
        embedding_model: embedder.model_id(),
        weights: *weights,
        warnings,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| mean(present.into_iter()))
}

fn mean_prf(prfs: impl Iterator<Item = Prf> + Clone) -> Prf {
    Prf {
        precision: mean(prfs.clone().map(|p| p.precision)),
        recall: mean(prfs.clone().map(|p| p.recall)),
        f1: mean(prfs.map(|p| p.f1)),
    }
}

pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let it = reports.iter();
    Some(MetricReport {
        rouge1: mean_prf(it.clone().map(|r| r.rouge1)),
        rouge2: mean_prf(it.clone().map(|r| r.rouge2)),
        rouge_l: mean_prf(it.clone().map(|r| r.rouge_l)),
        bleu: mean(it.clone().map(|r| r.bleu)),
        meteor: mean(it.clone().map(|r| r.meteor)),
        bertscore: mean_prf(it.clone().map(|r| r.bertscore)),
        alignscore: mean_opt(it.clone().map(|r| r.alignscore)),
        summac: mean_opt(it.clone().map(|r| r.summac)),
        composite: mean(it.map(|r| r.composite)),
    })
}
