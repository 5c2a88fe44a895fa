//! Automatic evaluation: BLEU, Distinct-n, knowledge precision/recall/F1 and
//! perplexity.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::hash::Hash;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, DialogueSample, EncodedSample, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::inference::{generate_candidates, select_response, DecodeConfig};
use crate::network::{posterior, token_nll, Parameters};
use crate::tensor::log_sum_exp;
use crate::trainer::{rng_for, sample_index, stream};

const STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Replaces a zero modified precision so the geometric mean stays finite.
pub const BLEU_EPSILON: f64 = 1e-9;

/// The built-in list of 50 lowercase English stopwords.
pub fn default_stopwords() -> HashSet<String> {
    STOPWORDS
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Cumulative sentence BLEU-n with clipped counts and brevity penalty.
pub fn bleu_n<T: Eq + Hash>(hypothesis: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Metric("BLEU order must be at least 1".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for i in 1..=n {
        let hyp = ngrams(hypothesis, i);
        let refs = ngrams(reference, i);
        let total: usize = hyp.values().sum();
        let clipped: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if total == 0 || clipped == 0 {
            BLEU_EPSILON
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = hypothesis.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Distinct n-grams across all responses divided by the total word count.
pub fn distinct_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Metric("distinct order must be at least 1".into()));
    }
    let words: usize = responses.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::Metric("distinct-n of an empty corpus".into()));
    }
    let unique: HashSet<&[T]> = responses
        .iter()
        .filter(|r| r.len() >= n)
        .flat_map(|r| r.windows(n))
        .collect();
    Ok(unique.len() as f64 / words as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn content_words<'a>(tokens: &'a [String], stopwords: &HashSet<String>) -> HashSet<&'a str> {
    tokens
        .iter()
        .map(String::as_str)
        .filter(|t| t.chars().any(char::is_alphanumeric) && !stopwords.contains(*t))
        .collect()
}

/// Overlap of non-stopword unigram sets. Tokens are expected lowercase, as
/// produced by [`tokenize`].
pub fn knowledge_prf(response: &[String], knowledge: &[String], stopwords: &HashSet<String>) -> Prf {
    let resp = content_words(response, stopwords);
    let know = content_words(knowledge, stopwords);
    if know.is_empty() || resp.is_empty() {
        return Prf::default();
    }
    let common = resp.intersection(&know).count() as f64;
    let recall = common / know.len() as f64;
    let precision = common / resp.len() as f64;
    // Harmonic mean of P and R, written over integer counts.
    let f1 = 2.0 * common / (resp.len() + know.len()) as f64;
    Prf {
        recall,
        precision,
        f1,
    }
}

/// Which latent value scores a reference response.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZPolicy {
    /// Argmax of the recognition posterior.
    #[default]
    Argmax,
    /// One draw from the recognition posterior.
    Sampled { seed: u64 },
    /// Likelihood averaged over all `K` values under a uniform prior.
    Marginalized,
}

pub fn perplexity_from_nll(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Metric("perplexity over zero tokens".into()));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// `exp(Σ token NLL / Σ tokens)` over the responses (words and `[EOU]`).
pub fn perplexity(params: &Parameters, samples: &[EncodedSample], policy: ZPolicy) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("perplexity of an empty corpus".into()));
    }
    let k = params.config().latent_k;
    let mut rng = match policy {
        ZPolicy::Sampled { seed } => Some(rng_for(seed, stream::LATENT)),
        _ => None,
    };
    let mut total = 0.0;
    let mut tokens = 0;
    for s in samples {
        let nll = match policy {
            ZPolicy::Argmax => {
                let q = posterior(params, s)?;
                token_nll(params, s, argmax(&q))?.iter().sum::<f64>()
            }
            ZPolicy::Sampled { .. } => {
                let q = posterior(params, s)?;
                let u: f64 = rng.as_mut().expect("sampled policy has an rng").random();
                token_nll(params, s, sample_index(&q, u))?.iter().sum::<f64>()
            }
            ZPolicy::Marginalized => {
                let log_liks = (0..k)
                    .map(|z| Ok(-token_nll(params, s, z)?.iter().sum::<f64>()))
                    .collect::<Result<Vec<f64>>>()?;
                (k as f64).ln() - log_sum_exp(&log_liks)
            }
        };
        total += nll;
        tokens += s.response.len() + 1;
    }
    perplexity_from_nll(total, tokens)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub context: Vec<Utterance>,
    #[serde(default)]
    pub knowledge: Vec<String>,
    #[serde(default)]
    pub reference: String,
    pub hypothesis: String,
}

impl Prediction {
    /// The sample this prediction was generated for, with the reference as
    /// its response.
    pub fn sample(&self) -> DialogueSample {
        DialogueSample::new(self.context.clone(), self.reference.clone()).with_knowledge(self.knowledge.clone())
    }
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub knowledge_recall: f64,
    pub knowledge_precision: f64,
    pub knowledge_f1: f64,
    pub perplexity: f64,
    pub samples: usize,
}

/// Text metrics over predictions: mean sentence BLEU, corpus Distinct-n, and
/// knowledge scores averaged over the predictions that carry knowledge.
/// `perplexity` is filled in by the caller.
pub fn score_predictions(predictions: &[Prediction], stopwords: &HashSet<String>) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Metric("no predictions to score".into()));
    }
    let mut bleu1 = 0.0;
    let mut bleu2 = 0.0;
    let mut know = Prf::default();
    let mut with_knowledge = 0;
    let mut hyps = Vec::with_capacity(predictions.len());
    for p in predictions {
        let hyp = tokenize(&p.hypothesis);
        let reference = tokenize(&p.reference);
        bleu1 += bleu_n(&hyp, &reference, 1)?;
        bleu2 += bleu_n(&hyp, &reference, 2)?;
        if !p.knowledge.is_empty() {
            let k: Vec<String> = p.knowledge.iter().flat_map(|k| tokenize(k)).collect();
            let s = knowledge_prf(&hyp, &k, stopwords);
            know.recall += s.recall;
            know.precision += s.precision;
            know.f1 += s.f1;
            with_knowledge += 1;
        }
        hyps.push(hyp);
    }
    let n = predictions.len() as f64;
    let kn = with_knowledge.max(1) as f64;
    // A corpus of empty hypotheses has no distinct n-grams to speak of.
    let distinct = |order| match distinct_n(&hyps, order) {
        Err(Error::Metric(_)) => Ok(0.0),
        other => other,
    };
    Ok(EvalReport {
        bleu1: bleu1 / n,
        bleu2: bleu2 / n,
        distinct1: distinct(1)?,
        distinct2: distinct(2)?,
        knowledge_recall: know.recall / kn,
        knowledge_precision: know.precision / kn,
        knowledge_f1: know.f1 / kn,
        perplexity: f64::NAN,
        samples: predictions.len(),
    })
}

/// Generates, selects and records a hypothesis for every sample.
pub fn predict(
    params: &Parameters,
    vocab: &Vocab,
    samples: &[DialogueSample],
    decode: &DecodeConfig,
) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let candidates = generate_candidates(params, vocab, &s.encode(vocab), decode)?;
            let best = select_response(&candidates)?;
            Ok(Prediction {
                context: s.context.clone(),
                knowledge: s.knowledge.clone(),
                reference: s.response.clone(),
                hypothesis: best.text.clone(),
            })
        })
        .collect()
}

/// Full report for predictions whose references form the perplexity corpus.
pub fn evaluate_predictions(
    params: &Parameters,
    vocab: &Vocab,
    predictions: &[Prediction],
    policy: ZPolicy,
) -> Result<EvalReport> {
    let mut report = score_predictions(predictions, &default_stopwords())?;
    let encoded: Vec<EncodedSample> = predictions.iter().map(|p| p.sample().encode(vocab)).collect();
    report.perplexity = perplexity(params, &encoded, policy)?;
    Ok(report)
}

/// Generate-then-score over a reference corpus.
pub fn evaluate(
    params: &Parameters,
    vocab: &Vocab,
    samples: &[DialogueSample],
    decode: &DecodeConfig,
    policy: ZPolicy,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let predictions = predict(params, vocab, samples, decode)?;
    let report = evaluate_predictions(params, vocab, &predictions, policy)?;
    Ok((report, predictions))
}
