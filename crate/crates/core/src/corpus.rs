//! Tokenization, vocabulary, dialogue datasets and negative sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOU: u32 = 2;
pub const EOU: u32 = 3;
pub const MASK: u32 = 4;
const LATENT_BASE: u32 = 5;
const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[BOU]", "[EOU]", "[MASK]"];
const NEGATIVE_TRIES: usize = 100;

/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn latent_token_id(z: usize) -> u32 {
    LATENT_BASE + z as u32
}

fn latent_name(k: usize) -> String {
    format!("[Z_{k}]")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    latent_k: usize,
}

impl Vocab {
    /// Builds a vocabulary from every knowledge, context and response string.
    ///
    /// Corpus tokens with frequency `>= min_freq` are ordered by descending
    /// frequency then lexicographically, and the whole table (reserved and
    /// latent tokens included) is capped at `max_size` entries.
    pub fn build<'a, I>(samples: I, min_freq: usize, max_size: usize, latent_k: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DialogueSample>,
    {
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut seen = 0usize;
        for s in samples {
            seen += 1;
            for text in s.texts() {
                for tok in tokenize(text) {
                    *freq.entry(tok).or_default() += 1;
                }
            }
        }
        if seen == 0 {
            return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..latent_k).map(latent_name));
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Parse(format!("vocab line {i} must be {r}")));
            }
        }
        let latent_k = tokens[RESERVED.len()..]
            .iter()
            .enumerate()
            .take_while(|(k, t)| **t == latent_name(*k))
            .count();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            ids,
            latent_k,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn latent_k(&self) -> usize {
        self.latent_k
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", String::as_str)
    }

    pub fn latent_id(&self, z: usize) -> u32 {
        latent_token_id(z)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < LATENT_BASE + self.latent_k as u32
    }

    /// Maps `text` to ids, with unknown words as `[UNK]`.
    pub fn encode_utterance(&self, text: &str, append_eou: bool) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text)
            .iter()
            .map(|t| self.id(t).filter(|&i| !self.is_special(i)).unwrap_or(UNK))
            .collect();
        if append_eou {
            ids.push(EOU);
        }
        ids
    }

    /// Joins word tokens with single spaces, stopping at the first `[EOU]`
    /// and dropping other structural tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOU)
            .filter(|&&i| i == UNK || !self.is_special(i))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance {
            speaker,
            text: text.into(),
        }
    }
}

/// One dialogue unit. The response is spoken by `A`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSample {
    pub context: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge: Vec<String>,
    #[serde(default)]
    pub response: String,
}

impl DialogueSample {
    pub fn new(context: Vec<Utterance>, response: impl Into<String>) -> Self {
        DialogueSample {
            context,
            knowledge: Vec::new(),
            response: response.into(),
        }
    }

    pub fn with_knowledge(mut self, knowledge: Vec<String>) -> Self {
        self.knowledge = knowledge;
        self
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        self.knowledge
            .iter()
            .map(String::as_str)
            .chain(self.context.iter().map(|u| u.text.as_str()))
            .chain(std::iter::once(self.response.as_str()))
    }

    pub fn encode(&self, vocab: &Vocab) -> EncodedSample {
        EncodedSample {
            knowledge: self
                .knowledge
                .iter()
                .map(|k| vocab.encode_utterance(k, false))
                .collect(),
            context: self
                .context
                .iter()
                .map(|u| (u.speaker, vocab.encode_utterance(&u.text, false)))
                .collect(),
            response: vocab.encode_utterance(&self.response, false),
        }
    }
}

/// A sample mapped to vocabulary ids; utterances carry no `[EOU]` yet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub knowledge: Vec<Vec<u32>>,
    pub context: Vec<(Speaker, Vec<u32>)>,
    pub response: Vec<u32>,
}

impl EncodedSample {
    pub fn with_response(&self, response: Vec<u32>) -> Self {
        EncodedSample {
            response,
            ..self.clone()
        }
    }
}

/// A positive sample together with a negative response (label 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub sample: EncodedSample,
    pub negative_response: Vec<u32>,
}

fn parse_lines(path: &Path) -> Result<Vec<DialogueSample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: DialogueSample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(s);
    }
    Ok(out)
}

/// Loads a line-delimited JSON training corpus; every sample needs a
/// non-empty context and response.
pub fn load_corpus(path: &Path) -> Result<Vec<DialogueSample>> {
    let samples = parse_lines(path)?;
    if samples.is_empty() {
        return Err(Error::Corpus(format!("{} holds no samples", path.display())));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.context.is_empty() || s.response.trim().is_empty() {
            return Err(Error::Corpus(format!(
                "{}: sample {} needs a non-empty context and response",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(samples)
}

/// Loads contexts for generation; `response` may be absent.
pub fn load_contexts(path: &Path) -> Result<Vec<DialogueSample>> {
    parse_lines(path)
}

/// Every training response, indexed for negative sampling.
#[derive(Clone, Debug)]
pub struct ResponsePool {
    responses: Vec<Vec<u32>>,
    distinct: usize,
}

impl ResponsePool {
    pub fn new(responses: Vec<Vec<u32>>) -> Self {
        let distinct = responses.iter().collect::<HashSet<_>>().len();
        ResponsePool {
            responses,
            distinct,
        }
    }

    pub fn from_samples(samples: &[EncodedSample]) -> Self {
        Self::new(samples.iter().map(|s| s.response.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Draws a response uniformly from the pool, redrawing on a
    /// token-identical match with `exclude`.
    pub fn sample_negative<R: Rng + ?Sized>(&self, exclude: &[u32], rng: &mut R) -> Result<Vec<u32>> {
        if self.distinct < 2 {
            return Err(Error::Sampling(format!(
                "need at least 2 distinct responses, pool has {}",
                self.distinct
            )));
        }
        for _ in 0..NEGATIVE_TRIES {
            let r = &self.responses[rng.random_range(0..self.responses.len())];
            if r.as_slice() != exclude {
                return Ok(r.clone());
            }
        }
        Err(Error::Sampling(format!(
            "no distinct response after {NEGATIVE_TRIES} draws"
        )))
    }
}
