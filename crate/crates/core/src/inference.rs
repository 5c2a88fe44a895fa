//! Candidate generation (one per latent value), coherence scoring and
//! selection, plus a line-oriented chat loop.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{latent_token_id, EncodedSample, Speaker, Vocab, BOU, EOU, MASK, PAD};
use crate::error::{Error, Result};
use crate::network::{coherence_logit, forward, lm_logits_at, Parameters};
use crate::representation::{compose, Prefix};
use crate::tensor::{log_sum_exp, sigmoid, Tape};
use crate::trainer::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub z: usize,
    /// Generated ids, ending in `[EOU]` unless `max_response_len - 1` words
    /// were produced first.
    pub tokens: Vec<u32>,
    pub text: String,
    /// `p(l_r = 1 | c, r)` from the selection head.
    pub coherence: f64,
    /// Sum of the log-probabilities of the emitted tokens.
    pub log_likelihood: f64,
}

impl Candidate {
    /// The response words, without the closing `[EOU]`.
    pub fn words(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOU) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeConfig {
    #[default]
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

impl DecodeConfig {
    fn validate(&self) -> Result<()> {
        match *self {
            DecodeConfig::Greedy => Ok(()),
            DecodeConfig::TopK { k, temperature, .. } => {
                if k == 0 {
                    return Err(Error::Config("top-k decoding needs k >= 1".into()));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
                }
                Ok(())
            }
        }
    }
}

fn banned(id: usize, k: usize) -> bool {
    let id = id as u32;
    id == PAD || id == BOU || id == MASK || (id >= latent_token_id(0) && id < latent_token_id(k))
}

/// Next-token logits after `prefix` for latent value `z`.
fn next_logits(params: &Parameters, sample: &EncodedSample, z: usize, prefix: &[u32]) -> Result<Vec<f64>> {
    let cfg = params.config();
    let input = compose(Prefix::Latent(z), sample, prefix, false, &cfg.limits())?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let out = forward(&mut tape, &b, cfg, &input, None, false)?;
    let l = lm_logits_at(&mut tape, &b, out.hidden, &[input.len() - 1])?;
    Ok(tape.value(l).data().to_vec())
}

fn pick(logits: &[f64], k_latent: usize, decode: &DecodeConfig, rng: &mut ChaCha8Rng) -> usize {
    let allowed = (0..logits.len()).filter(|&i| !banned(i, k_latent));
    match *decode {
        DecodeConfig::Greedy => allowed
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if logits[b] >= logits[i] => Some(b),
                _ => Some(i),
            })
            .expect("vocabulary has unbanned tokens"),
        DecodeConfig::TopK { k, temperature, .. } => {
            let mut ranked: Vec<usize> = allowed.collect();
            ranked.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            ranked.truncate(k);
            let scaled: Vec<f64> = ranked.iter().map(|&i| logits[i] / temperature).collect();
            let probs = crate::tensor::softmax(&scaled);
            let u: f64 = rng.random();
            ranked[crate::trainer::sample_index(&probs, u)]
        }
    }
}

fn decode_one(
    params: &Parameters,
    vocab: &Vocab,
    sample: &EncodedSample,
    z: usize,
    decode: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate> {
    let cfg = params.config();
    // Words stop one short of the limit so the closed response still fits.
    let max_words = cfg.max_response_len - 1;
    let mut tokens = Vec::new();
    let mut log_likelihood = 0.0;
    while tokens.len() < max_words {
        let logits = next_logits(params, sample, z, &tokens)?;
        let id = pick(&logits, cfg.latent_k, decode, rng);
        log_likelihood += logits[id] - log_sum_exp(&logits);
        tokens.push(id as u32);
        if id == EOU as usize {
            break;
        }
    }
    let mut c = Candidate {
        z,
        text: vocab.decode(&tokens),
        tokens,
        coherence: 0.0,
        log_likelihood,
    };
    c.coherence = score_coherence(params, sample, c.words())?;
    Ok(c)
}

/// One candidate per latent value, in `z` order.
pub fn generate_candidates(
    params: &Parameters,
    vocab: &Vocab,
    context: &EncodedSample,
    decode: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    decode.validate()?;
    let seed = match *decode {
        DecodeConfig::TopK { seed, .. } => seed,
        DecodeConfig::Greedy => 0,
    };
    let mut rng = rng_for(seed, stream::DECODE);
    let sample = context.with_response(Vec::new());
    (0..params.config().latent_k)
        .map(|z| decode_one(params, vocab, &sample, z, decode, &mut rng))
        .collect()
}

/// `σ(W3 · h[M] + b3)` for `response` (words only) after the context.
pub fn score_coherence(params: &Parameters, context: &EncodedSample, response: &[u32]) -> Result<f64> {
    Ok(sigmoid(coherence_logit(params, context, response)?))
}

/// Highest-scoring candidate; ties go to the lower `z`.
pub fn select_by<F>(candidates: &[Candidate], score: F) -> Result<&Candidate>
where
    F: Fn(&Candidate) -> f64,
{
    let mut best: Option<(&Candidate, f64)> = None;
    for c in candidates {
        let s = score(c);
        if s.is_nan() {
            return Err(Error::Selection(format!("candidate z={} scored NaN", c.z)));
        }
        match best {
            Some((b, bs)) if bs > s || (bs == s && b.z < c.z) => {}
            _ => best = Some((c, s)),
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Selection("no candidates to select from".into()))
}

/// Argmax of the coherence probability.
pub fn select_response(candidates: &[Candidate]) -> Result<&Candidate> {
    select_by(candidates, |c| c.coherence)
}

/// Candidates ordered by descending coherence, ties by ascending `z`.
pub fn rank_candidates(mut candidates: Vec<Candidate>) -> Vec<Candidate> {
    candidates.sort_by(|a, b| b.coherence.total_cmp(&a.coherence).then(a.z.cmp(&b.z)));
    candidates
}

/// Generate-then-rank with an external scoring function in place of the
/// selection head, e.g. a reference-based metric for oracle analysis.
pub fn select_with_metric<F>(
    params: &Parameters,
    vocab: &Vocab,
    context: &EncodedSample,
    decode: &DecodeConfig,
    metric: F,
) -> Result<Candidate>
where
    F: Fn(&Candidate) -> f64,
{
    let candidates = generate_candidates(params, vocab, context, decode)?;
    select_by(&candidates, metric).cloned()
}

/// One reply and the candidates it was chosen from.
#[derive(Clone, Debug)]
pub struct Turn {
    pub reply: Candidate,
    pub candidates: Vec<Candidate>,
}

/// Rolling conversation state. The user speaks as `B`, the system as `A`.
pub struct ChatSession<'a> {
    params: &'a Parameters,
    vocab: &'a Vocab,
    decode: DecodeConfig,
    history: Vec<(Speaker, Vec<u32>)>,
    pub debug: bool,
}

impl<'a> ChatSession<'a> {
    pub fn new(params: &'a Parameters, vocab: &'a Vocab, decode: DecodeConfig) -> Self {
        ChatSession {
            params,
            vocab,
            decode,
            history: Vec::new(),
            debug: false,
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Context tokens currently kept, `[EOU]`s included.
    pub fn context_len(&self) -> usize {
        self.history.iter().map(|(_, u)| u.len() + 1).sum()
    }

    pub fn history(&self) -> &[(Speaker, Vec<u32>)] {
        &self.history
    }

    fn push(&mut self, speaker: Speaker, mut ids: Vec<u32>) {
        let cfg = self.params.config();
        ids.truncate(cfg.max_context_len - 1);
        self.history.push((speaker, ids));
        while self.history.len() > cfg.max_turns || self.context_len() > cfg.max_context_len {
            self.history.remove(0);
        }
    }

    pub fn respond(&mut self, user: &str) -> Result<Turn> {
        self.push(Speaker::B, self.vocab.encode_utterance(user, false));
        let context = EncodedSample {
            knowledge: Vec::new(),
            context: self.history.clone(),
            response: Vec::new(),
        };
        let candidates = generate_candidates(self.params, self.vocab, &context, &self.decode)?;
        let reply = select_response(&candidates)?.clone();
        self.push(Speaker::A, reply.words().to_vec());
        Ok(Turn { reply, candidates })
    }
}

/// Reads one utterance per line and writes one reply per line. `/quit` ends
/// the session, `/reset` clears the context, `/debug` toggles printing every
/// candidate with its coherence before the reply.
pub fn chat_loop<R: BufRead, W: Write>(session: &mut ChatSession<'_>, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                session.reset();
                continue;
            }
            "/debug" => {
                session.debug = !session.debug;
                continue;
            }
            _ => {}
        }
        let turn = session.respond(text)?;
        if session.debug {
            for c in &turn.candidates {
                writeln!(output, "  [z={} coherence={:.4}] {}", c.z, c.coherence, c.text)?;
            }
        }
        writeln!(output, "{}", turn.reply.text)?;
        output.flush()?;
    }
    Ok(())
}
