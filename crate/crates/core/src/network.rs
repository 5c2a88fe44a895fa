//! The shared transformer and its heads.
//!
//! One stack of post-norm transformer blocks serves both passes; only the
//! attention mask and the first token differ. On top of the final hidden
//! states sit four heads:
//!
//! * latent posterior `p(z | c, r) = softmax(W1 · h[M] + b1)`,
//! * language model over response positions (projection tied to the token
//!   embedding table),
//! * bag-of-words `f = softmax(W2 · h_z + b2)`,
//! * response selection `p(l = 1 | c, r) = sigmoid(W3 · h[M] + b3)`.

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{EncodedSample, EOU};
use crate::error::{Error, Result};
use crate::representation::{
    compose_generation_input, compose_recognition_input, ComposedInput, Limits, Prefix, ROLE_ROWS,
};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub latent_k: usize,
    pub vocab_size: usize,
    pub max_context_len: usize,
    pub max_response_len: usize,
    pub max_turns: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 3,
            hidden: 64,
            heads: 4,
            latent_k: 5,
            vocab_size,
            max_context_len: 64,
            max_response_len: 16,
            max_turns: 16,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.latent_k < 1 {
            return fail("latent_k must be at least 1".into());
        }
        if self.max_context_len == 0 || self.max_response_len == 0 || self.max_turns == 0 {
            return fail("sequence limits must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 5 + self.latent_k {
            return fail(format!(
                "vocab_size {} cannot hold reserved and latent tokens",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn limits(&self) -> Limits {
        Limits {
            max_context_len: self.max_context_len,
            max_response_len: self.max_response_len,
            max_turns: self.max_turns,
            latent_k: self.latent_k,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Stable fingerprint stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let canon = format!(
            "layers={};hidden={};heads={};k={};vocab={};ctx={};resp={};turns={};dropout={:016x}",
            self.num_layers,
            self.hidden,
            self.heads,
            self.latent_k,
            self.vocab_size,
            self.max_context_len,
            self.max_response_len,
            self.max_turns,
            self.dropout.to_bits()
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

pub(crate) const TOKEN: usize = 0;
pub(crate) const LATENT: usize = 1;
pub(crate) const ROLE: usize = 2;
pub(crate) const TURN: usize = 3;
pub(crate) const POSITION: usize = 4;
const LM_BIAS: usize = 5;
const POSTERIOR_W: usize = 6;
const POSTERIOR_B: usize = 7;
const BOW_W: usize = 8;
const BOW_B: usize = 9;
const RS_W: usize = 10;
const RS_B: usize = 11;
const BLOCK_BASE: usize = 12;
const PER_BLOCK: usize = 15;

// Offsets inside a block. Keys carry no bias: softmax cancels any
// per-query constant, so its gradient is identically zero.
const Q_W: usize = 0;
const Q_B: usize = 1;
const K_W: usize = 2;
const V_W: usize = 3;
const V_B: usize = 4;
const O_W: usize = 5;
const O_B: usize = 6;
const LN1_G: usize = 7;
const LN1_B: usize = 8;
const FF1_W: usize = 9;
const FF1_B: usize = 10;
const FF2_W: usize = 11;
const FF2_B: usize = 12;
const LN2_G: usize = 13;
const LN2_B: usize = 14;
const BLOCK_NAMES: [&str; PER_BLOCK] = [
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "attn_norm.gain",
    "attn_norm.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ffn_norm.gain",
    "ffn_norm.bias",
];

/// Tables whose row 0 is the pinned all-zero "empty" embedding.
pub(crate) const PINNED_EMPTY_ROW: [usize; 3] = [ROLE, TURN, POSITION];

fn block(b: usize, offset: usize) -> usize {
    BLOCK_BASE + b * PER_BLOCK + offset
}

/// Every learnable tensor, stored flat in a fixed order with stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    /// Names and shapes of every tensor, in storage order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.hidden;
        let v = config.vocab_size;
        let limits = config.limits();
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.token".into(), vec![v, d]),
            ("embed.latent".into(), vec![config.latent_k, d]),
            ("embed.role".into(), vec![ROLE_ROWS, d]),
            ("embed.turn".into(), vec![limits.turn_rows(), d]),
            ("embed.position".into(), vec![limits.position_rows(), d]),
            ("lm.bias".into(), vec![v]),
            ("posterior.weight".into(), vec![config.latent_k, d]),
            ("posterior.bias".into(), vec![config.latent_k]),
            ("bow.weight".into(), vec![v, d]),
            ("bow.bias".into(), vec![v]),
            ("selection.weight".into(), vec![1, d]),
            ("selection.bias".into(), vec![1]),
        ];
        for b in 0..config.num_layers {
            let shapes: [Vec<usize>; PER_BLOCK] = [
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![4 * d, d],
                vec![4 * d],
                vec![d, 4 * d],
                vec![d],
                vec![d],
                vec![d],
            ];
            for (name, shape) in BLOCK_NAMES.iter().zip(shapes) {
                out.push((format!("block{b}.{name}"), shape));
            }
        }
        out
    }

    /// Weight matrices and embeddings ~ N(0, std²), biases zero, norm gains
    /// one, empty rows zero.
    pub fn init(config: &ModelConfig, std: f64, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in Self::layout(config) {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".gain") {
                t.data_mut().fill(1.0);
            } else if shape.len() == 2 {
                t.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
            }
            names.push(name);
            tensors.push(t);
        }
        let mut p = Parameters {
            config: config.clone(),
            names,
            tensors,
        };
        p.zero_empty_rows();
        Ok(p)
    }

    pub(crate) fn zero_empty_rows(&mut self) {
        for idx in PINNED_EMPTY_ROW {
            self.tensors[idx].row_mut(0).fill(0.0);
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(config);
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Parameters {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Parameters recorded on a tape, in the same order as [`Parameters`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Final hidden states of one pass, plus language-model logits for the
/// response positions when requested.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// `S × D`; row 0 is the latent or mask position.
    pub hidden: Var,
    /// `1 × D` state at index 0 (`h_z` or `h[M]`).
    pub head: Var,
    /// Rows for `[BOU]` through the last response word, each predicting the
    /// next token.
    pub lm_logits: Option<Var>,
}

/// Runs the transformer stack over `input`. Dropout is applied only when an
/// RNG is supplied and the configured rate is positive.
pub fn forward(
    tape: &mut Tape,
    params: &Bound,
    config: &ModelConfig,
    input: &ComposedInput,
    mut dropout: Option<&mut dyn RngCore>,
    with_lm: bool,
) -> Result<ForwardOutputs> {
    let s = input.len();
    let ids: Vec<usize> = input.token_ids.iter().map(|&t| t as usize).collect();
    let first = match input.prefix {
        Prefix::Latent(z) => tape.rows(params.at(LATENT), &[z])?,
        Prefix::Mask => tape.rows(params.at(TOKEN), &ids[..1])?,
    };
    let rest = tape.rows(params.at(TOKEN), &ids[1..])?;
    let tokens = tape.concat_rows(&[first, rest])?;
    let roles = tape.rows(params.at(ROLE), &input.role_rows())?;
    let turns = tape.rows(params.at(TURN), &input.turn_rows())?;
    let positions = tape.rows(params.at(POSITION), &input.position_rows())?;
    let mut x = tape.add(tokens, roles)?;
    x = tape.add(x, turns)?;
    x = tape.add(x, positions)?;
    if let Some(rng) = dropout.as_deref_mut() {
        x = tape.dropout(x, config.dropout, rng);
    }

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for b in 0..config.num_layers {
        let p = |o| params.at(block(b, o));
        let q = tape.matmul_bt(x, p(Q_W))?;
        let q = tape.add_bias(q, p(Q_B))?;
        let k = tape.matmul_bt(x, p(K_W))?;
        let v = tape.matmul_bt(x, p(V_W))?;
        let v = tape.add_bias(v, p(V_B))?;
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, &input.attn_mask)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let mut o = tape.matmul_bt(cat, p(O_W))?;
        o = tape.add_bias(o, p(O_B))?;
        if let Some(rng) = dropout.as_deref_mut() {
            o = tape.dropout(o, config.dropout, rng);
        }
        let res = tape.add(x, o)?;
        x = tape.layer_norm(res, p(LN1_G), p(LN1_B), LAYER_NORM_EPS)?;

        let f = tape.matmul_bt(x, p(FF1_W))?;
        let f = tape.add_bias(f, p(FF1_B))?;
        let f = tape.gelu(f);
        let mut f = tape.matmul_bt(f, p(FF2_W))?;
        f = tape.add_bias(f, p(FF2_B))?;
        if let Some(rng) = dropout.as_deref_mut() {
            f = tape.dropout(f, config.dropout, rng);
        }
        let res = tape.add(x, f)?;
        x = tape.layer_norm(res, p(LN2_G), p(LN2_B), LAYER_NORM_EPS)?;
    }

    let head = tape.rows(x, &[0])?;
    let lm_logits = if with_lm {
        let last = if input.token_ids.last() == Some(&EOU) && s > input.response_start + 1 {
            s - 1
        } else {
            s
        };
        let rows: Vec<usize> = (input.response_start..last).collect();
        Some(lm_logits_at(tape, params, x, &rows)?)
    } else {
        None
    };
    Ok(ForwardOutputs {
        hidden: x,
        head,
        lm_logits,
    })
}

/// Language-model logits (tied projection) for the given hidden rows.
pub fn lm_logits_at(tape: &mut Tape, params: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
    let h = tape.rows(hidden, rows)?;
    let logits = tape.matmul_bt(h, params.at(TOKEN))?;
    tape.add_bias(logits, params.at(LM_BIAS))
}

pub fn posterior_logits(tape: &mut Tape, params: &Bound, h_mask: Var) -> Result<Var> {
    let l = tape.matmul_bt(h_mask, params.at(POSTERIOR_W))?;
    tape.add_bias(l, params.at(POSTERIOR_B))
}

pub fn bow_logits(tape: &mut Tape, params: &Bound, h_latent: Var) -> Result<Var> {
    let l = tape.matmul_bt(h_latent, params.at(BOW_W))?;
    tape.add_bias(l, params.at(BOW_B))
}

pub fn selection_logit(tape: &mut Tape, params: &Bound, h_mask: Var) -> Result<Var> {
    let l = tape.matmul_bt(h_mask, params.at(RS_W))?;
    tape.add_bias(l, params.at(RS_B))
}

/// Teacher-forced targets: the response words followed by `[EOU]`.
pub fn nll_targets(response: &[u32]) -> Vec<usize> {
    response
        .iter()
        .map(|&t| t as usize)
        .chain(std::iter::once(EOU as usize))
        .collect()
}

/// `−log σ(pos) − log(1 − σ(neg))`
pub fn selection_loss(tape: &mut Tape, pos_logit: Var, neg_logit: Var) -> Result<Var> {
    let flipped = tape.scale(pos_logit, -1.0);
    let a = tape.softplus(flipped);
    let b = tape.softplus(neg_logit);
    let s = tape.add(a, b)?;
    Ok(tape.sum(s))
}

/// Loss terms of one training pair recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub nll: Var,
    pub bow: Var,
    pub rs: Var,
    pub total: Var,
    /// Posterior logits from the positive recognition pass (`1 × K`).
    pub posterior_logits: Var,
}

/// Recognition pass for `(c, r)`: returns `h[M]`.
pub fn recognition_pass(
    tape: &mut Tape,
    params: &Bound,
    config: &ModelConfig,
    sample: &EncodedSample,
    response: &[u32],
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let input = compose_recognition_input(sample, response, &config.limits())?;
    Ok(forward(tape, params, config, &input, dropout, false)?.head)
}

/// Generation pass for `(z, c, r)`.
pub fn generation_pass(
    tape: &mut Tape,
    params: &Bound,
    config: &ModelConfig,
    sample: &EncodedSample,
    z: usize,
    dropout: Option<&mut dyn RngCore>,
) -> Result<ForwardOutputs> {
    if sample.response.is_empty() {
        return Err(Error::Length("empty response".into()));
    }
    let input = compose_generation_input(sample, z, &config.limits())?;
    forward(tape, params, config, &input, dropout, true)
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Records the three recognition/generation passes for a pair and the
/// integrated objective `nll + bow + rs`. `choose_z` sees the posterior
/// probabilities of the positive pair and returns the latent value to use.
pub fn pair_objective<F>(
    tape: &mut Tape,
    params: &Bound,
    config: &ModelConfig,
    sample: &EncodedSample,
    negative: &[u32],
    mut dropout: Option<&mut dyn RngCore>,
    choose_z: F,
) -> Result<Objective>
where
    F: FnOnce(&[f64]) -> usize,
{
    let h_pos = recognition_pass(tape, params, config, sample, &sample.response, reborrow(&mut dropout))?;
    let post = posterior_logits(tape, params, h_pos)?;
    let probs = crate::tensor::softmax(tape.value(post).data());
    let pos_logit = selection_logit(tape, params, h_pos)?;
    let h_neg = recognition_pass(tape, params, config, sample, negative, reborrow(&mut dropout))?;
    let neg_logit = selection_logit(tape, params, h_neg)?;
    let rs = selection_loss(tape, pos_logit, neg_logit)?;

    let z = choose_z(&probs);
    let out = generation_pass(tape, params, config, sample, z, dropout)?;
    let lm = out.lm_logits.expect("generation pass computes lm logits");
    let nll = tape.cross_entropy(lm, &nll_targets(&sample.response))?;
    let bow_l = bow_logits(tape, params, out.head)?;
    let words: Vec<usize> = sample.response.iter().map(|&t| t as usize).collect();
    let bow = tape.cross_entropy(bow_l, &words)?;

    let partial = tape.add(nll, bow)?;
    let total = tape.add(partial, rs)?;
    Ok(Objective {
        nll,
        bow,
        rs,
        total,
        posterior_logits: post,
    })
}

/// `p(z | c, r)` for a sample and its own response.
pub fn posterior(params: &Parameters, sample: &EncodedSample) -> Result<Vec<f64>> {
    posterior_for(params, sample, &sample.response)
}

pub fn posterior_for(params: &Parameters, sample: &EncodedSample, response: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let h = recognition_pass(&mut tape, &b, params.config(), sample, response, None)?;
    let l = posterior_logits(&mut tape, &b, h)?;
    Ok(crate::tensor::softmax(tape.value(l).data()))
}

/// `−Σ_t log p(r_t | c, z, r_<t)` over the response words and `[EOU]`.
pub fn nll_loss(params: &Parameters, sample: &EncodedSample, z: usize) -> Result<f64> {
    Ok(token_nll(params, sample, z)?.iter().sum())
}

/// Per-step negative log-likelihoods of the teacher-forced response.
pub fn token_nll(params: &Parameters, sample: &EncodedSample, z: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let out = generation_pass(&mut tape, &b, params.config(), sample, z, None)?;
    let logits = tape.value(out.lm_logits.expect("lm logits requested"));
    let targets = nll_targets(&sample.response);
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| crate::tensor::log_sum_exp(logits.row(i)) - logits.row(i)[t])
        .collect())
}

/// Order-free `−Σ_t log f[r_t]` with `f` predicted from `h_z` alone.
pub fn bow_loss(params: &Parameters, sample: &EncodedSample, z: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let out = generation_pass(&mut tape, &b, params.config(), sample, z, None)?;
    let l = bow_logits(&mut tape, &b, out.head)?;
    let words: Vec<usize> = sample.response.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(l, &words)?;
    Ok(tape.value(loss).item())
}

/// `(nll, bow)` for latent value `z` from a single generation pass.
pub fn generation_losses(params: &Parameters, sample: &EncodedSample, z: usize) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let out = generation_pass(&mut tape, &b, params.config(), sample, z, None)?;
    let lm = out.lm_logits.expect("lm logits requested");
    let nll = tape.cross_entropy(lm, &nll_targets(&sample.response))?;
    let l = bow_logits(&mut tape, &b, out.head)?;
    let words: Vec<usize> = sample.response.iter().map(|&t| t as usize).collect();
    let bow = tape.cross_entropy(l, &words)?;
    Ok((tape.value(nll).item(), tape.value(bow).item()))
}

/// Binary cross-entropy of the selection head on a positive and a negative
/// response.
pub fn rs_loss(params: &Parameters, sample: &EncodedSample, negative: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let cfg = params.config();
    let hp = recognition_pass(&mut tape, &b, cfg, sample, &sample.response, None)?;
    let lp = selection_logit(&mut tape, &b, hp)?;
    let hn = recognition_pass(&mut tape, &b, cfg, sample, negative, None)?;
    let ln = selection_logit(&mut tape, &b, hn)?;
    let loss = selection_loss(&mut tape, lp, ln)?;
    Ok(tape.value(loss).item())
}

/// Selection-head logit `W3 · h[M] + b3` for a candidate response.
pub fn coherence_logit(params: &Parameters, sample: &EncodedSample, response: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let h = recognition_pass(&mut tape, &b, params.config(), sample, response, None)?;
    let l = selection_logit(&mut tape, &b, h)?;
    Ok(tape.value(l).item())
}

pub fn total_loss(nll: f64, bow: f64, rs: f64) -> f64 {
    nll + bow + rs
}
