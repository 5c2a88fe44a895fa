//! Pre-training loop: recognition pass, choice of a latent value, generation
//! pass, then one Adam step on `nll + bow + rs` (plus the posterior term
//! under [`LatentObjective::MinLoss`]).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{EncodedSample, ResponsePool, TrainingPair};
use crate::error::{Error, Result};
use crate::network::{generation_losses, pair_objective, ModelConfig, Parameters, PINNED_EMPTY_ROW};
use crate::tensor::Tape;

/// Named random sub-streams derived from the run seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const LATENT: u64 = 2;
    pub const NEGATIVE: u64 = 3;
    pub const DECODE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const DATA: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
    pub latent: LatentObjective,
}

/// How the latent value for a training pair is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentObjective {
    /// `z ~ p(z|c,r)`, used as a fixed index. The posterior head gets no
    /// gradient from the generation losses.
    Sampled,
    /// `z = argmin_z (nll_z + bow_z)` over all `K` values; the posterior is
    /// trained towards that `z` with an extra cross-entropy term.
    #[default]
    MinLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            init_std: 0.02,
            latent: LatentObjective::MinLoss,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub bow: f64,
    pub rs: f64,
    /// `nll + bow + rs`.
    pub total: f64,
    /// Posterior cross-entropy towards the chosen latent (zero when sampled).
    #[serde(default)]
    pub recognition: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        [self.nll, self.bow, self.rs, self.total, self.recognition]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// One bias-corrected Adam update, in place. `t` is the step count after
/// incrementing (so `t >= 1`).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &Parameters, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    fn apply(&mut self, params: &mut Parameters, grads: &[Vec<f64>]) {
        self.t += 1;
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            adam_update(
                t.data_mut(),
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            );
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub opt: OptimizerState,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
    pub latent_rng: ChaCha8Rng,
    pub negative_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub config_hash: u64,
    pub latent: LatentObjective,
}

impl TrainState {
    /// Fresh state with parameters drawn from the `INIT` stream of `seed`.
    pub fn new(config: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(config, train.init_std, &mut rng_for(seed, stream::INIT))?;
        Ok(Self::from_params(params, train, seed))
    }

    pub fn from_params(params: Parameters, train: &TrainConfig, seed: u64) -> Self {
        let opt = OptimizerState::new(&params, train);
        let config_hash = params.config().hash();
        TrainState {
            params,
            opt,
            epoch: 0,
            step: 0,
            seed,
            latent_rng: rng_for(seed, stream::LATENT),
            negative_rng: rng_for(seed, stream::NEGATIVE),
            dropout_rng: rng_for(seed, stream::DROPOUT),
            config_hash,
            latent: train.latent,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        checkpoint::load(path, config)
    }
}

/// Inverse-CDF draw of an index from `probs` given `u ∈ [0, 1)`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Encoded training corpus plus the response pool for negatives.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<EncodedSample>,
    pool: ResponsePool,
}

impl Dataset {
    pub fn new(samples: Vec<EncodedSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Corpus("training set is empty".into()));
        }
        let pool = ResponsePool::from_samples(&samples);
        Ok(Dataset { samples, pool })
    }

    pub fn samples(&self) -> &[EncodedSample] {
        &self.samples
    }

    pub fn pool(&self) -> &ResponsePool {
        &self.pool
    }

    /// Sample indices for a global step: consecutive slices of per-epoch
    /// shuffles, a pure function of `(seed, step)` so a resumed run sees the
    /// same batches.
    pub fn batch_indices(&self, seed: u64, step: u64, batch_size: usize) -> Vec<usize> {
        let n = self.samples.len();
        let start = step as usize * batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (start..start + batch_size)
            .map(|p| {
                let epoch = p / n;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut rng = rng_for(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), stream::DATA);
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("filled above").1[p % n]
            })
            .collect()
    }

    /// Pairs for the state's next step, with fresh negatives.
    pub fn next_batch(&self, state: &mut TrainState, batch_size: usize) -> Result<Vec<TrainingPair>> {
        self.batch_indices(state.seed, state.step, batch_size)
            .into_iter()
            .map(|i| {
                let sample = self.samples[i].clone();
                let negative_response = self.pool.sample_negative(&sample.response, &mut state.negative_rng)?;
                Ok(TrainingPair {
                    sample,
                    negative_response,
                })
            })
            .collect()
    }
}

/// One optimization step over a batch with gradient accumulation. Losses are
/// batch means. On a non-finite loss or gradient the state is left as it was
/// and a divergence error is returned.
pub fn train_step(state: &mut TrainState, batch: &[TrainingPair]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Corpus("empty batch".into()));
    }
    let saved_rngs = (state.latent_rng.clone(), state.dropout_rng.clone());
    let result = accumulate(state, batch);
    let (grads, losses) = match result {
        Ok(v) => v,
        Err(e) => {
            (state.latent_rng, state.dropout_rng) = saved_rngs;
            return Err(e);
        }
    };
    let grads_finite = grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
    if !losses.is_finite() || !grads_finite {
        (state.latent_rng, state.dropout_rng) = saved_rngs;
        return Err(Error::Divergence {
            step: state.step,
            breakdown: losses,
        });
    }
    state.opt.apply(&mut state.params, &grads);
    state.step += 1;
    Ok(losses)
}

fn accumulate(state: &mut TrainState, batch: &[TrainingPair]) -> Result<(Vec<Vec<f64>>, LossBreakdown)> {
    let params = &state.params;
    let config = params.config();
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut sum = LossBreakdown::default();
    for pair in batch {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let latent = state.latent;
        let z = match latent {
            LatentObjective::Sampled => None,
            LatentObjective::MinLoss => Some(min_loss_latent(params, &pair.sample)?),
        };
        let latent_rng = &mut state.latent_rng;
        let dropout: Option<&mut dyn RngCore> = if config.dropout > 0.0 {
            Some(&mut state.dropout_rng)
        } else {
            None
        };
        let obj = pair_objective(
            &mut tape,
            &bound,
            config,
            &pair.sample,
            &pair.negative_response,
            dropout,
            |probs| z.unwrap_or_else(|| sample_index(probs, latent_rng.random())),
        )?;
        let root = match z {
            Some(z) => {
                let rec = tape.cross_entropy(obj.posterior_logits, &[z])?;
                sum.recognition += tape.value(rec).item();
                tape.add(obj.total, rec)?
            }
            None => obj.total,
        };
        sum.nll += tape.value(obj.nll).item();
        sum.bow += tape.value(obj.bow).item();
        sum.rs += tape.value(obj.rs).item();
        tape.backward(root)?;
        for (g, &v) in grads.iter_mut().zip(bound.vars()) {
            if let Some(pg) = tape.grad(v) {
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += scale * b;
                }
            }
        }
    }
    for idx in PINNED_EMPTY_ROW {
        let d = params.tensors()[idx].cols();
        grads[idx][..d].fill(0.0);
    }
    let nll = sum.nll * scale;
    let bow = sum.bow * scale;
    let rs = sum.rs * scale;
    let recognition = sum.recognition * scale;
    Ok((
        grads,
        LossBreakdown {
            nll,
            bow,
            rs,
            total: nll + bow + rs,
            recognition,
        },
    ))
}

/// Latent value whose generation losses are lowest for the pair; ties go
/// to the lower index.
pub fn min_loss_latent(params: &Parameters, sample: &EncodedSample) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for z in 0..params.config().latent_k {
        let (nll, bow) = generation_losses(params, sample, z)?;
        if nll + bow < best.1 {
            best = (z, nll + bow);
        }
    }
    Ok(best.0)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub nll: f64,
    pub bow: f64,
    pub rs: f64,
    pub total: f64,
    pub recognition: f64,
}

impl LogLine {
    pub fn new(step: u64, l: &LossBreakdown) -> Self {
        LogLine {
            step,
            nll: l.nll,
            bow: l.bow,
            rs: l.rs,
            total: l.total,
            recognition: l.recognition,
        }
    }
}

/// Runs `steps` optimization steps, calling `on_step` after each.
pub fn train<F>(
    state: &mut TrainState,
    data: &Dataset,
    batch_size: usize,
    steps: u64,
    mut on_step: F,
) -> Result<Vec<LossBreakdown>>
where
    F: FnMut(&TrainState, &LossBreakdown) -> Result<()>,
{
    let mut history = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let saved_neg = state.negative_rng.clone();
        let batch = data.next_batch(state, batch_size)?;
        let losses = match train_step(state, &batch) {
            Ok(l) => l,
            Err(e) => {
                state.negative_rng = saved_neg;
                return Err(e);
            }
        };
        state.epoch = state.step * batch_size as u64 / data.samples().len() as u64;
        on_step(state, &losses)?;
        history.push(losses);
    }
    Ok(history)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
