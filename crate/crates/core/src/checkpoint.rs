//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "LDCKPT\0\0"
//! version  u32
//! config   u64      ModelConfig::hash
//! count    u32      number of records
//! records  name_len u32 | name utf-8 | kind u8 (0 = f64, 1 = u64) | len u64 | payload
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::network::{ModelConfig, Parameters};
use crate::tensor::Tensor;
use crate::trainer::{write_atomic, LatentObjective, OptimizerState, TrainState};

const MAGIC: &[u8; 8] = b"LDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

struct Writer(Vec<u8>);

impl Writer {
    fn record(&mut self, name: &str, payload: Payload) {
        self.0.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.0.extend_from_slice(name.as_bytes());
        match payload {
            Payload::F64(v) => {
                self.0.push(0);
                self.0.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
            }
            Payload::U64(v) => {
                self.0.push(1);
                self.0.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut out: Vec<u64> = seed
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    out.push(rng.get_stream());
    let pos = rng.get_word_pos();
    out.push(pos as u64);
    out.push((pos >> 64) as u64);
    out
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    if w.len() != 7 {
        return Err(Error::Parse(format!("rng record has {} words, expected 7", w.len())));
    }
    let mut seed = [0u8; 32];
    for (i, word) in w[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
    Ok(rng)
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut records = Writer(Vec::new());
    let mut count = 0u32;
    let mut rec = |name: &str, p: Payload| {
        records.record(name, p);
        count += 1;
    };
    let params = &state.params;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        rec(&format!("param/{name}"), Payload::F64(t.data().to_vec()));
    }
    for (i, name) in params.names().iter().enumerate() {
        rec(&format!("adam.m/{name}"), Payload::F64(state.opt.m[i].clone()));
        rec(&format!("adam.v/{name}"), Payload::F64(state.opt.v[i].clone()));
    }
    let o = &state.opt;
    rec("adam.hyper", Payload::F64(vec![o.lr, o.beta1, o.beta2, o.eps]));
    rec(
        "state.counters",
        Payload::U64(vec![
            o.t,
            state.step,
            state.epoch,
            state.seed,
            state.latent as u64,
        ]),
    );
    rec("rng.latent", Payload::U64(rng_words(&state.latent_rng)));
    rec("rng.negative", Payload::U64(rng_words(&state.negative_rng)));
    rec("rng.dropout", Payload::U64(rng_words(&state.dropout_rng)));

    let mut out = Vec::with_capacity(records.0.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.config_hash.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&records.0);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Parse("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hash = r.u64()?;
    if hash != config.hash() {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {hash:016x}, config {:016x}",
            config.hash()
        )));
    }
    let count = r.u32()?;
    let mut recs: HashMap<String, Payload> = HashMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Parse("record name is not utf-8".into()))?;
        let kind = r.u8()?;
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Parse("record too large".into()))?)?;
        let words = raw.chunks(8).map(|c| c.try_into().expect("8 bytes"));
        let payload = match kind {
            0 => Payload::F64(words.map(f64::from_le_bytes).collect()),
            1 => Payload::U64(words.map(u64::from_le_bytes).collect()),
            k => return Err(Error::Parse(format!("unknown record kind {k}"))),
        };
        recs.insert(name, payload);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after last record".into()));
    }

    let mut take_f64 = |name: &str| match recs.remove(name) {
        Some(Payload::F64(v)) => Ok(v),
        _ => Err(Error::Parse(format!("missing f64 record {name}"))),
    };
    let layout = Parameters::layout(config);
    let mut tensors = Vec::with_capacity(layout.len());
    let mut m = Vec::with_capacity(layout.len());
    let mut v = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let data = take_f64(&format!("param/{name}"))?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        m.push(take_f64(&format!("adam.m/{name}"))?);
        v.push(take_f64(&format!("adam.v/{name}"))?);
        tensors.push((name, t));
    }
    let hyper = take_f64("adam.hyper")?;
    let mut take_u64 = |name: &str| match recs.remove(name) {
        Some(Payload::U64(v)) => Ok(v),
        _ => Err(Error::Parse(format!("missing u64 record {name}"))),
    };
    let counters = take_u64("state.counters")?;
    let latent_rng = rng_from_words(&take_u64("rng.latent")?)?;
    let negative_rng = rng_from_words(&take_u64("rng.negative")?)?;
    let dropout_rng = rng_from_words(&take_u64("rng.dropout")?)?;
    if hyper.len() != 4 || counters.len() != 5 {
        return Err(Error::Parse("malformed optimizer records".into()));
    }
    let params = Parameters::from_named(config, tensors)?;
    for (i, t) in params.tensors().iter().enumerate() {
        if m[i].len() != t.len() || v[i].len() != t.len() {
            return Err(Error::Parse(format!("optimizer moments for {} have wrong length", params.names()[i])));
        }
    }
    Ok(TrainState {
        params,
        opt: OptimizerState {
            m,
            v,
            t: counters[0],
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
        },
        step: counters[1],
        epoch: counters[2],
        seed: counters[3],
        latent_rng,
        negative_rng,
        dropout_rng,
        config_hash: hash,
        latent: match counters[4] {
            0 => LatentObjective::Sampled,
            1 => LatentObjective::MinLoss,
            x => return Err(Error::Parse(format!("unknown latent objective code {x}"))),
        },
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state))
}

pub fn load(path: &Path, config: &ModelConfig) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, config)
}
