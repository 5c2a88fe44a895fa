//! `train | eval | generate | chat` subcommands and the run configuration
//! file they share.
//!
//! A run directory holds `config.toml` (the resolved [`RunConfig`]),
//! `vocab.txt`, `log.jsonl`, periodic `ckpt-<step>.bin` files and
//! `ckpt-final.bin`. Commands that take `--checkpoint` read the config and
//! vocabulary from the checkpoint's directory unless `--config` / `--vocab`
//! point elsewhere.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{load_contexts, load_corpus, DialogueSample, Vocab};
use crate::error::{Error, Result};
use crate::inference::{chat_loop, generate_candidates, rank_candidates, ChatSession, DecodeConfig};
use crate::metrics::{evaluate, evaluate_predictions, load_predictions, Prediction, ZPolicy};
use crate::network::ModelConfig;
use crate::trainer::{train, Dataset, LatentObjective, LogLine, TrainConfig, TrainState};

/// Model shape; the vocabulary size comes from `vocab.txt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Transformer blocks. Default 3.
    pub num_layers: usize,
    /// Hidden size. Default 64.
    pub hidden: usize,
    /// Attention heads. Default 4.
    pub heads: usize,
    /// Number of latent values `K`. Default 5.
    pub latent_k: usize,
    /// Context token budget, knowledge included. Default 64.
    pub max_context_len: usize,
    /// Response token budget, `[BOU]` and `[EOU]` included. Default 16.
    pub max_response_len: usize,
    /// Context utterances kept, knowledge included. Default 16.
    pub max_turns: usize,
    /// Dropout rate. Default 0.
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        ModelSection {
            num_layers: d.num_layers,
            hidden: d.hidden,
            heads: d.heads,
            latent_k: d.latent_k,
            max_context_len: d.max_context_len,
            max_response_len: d.max_response_len,
            max_turns: d.max_turns,
            dropout: d.dropout,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            heads: self.heads,
            latent_k: self.latent_k,
            vocab_size,
            max_context_len: self.max_context_len,
            max_response_len: self.max_response_len,
            max_turns: self.max_turns,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    /// Tokens seen fewer times map to `[UNK]`. Default 1.
    pub min_freq: usize,
    /// Cap on the vocabulary, reserved and latent tokens included. Default 8192.
    pub max_size: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            min_freq: 1,
            max_size: 8192,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Adam learning rate. Default 1e-3.
    pub lr: f64,
    /// Default 0.9.
    pub beta1: f64,
    /// Default 0.999.
    pub beta2: f64,
    /// Default 1e-8.
    pub eps: f64,
    /// Pairs per step. Default 8.
    pub batch_size: usize,
    /// Standard deviation of the initial weights. Default 0.02.
    pub init_std: f64,
    /// `min_loss` (default) or `sampled`.
    pub latent: LatentObjective,
    /// Optimization steps. Default 1000.
    pub steps: u64,
    /// Write `ckpt-<step>.bin` every this many steps; 0 disables. Default 100.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            init_std: t.init_std,
            latent: t.latent,
            steps: 1000,
            checkpoint_every: 100,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            batch_size: self.batch_size,
            init_std: self.init_std,
            latent: self.latent,
        }
    }
}

/// Everything a run needs besides file paths. Every key is optional; unknown
/// keys are rejected.
///
/// ```toml
/// seed = 42
/// [model]
/// num_layers = 3
/// [vocab]
/// min_freq = 1
/// [train]
/// lr = 3e-3
/// steps = 600
/// [decode]
/// strategy = "greedy"          # or "top_k" with k, temperature, seed
/// [eval]
/// policy = "argmax"            # or "sampled" with seed, or "marginalized"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream. Default 42.
    pub seed: u64,
    pub model: ModelSection,
    pub vocab: VocabSection,
    pub train: TrainSection,
    pub decode: DecodeConfig,
    /// Latent choice for perplexity.
    pub eval: ZPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelSection::default(),
            vocab: VocabSection::default(),
            train: TrainSection::default(),
            decode: DecodeConfig::Greedy,
            eval: ZPolicy::Argmax,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "latent-dialog", version, about = "Dialogue generation with a discrete latent variable")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus, or score a predictions file.
    Eval(EvalArgs),
    /// Generate responses for a file of contexts.
    Generate(GenerateArgs),
    /// Talk to a checkpoint on stdin/stdout.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus, one JSON dialogue sample per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

/// Where a checkpoint's config and vocabulary live.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `config.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

/// Overrides for the `[decode]` section.
#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Sample from the top `k` tokens instead of greedy decoding.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 1.0, requires = "top_k")]
    pub temperature: f64,
    #[arg(long, default_value_t = 0, requires = "top_k")]
    pub decode_seed: u64,
}

impl DecodeArgs {
    fn apply(&self, base: DecodeConfig) -> DecodeConfig {
        match self.top_k {
            Some(k) => DecodeConfig::TopK {
                k,
                temperature: self.temperature,
                seed: self.decode_seed,
            },
            None => base,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Reference corpus to generate for and score.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub corpus: Option<PathBuf>,
    /// Score an existing predictions file instead of generating.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Also write the generated predictions here.
    #[arg(long, requires = "corpus")]
    pub write_predictions: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// One JSON sample per line; `response` is optional and becomes the reference.
    #[arg(long)]
    pub contexts: PathBuf,
    /// Print every candidate, ranked by coherence.
    #[arg(long)]
    pub all_candidates: bool,
    /// Emit JSON lines: predictions, or candidate rows with --all-candidates.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Show every candidate before the reply.
    #[arg(long)]
    pub debug: bool,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdin = io::stdin();
    let stdout = io::stdout();
    match run(cli.command, stdin.lock(), stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command with explicit input and output streams.
pub fn run<R: io::BufRead, W: Write>(command: Command, input: R, output: W) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a, output),
        Command::Eval(a) => cmd_eval(&a, output),
        Command::Generate(a) => cmd_generate(&a, output),
        Command::Chat(a) => cmd_chat(&a, input, output),
    }
}

pub fn cmd_train<W: Write>(args: &TrainArgs, mut output: W) -> Result<()> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.steps {
        rc.train.steps = s;
    }
    if let Some(s) = args.seed {
        rc.seed = s;
    }
    if let Some(lr) = args.lr {
        rc.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(c) = args.checkpoint_every {
        rc.train.checkpoint_every = c;
    }
    if rc.train.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let samples = load_corpus(&args.corpus)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let vocab_path = args.out.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        let v = Vocab::load(&vocab_path)?;
        if v.latent_k() != rc.model.latent_k {
            return Err(Error::Config(format!(
                "{} was built for K = {}, config asks for K = {}",
                vocab_path.display(),
                v.latent_k(),
                rc.model.latent_k
            )));
        }
        v
    } else {
        let v = Vocab::build(&samples, rc.vocab.min_freq, rc.vocab.max_size, rc.model.latent_k)?;
        v.save(&vocab_path)?;
        v
    };
    let model = rc.model.to_config(vocab.len());
    model.validate()?;
    let config_path = args.out.join("config.toml");
    fs::write(&config_path, rc.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let data = Dataset::new(samples.iter().map(|s| s.encode(&vocab)).collect())?;
    let mut state = TrainState::new(&model, &rc.train.to_config(), rc.seed)?;
    let log_path = args.out.join("log.jsonl");
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let every = rc.train.checkpoint_every;
    let out_dir = args.out.clone();
    let result = train(&mut state, &data, rc.train.batch_size, rc.train.steps, |st, losses| {
        let line = serde_json::to_string(&LogLine::new(st.step, losses)).expect("log line serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && st.step % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            st.save(&out_dir.join(format!("ckpt-{}.bin", st.step)))?;
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);
    match result {
        Ok(_) => {
            let path = args.out.join("ckpt-final.bin");
            state.save(&path)?;
            writeln!(output, "trained {} steps; wrote {}", state.step, path.display())?;
            Ok(())
        }
        Err(e @ Error::Divergence { .. }) => {
            // The failed step left the state untouched.
            state.save(&args.out.join("ckpt-last-good.bin"))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

struct Loaded {
    run: RunConfig,
    vocab: Vocab,
    state: TrainState,
}

fn load_model(args: &ModelArgs) -> Result<Loaded> {
    let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    let config_path = args.config.clone().unwrap_or_else(|| dir.join("config.toml"));
    let vocab_path = args.vocab.clone().unwrap_or_else(|| dir.join("vocab.txt"));
    let run = RunConfig::load(&config_path)?;
    let vocab = Vocab::load(&vocab_path)?;
    let model = run.model.to_config(vocab.len());
    model.validate()?;
    let state = TrainState::load(&args.checkpoint, &model)?;
    Ok(Loaded { run, vocab, state })
}

pub fn cmd_eval<W: Write>(args: &EvalArgs, mut output: W) -> Result<()> {
    let m = load_model(&args.model)?;
    let decode = args.decode.apply(m.run.decode);
    let report = match (&args.corpus, &args.predictions) {
        (_, Some(p)) => evaluate_predictions(&m.state.params, &m.vocab, &load_predictions(p)?, m.run.eval)?,
        (Some(c), None) => {
            let samples = load_corpus(c)?;
            let (report, predictions) = evaluate(&m.state.params, &m.vocab, &samples, &decode, m.run.eval)?;
            if let Some(path) = &args.write_predictions {
                write_predictions(path, &predictions)?;
            }
            report
        }
        (None, None) => return Err(Error::Config("eval needs --corpus or --predictions".into())),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(output, "{json}")?;
    Ok(())
}

fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct CandidateRow<'a> {
    z: usize,
    text: &'a str,
    coherence: f64,
}

pub fn cmd_generate<W: Write>(args: &GenerateArgs, mut output: W) -> Result<()> {
    let m = load_model(&args.model)?;
    let decode = args.decode.apply(m.run.decode);
    let contexts: Vec<DialogueSample> = load_contexts(&args.contexts)?;
    for s in &contexts {
        let ranked = rank_candidates(generate_candidates(&m.state.params, &m.vocab, &s.encode(&m.vocab), &decode)?);
        let best = ranked.first().ok_or_else(|| Error::Selection("no candidates".into()))?;
        match (args.all_candidates, args.json) {
            (false, false) => writeln!(output, "{}", best.text)?,
            (false, true) => {
                let p = Prediction {
                    context: s.context.clone(),
                    knowledge: s.knowledge.clone(),
                    reference: s.response.clone(),
                    hypothesis: best.text.clone(),
                };
                writeln!(output, "{}", serde_json::to_string(&p).expect("prediction serializes"))?;
            }
            (true, json) => {
                for c in &ranked {
                    if json {
                        let row = CandidateRow {
                            z: c.z,
                            text: &c.text,
                            coherence: c.coherence,
                        };
                        writeln!(output, "{}", serde_json::to_string(&row).expect("row serializes"))?;
                    } else {
                        writeln!(output, "{}\t{:.6}\t{}", c.z, c.coherence, c.text)?;
                    }
                }
                if !json && contexts.len() > 1 {
                    writeln!(output)?;
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_chat<R: io::BufRead, W: Write>(args: &ChatArgs, input: R, output: W) -> Result<()> {
    let m = load_model(&args.model)?;
    let mut session = ChatSession::new(&m.state.params, &m.vocab, args.decode.apply(m.run.decode));
    session.debug = args.debug;
    chat_loop(&mut session, input, output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!(d.model.to_config(100), ModelConfig::desk(100));
        assert_eq!(d.train.to_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[model]\nhiden = 8", "[train]\nlr = 1e-3\nsteps = 2\nstep = 3", "[bogus]"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let rc = RunConfig {
            seed: 9,
            train: TrainSection {
                latent: LatentObjective::Sampled,
                ..TrainSection::default()
            },
            decode: DecodeConfig::TopK {
                k: 3,
                temperature: 0.7,
                seed: 5,
            },
            eval: ZPolicy::Sampled { seed: 2 },
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&rc.to_toml()).unwrap(), rc);
    }

    #[test]
    fn sections_parse() {
        let rc = RunConfig::parse(
            "seed = 3\n[model]\nhidden = 32\n[train]\nlr = 0.003\n[decode]\nstrategy = \"top_k\"\nk = 4\ntemperature = 1.0\nseed = 1\n[eval]\npolicy = \"marginalized\"\n",
        )
        .unwrap();
        assert_eq!(rc.seed, 3);
        assert_eq!(rc.model.hidden, 32);
        assert_eq!(rc.model.heads, 4);
        assert_eq!(rc.train.lr, 0.003);
        assert_eq!(rc.eval, ZPolicy::Marginalized);
        assert!(matches!(rc.decode, DecodeConfig::TopK { k: 4, .. }));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run_from(["latent-dialog", "frobnicate"]), 1);
        assert_eq!(run_from(["latent-dialog", "train", "--out", "x"]), 1);
    }
}
