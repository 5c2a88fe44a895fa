//! A scripted chat with a briefly trained model, in debug mode so every
//! candidate is shown.
//!
//!     cargo run --release --example chat

use std::path::Path;

use latent_dialog::corpus::{load_corpus, Vocab};
use latent_dialog::inference::{chat_loop, ChatSession, DecodeConfig};
use latent_dialog::network::ModelConfig;
use latent_dialog::trainer::{train, Dataset, TrainConfig, TrainState};

fn main() -> latent_dialog::Result<()> {
    let samples = load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.jsonl"))?;
    let vocab = Vocab::build(&samples, 1, 8192, 3)?;
    let config = ModelConfig {
        num_layers: 2,
        hidden: 32,
        latent_k: 3,
        ..ModelConfig::desk(vocab.len())
    };
    let data = Dataset::new(samples.iter().map(|s| s.encode(&vocab)).collect())?;
    let train_cfg = TrainConfig {
        lr: 5e-3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config, &train_cfg, 1)?;
    train(&mut state, &data, 8, 300, |_, _| Ok(()))?;

    let mut session = ChatSession::new(&state.params, &vocab, DecodeConfig::Greedy);
    session.debug = true;
    let script = "hi there, how are you today?\n/reset\nwhat do you do for a living?\nand on weekends?\n";
    for line in script.lines() {
        println!("> {line}");
    }
    chat_loop(&mut session, script.as_bytes(), std::io::stdout())
}
