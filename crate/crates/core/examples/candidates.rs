//! Trains on contexts that each have two valid answers, then shows the K
//! candidates per context and which one the coherence head picks.
//!
//!     cargo run --release --example candidates [steps]

use std::path::Path;

use latent_dialog::corpus::{load_corpus, Vocab};
use latent_dialog::inference::{generate_candidates, rank_candidates, DecodeConfig};
use latent_dialog::network::ModelConfig;
use latent_dialog::trainer::{train, Dataset, TrainConfig, TrainState};

fn main() -> latent_dialog::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let samples = load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_multi.jsonl"))?;
    let vocab = Vocab::build(&samples, 1, 8192, 5)?;
    let data = Dataset::new(samples.iter().map(|s| s.encode(&vocab)).collect())?;
    let train_cfg = TrainConfig {
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&ModelConfig::desk(vocab.len()), &train_cfg, 7)?;
    train(&mut state, &data, train_cfg.batch_size, steps, |_, _| Ok(()))?;

    let mut seen = Vec::new();
    for (s, e) in samples.iter().zip(data.samples()) {
        let last = s.context.last().map_or("", |u| u.text.as_str());
        if seen.contains(&last) {
            continue;
        }
        seen.push(last);
        println!("{last}");
        let ranked = rank_candidates(generate_candidates(&state.params, &vocab, e, &DecodeConfig::Greedy)?);
        for (i, c) in ranked.iter().enumerate() {
            let mark = if i == 0 { "*" } else { " " };
            println!("  {mark} z={} coherence={:.3} {}", c.z, c.coherence, c.text);
        }
    }
    Ok(())
}
