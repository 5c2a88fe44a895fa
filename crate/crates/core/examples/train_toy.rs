//! Overfits the bundled 16-dialogue corpus and reports how much of it the
//! model reproduces.
//!
//!     cargo run --release --example train_toy [steps]

use std::path::Path;

use latent_dialog::corpus::{load_corpus, Vocab};
use latent_dialog::inference::{generate_candidates, select_response, DecodeConfig};
use latent_dialog::metrics::{perplexity, ZPolicy};
use latent_dialog::network::ModelConfig;
use latent_dialog::trainer::{train, Dataset, TrainConfig, TrainState};

fn main() -> latent_dialog::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let samples = load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.jsonl"))?;
    let vocab = Vocab::build(&samples, 1, 8192, 5)?;
    let config = ModelConfig::desk(vocab.len());
    let data = Dataset::new(samples.iter().map(|s| s.encode(&vocab)).collect())?;
    let train_cfg = TrainConfig {
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config, &train_cfg, 7)?;
    println!("{} parameters, {} samples", state.params.count(), data.samples().len());
    train(&mut state, &data, train_cfg.batch_size, steps, |st, l| {
        if st.step % 50 == 0 {
            println!(
                "step {:>4}  total {:8.3}  nll {:7.3}  bow {:7.3}  rs {:6.3}",
                st.step, l.total, l.nll, l.bow, l.rs
            );
        }
        Ok(())
    })?;

    let mut exact = 0;
    for (s, e) in samples.iter().zip(data.samples()) {
        let cands = generate_candidates(&state.params, &vocab, e, &DecodeConfig::Greedy)?;
        let best = select_response(&cands)?;
        exact += usize::from(best.words() == e.response.as_slice());
        println!("{:<40} -> {}", s.context.last().map_or("", |u| u.text.as_str()), best.text);
    }
    let ppl = perplexity(&state.params, data.samples(), ZPolicy::Argmax)?;
    println!("exact {exact}/{}, perplexity {ppl:.4}", samples.len());
    Ok(())
}
