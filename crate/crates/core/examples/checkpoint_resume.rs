//! Ten steps, a checkpoint, ten more: the result matches twenty straight
//! steps bit for bit.
//!
//!     cargo run --release --example checkpoint_resume

use std::path::Path;

use latent_dialog::corpus::{load_corpus, Vocab};
use latent_dialog::network::ModelConfig;
use latent_dialog::trainer::{train, Dataset, TrainConfig, TrainState};

fn main() -> latent_dialog::Result<()> {
    let samples = load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.jsonl"))?;
    let vocab = Vocab::build(&samples, 1, 8192, 5)?;
    let config = ModelConfig::desk(vocab.len());
    let data = Dataset::new(samples.iter().map(|s| s.encode(&vocab)).collect())?;
    let tc = TrainConfig::default();

    let mut straight = TrainState::new(&config, &tc, 3)?;
    train(&mut straight, &data, 4, 20, |_, _| Ok(()))?;

    let dir = std::env::temp_dir().join(format!("latent-dialog-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ckpt-10.bin");
    let mut first = TrainState::new(&config, &tc, 3)?;
    train(&mut first, &data, 4, 10, |_, _| Ok(()))?;
    first.save(&path)?;
    println!("checkpoint size {} bytes", std::fs::metadata(&path)?.len());
    let mut resumed = TrainState::load(&path, &config)?;
    train(&mut resumed, &data, 4, 10, |_, _| Ok(()))?;
    std::fs::remove_dir_all(&dir)?;

    println!("resumed == straight: {}", resumed == straight);
    Ok(())
}
