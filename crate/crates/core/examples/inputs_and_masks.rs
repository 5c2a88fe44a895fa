//! Builds a vocabulary, encodes a dialogue and prints both input layouts
//! with their attention masks.
//!
//!     cargo run --example inputs_and_masks

use latent_dialog::corpus::{DialogueSample, Speaker, Utterance, Vocab};
use latent_dialog::representation::{compose_generation_input, compose_recognition_input, ComposedInput};

fn show(title: &str, vocab: &Vocab, input: &ComposedInput) {
    println!("{title}");
    for i in 0..input.len() {
        let mask: String = input
            .attn_mask
            .row(i)
            .iter()
            .map(|&m| if m != 0.0 { '#' } else { '.' })
            .collect();
        println!(
            "  {:>10} {:<9} role {:<7} turn {:<7} pos {:<7} {mask}",
            vocab.token(input.token_ids[i]),
            format!("{:?}", input.segments[i]),
            format!("{:?}", input.roles[i]),
            format!("{:?}", input.turns[i]),
            format!("{:?}", input.positions[i]),
        );
    }
}

fn main() -> latent_dialog::Result<()> {
    let sample = DialogueSample::new(
        vec![
            Utterance::new(Speaker::B, "any plans?"),
            Utterance::new(Speaker::A, "not yet."),
            Utterance::new(Speaker::B, "want to hike?"),
        ],
        "sure, i love hiking.",
    )
    .with_knowledge(vec!["i love hiking".into()]);
    let vocab = Vocab::build([&sample], 1, 100, 3)?;
    println!("vocabulary of {} tokens, latent ids start at {}", vocab.len(), vocab.latent_id(0));

    let encoded = sample.encode(&vocab);
    let limits = latent_dialog::network::ModelConfig::desk(vocab.len()).limits();
    show("generation pass, z = 1 ('#' = may attend)", &vocab, &compose_generation_input(&encoded, 1, &limits)?);
    show(
        "recognition pass",
        &vocab,
        &compose_recognition_input(&encoded, &encoded.response, &limits)?,
    );
    Ok(())
}
