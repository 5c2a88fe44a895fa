//! Checks the tape's gradients against central differences, first for a
//! single op and then for the whole model objective.
//!
//!     cargo run --release --example gradient_check

use latent_dialog::corpus::{EncodedSample, Speaker};
use latent_dialog::network::{pair_objective, Bound, ModelConfig, Parameters};
use latent_dialog::tensor::{gradient_check, GradCheck, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_dialog::Result<()> {
    let x = Tensor::from_rows(&[[0.3, -1.2, 2.0], [1.0, 0.5, -0.7]])?;
    let err = gradient_check(
        |tape, v| {
            let y = tape.gelu(v[0]);
            Ok(tape.sum(y))
        },
        &[x],
        &GradCheck::default(),
    )?;
    println!("gelu: max relative error {err:.2e}");

    let cfg = ModelConfig {
        num_layers: 1,
        hidden: 8,
        heads: 2,
        latent_k: 3,
        vocab_size: 20,
        max_context_len: 8,
        max_response_len: 4,
        max_turns: 2,
        dropout: 0.0,
    };
    let sample = EncodedSample {
        knowledge: vec![],
        context: vec![(Speaker::B, vec![9, 10, 11])],
        response: vec![13, 14],
    };
    let negative = vec![16, 17, 18];
    let params = Parameters::init(&cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(0))?;
    let err = gradient_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            Ok(pair_objective(tape, &bound, &cfg, &sample, &negative, None, |_| 2)?.total)
        },
        params.tensors(),
        &GradCheck::default(),
    )?;
    println!("nll + bow + rs over {} parameters: max relative error {err:.2e}", params.count());
    Ok(())
}
