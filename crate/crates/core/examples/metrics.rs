//! BLEU, Distinct and knowledge scores on a few hand-made predictions.
//!
//!     cargo run --example metrics

use latent_dialog::corpus::{tokenize, Speaker, Utterance};
use latent_dialog::metrics::{bleu_n, default_stopwords, distinct_n, knowledge_prf, score_predictions, Prediction};

fn main() -> latent_dialog::Result<()> {
    let hyp = tokenize("i like to cook pasta");
    let reference = tokenize("i love to cook italian pasta");
    println!("BLEU-1 {:.4}  BLEU-2 {:.4}", bleu_n(&hyp, &reference, 1)?, bleu_n(&hyp, &reference, 2)?);

    let responses = [tokenize("i am fine"), tokenize("i am fine thanks"), tokenize("great")];
    println!("Distinct-1 {:.4}  Distinct-2 {:.4}", distinct_n(&responses, 1)?, distinct_n(&responses, 2)?);

    let k = knowledge_prf(&hyp, &tokenize("my favorite food is pasta and i cook"), &default_stopwords());
    println!("knowledge R {:.4} P {:.4} F1 {:.4}", k.recall, k.precision, k.f1);

    let predictions = vec![
        Prediction {
            context: vec![Utterance::new(Speaker::B, "what do you like to eat?")],
            knowledge: vec!["my favorite food is pasta".into()],
            reference: "pasta, for sure.".into(),
            hypothesis: "pasta, always.".into(),
        },
        Prediction {
            context: vec![Utterance::new(Speaker::B, "how are you?")],
            knowledge: vec![],
            reference: "good, thanks!".into(),
            hypothesis: "good, thanks!".into(),
        },
    ];
    let report = score_predictions(&predictions, &default_stopwords())?;
    println!("corpus report (perplexity needs a model): {report:?}");
    Ok(())
}
