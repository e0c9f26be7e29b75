//! Fits a tiny language model to synthetic sonnets, then completes a
//! three-line prompt and scores the continuation with chrF.

use adaptgpt::data::synth_sonnets;
use adaptgpt::metrics::{chrf, ChrfParams};
use adaptgpt::model::{FfnKind, GptModel, ModelConfig, SamplingConfig};
use adaptgpt::nn::Rng;
use adaptgpt::tasks::{train_loop, SonnetLm, TrainConfig};
use adaptgpt::tokenizer::BpeVocab;
use adaptgpt::Result;
use rand::SeedableRng;

fn main() -> Result<()> {
    let sonnets = synth_sonnets(12, 5);
    let tok = BpeVocab::byte_level();
    let mut cfg = ModelConfig::tiny(tok.vocab_size(), FfnKind::Mlp);
    cfg.d_model = 32;
    cfg.max_seq_len = 128;
    let mut rng = Rng::seed_from_u64(0);
    let sampling = SamplingConfig {
        max_new_tokens: 120,
        temperature: 0.7,
        top_p: 0.9,
        ..SamplingConfig::default()
    };
    let lm = SonnetLm::new(GptModel::new(cfg, &mut rng)?, tok, sampling);
    let tc = TrainConfig {
        learning_rate: 1e-2,
        weight_decay: 0.0,
        epochs: 25,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let report = train_loop(&lm, &sonnets[..10], &sonnets[10..], &tc, None)?;
    println!(
        "{} steps, final loss {:.3}",
        report.steps,
        report.final_loss.unwrap_or(f64::NAN)
    );

    let (prompt, reference) = SonnetLm::split(&sonnets[11]).expect("sonnet has more than three lines");
    let completion = lm.complete(&prompt, 0)?;
    println!("--- prompt\n{prompt}--- completion\n{completion}");
    println!(
        "chrF against the held-out lines: {:.2}",
        chrf(&completion, &reference, &ChrfParams::default())?
    );
    Ok(())
}
