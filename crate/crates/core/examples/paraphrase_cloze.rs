//! Paraphrase detection as a cloze question: the language model scores the
//! verbalizer tokens for "yes" and "no" after a fixed prompt.

use adaptgpt::data::synth_paraphrase;
use adaptgpt::model::{FfnKind, GptModel, ModelConfig};
use adaptgpt::nn::Rng;
use adaptgpt::tasks::{cloze_prompt, train_loop, ParaphraseCloze, Task, TrainConfig, Verbalizer};
use adaptgpt::tokenizer::BpeVocab;
use adaptgpt::Result;
use rand::SeedableRng;

fn main() -> Result<()> {
    let tok = BpeVocab::byte_level();
    let v = Verbalizer::new(&tok)?;
    println!("verbalizer prefix {:?} yes {} no {}", v.prefix, v.yes, v.no);
    println!(
        "{}",
        cloze_prompt("How do I learn Rust?", "What is the best way to learn Rust?")
    );

    let train = synth_paraphrase(32, 1);
    let dev = synth_paraphrase(16, 2);
    let mut cfg = ModelConfig::tiny(tok.vocab_size(), FfnKind::Mlp);
    cfg.max_seq_len = 192;
    let mut rng = Rng::seed_from_u64(0);
    let task = ParaphraseCloze::new(GptModel::new(cfg, &mut rng)?, tok)?;
    let tc = TrainConfig {
        learning_rate: 3e-3,
        weight_decay: 0.0,
        epochs: 20,
        ..TrainConfig::default()
    };
    let report = train_loop(&task, &train, &[], &tc, None)?;
    println!(
        "{} steps, train accuracy {:.3}, dev accuracy {:.3}",
        report.steps,
        task.evaluate(&train)?,
        task.evaluate(&dev)?
    );

    let ex = &dev[0];
    let [p_yes, p_no] = task.probabilities(&ex.question1, &ex.question2)?;
    println!(
        "{:?} / {:?}: p(yes)={p_yes:.3} p(no)={p_no:.3} gold duplicate={}",
        ex.question1, ex.question2, ex.is_duplicate
    );
    Ok(())
}
