//! Trains a small sentiment classifier on synthetic reviews with each
//! feed-forward variant and reports accuracy and trainable parameters.

use adaptgpt::data::synth_sentiment;
use adaptgpt::model::{FfnKind, GptModel, ModelConfig};
use adaptgpt::nn::{Module, Rng};
use adaptgpt::tasks::{train_loop, SentimentClassifier, Task, TaskKind, TrainConfig};
use adaptgpt::tokenizer::BpeVocab;
use adaptgpt::Result;
use rand::SeedableRng;

fn main() -> Result<()> {
    let train = synth_sentiment(48, 2, 1)?;
    let dev = synth_sentiment(16, 2, 2)?;
    let kinds = [FfnKind::Mlp, FfnKind::Lora, FfnKind::Kan, FfnKind::Gat];
    for kind in kinds {
        let tok = BpeVocab::byte_level();
        let mut cfg = ModelConfig::tiny(tok.vocab_size(), kind);
        cfg.max_seq_len = 64;
        let mut rng = Rng::seed_from_u64(0);
        let model = GptModel::new(cfg, &mut rng)?;
        let clf = SentimentClassifier::new(model, tok, TaskKind::Cfimdb, &mut rng)?;
        let tc = TrainConfig {
            learning_rate: match kind {
                FfnKind::Lora => 2e-2,
                FfnKind::Kan => 1e-2,
                _ => 3e-3,
            },
            weight_decay: 0.0,
            epochs: 6,
            ..TrainConfig::default()
        };
        let report = train_loop(&clf, &train, &dev, &tc, None)?;
        println!(
            "{:<6} trainable {:>6} of {:>6}  steps {:>3}  train acc {:.3}  dev acc {:.3}",
            kind.as_str(),
            clf.trainable_param_count(),
            clf.param_count(),
            report.steps,
            clf.evaluate(&train)?,
            clf.evaluate(&dev)?
        );
    }
    Ok(())
}
