//! Saves a model to the binary checkpoint format, inspects the header and
//! restores the weights into a freshly initialised model.

use adaptgpt::checkpoint::{read_header, Checkpoint};
use adaptgpt::model::{FfnKind, GptModel, ModelConfig};
use adaptgpt::nn::{Module, Rng};
use adaptgpt::Result;
use rand::SeedableRng;

fn main() -> Result<()> {
    let cfg = ModelConfig::tiny(257, FfnKind::Lora);
    let a = GptModel::<f32>::new(cfg.clone(), &mut Rng::seed_from_u64(1))?;
    let dir = std::env::temp_dir().join("adaptgpt-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.adf");
    Checkpoint::capture(&a, vec![("ffn_kind".into(), "lora".into())], 1).save(&path)?;

    let header = read_header(&path)?;
    println!(
        "{} bytes, format v{}, {} tensors",
        std::fs::metadata(&path)?.len(),
        header.version,
        header.params.len()
    );
    for p in header.params.iter().take(4) {
        println!(
            "  {:<28} {:?} offset {} trainable {}",
            p.name, p.shape, p.offset, p.trainable
        );
    }

    let b = GptModel::<f32>::new(cfg, &mut Rng::seed_from_u64(2))?;
    Checkpoint::load(&path)?.restore(&b)?;
    let same = a
        .parameters()
        .iter()
        .zip(b.parameters())
        .all(|(x, y)| x.tensor().to_vec() == y.tensor().to_vec());
    println!("restored weights identical: {same}");
    println!(
        "trainable after restore: {} of {}",
        b.trainable_param_count(),
        b.param_count()
    );
    Ok(())
}
