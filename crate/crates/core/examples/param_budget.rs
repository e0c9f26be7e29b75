//! Enumerated and closed-form parameter counts for every feed-forward
//! variant at a GPT-2 small sized configuration.

use adaptgpt::model::{analytic_param_budget, FfnKind, GptModel, ModelConfig};
use adaptgpt::nn::{Module, Rng};
use adaptgpt::Result;
use rand::SeedableRng;

fn main() -> Result<()> {
    let small = std::env::args().any(|a| a == "--small");
    println!("{:<11} {:>12} {:>12} {:>8}", "ffn_kind", "total", "trainable", "share");
    for kind in FfnKind::ALL {
        let mut cfg = ModelConfig {
            ffn_kind: kind,
            ..ModelConfig::default()
        };
        if small {
            cfg.d_model = 128;
            cfg.n_layers = 2;
            cfg.n_heads = 4;
            cfg.lora.r = 8;
            cfg.lora.alpha = 16.0;
        }
        let budget = analytic_param_budget(&cfg)?;
        let model = GptModel::<f32>::new(cfg, &mut Rng::seed_from_u64(0))?;
        assert_eq!(model.param_count(), budget.total);
        assert_eq!(model.trainable_param_count(), budget.trainable);
        println!(
            "{:<11} {:>12} {:>12} {:>7.2}%",
            kind.as_str(),
            budget.total,
            budget.trainable,
            100.0 * budget.trainable as f64 / budget.total as f64
        );
    }
    Ok(())
}
