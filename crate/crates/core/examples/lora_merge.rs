//! A LoRA-wrapped linear layer: identical to its base at initialisation,
//! and foldable into a single dense weight after training the factors.

use adaptgpt::lora::{LoraConfig, LoraLinear};
use adaptgpt::nn::{normal_tensor, Linear, Mode, Module, Rng};
use adaptgpt::optim::sgd_step;
use adaptgpt::{Result, Tensor};
use rand::SeedableRng;

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn main() -> Result<()> {
    let mut rng = Rng::seed_from_u64(7);
    let base = Linear::<f32>::new("proj", 64, 64, true, &mut rng);
    let cfg = LoraConfig {
        r: 8,
        alpha: 16.0,
        dropout: 0.0,
    };
    let lora = LoraLinear::wrap(base.clone(), &cfg, &mut rng)?;
    println!(
        "rank {} scale {} adapter params {} vs dense {}",
        lora.rank(),
        lora.scale(),
        lora.adapter_param_count(),
        64 * 64
    );

    let x: Tensor<f32> = normal_tensor(&mut rng, &[16, 64], 1.0);
    let diff = max_diff(
        &lora.forward(&x, &mut Mode::Eval)?.to_vec(),
        &base.forward(&x)?.to_vec(),
    );
    println!("at init |lora(x) - base(x)| = {diff:e}");

    let target: Tensor<f32> = normal_tensor(&mut rng, &[16, 64], 1.0);
    for step in 0..50 {
        lora.zero_grad();
        let err = lora.forward(&x, &mut Mode::Eval)?.sub(&target)?;
        let loss = err.mul(&err)?.mean();
        loss.backward()?;
        sgd_step(&lora.parameters(), 0.5)?;
        if step % 10 == 0 {
            println!("step {step:>2} loss {:.4}", loss.item());
        }
    }

    let merged = lora.merged_linear();
    let diff = max_diff(
        &lora.forward(&x, &mut Mode::Eval)?.to_vec(),
        &merged.forward(&x)?.to_vec(),
    );
    println!("after training |lora(x) - merged(x)| = {diff:.2e}");
    Ok(())
}
