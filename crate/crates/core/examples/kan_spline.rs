//! B-spline bases on a uniform extended grid and a KAN layer fitting a
//! one-dimensional function.

use adaptgpt::kan::{KanConfig, KanLinear, SplineGrid};
use adaptgpt::nn::{Module, Rng};
use adaptgpt::optim::{AdamW, AdamWConfig};
use adaptgpt::{Result, Tensor};
use rand::SeedableRng;

fn main() -> Result<()> {
    let grid = SplineGrid::new(-1.0, 1.0, 5, 3)?;
    println!("{} knots, {} basis functions", grid.knots().len(), grid.num_basis());
    for x in [-0.9, -0.3, 0.0, 0.55] {
        let b: Vec<f64> = grid.basis(x);
        let shown: Vec<String> = b.iter().map(|v| format!("{v:.3}")).collect();
        println!("x={x:>5}: [{}] sum={:.12}", shown.join(" "), b.iter().sum::<f64>());
    }

    let mut rng = Rng::seed_from_u64(3);
    let kan = KanLinear::<f32>::new("kan", 1, 1, &KanConfig::default(), &mut rng)?;
    let xs: Vec<f32> = (0..64).map(|i| -1.0 + 2.0 * i as f32 / 63.0).collect();
    let ys: Vec<f32> = xs.iter().map(|x| (3.0 * x).sin()).collect();
    let x = Tensor::new(xs, &[64, 1])?;
    let y = Tensor::new(ys, &[64, 1])?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: 2e-2,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    })?;
    for step in 0..=400 {
        kan.zero_grad();
        let err = kan.forward(&x)?.sub(&y)?;
        let loss = err.mul(&err)?.mean();
        loss.backward()?;
        opt.step(&kan.parameters())?;
        if step % 100 == 0 {
            println!("step {step:>3} mse {:.5}", loss.item());
        }
    }
    Ok(())
}
