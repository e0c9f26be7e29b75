//! Multi-head graph attention over a sliding-window token graph, showing
//! the attention rows and their locality.

use adaptgpt::gat::{build_token_graph, GatConfig, GatLayer};
use adaptgpt::nn::{normal_tensor, Mode, Module, Rng};
use adaptgpt::{Result, Tensor};
use rand::SeedableRng;

fn main() -> Result<()> {
    let n = 8;
    let graph = build_token_graph(n, 2)?;
    println!(
        "{n} tokens, window 2: {} edges, symmetric {}",
        graph.edge_count(),
        graph.is_symmetric()
    );

    let mut rng = Rng::seed_from_u64(1);
    let cfg = GatConfig {
        heads: 2,
        window: 2,
        ..GatConfig::default()
    };
    let layer = GatLayer::<f32>::new("gat", 16, &cfg, &mut rng)?;
    // Sharpen the small initial weights so the rows depend visibly on content.
    for p in layer.parameters() {
        *p.tensor().data_mut() = normal_tensor::<f32>(&mut rng, p.shape(), 0.2).to_vec();
    }
    println!(
        "{} heads of width {}, {} parameters",
        layer.n_heads(),
        layer.d_head(),
        layer.param_count()
    );

    let h: Tensor<f32> = normal_tensor(&mut rng, &[n, 16], 1.0);
    let out = layer.forward_with_attention(&h, &graph, &mut Mode::Eval)?;
    println!("output shape {:?}", out.output.shape());
    let alpha = out.attention[0].to_vec();
    println!("head 0 attention:");
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:.2}", alpha[i * n + j])).collect();
        println!("  {}", row.join(" "));
    }

    let lora = layer.into_graph_lora(
        &adaptgpt::lora::LoraConfig {
            r: 2,
            alpha: 4.0,
            dropout: 0.0,
        },
        &mut rng,
    )?;
    println!("graph-LoRA adds {} adapter parameters", lora.adapter_param_count());
    Ok(())
}
