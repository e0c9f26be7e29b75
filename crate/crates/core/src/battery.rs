//! Finite-difference gradient battery over every layer type, in `f64` with
//! all dimensions at most 8.
//!
//! Each check differentiates `sum(layer(x) ⊙ w)` for a random weighting `w`
//! with respect to the input and every parameter. Parameters whose default
//! initialisation would make gradients vanish are redrawn, and inputs are
//! redrawn until no activation kink lies within reach of the step.

use rand::SeedableRng;

use crate::error::Result;
use crate::gat::{build_token_graph, GatConfig, GatLayer, TokenGraph};
use crate::gradcheck::{gradcheck_leaves, DEFAULT_TOLERANCE};
use crate::kan::{HybridKanLora, KanConfig, KanLinear};
use crate::lora::{LoraConfig, LoraLinear};
use crate::model::{AttentionMask, Block, FeedForward, FfnKind, ModelConfig};
use crate::nn::{normal_tensor, LayerNorm, Linear, Mode, Module, Parameter, Rng};
use crate::tensor::{no_grad, Tensor};

pub const LAYERS: [&str; 9] = [
    "linear",
    "softmax",
    "layer_norm",
    "causal_attention_block",
    "lora_linear",
    "kan_linear",
    "hybrid_kan_lora",
    "gat",
    "graph_lora",
];

const EPS: f64 = crate::gradcheck::DEFAULT_EPS;

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryResult {
    pub layer: &'static str,
    pub max_rel_error: f64,
    /// Leaf holding the worst element: `input` or a parameter name.
    pub worst_leaf: String,
    pub elements: usize,
}

impl BatteryResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < DEFAULT_TOLERANCE
    }
}

fn weighted_sum(y: Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(w)?.sum())
}

fn leaves<'a>(x: &'a Tensor<f64>, params: &[&'a Parameter<f64>]) -> Vec<&'a Tensor<f64>> {
    std::iter::once(x).chain(params.iter().map(|p| p.tensor())).collect()
}

fn randomise(p: &Parameter<f64>, rng: &mut Rng, std: f64) {
    *p.tensor().data_mut() = normal_tensor::<f64>(rng, p.shape(), std).to_vec();
}

fn check(
    layer: &'static str,
    rng: &mut Rng,
    in_shape: &[usize],
    out_shape: &[usize],
    params: &[&Parameter<f64>],
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<BatteryResult> {
    check_away_from_kinks(layer, rng, in_shape, out_shape, params, |_| Ok(true), f)
}

/// Like [`check`], but redraws the input until `smooth` accepts it.
fn check_away_from_kinks(
    layer: &'static str,
    rng: &mut Rng,
    in_shape: &[usize],
    out_shape: &[usize],
    params: &[&Parameter<f64>],
    smooth: impl Fn(&Tensor<f64>) -> Result<bool>,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<BatteryResult> {
    let mut x = normal_tensor::<f64>(rng, in_shape, 0.7);
    for _ in 0..MAX_REDRAWS {
        if smooth(&x)? {
            break;
        }
        x = normal_tensor::<f64>(rng, in_shape, 0.7);
    }
    let w = normal_tensor::<f64>(rng, out_shape, 1.0);
    let report = gradcheck_leaves(|| weighted_sum(f(&x)?, &w), &leaves(&x, params), EPS)?;
    let worst_leaf = match report.worst.0 {
        0 => "input".to_string(),
        i => params[i - 1].name().to_string(),
    };
    Ok(BatteryResult {
        layer,
        max_rel_error: report.max_rel_error,
        worst_leaf,
        elements: report.elements,
    })
}

const MAX_REDRAWS: usize = 100;
const KINK_MARGIN: f64 = 1e-3;

/// Whether `x` is a generic point for a graph attention layer: every score
/// `e_ij` before LeakyReLU is at least [`KINK_MARGIN`] from zero, and each
/// head has a row whose scores change sign. Without the second condition
/// the source half of the attention vector only shifts whole softmax rows
/// and its gradient is exactly zero.
fn gat_generic(layer: &GatLayer<f64>, x: &Tensor<f64>, graph: &TokenGraph) -> Result<bool> {
    let dh = layer.d_head();
    for head in &layer.heads {
        let wh = no_grad(|| head.weight.forward(x, &mut Mode::Eval))?.to_vec();
        let a = head.attn.tensor().to_vec();
        let score = |i: usize, half: usize| -> f64 { (0..dh).map(|k| wh[i * dh + k] * a[half * dh + k]).sum() };
        let mut mixed = false;
        for i in 0..graph.n_nodes() {
            let e: Vec<f64> = graph.neighbors(i).iter().map(|&j| score(i, 0) + score(j, 1)).collect();
            if e.iter().any(|v| v.abs() < KINK_MARGIN) {
                return Ok(false);
            }
            mixed |= e.iter().any(|&v| v > 0.0) && e.iter().any(|&v| v < 0.0);
        }
        if !mixed {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Whether every input sits at least a tenth of a grid interval from every
/// knot. Closer points make some basis values so small that their
/// coefficient gradients fall below finite-difference resolution.
fn kan_generic(kan: &KanLinear<f64>, x: &Tensor<f64>) -> bool {
    let grid = kan.grid();
    let h = (grid.grid_max() - grid.grid_min()) / grid.grid_size() as f64;
    x.data()
        .iter()
        .all(|&v| grid.knots().iter().all(|&t| (v - t).abs() >= 0.1 * h))
}

/// Whether every ReLU input in the block's MLP is at least [`KINK_MARGIN`]
/// from zero.
fn block_generic(block: &Block<f64>, x: &Tensor<f64>, mask: &AttentionMask) -> Result<bool> {
    let FeedForward::Mlp { fc, .. } = &block.ffn else {
        return Ok(true);
    };
    no_grad(|| {
        let h = x.add(&block.attn.forward(&block.ln1.forward(x)?, mask, &mut Mode::Eval)?)?;
        let pre = fc.forward(&block.ln2.forward(&h)?, &mut Mode::Eval)?;
        let generic = pre.data().iter().all(|v| v.abs() >= KINK_MARGIN);
        Ok(generic)
    })
}

fn lora_cfg() -> LoraConfig {
    LoraConfig {
        r: 2,
        alpha: 4.0,
        dropout: 0.0,
    }
}

/// Runs one named layer check.
pub fn check_layer(layer: &str, seed: u64) -> Result<BatteryResult> {
    let mut rng = Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let name = LAYERS
        .iter()
        .copied()
        .find(|l| *l == layer)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown battery layer `{layer}`")))?;
    match name {
        "linear" => {
            let lin = Linear::<f64>::new("lin", 6, 5, true, rng);
            randomise(lin.bias.as_ref().expect("bias"), rng, 0.5);
            check(name, rng, &[4, 6], &[4, 5], &lin.parameters(), |x| lin.forward(x))
        }
        "softmax" => check(name, rng, &[3, 7], &[3, 7], &[], |x| Ok(x.scale(2.0).softmax())),
        "layer_norm" => {
            let ln = LayerNorm::<f64>::new("ln", 8);
            for p in ln.parameters() {
                randomise(p, rng, 0.5);
            }
            check(name, rng, &[3, 8], &[3, 8], &ln.parameters(), |x| ln.forward(x))
        }
        "causal_attention_block" => {
            let mut cfg = ModelConfig::tiny(8, FfnKind::Mlp);
            cfg.d_model = 8;
            cfg.ffn_mult = 1;
            let block = Block::<f64>::new("b", &cfg, rng)?;
            // Default init makes attention scores so small that query and
            // key gradients drown in finite-difference noise.
            for p in block.parameters() {
                randomise(p, rng, 0.4);
            }
            let mask = AttentionMask::causal(4);
            // Softmax is shift invariant, so the key bias has an exactly
            // zero gradient and no meaningful relative error.
            let mut params = block.parameters();
            params.retain(|p| !p.name().ends_with("attn.k.bias"));
            check_away_from_kinks(
                name,
                rng,
                &[2, 4, 8],
                &[2, 4, 8],
                &params,
                |x| block_generic(&block, x, &mask),
                |x| block.forward(x, &mask, &mut Mode::Eval),
            )
        }
        "lora_linear" => {
            let lora = LoraLinear::wrap(Linear::<f64>::new("l", 6, 5, true, rng), &lora_cfg(), rng)?;
            randomise(&lora.adapter.lora_b, rng, 0.3);
            check(name, rng, &[4, 6], &[4, 5], &lora.parameters(), |x| {
                lora.forward(x, &mut Mode::Eval)
            })
        }
        "kan_linear" => {
            let kan = KanLinear::<f64>::new("k", 3, 2, &KanConfig::default(), rng)?;
            check_away_from_kinks(
                name,
                rng,
                &[4, 3],
                &[4, 2],
                &kan.parameters(),
                |x| Ok(kan_generic(&kan, x)),
                |x| kan.forward(x),
            )
        }
        "hybrid_kan_lora" => {
            let kan = KanLinear::<f64>::new("k", 3, 4, &KanConfig::default(), rng)?;
            let hyb = HybridKanLora::wrap(kan, &lora_cfg(), rng)?;
            randomise(&hyb.adapter.lora_b, rng, 0.3);
            check_away_from_kinks(
                name,
                rng,
                &[4, 3],
                &[4, 4],
                &hyb.parameters(),
                |x| Ok(kan_generic(&hyb.kan, x)),
                |x| hyb.forward(x, &mut Mode::Eval),
            )
        }
        "gat" | "graph_lora" => {
            let cfg = GatConfig {
                heads: 2,
                window: 1,
                ..GatConfig::default()
            };
            let mut layer = GatLayer::<f64>::new("g", 4, &cfg, rng)?;
            if name == "graph_lora" {
                layer = layer.into_graph_lora(&LoraConfig { r: 1, ..lora_cfg() }, rng)?;
            }
            for p in layer.parameters() {
                randomise(p, rng, 0.6);
            }
            let graph = build_token_graph(5, 1)?;
            check_away_from_kinks(
                name,
                rng,
                &[5, 4],
                &[5, 4],
                &layer.parameters(),
                |x| gat_generic(&layer, x, &graph),
                |x| layer.forward(x, &graph, &mut Mode::Eval),
            )
        }
        _ => unreachable!("name comes from LAYERS"),
    }
}

/// Every layer in [`LAYERS`] order.
pub fn run_battery(seed: u64) -> Result<Vec<BatteryResult>> {
    LAYERS
        .iter()
        .enumerate()
        .map(|(i, l)| check_layer(l, seed.wrapping_add(i as u64)))
        .collect()
}
