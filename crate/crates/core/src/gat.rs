//! Token graphs and multi-head graph attention.
//!
//! Each sequence is a graph whose nodes are token positions. A head computes
//! `e_ij = LeakyReLU(aᵀ[W h_i ‖ W h_j])` over the neighbourhood `N_i`,
//! normalizes with a softmax, and aggregates `ELU(Σ_j α_ij W h_j)`. Heads are
//! concatenated and projected back to the input width.

use crate::error::{shape_err, Error, Result};
use crate::lora::{adapter_param_count, LoraConfig, Projection};
use crate::nn::{dropout, normal_tensor, Linear, Mode, Module, Parameter, Rng, INIT_STD};
use crate::tensor::{Real, Tensor};

/// Undirected graph over `n` positions with sorted neighbour lists that
/// always contain the node itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGraph {
    neighbors: Vec<Vec<usize>>,
}

/// `N_i = { j : |i − j| ≤ window }`.
pub fn build_token_graph(seq_len: usize, window: usize) -> Result<TokenGraph> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("token graph needs seq_len ≥ 1".into()));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("token graph window must be ≥ 1".into()));
    }
    let neighbors = (0..seq_len)
        .map(|i| (i.saturating_sub(window)..=(i + window).min(seq_len - 1)).collect())
        .collect();
    Ok(TokenGraph { neighbors })
}

impl TokenGraph {
    /// Builds a graph from explicit lists, checking range, self-loops and
    /// symmetry. Lists are sorted and deduplicated.
    pub fn from_neighbors(mut lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        if n == 0 {
            return Err(Error::InvalidArgument("token graph needs at least one node".into()));
        }
        for (i, l) in lists.iter_mut().enumerate() {
            l.sort_unstable();
            l.dedup();
            if let Some(&j) = l.iter().find(|&&j| j >= n) {
                return Err(Error::IndexOutOfRange {
                    what: "graph neighbour",
                    index: j,
                    size: n,
                });
            }
            if l.binary_search(&i).is_err() {
                return Err(Error::InvalidArgument(format!("node {i} lacks a self-loop")));
            }
        }
        let g = Self { neighbors: lists };
        if !g.is_symmetric() {
            return Err(Error::InvalidArgument("token graph must be symmetric".into()));
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n_nodes()).all(|i| self.neighbors[i].iter().all(|&j| self.contains(j, i)))
    }

    /// Number of directed edges, self-loops included.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Additive `(n, n)` mask: `0` on edges, `-inf` elsewhere. With `causal`
    /// the edges `j > i` are masked too, so node `i` only sees `N_i ∩ [0, i]`.
    pub fn attention_mask<T: Real>(&self, causal: bool) -> Tensor<T> {
        let n = self.n_nodes();
        let mut m = vec![T::neg_infinity(); n * n];
        for (i, l) in self.neighbors.iter().enumerate() {
            for &j in l {
                if !causal || j <= i {
                    m[i * n + j] = T::zero();
                }
            }
        }
        Tensor::new(m, &[n, n]).expect("mask is n×n")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatConfig {
    pub heads: usize,
    /// Per-head width; `None` means `d_in / heads`.
    pub d_head: Option<usize>,
    pub window: usize,
    pub leaky_slope: f64,
    /// Dropout on attention coefficients.
    pub dropout: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            d_head: None,
            window: 3,
            leaky_slope: 0.2,
            dropout: 0.0,
        }
    }
}

impl GatConfig {
    pub fn head_dim(&self, d_in: usize) -> Result<usize> {
        if self.heads == 0 {
            return Err(Error::InvalidArgument("GAT needs at least one head".into()));
        }
        match self.d_head {
            Some(0) => Err(Error::InvalidArgument("GAT d_head must be ≥ 1".into())),
            Some(d) => Ok(d),
            None if d_in.is_multiple_of(self.heads) => Ok(d_in / self.heads),
            None => Err(Error::InvalidArgument(format!(
                "d_in {d_in} is not divisible by {} GAT heads",
                self.heads
            ))),
        }
    }
}

/// One attention head: projection `W` (d_head×d_in, no bias) and attention
/// vector `a` of length `2·d_head`.
#[derive(Clone, Debug)]
pub struct GatHead<T: Real> {
    pub weight: Projection<T>,
    pub attn: Parameter<T>,
}

#[derive(Clone, Debug)]
pub struct GatLayer<T: Real> {
    pub heads: Vec<GatHead<T>>,
    pub out_proj: Linear<T>,
    d_in: usize,
    d_head: usize,
    leaky_slope: f64,
    dropout: f64,
}

/// Output of a forward pass together with per-head attention
/// coefficients `(…, n, n)`.
pub struct GatOutput<T: Real> {
    pub output: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
}

impl<T: Real> GatLayer<T> {
    pub fn new(name: &str, d_in: usize, cfg: &GatConfig, rng: &mut Rng) -> Result<Self> {
        let d_head = cfg.head_dim(d_in)?;
        let heads = (0..cfg.heads)
            .map(|k| GatHead {
                weight: Projection::Dense(Linear::new(&format!("{name}.heads.{k}.w"), d_in, d_head, false, rng)),
                attn: Parameter::new(
                    format!("{name}.heads.{k}.a"),
                    normal_tensor(rng, &[2 * d_head], INIT_STD),
                    true,
                ),
            })
            .collect();
        let out_proj = Linear::new(&format!("{name}.out_proj"), cfg.heads * d_head, d_in, true, rng);
        Ok(Self {
            heads,
            out_proj,
            d_in,
            d_head,
            leaky_slope: cfg.leaky_slope,
            dropout: cfg.dropout,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Freezes every `W^k` and gives it low-rank factors. Attention vectors
    /// and the output projection stay trainable.
    pub fn into_graph_lora(mut self, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        for head in &mut self.heads {
            let w = std::mem::replace(
                &mut head.weight,
                Projection::Dense(Linear::from_tensors("", Tensor::zeros(&[1, 1]), None)),
            );
            head.weight = w.into_lora(cfg, rng)?;
        }
        Ok(self)
    }

    pub fn is_graph_lora(&self) -> bool {
        self.heads.iter().all(|h| h.weight.as_lora().is_some())
    }

    /// `Σ_k r·(d_in + d_head)` over adapted heads.
    pub fn adapter_param_count(&self) -> usize {
        self.heads
            .iter()
            .filter_map(|h| h.weight.as_lora())
            .map(|l| adapter_param_count(self.d_head, self.d_in, l.rank()))
            .sum()
    }

    /// Attends over `graph` (no causal restriction). `h` is `(n, d_in)` or
    /// `(B, n, d_in)`.
    pub fn forward(&self, h: &Tensor<T>, graph: &TokenGraph, mode: &mut Mode) -> Result<Tensor<T>> {
        Ok(self.forward_masked(h, &graph.attention_mask(false), mode)?.output)
    }

    pub fn forward_with_attention(&self, h: &Tensor<T>, graph: &TokenGraph, mode: &mut Mode) -> Result<GatOutput<T>> {
        self.forward_masked(h, &graph.attention_mask(false), mode)
    }

    /// Forward pass with an explicit additive `(n, n)` mask.
    pub fn forward_masked(&self, h: &Tensor<T>, mask: &Tensor<T>, mode: &mut Mode) -> Result<GatOutput<T>> {
        if h.ndim() < 2 || h.last_dim() != self.d_in {
            return Err(shape_err(
                "gat",
                format!("features {:?} for d_in {}", h.shape(), self.d_in),
            ));
        }
        let n = h.shape()[h.ndim() - 2];
        if mask.shape() != [n, n] {
            return Err(shape_err("gat", format!("graph of {:?} for {n} nodes", mask.shape())));
        }
        let lead = &h.shape()[..h.ndim() - 1];
        let dh = self.d_head;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wh = head.weight.forward(h, mode)?;
            let a = head.attn.tensor();
            let a_src = a.narrow(0, dh)?.reshape(&[1, dh])?;
            let a_dst = a.narrow(dh, dh)?.reshape(&[1, dh])?;
            let s_src = wh.matmul_t(&a_src)?.reshape(lead)?;
            let s_dst = wh.matmul_t(&a_dst)?.reshape(lead)?;
            let scores = Tensor::pair_sum(&s_src, &s_dst)?
                .leaky_relu(self.leaky_slope)
                .add_broadcast(mask)?;
            let alpha = scores.softmax();
            let kept = dropout(&alpha, self.dropout, mode)?;
            outs.push(kept.matmul(&wh)?.elu());
            attention.push(alpha);
        }
        let cat = if outs.len() == 1 {
            outs.pop().expect("one head")
        } else {
            Tensor::concat(&outs)?
        };
        Ok(GatOutput {
            output: self.out_proj.forward(&cat)?,
            attention,
        })
    }
}

impl<T: Real> Module<T> for GatLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        for head in &self.heads {
            head.weight.visit(f);
            f(&head.attn);
        }
        self.out_proj.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_leaves;
    use crate::nn::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(5)
    }

    fn cfg(heads: usize) -> GatConfig {
        GatConfig {
            heads,
            ..GatConfig::default()
        }
    }

    #[test]
    fn graph_construction_examples() {
        let g = build_token_graph(1, 3).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        let g = build_token_graph(3, 1).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[0, 1, 2]);
        assert_eq!(g.neighbors(2), &[1, 2]);
        assert!(build_token_graph(4, 0).is_err());
        assert!(build_token_graph(0, 1).is_err());
    }

    #[test]
    fn explicit_graphs_are_validated() {
        assert!(TokenGraph::from_neighbors(vec![vec![0, 1], vec![1]]).is_err());
        assert!(TokenGraph::from_neighbors(vec![vec![1], vec![0, 1]]).is_err());
        assert!(TokenGraph::from_neighbors(vec![vec![0, 2], vec![1]]).is_err());
        let g = TokenGraph::from_neighbors(vec![vec![1, 0], vec![0, 1]]).unwrap();
        assert_eq!(g, build_token_graph(2, 1).unwrap());
    }

    #[test]
    fn causal_mask_drops_future_edges() {
        let g = build_token_graph(4, 2).unwrap();
        let m: Vec<f64> = g.attention_mask(true).to_vec();
        for i in 0..4 {
            for j in 0..4 {
                let open = m[i * 4 + j] == 0.0;
                assert_eq!(open, j <= i && i - j <= 2, "{i},{j}");
            }
        }
    }

    #[test]
    fn two_node_hand_example() {
        let mut rng = rng();
        let layer = GatLayer::<f64>::new(
            "g",
            1,
            &GatConfig {
                heads: 1,
                d_head: Some(1),
                ..GatConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        layer.heads[0].weight.base().weight.tensor().data_mut()[0] = 2.0;
        *layer.heads[0].attn.tensor().data_mut() = vec![1.0, 1.0];
        let g = build_token_graph(2, 1).unwrap();
        let h = Tensor::from_f64(&[1.0, 0.0], &[2, 1]).unwrap();
        let out = layer.forward_with_attention(&h, &g, &mut Mode::Eval).unwrap();
        let alpha = out.attention[0].to_vec();
        let expect = 4f64.exp() / (4f64.exp() + 2f64.exp());
        assert!((alpha[0] - expect).abs() < 1e-12);
        assert!((alpha[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn singleton_graph_attends_to_itself() {
        let mut rng = rng();
        let layer = GatLayer::<f64>::new("g", 4, &cfg(2), &mut rng).unwrap();
        let g = build_token_graph(1, 3).unwrap();
        let h = normal_tensor::<f64>(&mut rng, &[1, 4], 1.0);
        let out = layer.forward_with_attention(&h, &g, &mut Mode::Eval).unwrap();
        assert!(out.attention.iter().all(|a| a.to_vec() == vec![1.0]));
        let heads: Vec<_> = layer
            .heads
            .iter()
            .map(|hd| hd.weight.forward(&h, &mut Mode::Eval).unwrap().elu())
            .collect();
        let expect = layer.out_proj.forward(&Tensor::concat(&heads).unwrap()).unwrap();
        assert_eq!(out.output.to_vec(), expect.to_vec());
    }

    #[test]
    fn width_and_node_mismatches_are_errors() {
        let mut rng = rng();
        let layer = GatLayer::<f64>::new("g", 4, &cfg(2), &mut rng).unwrap();
        let g = build_token_graph(3, 1).unwrap();
        assert!(layer.forward(&Tensor::zeros(&[3, 5]), &g, &mut Mode::Eval).is_err());
        assert!(layer.forward(&Tensor::zeros(&[4, 4]), &g, &mut Mode::Eval).is_err());
        assert!(GatLayer::<f64>::new("g", 5, &cfg(2), &mut rng).is_err());
    }

    #[test]
    fn locality_outside_neighbourhood() {
        let mut rng = rng();
        let layer = GatLayer::<f64>::new("g", 4, &cfg(2), &mut rng).unwrap();
        let g = build_token_graph(6, 1).unwrap();
        let h = normal_tensor::<f64>(&mut rng, &[6, 4], 1.0);
        let base = layer.forward(&h, &g, &mut Mode::Eval).unwrap().to_vec();
        let h2 = Tensor::new(h.to_vec(), &[6, 4]).unwrap();
        for v in &mut h2.data_mut()[5 * 4..] {
            *v += 3.0;
        }
        let moved = layer.forward(&h2, &g, &mut Mode::Eval).unwrap().to_vec();
        // Node 5 only reaches nodes 4 and 5.
        assert_eq!(base[..4 * 4], moved[..4 * 4]);
        assert_ne!(base[4 * 4..], moved[4 * 4..]);
    }

    #[test]
    fn batched_matches_per_sequence() {
        let mut rng = rng();
        let layer = GatLayer::<f64>::new("g", 4, &cfg(2), &mut rng).unwrap();
        let g = build_token_graph(3, 1).unwrap();
        let h = normal_tensor::<f64>(&mut rng, &[2, 3, 4], 1.0);
        let both = layer.forward(&h, &g, &mut Mode::Eval).unwrap().to_vec();
        let second = Tensor::new(h.to_vec()[12..].to_vec(), &[3, 4]).unwrap();
        let one = layer.forward(&second, &g, &mut Mode::Eval).unwrap().to_vec();
        for (a, b) in both[12..].iter().zip(&one) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn graph_lora_identity_substitution_and_count() {
        let mut rng = rng();
        let dense = GatLayer::<f64>::new("g", 8, &cfg(2), &mut rng).unwrap();
        let g = build_token_graph(5, 2).unwrap();
        let h = normal_tensor::<f64>(&mut rng, &[5, 8], 1.0);
        let before = dense.forward(&h, &g, &mut Mode::Eval).unwrap().to_vec();
        let lora_cfg = LoraConfig {
            r: 2,
            alpha: 4.0,
            dropout: 0.0,
        };
        let adapted = dense.into_graph_lora(&lora_cfg, &mut rng).unwrap();
        assert!(adapted.is_graph_lora());
        assert_eq!(adapted.forward(&h, &g, &mut Mode::Eval).unwrap().to_vec(), before);
        assert_eq!(adapted.adapter_param_count(), 2 * 2 * (8 + 4));

        for head in &adapted.heads {
            let l = head.weight.as_lora().unwrap();
            *l.adapter.lora_b.tensor().data_mut() = normal_tensor::<f64>(&mut rng, &[4, 2], 0.5).to_vec();
        }
        let mut merged = adapted.clone();
        for head in &mut merged.heads {
            let w = Tensor::new(head.weight.effective_weight(), &[4, 8]).unwrap();
            head.weight = Projection::Dense(Linear::from_tensors("m", w, None));
        }
        let a = adapted.forward(&h, &g, &mut Mode::Eval).unwrap().to_vec();
        let b = merged.forward(&h, &g, &mut Mode::Eval).unwrap().to_vec();
        assert_ne!(a, before);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }

        let trainable: Vec<_> = adapted
            .parameters()
            .into_iter()
            .filter(|p| p.trainable())
            .map(|p| p.name().to_string())
            .collect();
        assert!(trainable.iter().all(|n| !n.ends_with(".w.weight")));
        assert!(trainable.contains(&"g.heads.0.a".to_string()));
        assert!(trainable.contains(&"g.out_proj.weight".to_string()));
    }

    #[test]
    fn gradcheck_four_node_graph() {
        let mut rng = rng();
        let layer = GatLayer::<f64>::new("g", 4, &cfg(2), &mut rng).unwrap();
        // Larger attention vectors so the scores are not all near zero.
        *layer.heads[0].attn.tensor().data_mut() = normal_tensor::<f64>(&mut rng, &[4], 1.0).to_vec();
        *layer.heads[1].attn.tensor().data_mut() = normal_tensor::<f64>(&mut rng, &[4], 1.0).to_vec();
        let g = build_token_graph(4, 1).unwrap();
        let h = normal_tensor::<f64>(&mut rng, &[4, 4], 1.0);
        let w = normal_tensor::<f64>(&mut rng, &[4, 4], 1.0);
        let mut leaves = vec![&h];
        for hd in &layer.heads {
            leaves.push(hd.weight.base().weight.tensor());
            leaves.push(hd.attn.tensor());
        }
        leaves.push(layer.out_proj.weight.tensor());
        let report = gradcheck_leaves(
            || layer.forward(&h, &g, &mut Mode::Eval)?.mul(&w).map(|t| t.sum()),
            &leaves,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn window_graphs_are_symmetric(n in 1usize..40, w in 1usize..6) {
            let g = build_token_graph(n, w).unwrap();
            prop_assert!(g.is_symmetric());
            for i in 0..n {
                prop_assert!(g.contains(i, i));
                for j in 0..n {
                    prop_assert_eq!(g.contains(i, j), i.abs_diff(j) <= w);
                }
            }
        }

        #[test]
        fn attention_rows_normalize(n in 1usize..9, w in 1usize..4, seed in 0u64..50) {
            let mut rng = Rng::seed_from_u64(seed);
            let layer = GatLayer::<f64>::new("g", 4, &cfg(2), &mut rng).unwrap();
            let g = build_token_graph(n, w).unwrap();
            let h = normal_tensor::<f64>(&mut rng, &[n, 4], 1.0);
            let out = layer.forward_with_attention(&h, &g, &mut Mode::Eval).unwrap();
            for a in &out.attention {
                let a = a.to_vec();
                for i in 0..n {
                    let row = &a[i * n..(i + 1) * n];
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    for (j, &v) in row.iter().enumerate() {
                        if !g.contains(i, j) {
                            prop_assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }
}
