//! GPT-2 style decoder: token and learned position embeddings, pre-norm
//! blocks of causal multi-head attention plus a swappable feed-forward slot,
//! a final layer norm and an LM head tied to the token embeddings.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::gat::{build_token_graph, GatConfig, GatLayer};
use crate::kan::{HybridKanLora, KanConfig, KanLinear};
use crate::lora::{adapter_param_count, LoraConfig, Projection};
use crate::nn::{
    dropout, flatten_rows, normal_tensor, unflatten_rows, LayerNorm, Linear, Mode, Module, Parameter, Rng, INIT_STD,
};
use crate::tensor::{no_grad, Real, Tensor, IGNORE_INDEX};

/// What fills the feed-forward slot of every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FfnKind {
    Mlp,
    Lora,
    Kan,
    KanLora,
    Gat,
    GraphLora,
}

impl FfnKind {
    pub const ALL: [FfnKind; 6] = [
        FfnKind::Mlp,
        FfnKind::Lora,
        FfnKind::Kan,
        FfnKind::KanLora,
        FfnKind::Gat,
        FfnKind::GraphLora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FfnKind::Mlp => "mlp",
            FfnKind::Lora => "lora",
            FfnKind::Kan => "kan",
            FfnKind::KanLora => "kan_lora",
            FfnKind::Gat => "gat",
            FfnKind::GraphLora => "graph_lora",
        }
    }

    /// Adapter variants freeze the backbone and train low-rank factors.
    pub fn is_adapter(self) -> bool {
        matches!(self, FfnKind::Lora | FfnKind::KanLora | FfnKind::GraphLora)
    }

    /// The dense variant an adapter variant is built on.
    pub fn base(self) -> FfnKind {
        match self {
            FfnKind::Lora => FfnKind::Mlp,
            FfnKind::KanLora => FfnKind::Kan,
            FfnKind::GraphLora => FfnKind::Gat,
            k => k,
        }
    }
}

impl fmt::Display for FfnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FfnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FfnKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown ffn_kind `{s}` (expected one of mlp, lora, kan, kan_lora, gat, graph_lora)"
            ))
        })
    }
}

/// Which linear maps receive LoRA factors in adapter variants. `ffn` only
/// matters for `lora`; the KAN and GAT adapter variants always adapt their
/// feed-forward slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoraTargets {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
    pub ffn: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        Self {
            q: true,
            k: false,
            v: true,
            o: false,
            ffn: true,
        }
    }
}

impl LoraTargets {
    pub fn none() -> Self {
        Self {
            q: false,
            k: false,
            v: false,
            o: false,
            ffn: false,
        }
    }
}

impl fmt::Display for LoraTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.q, "q"),
            (self.k, "k"),
            (self.v, "v"),
            (self.o, "o"),
            (self.ffn, "ffn"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LoraTargets {
    type Err = Error;

    /// Comma-separated subset of `q,k,v,o,ffn`; empty selects nothing.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Self::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let slot = match part {
                "q" => &mut t.q,
                "k" => &mut t.k,
                "v" => &mut t.v,
                "o" => &mut t.o,
                "ffn" => &mut t.ffn,
                other => {
                    return Err(Error::InvalidArgument(format!("unknown LoRA target `{other}`")));
                }
            };
            *slot = true;
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_kind: FfnKind,
    pub dropout_p: f64,
    /// MLP inner width multiplier (and the KAN hidden width multiplier).
    pub ffn_mult: usize,
    pub lora: LoraConfig,
    pub lora_targets: LoraTargets,
    pub kan: KanConfig,
    pub gat: GatConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 257,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            max_seq_len: 512,
            ffn_kind: FfnKind::Mlp,
            dropout_p: 0.5,
            ffn_mult: 4,
            lora: LoraConfig::default(),
            lora_targets: LoraTargets::default(),
            kan: KanConfig::default(),
            gat: GatConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and examples.
    pub fn tiny(vocab_size: usize, ffn_kind: FfnKind) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            ffn_kind,
            dropout_p: 0.0,
            ffn_mult: 2,
            lora: LoraConfig {
                r: 2,
                alpha: 4.0,
                dropout: 0.0,
            },
            lora_targets: LoraTargets::default(),
            kan: KanConfig::default(),
            gat: GatConfig {
                heads: 2,
                window: 2,
                ..GatConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, d_model, n_layers and max_seq_len must be ≥ 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be ≥ 1".into());
        }
        self.kan.validate()?;
        self.gat.head_dim(self.d_model)?;
        if self.gat.window == 0 {
            return bad("gat_window must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_mult * self.d_model
    }
}

/// Lower-triangular attention pattern: position `i` may attend to `j ≤ i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
}

impl AttentionMask {
    pub fn causal(len: usize) -> Self {
        Self { len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j <= i
    }

    /// `(T, T)` additive form: `0` where allowed, `-inf` elsewhere.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let n = self.len;
        let data = (0..n * n)
            .map(|e| {
                if self.allowed(e / n, e % n) {
                    T::zero()
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        Tensor::new(data, &[n, n]).expect("mask is T×T")
    }
}

#[derive(Clone, Debug)]
pub struct CausalSelfAttention<T: Real> {
    pub q: Projection<T>,
    pub k: Projection<T>,
    pub v: Projection<T>,
    pub o: Projection<T>,
    n_heads: usize,
    max_seq_len: usize,
    dropout_p: f64,
}

impl<T: Real> CausalSelfAttention<T> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let lin = |n: &str, rng: &mut Rng| Projection::Dense(Linear::new(&format!("{name}.{n}"), d, d, true, rng));
        Self {
            q: lin("q", rng),
            k: lin("k", rng),
            v: lin("v", rng),
            o: lin("o", rng),
            n_heads: cfg.n_heads,
            max_seq_len: cfg.max_seq_len,
            dropout_p: cfg.dropout_p,
        }
    }

    /// Returns the output `(B, T, d)` and attention probabilities `(B, H, T, T)`.
    pub fn forward_with_probs(
        &self,
        x: &Tensor<T>,
        mask: &AttentionMask,
        mode: &mut Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.ndim() != 3 {
            return Err(shape_err(
                "attention",
                format!("expected (B, T, d), got {:?}", x.shape()),
            ));
        }
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if t > self.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.max_seq_len,
            });
        }
        if mask.len() != t {
            return Err(shape_err(
                "attention",
                format!("mask of {} for {t} positions", mask.len()),
            ));
        }
        let h = self.n_heads;
        let dh = d / h;
        let split = |p: &Projection<T>, mode: &mut Mode| -> Result<Tensor<T>> {
            p.forward(x, mode)?.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = split(&self.q, mode)?;
        let k = split(&self.k, mode)?;
        let v = split(&self.v, mode)?;
        let scores = q
            .matmul_t(&k)?
            .scale(T::of(1.0 / (dh as f64).sqrt()))
            .add_broadcast(&mask.additive())?;
        let probs = scores.softmax();
        let ctx = dropout(&probs, self.dropout_p, mode)?
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        Ok((self.o.forward(&ctx, mode)?, probs))
    }

    pub fn forward(&self, x: &Tensor<T>, mask: &AttentionMask, mode: &mut Mode) -> Result<Tensor<T>> {
        Ok(self.forward_with_probs(x, mask, mode)?.0)
    }
}

impl<T: Real> Module<T> for CausalSelfAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.o.visit(f);
    }
}

#[derive(Clone, Debug)]
pub enum KanUnit<T: Real> {
    Plain(KanLinear<T>),
    Hybrid(HybridKanLora<T>),
}

impl<T: Real> KanUnit<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        match self {
            KanUnit::Plain(k) => k.forward(x),
            KanUnit::Hybrid(h) => h.forward(x, mode),
        }
    }

    pub fn kan(&self) -> &KanLinear<T> {
        match self {
            KanUnit::Plain(k) => k,
            KanUnit::Hybrid(h) => &h.kan,
        }
    }

    fn into_hybrid(self, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        match self {
            KanUnit::Plain(k) => Ok(KanUnit::Hybrid(HybridKanLora::wrap(k, cfg, rng)?)),
            h => Ok(h),
        }
    }
}

impl<T: Real> Module<T> for KanUnit<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        match self {
            KanUnit::Plain(k) => k.visit(f),
            KanUnit::Hybrid(h) => h.visit(f),
        }
    }
}

/// The feed-forward slot of a block.
#[derive(Clone, Debug)]
pub enum FeedForward<T: Real> {
    /// `proj(ReLU(fc(x)))`, either map optionally LoRA-adapted.
    Mlp { fc: Projection<T>, proj: Projection<T> },
    /// Two KAN layers `d → d_ff → d`.
    Kan { up: KanUnit<T>, down: KanUnit<T> },
    /// Graph attention over the causal part of a sliding-window token graph.
    Gat {
        layer: GatLayer<T>,
        window: usize,
        masks: RefCell<HashMap<usize, Tensor<T>>>,
    },
}

impl<T: Real> FeedForward<T> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (d, dff) = (cfg.d_model, cfg.d_ff());
        Ok(match cfg.ffn_kind.base() {
            FfnKind::Mlp => FeedForward::Mlp {
                fc: Projection::Dense(Linear::new(&format!("{name}.fc"), d, dff, true, rng)),
                proj: Projection::Dense(Linear::new(&format!("{name}.proj"), dff, d, true, rng)),
            },
            FfnKind::Kan => FeedForward::Kan {
                up: KanUnit::Plain(KanLinear::new(&format!("{name}.up"), d, dff, &cfg.kan, rng)?),
                down: KanUnit::Plain(KanLinear::new(&format!("{name}.down"), dff, d, &cfg.kan, rng)?),
            },
            _ => FeedForward::Gat {
                layer: GatLayer::new(&format!("{name}.gat"), d, &cfg.gat, rng)?,
                window: cfg.gat.window,
                masks: RefCell::new(HashMap::new()),
            },
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        match self {
            FeedForward::Mlp { fc, proj } => proj.forward(&fc.forward(x, mode)?.relu(), mode),
            FeedForward::Kan { up, down } => down.forward(&up.forward(x, mode)?, mode),
            FeedForward::Gat { layer, window, masks } => {
                let n = x.shape()[x.ndim() - 2];
                let cached = masks.borrow().get(&n).cloned();
                let mask = match cached {
                    Some(m) => m,
                    None => {
                        let m = build_token_graph(n, *window)?.attention_mask(true);
                        masks.borrow_mut().insert(n, m.clone());
                        m
                    }
                };
                Ok(layer.forward_masked(x, &mask, mode)?.output)
            }
        }
    }

    /// The maps whose weights end the slot (zeroing them silences it).
    pub fn output_parameters(&self) -> Vec<&Parameter<T>> {
        match self {
            FeedForward::Mlp { proj, .. } => proj.base().parameters(),
            FeedForward::Kan { down, .. } => down.kan().parameters(),
            FeedForward::Gat { layer, .. } => layer.out_proj.parameters(),
        }
    }
}

impl<T: Real> Module<T> for FeedForward<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        match self {
            FeedForward::Mlp { fc, proj } => {
                fc.visit(f);
                proj.visit(f);
            }
            FeedForward::Kan { up, down } => {
                up.visit(f);
                down.visit(f);
            }
            FeedForward::Gat { layer, .. } => layer.visit(f),
        }
    }
}

/// Pre-norm residual block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug)]
pub struct Block<T: Real> {
    pub ln1: LayerNorm<T>,
    pub attn: CausalSelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    dropout_p: f64,
}

impl<T: Real> Block<T> {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), cfg.d_model),
            attn: CausalSelfAttention::new(&format!("{name}.attn"), cfg, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), cfg.d_model),
            ffn: FeedForward::new(&format!("{name}.ffn"), cfg, rng)?,
            dropout_p: cfg.dropout_p,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mask: &AttentionMask, mode: &mut Mode) -> Result<Tensor<T>> {
        let a = self.attn.forward(&self.ln1.forward(x)?, mask, mode)?;
        let h = x.add(&dropout(&a, self.dropout_p, mode)?)?;
        let f = self.ffn.forward(&self.ln2.forward(&h)?, mode)?;
        h.add(&dropout(&f, self.dropout_p, mode)?)
    }

    /// Zeroes the attention output projection and the feed-forward output
    /// maps, which turns the block into the identity.
    pub fn zero_output_projections(&self) {
        let mut params = self.attn.o.base().parameters();
        params.extend(self.ffn.output_parameters());
        for p in params {
            p.tensor().data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl<T: Real> Module<T> for Block<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.ln1.visit(f);
        self.attn.visit(f);
        self.ln2.visit(f);
        self.ffn.visit(f);
    }
}

/// A batch of right-padded token sequences, row-major `(batch, seq_len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<u32>], pad: u32) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("batches need non-empty sequences".into()));
        }
        let seq_len = seqs.iter().map(Vec::len).max().expect("non-empty");
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, seq_len - s.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            seq_len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    /// Next-token targets; the last real position and padding are ignored.
    pub fn lm_targets(&self) -> Vec<usize> {
        let mut t = vec![IGNORE_INDEX; self.ids.len()];
        for (b, &len) in self.lengths.iter().enumerate() {
            for i in 0..len.saturating_sub(1) {
                t[b * self.seq_len + i] = self.ids[b * self.seq_len + i + 1] as usize;
            }
        }
        t
    }
}

/// Decoding settings. `temperature = 0` is greedy (ties to the lowest id).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub stop_token: Option<u32>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            temperature: 1.2,
            top_p: 0.9,
            seed: 0,
            stop_token: None,
        }
    }
}

/// Draws one id from `logits` with temperature and nucleus truncation.
pub fn sample_token(logits: &[f64], temperature: f64, top_p: f64, rng: &mut Rng) -> Result<usize> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be ≥ 0")));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidArgument(format!("top_p {top_p} outside (0, 1]")));
    }
    if temperature == 0.0 {
        return Ok(crate::metrics::argmax(logits));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, ((l - max) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = 0;
    let mut mass = 0.0;
    while keep < probs.len() && (keep == 0 || mass < top_p) {
        mass += probs[keep].1;
        keep += 1;
    }
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &(i, p) in &probs[..keep] {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs[keep - 1].0)
}

#[derive(Clone, Debug)]
pub struct GptModel<T: Real> {
    pub config: ModelConfig,
    pub wte: Parameter<T>,
    pub wpe: Parameter<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

impl<T: Real> GptModel<T> {
    /// Builds the dense model for `config.ffn_kind.base()` and, for adapter
    /// variants, freezes it and attaches adapters.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let wte = Parameter::new("wte", normal_tensor(rng, &[v, d], INIT_STD), true);
        let wpe = Parameter::new("wpe", normal_tensor(rng, &[config.max_seq_len, d], INIT_STD), true);
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(&format!("blocks.{i}"), &config, rng))
            .collect::<Result<_>>()?;
        let model = Self {
            ln_f: LayerNorm::new("ln_f", d),
            wte,
            wpe,
            blocks,
            config,
        };
        if model.config.ffn_kind.is_adapter() {
            model.attach_adapters(rng)
        } else {
            Ok(model)
        }
    }

    /// Freezes the backbone and adds the adapters for `config.ffn_kind`.
    /// Under graph attention the attention vectors and output projection
    /// remain trainable.
    pub fn attach_adapters(mut self, rng: &mut Rng) -> Result<Self> {
        self.freeze();
        let cfg = self.config.clone();
        let t = &cfg.lora_targets;
        let wrap = |p: &mut Projection<T>, on: bool, rng: &mut Rng| -> Result<()> {
            if on {
                let dense = std::mem::replace(p, placeholder());
                *p = dense.into_lora(&cfg.lora, rng)?;
            }
            Ok(())
        };
        for block in &mut self.blocks {
            let a = &mut block.attn;
            wrap(&mut a.q, t.q, rng)?;
            wrap(&mut a.k, t.k, rng)?;
            wrap(&mut a.v, t.v, rng)?;
            wrap(&mut a.o, t.o, rng)?;
            match (&mut block.ffn, cfg.ffn_kind) {
                (FeedForward::Mlp { fc, proj }, FfnKind::Lora) => {
                    wrap(fc, t.ffn, rng)?;
                    wrap(proj, t.ffn, rng)?;
                }
                (FeedForward::Kan { up, down }, FfnKind::KanLora) => {
                    let placeholder_unit = || KanUnit::Plain(placeholder_kan());
                    *up = std::mem::replace(up, placeholder_unit()).into_hybrid(&cfg.lora, rng)?;
                    *down = std::mem::replace(down, placeholder_unit()).into_hybrid(&cfg.lora, rng)?;
                }
                (FeedForward::Gat { layer, .. }, FfnKind::GraphLora) => {
                    *layer = layer.clone().into_graph_lora(&cfg.lora, rng)?;
                    for head in &layer.heads {
                        head.attn.set_trainable(true);
                    }
                    layer.out_proj.visit(&mut |p| p.set_trainable(true));
                }
                (_, kind) => {
                    return Err(Error::InvalidArgument(format!(
                        "feed-forward slot does not match ffn_kind {kind}"
                    )))
                }
            }
        }
        Ok(self)
    }

    pub fn embed(&self, batch: &TokenBatch, mode: &mut Mode) -> Result<Tensor<T>> {
        let (b, t) = (batch.batch, batch.seq_len);
        if t > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        if batch.ids.len() != b * t || t == 0 {
            return Err(shape_err("embed", format!("{} ids for ({b}, {t})", batch.ids.len())));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: bad as usize,
                size: v,
            });
        }
        let idx: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = self
            .wte
            .tensor()
            .gather_rows(&idx)?
            .reshape(&[b, t, self.config.d_model])?;
        let x = tok.add_broadcast(&self.wpe.tensor().gather_rows(&positions)?)?;
        dropout(&x, self.config.dropout_p, mode)
    }

    /// Final-layer-normed hidden states `(B, T, d)`.
    pub fn hidden_states(&self, batch: &TokenBatch, mode: &mut Mode) -> Result<Tensor<T>> {
        let mut x = self.embed(batch, mode)?;
        let mask = AttentionMask::causal(batch.seq_len);
        for block in &self.blocks {
            x = block.forward(&x, &mask, mode)?;
        }
        self.ln_f.forward(&x)
    }

    /// Tied LM head: `h · wteᵀ`.
    pub fn logits_from_hidden(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, lead) = flatten_rows(h)?;
        unflatten_rows(&rows.matmul_t(self.wte.tensor())?, &lead)
    }

    /// Logits `(B, T, vocab_size)`.
    pub fn lm_forward(&self, batch: &TokenBatch, mode: &mut Mode) -> Result<Tensor<T>> {
        self.logits_from_hidden(&self.hidden_states(batch, mode)?)
    }

    /// Mean next-token cross-entropy over the real positions of `batch`.
    pub fn lm_loss(&self, batch: &TokenBatch, mode: &mut Mode) -> Result<Tensor<T>> {
        let logits = self.lm_forward(batch, mode)?;
        let v = self.config.vocab_size;
        logits
            .reshape(&[batch.batch * batch.seq_len, v])?
            .cross_entropy(&batch.lm_targets())
    }

    /// Hidden state of each row's last real token, `(B, d)`.
    pub fn last_token_hidden(&self, batch: &TokenBatch, mode: &mut Mode) -> Result<Tensor<T>> {
        let h = self.hidden_states(batch, mode)?;
        let rows = h.reshape(&[batch.batch * batch.seq_len, self.config.d_model])?;
        let idx: Vec<usize> = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| b * batch.seq_len + len - 1)
            .collect();
        rows.gather_rows(&idx)
    }

    /// Logits for the token following `context` (the last `max_seq_len`
    /// tokens are used).
    pub fn next_token_logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        let start = context.len().saturating_sub(self.config.max_seq_len);
        let batch = TokenBatch::from_sequences(&[context[start..].to_vec()], 0)?;
        no_grad(|| {
            let h = self.last_token_hidden(&batch, &mut Mode::Eval)?;
            Ok(self.logits_from_hidden(&h)?.to_f64_vec())
        })
    }

    /// Appends up to `cfg.max_new_tokens` sampled ids to `prompt`, stopping
    /// early after `cfg.stop_token`.
    pub fn generate(&self, prompt: &[u32], cfg: &SamplingConfig) -> Result<Vec<u32>> {
        use rand::SeedableRng;
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("generation needs a non-empty prompt".into()));
        }
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut out = prompt.to_vec();
        for _ in 0..cfg.max_new_tokens {
            let logits = self.next_token_logits(&out)?;
            let id = sample_token(&logits, cfg.temperature, cfg.top_p, &mut rng)? as u32;
            out.push(id);
            if Some(id) == cfg.stop_token {
                break;
            }
        }
        Ok(out)
    }
}

impl<T: Real> Module<T> for GptModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.wte);
        f(&self.wpe);
        for b in &self.blocks {
            b.visit(f);
        }
        self.ln_f.visit(f);
    }
}

fn placeholder<T: Real>() -> Projection<T> {
    Projection::Dense(Linear::from_tensors("", Tensor::zeros(&[1, 1]), None))
}

fn placeholder_kan<T: Real>() -> KanLinear<T> {
    use rand::SeedableRng;
    KanLinear::new("", 1, 1, &KanConfig::default(), &mut Rng::seed_from_u64(0)).expect("default grid")
}

/// Closed-form parameter totals for a backbone built from `cfg`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBudget {
    pub total: usize,
    pub trainable: usize,
}

pub fn analytic_param_budget(cfg: &ModelConfig) -> Result<ParamBudget> {
    cfg.validate()?;
    let (v, d, l, tmax) = (cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.max_seq_len);
    let dff = cfg.d_ff();
    let nb = cfg.kan.grid_size + cfg.kan.spline_order;
    let r = cfg.lora.r;
    let heads = cfg.gat.heads;
    let dh = cfg.gat.head_dim(d)?;

    let attn = 4 * (d * d + d);
    let ffn = match cfg.ffn_kind.base() {
        FfnKind::Mlp => 2 * d * dff + dff + d,
        FfnKind::Kan => 2 * d * dff * (1 + nb),
        _ => heads * (dh * d + 2 * dh) + heads * dh * d + d,
    };
    let block = 4 * d + attn + ffn;
    let dense = v * d + tmax * d + 2 * d + l * block;

    if !cfg.ffn_kind.is_adapter() {
        return Ok(ParamBudget {
            total: dense,
            trainable: dense,
        });
    }
    let t = &cfg.lora_targets;
    let attn_targets = [t.q, t.k, t.v, t.o].iter().filter(|&&on| on).count();
    let attn_adapters = attn_targets * adapter_param_count(d, d, r);
    let (ffn_adapters, ffn_trainable_base) = match cfg.ffn_kind {
        FfnKind::Lora if t.ffn => (adapter_param_count(dff, d, r) + adapter_param_count(d, dff, r), 0),
        FfnKind::Lora => (0, 0),
        FfnKind::KanLora => (adapter_param_count(dff, d, r) + adapter_param_count(d, dff, r), 0),
        _ => (
            heads * adapter_param_count(dh, d, r),
            heads * 2 * dh + heads * dh * d + d,
        ),
    };
    let adapters = l * (attn_adapters + ffn_adapters);
    Ok(ParamBudget {
        total: dense + adapters,
        trainable: adapters + l * ffn_trainable_base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_leaves;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(21)
    }

    fn random_ids(rng: &mut Rng, n: usize, v: usize) -> Vec<u32> {
        (0..n).map(|_| rng.random_range(0..v as u32)).collect()
    }

    #[test]
    fn ffn_kind_round_trips_through_strings() {
        for k in FfnKind::ALL {
            assert_eq!(k.as_str().parse::<FfnKind>().unwrap(), k);
        }
        assert!("mlpp".parse::<FfnKind>().is_err());
        let t: LoraTargets = "q,v,ffn".parse().unwrap();
        assert_eq!(t, LoraTargets::default());
        assert_eq!(t.to_string(), "q,v,ffn");
        assert!("q,x".parse::<LoraTargets>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(50, FfnKind::Mlp);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(50, FfnKind::Mlp);
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = rng();
        let cfg = ModelConfig::tiny(20, FfnKind::Mlp);
        let attn = CausalSelfAttention::<f64>::new("a", &cfg, &mut rng);
        let x = normal_tensor::<f64>(&mut rng, &[1, 1, 16], 1.0);
        let (_, probs) = attn
            .forward_with_probs(&x, &AttentionMask::causal(1), &mut Mode::Eval)
            .unwrap();
        assert!(probs.to_vec().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn equal_keys_split_attention_evenly() {
        let mut rng = rng();
        let cfg = ModelConfig::tiny(20, FfnKind::Mlp);
        let attn = CausalSelfAttention::<f64>::new("a", &cfg, &mut rng);
        let row = normal_tensor::<f64>(&mut rng, &[16], 1.0).to_vec();
        let x = Tensor::new([row.clone(), row].concat(), &[1, 2, 16]).unwrap();
        let (_, probs) = attn
            .forward_with_probs(&x, &AttentionMask::causal(2), &mut Mode::Eval)
            .unwrap();
        let p = probs.to_vec();
        // Head 0, query 1.
        assert!((p[2] - 0.5).abs() < 1e-12 && (p[3] - 0.5).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let mut rng = rng();
        let cfg = ModelConfig::tiny(20, FfnKind::Mlp);
        let model = GptModel::<f32>::new(cfg, &mut rng).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![1; 33]], 0).unwrap();
        assert!(matches!(
            model.lm_forward(&batch, &mut Mode::Eval),
            Err(Error::SequenceTooLong { len: 33, max: 32 })
        ));
        let batch = TokenBatch::from_sequences(&[vec![1, 20]], 0).unwrap();
        assert!(model.lm_forward(&batch, &mut Mode::Eval).is_err());
    }

    #[test]
    fn zeroed_output_maps_make_blocks_identity() {
        for kind in FfnKind::ALL {
            let mut rng = rng();
            let cfg = ModelConfig::tiny(20, kind);
            let block = Block::<f64>::new("b", &cfg, &mut rng).unwrap();
            block.zero_output_projections();
            let x = normal_tensor::<f64>(&mut rng, &[2, 5, 16], 1.0);
            let y = block.forward(&x, &AttentionMask::causal(5), &mut Mode::Eval).unwrap();
            assert_eq!(y.to_vec(), x.to_vec(), "{kind}");
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn causality_for_every_kind() {
        for kind in FfnKind::ALL {
            let mut rng = rng();
            let model = GptModel::<f32>::new(ModelConfig::tiny(30, kind), &mut rng).unwrap();
            let ids = random_ids(&mut rng, 10, 30);
            let base = model
                .lm_forward(&TokenBatch::from_sequences(&[ids.clone()], 0).unwrap(), &mut Mode::Eval)
                .unwrap()
                .to_vec();
            let mut changed = ids.clone();
            changed[6] = (changed[6] + 7) % 30;
            let moved = model
                .lm_forward(&TokenBatch::from_sequences(&[changed], 0).unwrap(), &mut Mode::Eval)
                .unwrap()
                .to_vec();
            assert_eq!(base[..6 * 30], moved[..6 * 30], "{kind}");
            assert_ne!(base[6 * 30..], moved[6 * 30..], "{kind}");
        }
    }

    #[test]
    fn tied_head_is_linear_in_embedding_rows() {
        let mut rng = rng();
        let model = GptModel::<f64>::new(ModelConfig::tiny(12, FfnKind::Mlp), &mut rng).unwrap();
        let h = normal_tensor::<f64>(&mut rng, &[1, 3, 16], 1.0);
        let before = model.logits_from_hidden(&h).unwrap().to_vec();
        for v in &mut model.wte.tensor().data_mut()[5 * 16..6 * 16] {
            *v *= 2.0;
        }
        let after = model.logits_from_hidden(&h).unwrap().to_vec();
        for t in 0..3 {
            for c in 0..12 {
                let (a, b) = (before[t * 12 + c], after[t * 12 + c]);
                if c == 5 {
                    assert!((b - 2.0 * a).abs() < 1e-12);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn random_init_loss_is_near_log_vocab() {
        let mut rng = rng();
        let v = 257;
        let model = GptModel::<f32>::new(ModelConfig::tiny(v, FfnKind::Mlp), &mut rng).unwrap();
        let seqs: Vec<Vec<u32>> = (0..8).map(|_| random_ids(&mut rng, 24, v)).collect();
        let batch = TokenBatch::from_sequences(&seqs, 0).unwrap();
        let loss = model.lm_loss(&batch, &mut Mode::Eval).unwrap().item() as f64;
        let ln_v = (v as f64).ln();
        assert!((loss - ln_v).abs() / ln_v < 0.05, "{loss} vs {ln_v}");
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let mut rng = rng();
        let model = GptModel::<f32>::new(ModelConfig::tiny(30, FfnKind::Gat), &mut rng).unwrap();
        let a = random_ids(&mut rng, 6, 30);
        let b = random_ids(&mut rng, 4, 30);
        let ab = model
            .last_token_hidden(
                &TokenBatch::from_sequences(&[a.clone(), b.clone()], 0).unwrap(),
                &mut Mode::Eval,
            )
            .unwrap()
            .to_vec();
        let ba = model
            .last_token_hidden(&TokenBatch::from_sequences(&[b, a], 0).unwrap(), &mut Mode::Eval)
            .unwrap()
            .to_vec();
        assert_eq!(ab[..16], ba[16..]);
        assert_eq!(ab[16..], ba[..16]);
    }

    #[test]
    fn lm_targets_skip_last_and_padding() {
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![4, 5]], 9).unwrap();
        assert_eq!(batch.ids, vec![1, 2, 3, 4, 5, 9]);
        let t = batch.lm_targets();
        assert_eq!(t, vec![2, 3, IGNORE_INDEX, 5, IGNORE_INDEX, IGNORE_INDEX]);
    }

    #[test]
    fn greedy_generation_and_determinism() {
        let mut rng = rng();
        let model = GptModel::<f32>::new(ModelConfig::tiny(30, FfnKind::Mlp), &mut rng).unwrap();
        let greedy = SamplingConfig {
            max_new_tokens: 5,
            temperature: 0.0,
            ..SamplingConfig::default()
        };
        let out = model.generate(&[1, 2, 3], &greedy).unwrap();
        let mut manual = vec![1, 2, 3];
        for _ in 0..5 {
            let l = model.next_token_logits(&manual).unwrap();
            manual.push(crate::metrics::argmax(&l) as u32);
        }
        assert_eq!(out, manual);

        let sampled = SamplingConfig {
            max_new_tokens: 8,
            seed: 4,
            ..SamplingConfig::default()
        };
        let a = model.generate(&[1, 2], &sampled).unwrap();
        assert_eq!(a, model.generate(&[1, 2], &sampled).unwrap());
        assert!(a.len() <= 2 + 8);
        assert!(model.generate(&[], &sampled).is_err());
    }

    #[test]
    fn stop_token_ends_generation() {
        let mut rng = rng();
        let model = GptModel::<f32>::new(ModelConfig::tiny(30, FfnKind::Mlp), &mut rng).unwrap();
        let greedy = SamplingConfig {
            max_new_tokens: 5,
            temperature: 0.0,
            ..SamplingConfig::default()
        };
        let first = model.generate(&[1, 2], &greedy).unwrap()[2];
        let stopped = model
            .generate(
                &[1, 2],
                &SamplingConfig {
                    stop_token: Some(first),
                    ..greedy
                },
            )
            .unwrap();
        assert_eq!(stopped, vec![1, 2, first]);
    }

    #[test]
    fn nucleus_keeps_the_top_mass() {
        let mut rng = rng();
        let logits = [3.0, 0.0, 2.9, -5.0];
        for _ in 0..200 {
            let i = sample_token(&logits, 1.0, 0.5, &mut rng).unwrap();
            assert_eq!(i, 0);
            let j = sample_token(&logits, 1.0, 0.9, &mut rng).unwrap();
            assert!(j == 0 || j == 2);
        }
        assert_eq!(sample_token(&[1.0, 1.0], 0.0, 1.0, &mut rng).unwrap(), 0);
        assert!(sample_token(&logits, -1.0, 0.9, &mut rng).is_err());
        assert!(sample_token(&logits, 1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn analytic_budget_matches_enumeration() {
        for kind in FfnKind::ALL {
            let mut rng = rng();
            let cfg = ModelConfig::tiny(40, kind);
            let model = GptModel::<f32>::new(cfg.clone(), &mut rng).unwrap();
            let budget = analytic_param_budget(&cfg).unwrap();
            assert_eq!(budget.total, model.param_count(), "{kind}");
            assert_eq!(budget.trainable, model.trainable_param_count(), "{kind}");
            if kind.is_adapter() {
                assert!(budget.trainable < budget.total / 2, "{kind}");
            }
        }
    }

    #[test]
    fn adapter_variants_freeze_the_backbone() {
        let mut rng = rng();
        let model = GptModel::<f32>::new(ModelConfig::tiny(40, FfnKind::Lora), &mut rng).unwrap();
        for p in model.parameters() {
            assert_eq!(p.trainable(), p.name().contains(".lora_"), "{}", p.name());
        }
        let model = GptModel::<f32>::new(ModelConfig::tiny(40, FfnKind::GraphLora), &mut rng).unwrap();
        let trainable: Vec<_> = model
            .parameters()
            .into_iter()
            .filter(|p| p.trainable())
            .map(|p| p.name().to_string())
            .collect();
        assert!(trainable.iter().any(|n| n.ends_with("gat.heads.1.a")));
        assert!(trainable.iter().any(|n| n.ends_with("gat.out_proj.bias")));
        assert!(!trainable.iter().any(|n| n.ends_with(".w.weight") || n == "wte"));
    }

    #[test]
    fn parameter_names_are_unique() {
        for kind in FfnKind::ALL {
            let mut rng = rng();
            let model = GptModel::<f32>::new(ModelConfig::tiny(40, kind), &mut rng).unwrap();
            let mut names: Vec<_> = model.parameters().iter().map(|p| p.name().to_string()).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n, "{kind}");
        }
    }

    #[test]
    fn gradcheck_one_block() {
        let mut rng = rng();
        let mut cfg = ModelConfig::tiny(10, FfnKind::Mlp);
        cfg.d_model = 8;
        cfg.ffn_mult = 1;
        let block = Block::<f64>::new("b", &cfg, &mut rng).unwrap();
        let x = normal_tensor::<f64>(&mut rng, &[1, 3, 8], 1.0);
        let w = normal_tensor::<f64>(&mut rng, &[1, 3, 8], 1.0);
        let mask = AttentionMask::causal(3);
        let params = block.parameters();
        let mut leaves: Vec<&Tensor<f64>> = vec![&x];
        leaves.extend(params.iter().map(|p| p.tensor()));
        let report = gradcheck_leaves(
            || block.forward(&x, &mask, &mut Mode::Eval)?.mul(&w).map(|t| t.sum()),
            &leaves,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
