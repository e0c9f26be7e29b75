//! Low-rank adaptation of linear maps.
//!
//! A wrapped layer keeps its base weight `W0` (d×k) and bias frozen and adds a
//! trainable rank-`r` increment: `y = W0·x + b0 + (α/r)·B·(A·dropout(x))`, with
//! `A` (r×k) drawn from N(0, 0.02²) and `B` (d×r) zero, so a fresh wrap is the
//! base layer exactly.

use crate::error::{Error, Result};
use crate::nn::{dropout, normal_tensor, Linear, Mode, Module, Parameter, Rng, INIT_STD};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    /// Dropout on the adapter input; off by default.
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 32,
            alpha: 64.0,
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    /// Checks `1 ≤ r < min(d, k)` and `α > 0` for a `d×k` target.
    pub fn validate_for(&self, d: usize, k: usize) -> Result<()> {
        if self.r == 0 || self.r >= d.min(k) {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {} must satisfy 1 ≤ r < min({d}, {k})",
                self.r
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "LoRA alpha {} must be positive",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "LoRA dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Trainable scalars added by a rank-`r` adapter on a `d×k` matrix.
pub fn adapter_param_count(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}

/// `W0 + scale·B·A` for row-major `B` (d×r) and `A` (r×k).
pub(crate) fn low_rank_update<T: Real>(w0: &[T], b: &[T], a: &[T], d: usize, r: usize, k: usize, scale: f64) -> Vec<T> {
    let s = T::of(scale);
    let mut w = w0.to_vec();
    for i in 0..d {
        for j in 0..k {
            let mut acc = T::zero();
            for q in 0..r {
                acc = acc + b[i * r + q] * a[q * k + j];
            }
            w[i * k + j] = w[i * k + j] + s * acc;
        }
    }
    w
}

/// Rank-`r` factors `A` (r×in) and `B` (out×r) shared by every adapted layer.
#[derive(Clone, Debug)]
pub struct LowRankFactors<T: Real> {
    pub lora_a: Parameter<T>,
    pub lora_b: Parameter<T>,
    pub config: LoraConfig,
}

impl<T: Real> LowRankFactors<T> {
    pub fn new(name: &str, out_dim: usize, in_dim: usize, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate_for(out_dim, in_dim)?;
        Ok(Self {
            lora_a: Parameter::new(
                format!("{name}.lora_A"),
                normal_tensor(rng, &[cfg.r, in_dim], INIT_STD),
                true,
            ),
            lora_b: Parameter::new(format!("{name}.lora_B"), Tensor::zeros(&[out_dim, cfg.r]), true),
            config: cfg.clone(),
        })
    }

    pub fn rank(&self) -> usize {
        self.config.r
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }

    /// `(α/r)·B·(A·dropout(x))` for `x` of shape `(…, in)`.
    pub fn delta(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        let xa = dropout(x, self.config.dropout, mode)?;
        let (rows, lead) = crate::nn::flatten_rows(&xa)?;
        let down = rows.matmul_t(self.lora_a.tensor())?;
        let up = down.matmul_t(self.lora_b.tensor())?;
        crate::nn::unflatten_rows(&up.scale(T::of(self.scale())), &lead)
    }

    pub fn param_count(&self) -> usize {
        self.lora_a.numel() + self.lora_b.numel()
    }
}

impl<T: Real> Module<T> for LowRankFactors<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.lora_a);
        f(&self.lora_b);
    }
}

/// A frozen linear layer with a trainable low-rank increment.
#[derive(Clone, Debug)]
pub struct LoraLinear<T: Real> {
    pub base: Linear<T>,
    pub adapter: LowRankFactors<T>,
}

impl<T: Real> LoraLinear<T> {
    /// Freezes `base` and attaches fresh factors named after its weight
    /// (`<layer>.lora_A`, `<layer>.lora_B`).
    pub fn wrap(base: Linear<T>, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        let name = base
            .weight
            .name()
            .strip_suffix(".weight")
            .unwrap_or(base.weight.name())
            .to_string();
        let adapter = LowRankFactors::new(&name, base.out_dim(), base.in_dim(), cfg, rng)?;
        base.freeze();
        Ok(Self { base, adapter })
    }

    pub fn rank(&self) -> usize {
        self.adapter.rank()
    }

    /// The `α/r` multiplier on the adapter path.
    pub fn scale(&self) -> f64 {
        self.adapter.scale()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        let base = self.base.forward(x)?;
        base.add(&self.adapter.delta(x, mode)?)
    }

    /// Dense `W0 + (α/r)·B·A` (d×k, row-major).
    pub fn merge(&self) -> Vec<T> {
        let (d, k, r) = (self.base.out_dim(), self.base.in_dim(), self.rank());
        low_rank_update(
            &self.base.weight.tensor().data(),
            &self.adapter.lora_b.tensor().data(),
            &self.adapter.lora_a.tensor().data(),
            d,
            r,
            k,
            self.scale(),
        )
    }

    /// A plain linear layer carrying the merged weight and the base bias;
    /// the adapter factors are dropped.
    pub fn merged_linear(&self) -> Linear<T> {
        let name = self
            .base
            .weight
            .name()
            .strip_suffix(".weight")
            .unwrap_or(self.base.weight.name())
            .to_string();
        let (d, k) = (self.base.out_dim(), self.base.in_dim());
        let w = Tensor::new(self.merge(), &[d, k]).expect("merged weight has base shape");
        let b = self.base.bias.as_ref().map(|b| b.tensor().detach());
        Linear::from_tensors(&name, w, b)
    }

    /// `r·(d + k)`: only the adapter factors train.
    pub fn adapter_param_count(&self) -> usize {
        adapter_param_count(self.base.out_dim(), self.base.in_dim(), self.rank())
    }
}

impl<T: Real> Module<T> for LoraLinear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.base.visit(f);
        self.adapter.visit(f);
    }
}

/// A linear slot that is either dense or LoRA-adapted.
#[derive(Clone, Debug)]
pub enum Projection<T: Real> {
    Dense(Linear<T>),
    Lora(LoraLinear<T>),
}

impl<T: Real> Projection<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        match self {
            Projection::Dense(l) => l.forward(x),
            Projection::Lora(l) => l.forward(x, mode),
        }
    }

    /// Converts a dense slot into a LoRA slot over the now-frozen weight.
    pub fn into_lora(self, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        match self {
            Projection::Dense(l) => Ok(Projection::Lora(LoraLinear::wrap(l, cfg, rng)?)),
            lora @ Projection::Lora(_) => Ok(lora),
        }
    }

    pub fn base(&self) -> &Linear<T> {
        match self {
            Projection::Dense(l) => l,
            Projection::Lora(l) => &l.base,
        }
    }

    pub fn as_lora(&self) -> Option<&LoraLinear<T>> {
        match self {
            Projection::Lora(l) => Some(l),
            Projection::Dense(_) => None,
        }
    }

    /// The weight the slot currently applies (merged for LoRA).
    pub fn effective_weight(&self) -> Vec<T> {
        match self {
            Projection::Dense(l) => l.weight.tensor().to_vec(),
            Projection::Lora(l) => l.merge(),
        }
    }
}

impl<T: Real> Module<T> for Projection<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        match self {
            Projection::Dense(l) => l.visit(f),
            Projection::Lora(l) => l.visit(f),
        }
    }
}
