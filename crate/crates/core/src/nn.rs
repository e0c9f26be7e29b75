//! Parameters, forward modes, and the dense building blocks shared by every
//! model variant.

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Deterministic RNG used for initialization, dropout and sampling.
pub type Rng = ChaCha8Rng;

/// GPT-2 style weight init standard deviation.
pub const INIT_STD: f64 = 0.02;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A named tensor plus its trainable and weight-decay flags.
///
/// The trainable flag lives on the tensor (`requires_grad`), so frozen
/// parameters never accumulate gradients and the optimizer skips them.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    name: String,
    tensor: Tensor<T>,
    decay: bool,
}

impl<T: Real> Parameter<T> {
    /// Matrices and higher-rank tensors decay; vectors (biases, norms,
    /// attention vectors) do not.
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Self {
        let decay = tensor.ndim() >= 2;
        tensor.set_requires_grad(trainable);
        Self {
            name: name.into(),
            tensor,
            decay,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn set_trainable(&self, on: bool) {
        self.tensor.set_requires_grad(on);
        if !on {
            self.tensor.zero_grad();
        }
    }

    pub fn decay(&self) -> bool {
        self.decay
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>));

    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Number of scalars the optimizer may update, by enumeration.
    fn trainable_param_count(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.numel())
            .sum()
    }

    fn zero_grad(&self) {
        self.visit(&mut |p| p.tensor().zero_grad());
    }

    fn freeze(&self) {
        self.visit(&mut |p| p.set_trainable(false));
    }
}

/// Forward-pass mode. Dropout is only active in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
pub fn dropout<T: Real>(x: &Tensor<T>, p: f64, mode: &mut Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = T::of(1.0 / (1.0 - p));
            let mask = (0..x.numel())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            x.mul_mask(mask)
        }
        _ => Ok(x.clone()),
    }
}

pub fn normal_tensor<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(data, shape).expect("shape matches sampled data")
}

/// Flattens `(…, d)` to `(N, d)`, returning the leading shape.
pub(crate) fn flatten_rows<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let d = x.last_dim();
    let lead = x.shape()[..x.ndim() - 1].to_vec();
    let rows = lead.iter().product();
    Ok((x.reshape(&[rows, d])?, lead))
}

pub(crate) fn unflatten_rows<T: Real>(x: &Tensor<T>, lead: &[usize]) -> Result<Tensor<T>> {
    let mut shape = lead.to_vec();
    shape.push(x.last_dim());
    x.reshape(&shape)
}

/// Dense affine map `y = x Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = Parameter::new(
            format!("{name}.weight"),
            normal_tensor(rng, &[out_dim, in_dim], INIT_STD),
            true,
        );
        let bias = bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true));
        Self { weight, bias }
    }

    pub fn from_tensors(name: &str, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight, true),
            bias: bias.map(|b| Parameter::new(format!("{name}.bias"), b, true)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.last_dim() != self.in_dim() {
            return Err(shape_err(
                "linear",
                format!(
                    "input width {} for {} ({}→{})",
                    x.last_dim(),
                    self.weight.name(),
                    self.in_dim(),
                    self.out_dim()
                ),
            ));
        }
        let (rows, lead) = flatten_rows(x)?;
        let mut y = rows.matmul_t(self.weight.tensor())?;
        if let Some(b) = &self.bias {
            y = y.add_broadcast(b.tensor())?;
        }
        unflatten_rows(&y, &lead)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Real> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[dim], T::one()), true),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(self.gamma.tensor(), self.beta.tensor(), LAYER_NORM_EPS)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_is_identity_in_eval_and_at_zero_rate() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0], &[3]).unwrap();
        let y = dropout(&x, 0.5, &mut Mode::Eval).unwrap();
        assert!(y.ptr_eq(&x));
        let mut rng = Rng::seed_from_u64(0);
        let y = dropout(&x, 0.0, &mut Mode::Train(&mut rng)).unwrap();
        assert!(y.ptr_eq(&x));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = Rng::seed_from_u64(3);
        let x = Tensor::<f64>::full(&[20_000], 1.0);
        let y = dropout(&x, 0.5, &mut Mode::Train(&mut rng)).unwrap();
        let d = y.data();
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut rng = Rng::seed_from_u64(0);
        let lin = Linear::<f64>::new("l", 3, 2, true, &mut rng);
        let x = Tensor::zeros(&[4, 5]);
        assert!(lin.forward(&x).is_err());
        let y = lin.forward(&Tensor::zeros(&[2, 4, 3])).unwrap();
        assert_eq!(y.shape(), &[2, 4, 2]);
    }

    #[test]
    fn decay_flags_follow_rank() {
        let mut rng = Rng::seed_from_u64(0);
        let lin = Linear::<f32>::new("l", 3, 2, true, &mut rng);
        assert!(lin.weight.decay());
        assert!(!lin.bias.as_ref().unwrap().decay());
        let ln = LayerNorm::<f32>::new("ln", 4);
        assert!(!ln.gamma.decay() && !ln.beta.decay());
    }
}
