//! AdamW with decoupled weight decay, plain SGD, and global-norm clipping.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

/// Moment estimates keyed by parameter name; entries exist only for
/// parameters that were trainable and had a gradient when stepped.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T: Real> {
    pub step: u64,
    pub moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

fn check_finite<T: Real>(params: &[&Parameter<T>]) -> Result<()> {
    for p in params.iter().filter(|p| p.trainable()) {
        if let Some(g) = p.tensor().grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteParamGradient(p.name().to_string()));
            }
        }
    }
    Ok(())
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        let c = &config;
        let ok = c.lr >= 0.0
            && c.weight_decay >= 0.0
            && c.eps > 0.0
            && (0.0..1.0).contains(&c.beta1)
            && (0.0..1.0).contains(&c.beta2);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid AdamW settings {c:?}")));
        }
        Ok(Self {
            config,
            state: OptimizerState {
                step: 0,
                moments: HashMap::new(),
            },
        })
    }

    /// One update of every trainable parameter that holds a gradient.
    ///
    /// Decayable weights are first scaled by `1 − lr·wd`, then moved by the
    /// bias-corrected Adam delta. Nothing is written if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &[&Parameter<T>]) -> Result<()> {
        check_finite(params)?;
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for p in params.iter().filter(|p| p.trainable()) {
            let Some(g) = p.tensor().grad() else { continue };
            let (m, v) = self
                .state
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let mut w = p.tensor().data_mut();
            for i in 0..w.len() {
                if p.decay() {
                    w[i] = w[i] * decay;
                }
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `w ← w − lr·g` on trainable parameters.
pub fn sgd_step<T: Real>(params: &[&Parameter<T>], lr: f64) -> Result<()> {
    check_finite(params)?;
    let lr = T::of(lr);
    for p in params.iter().filter(|p| p.trainable()) {
        if let Some(g) = p.tensor().grad() {
            let mut w = p.tensor().data_mut();
            w.iter_mut().zip(&g).for_each(|(w, &g)| *w = *w - lr * g);
        }
    }
    Ok(())
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &[&Parameter<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params.iter().filter(|p| p.trainable()) {
        if let Some(g) = p.tensor().grad() {
            sq += g.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = T::of(max_norm / (norm + 1e-6));
        for p in params.iter().filter(|p| p.trainable()) {
            p.tensor().scale_grad(c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_tensor, Linear, Module, Rng};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn param(vals: &[f64], shape: &[usize]) -> Parameter<f64> {
        Parameter::new("p", Tensor::from_f64(vals, shape).unwrap(), true)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let p = param(&[0.5, -1.0, 2.0, 3.0], &[2, 2]);
        p.tensor().set_grad(vec![0.0; 4]).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        opt.step(&[&p]).unwrap();
        assert_eq!(p.tensor().to_vec(), vec![0.5, -1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_gradient_applies_exact_decoupled_decay() {
        let p = param(&[0.5, -1.0, 2.0, 3.0], &[2, 2]);
        p.tensor().set_grad(vec![0.0; 4]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.step(&[&p]).unwrap();
        let factor: f64 = 1.0 - 1e-5 * 0.2;
        assert!((factor - (1.0 - 2e-6)).abs() < 1e-18);
        for (w, w0) in p.tensor().to_vec().iter().zip([0.5, -1.0, 2.0, 3.0]) {
            assert_eq!(*w, w0 * factor);
        }
    }

    #[test]
    fn vectors_are_not_decayed() {
        let b = param(&[1.0, 2.0], &[2]);
        assert!(!b.decay());
        b.tensor().set_grad(vec![0.0; 2]).unwrap();
        AdamW::new(AdamWConfig::default()).unwrap().step(&[&b]).unwrap();
        assert_eq!(b.tensor().to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = param(&[0.0, 0.0, 0.0], &[3]);
        p.tensor().set_grad(vec![3.0, -0.02, 1e-3]).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        opt.step(&[&p]).unwrap();
        let w = p.tensor().to_vec();
        assert!((w[0] + 0.1).abs() < 1e-6);
        assert!((w[1] - 0.1).abs() < 1e-5);
        assert!((w[2] + 0.1).abs() < 1e-4);
    }

    #[test]
    fn frozen_and_gradless_parameters_are_untouched() {
        let frozen = param(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        frozen.tensor().set_grad(vec![1.0; 4]).unwrap();
        frozen.set_trainable(false);
        let idle = param(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.step(&[&frozen, &idle]).unwrap();
        assert_eq!(frozen.tensor().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(idle.tensor().to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
        assert!(opt.state.moments.is_empty());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let p = param(&[1.0], &[1]);
        p.tensor().set_grad(vec![f64::NAN]).unwrap();
        let err = AdamW::new(AdamWConfig::default()).unwrap().step(&[&p]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteParamGradient(ref n) if n == "p"));
        assert_eq!(p.tensor().to_vec(), vec![1.0]);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let a = param(&[0.0, 0.0], &[2]);
        let b = param(&[0.0], &[1]);
        a.tensor().set_grad(vec![3.0, 0.0]).unwrap();
        b.tensor().set_grad(vec![4.0]).unwrap();
        let norm = clip_grad_norm(&[&a, &b], 1.0);
        assert_eq!(norm, 5.0);
        let ga = a.tensor().grad().unwrap();
        let gb = b.tensor().grad().unwrap();
        let after = (ga[0] * ga[0] + gb[0] * gb[0]).sqrt();
        assert!((after - 1.0).abs() < 1e-5);
        assert_eq!(clip_grad_norm(&[&a, &b], 10.0), after);
    }

    #[test]
    fn small_lr_descent_on_a_linear_probe_never_increases_loss() {
        let mut rng = Rng::seed_from_u64(2);
        let probe = Linear::<f64>::new("probe", 6, 3, true, &mut rng);
        let x = normal_tensor::<f64>(&mut rng, &[20, 6], 1.0);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let params = probe.parameters();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            probe.zero_grad();
            let loss = probe.forward(&x).unwrap().cross_entropy(&labels).unwrap();
            let l = loss.item();
            assert!(l <= last + 1e-12, "{l} > {last}");
            last = l;
            loss.backward().unwrap();
            sgd_step(&params, 0.05).unwrap();
        }
    }
}
