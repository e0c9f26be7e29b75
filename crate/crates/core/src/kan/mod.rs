//! Kolmogorov–Arnold layers: a SiLU base path plus a learnable B-spline path
//! per edge, and a hybrid variant that adapts only the base path with
//! low-rank factors.

pub mod spline;

pub use spline::{bspline_basis, SplineGrid};

use crate::error::{shape_err, Error, Result};
use crate::lora::{LoraConfig, LowRankFactors};
use crate::nn::{flatten_rows, normal_tensor, unflatten_rows, Mode, Module, Parameter, Rng, INIT_STD};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct KanConfig {
    pub grid_size: usize,
    pub spline_order: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub scale_base: f64,
    pub scale_spline: f64,
}

impl Default for KanConfig {
    fn default() -> Self {
        Self {
            grid_size: 5,
            spline_order: 3,
            grid_min: -1.0,
            grid_max: 1.0,
            scale_base: 1.0,
            scale_spline: 1.0,
        }
    }
}

impl KanConfig {
    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::new(self.grid_min, self.grid_max, self.grid_size, self.spline_order)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if !(self.scale_base.is_finite() && self.scale_spline.is_finite()) {
            return Err(Error::InvalidArgument("KAN scales must be finite".into()));
        }
        if self.spline_order >= 16 {
            return Err(Error::InvalidArgument("spline_order must be below 16".into()));
        }
        Ok(())
    }
}

/// `y = scale_base·(W_base·silu(x)) + scale_spline·Σ_k c[o,i,k]·B_k(x_i)`.
///
/// The spline mixing across outputs is folded into `spline_coeffs`
/// `(out, in, G+p)`, so the spline path is one contraction.
#[derive(Clone, Debug)]
pub struct KanLinear<T: Real> {
    pub base_weight: Parameter<T>,
    pub spline_coeffs: Parameter<T>,
    grid: SplineGrid,
    scale_base: f64,
    scale_spline: f64,
}

impl<T: Real> KanLinear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, cfg: &KanConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let nb = grid.num_basis();
        let coeff_std = 0.1 * cfg.scale_spline.abs() / (cfg.grid_size as f64).sqrt();
        Ok(Self {
            base_weight: Parameter::new(
                format!("{name}.base_weight"),
                normal_tensor(rng, &[out_dim, in_dim], INIT_STD),
                true,
            ),
            spline_coeffs: Parameter::new(
                format!("{name}.spline_coeffs"),
                normal_tensor(rng, &[out_dim, in_dim, nb], coeff_std),
                true,
            ),
            grid,
            scale_base: cfg.scale_base,
            scale_spline: cfg.scale_spline,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base_weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.base_weight.shape()[0]
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn scale_base(&self) -> f64 {
        self.scale_base
    }

    pub fn scale_spline(&self) -> f64 {
        self.scale_spline
    }

    fn check_width(&self, x: &Tensor<T>) -> Result<()> {
        if x.last_dim() != self.in_dim() {
            return Err(shape_err(
                "kan_linear",
                format!(
                    "input width {} for {} (expects {})",
                    x.last_dim(),
                    self.base_weight.name(),
                    self.in_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Spline path on `(N, in)` rows, before `scale_spline`.
    fn spline_path(&self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let nb = self.grid.num_basis();
        let n = rows.shape()[0];
        let grid = &self.grid;
        let basis = rows.expand_features(nb, |x, v, d| grid.eval_into(x, v, Some(d)));
        let flat = basis.reshape(&[n, self.in_dim() * nb])?;
        let coeffs = self
            .spline_coeffs
            .tensor()
            .reshape(&[self.out_dim(), self.in_dim() * nb])?;
        flat.matmul_t(&coeffs)
    }

    /// Combines a precomputed base-path output with the spline path.
    fn combine(&self, base: Tensor<T>, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let spline = self.spline_path(rows)?;
        base.scale(T::of(self.scale_base))
            .add(&spline.scale(T::of(self.scale_spline)))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(x)?;
        let (rows, lead) = flatten_rows(x)?;
        let base = rows.silu().matmul_t(self.base_weight.tensor())?;
        unflatten_rows(&self.combine(base, &rows)?, &lead)
    }
}

impl<T: Real> Module<T> for KanLinear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.base_weight);
        f(&self.spline_coeffs);
    }
}

/// A frozen [`KanLinear`] whose base weight is adapted as
/// `W_base + (α/r)·B·A`; the spline path is left untouched.
#[derive(Clone, Debug)]
pub struct HybridKanLora<T: Real> {
    pub kan: KanLinear<T>,
    pub adapter: LowRankFactors<T>,
}

impl<T: Real> HybridKanLora<T> {
    /// Freezes every parameter of `kan` and attaches fresh factors
    /// (`<layer>.lora_A`, `<layer>.lora_B`).
    pub fn wrap(kan: KanLinear<T>, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        let name = kan
            .base_weight
            .name()
            .strip_suffix(".base_weight")
            .unwrap_or(kan.base_weight.name())
            .to_string();
        let adapter = LowRankFactors::new(&name, kan.out_dim(), kan.in_dim(), cfg, rng)?;
        kan.freeze();
        Ok(Self { kan, adapter })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        self.kan.check_width(x)?;
        let (rows, lead) = flatten_rows(x)?;
        let f = rows.silu();
        let base = f
            .matmul_t(self.kan.base_weight.tensor())?
            .add(&self.adapter.delta(&f, mode)?)?;
        unflatten_rows(&self.kan.combine(base, &rows)?, &lead)
    }

    /// The adapted base weight `W_base + (α/r)·B·A` (out×in, row-major).
    pub fn effective_base_weight(&self) -> Vec<T> {
        crate::lora::low_rank_update(
            &self.kan.base_weight.tensor().data(),
            &self.adapter.lora_b.tensor().data(),
            &self.adapter.lora_a.tensor().data(),
            self.kan.out_dim(),
            self.adapter.rank(),
            self.kan.in_dim(),
            self.adapter.scale(),
        )
    }
}

impl<T: Real> Module<T> for HybridKanLora<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.kan.visit(f);
        self.adapter.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_leaves;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(11)
    }

    #[test]
    fn dead_spline_path_leaves_scaled_base() {
        let mut rng = rng();
        let cfg = KanConfig {
            scale_base: 0.7,
            ..KanConfig::default()
        };
        let kan = KanLinear::<f64>::new("k", 4, 3, &cfg, &mut rng).unwrap();
        kan.spline_coeffs.tensor().data_mut().iter_mut().for_each(|c| *c = 0.0);
        let x = normal_tensor::<f64>(&mut rng, &[5, 4], 1.0);
        let got = kan.forward(&x).unwrap().to_vec();
        let want = x.silu().matmul_t(kan.base_weight.tensor()).unwrap().scale(0.7).to_vec();
        assert_eq!(got, want);
    }

    #[test]
    fn silu_zero_point_silences_base_path() {
        let mut rng = rng();
        let kan = KanLinear::<f64>::new("k", 3, 2, &KanConfig::default(), &mut rng).unwrap();
        let zeros = Tensor::zeros(&[1, 3]);
        let full = kan.forward(&zeros).unwrap().to_vec();
        let spline = kan.spline_path(&zeros).unwrap().to_vec();
        assert_eq!(full, spline);
    }

    #[test]
    fn single_coefficient_selects_one_basis_function() {
        let mut rng = rng();
        let cfg = KanConfig {
            scale_spline: 1.5,
            ..KanConfig::default()
        };
        let kan = KanLinear::<f64>::new("k", 1, 1, &cfg, &mut rng).unwrap();
        kan.base_weight.tensor().data_mut()[0] = 0.0;
        let j = 4;
        {
            let mut c = kan.spline_coeffs.tensor().data_mut();
            c.iter_mut().for_each(|v| *v = 0.0);
            c[j] = 2.0;
        }
        for &x in &[-0.95, -0.4, 0.0, 0.3, 0.77] {
            let y = kan.forward(&Tensor::from_f64(&[x], &[1, 1]).unwrap()).unwrap().item();
            let b: Vec<f64> = kan.grid().basis(x);
            assert!((y - 2.0 * 1.5 * b[j]).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = rng();
        let kan = KanLinear::<f64>::new("k", 3, 2, &KanConfig::default(), &mut rng).unwrap();
        assert!(kan.forward(&Tensor::zeros(&[2, 4])).is_err());
        let hyb = HybridKanLora::wrap(
            kan,
            &LoraConfig {
                r: 1,
                alpha: 2.0,
                dropout: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        assert!(hyb.forward(&Tensor::zeros(&[2, 4]), &mut Mode::Eval).is_err());
    }

    #[test]
    fn hybrid_with_zero_b_is_plain_kan() {
        let mut rng = rng();
        let kan = KanLinear::<f32>::new("k", 6, 5, &KanConfig::default(), &mut rng).unwrap();
        let x = normal_tensor::<f32>(&mut rng, &[2, 3, 6], 1.0);
        let plain = kan.forward(&x).unwrap().to_vec();
        let hyb = HybridKanLora::wrap(
            kan,
            &LoraConfig {
                r: 2,
                alpha: 4.0,
                dropout: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(hyb.forward(&x, &mut Mode::Eval).unwrap().to_vec(), plain);
    }

    #[test]
    fn hybrid_trainable_set_is_the_adapter() {
        let mut rng = rng();
        let kan = KanLinear::<f32>::new("ffn", 8, 8, &KanConfig::default(), &mut rng).unwrap();
        let hyb = HybridKanLora::wrap(
            kan,
            &LoraConfig {
                r: 2,
                alpha: 4.0,
                dropout: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        let names: Vec<_> = hyb
            .parameters()
            .into_iter()
            .filter(|p| p.trainable())
            .map(|p| p.name().to_string())
            .collect();
        assert_eq!(names, ["ffn.lora_A", "ffn.lora_B"]);
    }

    #[test]
    fn hybrid_matches_explicit_substitution() {
        let mut rng = rng();
        let cfg = KanConfig {
            grid_size: 3,
            spline_order: 2,
            ..KanConfig::default()
        };
        let kan = KanLinear::<f64>::new("k", 2, 2, &cfg, &mut rng).unwrap();
        let hyb = HybridKanLora::wrap(
            kan,
            &LoraConfig {
                r: 1,
                alpha: 3.0,
                dropout: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        *hyb.adapter.lora_b.tensor().data_mut() = vec![0.4, -0.9];
        let merged = KanLinear {
            base_weight: Parameter::new(
                "m.base_weight",
                Tensor::new(hyb.effective_base_weight(), &[2, 2]).unwrap(),
                false,
            ),
            ..hyb.kan.clone()
        };
        for _ in 0..20 {
            let x = normal_tensor::<f64>(&mut rng, &[3, 2], 0.8);
            let a = hyb.forward(&x, &mut Mode::Eval).unwrap().to_vec();
            let b = merged.forward(&x).unwrap().to_vec();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradcheck_kan_and_hybrid() {
        let mut rng = rng();
        let kan = KanLinear::<f64>::new("k", 3, 2, &KanConfig::default(), &mut rng).unwrap();
        let x = normal_tensor::<f64>(&mut rng, &[4, 3], 0.6);
        let w = normal_tensor::<f64>(&mut rng, &[4, 2], 1.0);
        let report = gradcheck_leaves(
            || kan.forward(&x)?.mul(&w).map(|t| t.sum()),
            &[&x, kan.base_weight.tensor(), kan.spline_coeffs.tensor()],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        let hyb = HybridKanLora::wrap(
            kan,
            &LoraConfig {
                r: 1,
                alpha: 2.0,
                dropout: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        *hyb.adapter.lora_b.tensor().data_mut() = vec![0.3, -0.5];
        let report = gradcheck_leaves(
            || hyb.forward(&x, &mut Mode::Eval)?.mul(&w).map(|t| t.sum()),
            &[&x, hyb.adapter.lora_a.tensor(), hyb.adapter.lora_b.tensor()],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
