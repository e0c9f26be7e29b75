//! Uniform-knot B-spline bases (Cox–de Boor), with first derivatives.
//!
//! A grid with `G` intervals on `[grid_min, grid_max]` and order `p` uses the
//! knot vector `t_i = grid_min + (i − p)·h`, `i = 0..=G+2p`, `h = (max−min)/G`,
//! which yields `G + p` basis functions. Only the `p + 1` functions whose
//! support covers the knot span containing `x` are non-zero. Points outside
//! the grid reuse the boundary span, so every basis function extrapolates its
//! polynomial piece from that span instead of dropping to zero.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    grid_min: f64,
    grid_max: f64,
    grid_size: usize,
    order: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(grid_min: f64, grid_max: f64, grid_size: usize, order: usize) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::InvalidArgument("spline grid_size must be ≥ 1".into()));
        }
        if !(grid_min.is_finite() && grid_max.is_finite() && grid_min < grid_max) {
            return Err(Error::InvalidArgument(format!(
                "spline grid range [{grid_min}, {grid_max}] is empty"
            )));
        }
        let h = (grid_max - grid_min) / grid_size as f64;
        let knots = (0..=grid_size + 2 * order)
            .map(|i| grid_min + (i as f64 - order as f64) * h)
            .collect();
        Ok(Self {
            grid_min,
            grid_max,
            grid_size,
            order,
            knots,
        })
    }

    pub fn grid_min(&self) -> f64 {
        self.grid_min
    }

    pub fn grid_max(&self) -> f64 {
        self.grid_max
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    fn step(&self) -> f64 {
        (self.grid_max - self.grid_min) / self.grid_size as f64
    }

    /// Knot-span index `s ∈ [p, p+G−1]` with `t_s ≤ x < t_{s+1}`, clamped to
    /// the boundary spans for points outside the grid.
    fn span(&self, x: f64) -> usize {
        let p = self.order;
        let rel = ((x - self.grid_min) / self.step()).floor();
        let mut interval = if rel.is_nan() || rel < 0.0 {
            0
        } else {
            (rel as usize).min(self.grid_size - 1)
        };
        // Rounding in the division can land one span off near a knot.
        while interval + 1 < self.grid_size && x >= self.knots[p + interval + 1] {
            interval += 1;
        }
        while interval > 0 && x < self.knots[p + interval] {
            interval -= 1;
        }
        interval + p
    }

    /// The `degree + 1` non-zero values on span `s`, for basis indices
    /// `s−degree ..= s` (triangular Cox–de Boor scheme).
    fn span_values<T: Real>(&self, s: usize, degree: usize, x: T, out: &mut [T]) {
        let t = |i: usize| T::of(self.knots[i]);
        let mut left = [T::zero(); 16];
        let mut right = [T::zero(); 16];
        out[0] = T::one();
        for j in 1..=degree {
            left[j] = x - t(s + 1 - j);
            right[j] = t(s + j) - x;
            let mut saved = T::zero();
            for r in 0..j {
                let tmp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            out[j] = saved;
        }
    }

    /// Writes all `G + p` basis values at `x` into `values`, and their
    /// derivatives into `derivs` when given.
    pub fn eval_into<T: Real>(&self, x: T, values: &mut [T], derivs: Option<&mut [T]>) {
        let p = self.order;
        assert!(p < 16, "spline order above 15 is not supported");
        debug_assert_eq!(values.len(), self.num_basis());
        values.iter_mut().for_each(|v| *v = T::zero());
        let s = self.span(x.f64());
        let mut local = [T::zero(); 16];
        self.span_values(s, p, x, &mut local);
        values[s - p..=s].copy_from_slice(&local[..=p]);

        if let Some(d) = derivs {
            d.iter_mut().for_each(|v| *v = T::zero());
            if p == 0 {
                return;
            }
            // B'_{k,p} = (B_{k,p−1} − B_{k+1,p−1}) / h on uniform knots.
            let mut lower = [T::zero(); 16];
            self.span_values(s, p - 1, x, &mut lower);
            let inv_h = T::one() / T::of(self.step());
            // lower[j] belongs to basis index s−p+1+j.
            for k in 0..=p {
                let own = if k >= 1 { lower[k - 1] } else { T::zero() };
                let next = if k < p { lower[k] } else { T::zero() };
                d[s - p + k] = (own - next) * inv_h;
            }
        }
    }

    /// All `G + p` basis values at `x`.
    pub fn basis<T: Real>(&self, x: T) -> Vec<T> {
        let mut v = vec![T::zero(); self.num_basis()];
        self.eval_into(x, &mut v, None);
        v
    }

    /// Basis matrix for many points: one row of `G + p` values per input.
    pub fn basis_matrix<T: Real>(&self, xs: &[T]) -> Vec<Vec<T>> {
        xs.iter().map(|&x| self.basis(x)).collect()
    }
}

/// Basis matrix of `xs` on `grid` (one row of `G + p` values per point).
pub fn bspline_basis<T: Real>(xs: &[T], grid: &SplineGrid) -> Vec<Vec<T>> {
    grid.basis_matrix(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook recursive Cox–de Boor on half-open intervals.
    fn cox_de_boor(knots: &[f64], k: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if knots[k] <= x && x < knots[k + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[k + p] - knots[k];
        if d1 != 0.0 {
            v += (x - knots[k]) / d1 * cox_de_boor(knots, k, p - 1, x);
        }
        let d2 = knots[k + p + 1] - knots[k + 1];
        if d2 != 0.0 {
            v += (knots[k + p + 1] - x) / d2 * cox_de_boor(knots, k + 1, p - 1, x);
        }
        v
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(SplineGrid::new(-1.0, 1.0, 0, 3).is_err());
        assert!(SplineGrid::new(1.0, 1.0, 5, 3).is_err());
    }

    #[test]
    fn knot_vector_layout() {
        let g = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        assert_eq!(g.knots().len(), 5 + 2 * 3 + 1);
        assert_eq!(g.num_basis(), 8);
        assert!(g.knots().windows(2).all(|w| w[0] < w[1]));
        assert!((g.knots()[3] + 1.0).abs() < 1e-15);
        assert!((g.knots()[8] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn order_zero_is_an_interval_indicator() {
        let g = SplineGrid::new(-1.0, 1.0, 4, 0).unwrap();
        for &x in &[-0.9, -0.3, 0.1, 0.6, 0.99] {
            let b: Vec<f64> = g.basis(x);
            assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(b.iter().filter(|&&v| v == 0.0).count(), 3);
        }
    }

    #[test]
    fn matches_recursive_oracle_at_reference_point() {
        let g = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        let x = 0.3;
        let fast: Vec<f64> = g.basis(x);
        for (k, &v) in fast.iter().enumerate() {
            let slow = cox_de_boor(g.knots(), k, 3, x);
            assert!((v - slow).abs() < 1e-10, "k={k}: {v} vs {slow}");
        }
        assert!((fast.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_max_uses_last_span() {
        let g = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        let b: Vec<f64> = g.basis(1.0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_points_extrapolate_boundary_pieces() {
        let g = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        // Extrapolated values are the boundary polynomials; they still sum to
        // one (the polynomial identity holds off-span) and vary smoothly.
        for &x in &[-1.5, 1.7] {
            let b: Vec<f64> = g.basis(x);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(b.iter().any(|v| !(0.0..=1.0).contains(v)));
        }
        let inside: Vec<f64> = g.basis(0.999_999);
        let beyond: Vec<f64> = g.basis(1.000_001);
        for (a, b) in inside.iter().zip(&beyond) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let g = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        let n = g.num_basis();
        for &x in &[-0.83, -0.21, 0.05, 0.47, 0.93, 1.3, -1.4] {
            let mut v = vec![0.0; n];
            let mut d = vec![0.0; n];
            g.eval_into(x, &mut v, Some(&mut d));
            let eps = 1e-6;
            let hi: Vec<f64> = g.basis(x + eps);
            let lo: Vec<f64> = g.basis(x - eps);
            for k in 0..n {
                let fd = (hi[k] - lo[k]) / (2.0 * eps);
                assert!((fd - d[k]).abs() < 1e-6, "x={x} k={k}: {fd} vs {}", d[k]);
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in -1.0f64..1.0, p in 0usize..4, gsize in 1usize..9) {
            let g = SplineGrid::new(-1.0, 1.0, gsize, p).unwrap();
            let b: Vec<f64> = g.basis(x);
            prop_assert!(b.iter().all(|&v| v >= 0.0));
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn local_support(x in -1.0f64..1.0, p in 0usize..4) {
            let g = SplineGrid::new(-1.0, 1.0, 5, p).unwrap();
            let b: Vec<f64> = g.basis(x);
            let t = g.knots();
            for (k, &v) in b.iter().enumerate() {
                if x < t[k] || x > t[k + p + 1] {
                    prop_assert_eq!(v, 0.0);
                }
                if x > t[k] && x < t[k + p + 1] {
                    prop_assert!(v > 0.0);
                }
            }
        }

        #[test]
        fn agrees_with_recursive_oracle(x in -1.0f64..1.0, p in 0usize..4) {
            let g = SplineGrid::new(-1.0, 1.0, 5, p).unwrap();
            let b: Vec<f64> = g.basis(x);
            for (k, &v) in b.iter().enumerate() {
                prop_assert!((v - cox_de_boor(g.knots(), k, p, x)).abs() < 1e-10);
            }
        }
    }
}
