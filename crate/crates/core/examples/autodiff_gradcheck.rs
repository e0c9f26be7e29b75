//! Differentiates a small expression with the autodiff engine and compares
//! the result against central finite differences.

use adaptgpt::gradcheck::{finite_diff_gradcheck, DEFAULT_EPS, DEFAULT_TOLERANCE};
use adaptgpt::{Result, Tensor};

fn main() -> Result<()> {
    let w = Tensor::<f64>::from_f64(&[0.3, -0.8, 1.1, 0.5, -0.2, 0.9], &[3, 2])?;
    let f = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
        let z = x.matmul(&w)?;
        Ok(z.silu().mul(&z.softmax())?.sum())
    };

    let x = Tensor::<f64>::from_f64(&[0.1, -0.4, 0.7, 1.2, 0.05, -0.9], &[2, 3])?.with_grad();
    let y = f(&x)?;
    y.backward()?;
    println!("f(x) = {:.6}", y.item());
    println!("df/dx = {:?}", x.grad().expect("x requires grad"));

    let err = finite_diff_gradcheck(f, &x, DEFAULT_EPS)?;
    println!("max relative error {err:.3e} (tolerance {DEFAULT_TOLERANCE:e})");
    Ok(())
}
