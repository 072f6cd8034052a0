//! The tensor engine on its own: build a small graph, run backward and
//! compare one gradient against a finite difference.

use ktda::tensor::{gradcheck, Tensor};

fn main() -> ktda::Result<()> {
    let x = Tensor::<f64>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?.with_requires_grad(true);
    let w = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.5, -0.5, 2.0, 0.25, -1.0])?.with_requires_grad(true);

    // loss = mean(softmax(gelu(x W)) * target)
    let target = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])?;
    let probs = x.matmul(&w)?.gelu().softmax(1)?;
    let loss = probs.mul(&target)?.mean();
    loss.backward()?;

    println!("loss        {:.6}", loss.item());
    println!("dloss/dx    {:?}", x.grad().unwrap());
    println!("dloss/dW    {:?}", w.grad().unwrap());

    let report = gradcheck("matmul-gelu-softmax", &[x, w], 1e-6, |v| {
        v[0].matmul(&v[1])?.gelu().softmax(1)?.mul(&target).map(|t| t.mean())
    })?;
    println!(
        "finite-difference check: max rel error {:.2e} -> {}",
        report.max_rel_error,
        if report.passed { "pass" } else { "FAIL" }
    );
    Ok(())
}
