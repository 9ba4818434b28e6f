//! Reverse-mode autodiff on a tape: forward pass, backward pass, and a
//! finite-difference check of the result.

use mango::tensor::{grad_check, Tape, Tensor};

fn main() -> mango::Result<()> {
    let w = Tensor::<f64>::new(vec![2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.5])?;
    let x = Tensor::<f64>::new(vec![4, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.0, 2.0, -2.0])?;

    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let xv = tape.constant(x.clone());
    let h = tape.matmul(xv, wv)?;
    let a = tape.leaky_relu(h, 0.1);
    let sq = tape.mul(a, a)?;
    let loss = tape.mean_all(sq)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    println!("dL/dW = {:?}", grads.get(wv).map(|g| g.data().to_vec()));

    let report = grad_check(
        |tape, v| {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, v[0])?;
            let a = tape.leaky_relu(h, 0.1);
            let sq = tape.mul(a, a)?;
            tape.mean_all(sq)
        },
        &[w],
        1e-6,
    )?;
    println!("max relative error vs central differences: {:.2e}", report.max_rel_error);
    Ok(())
}
