//! Reverse-mode gradients on the tape compared with central differences,
//! first on a small expression, then through the full suite.

use attnconv::autodiff::{finite_diff_check, GradTape};
use attnconv::tensor::Tensor;
use attnconv::verify::gradient_suite;

fn main() -> attnconv::Result<()> {
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    let sm = tape.softmax(x, 1.0)?;
    let sq = tape.mul(sm, x)?;
    let loss = tape.sum(sq);
    tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    println!("grad = {:?}", tape.grad(x).unwrap());

    let x0 = tape.value(x).clone();
    let err = finite_diff_check(
        |t, v| {
            let s = t.softmax(v, 1.0)?;
            let m = t.mul(s, v)?;
            Ok(t.sum(m))
        },
        &x0,
        1e-6,
    )?;
    println!("relative error vs central differences: {err:.2e}\n");

    for check in gradient_suite(0, 200)? {
        println!("{:<40} {:.2e} {}", check.name, check.value, if check.passed() { "ok" } else { "FAIL" });
    }
    Ok(())
}
