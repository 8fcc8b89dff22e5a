//! Applies each activation variant to one row of attention logits.

use attnconv::activation::{apply_activation, ActivationVariant};
use attnconv::tensor::Tensor;

fn main() -> attnconv::Result<()> {
    let logits = Tensor::new(vec![1, 5], vec![4.0, -2.0, 0.5, 8.0, -6.0])?;
    let head_width = 4;
    println!("raw: {:?}", logits.data());
    for act in ActivationVariant::ALL {
        let out = apply_activation(&logits, act, head_width)?;
        let row: Vec<String> = out.data().iter().map(|v| format!("{v:+.3}")).collect();
        println!("{:<15} scale {:<6} linear {:<5} [{}]", act.encoding(), act.logit_scale(head_width), act.is_linear(), row.join(", "));
    }
    Ok(())
}
