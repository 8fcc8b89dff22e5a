//! Builds a relative position table, shows the bias it places on a 3x3
//! grid, and checks that for linear activations the bias can be moved
//! from the logits onto the values.

use attnconv::activation::ActivationVariant;
use attnconv::attention::{attention_forward, qkv_project, AttentionConfig, AttentionParams};
use attnconv::conv::SelectionRule;
use attnconv::position::{bias_application_site, decomposed_bias_attention, materialize_relative_bias, RelativeBiasTable};
use attnconv::tensor::Tensor;
use rand::SeedableRng;

fn main() -> attnconv::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let grid = (3, 3);
    let table = RelativeBiasTable::random(1, grid.0, grid.1, false, &mut rng);
    println!("table: {} row x {} cells", table.rows(), table.cells());
    let bias = materialize_relative_bias(grid, &SelectionRule::Global, &table)?;
    println!("bias seen by the centre token, by key position:");
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:+.3}", bias.get(&[0, 4, r * 3 + c]))).collect();
        println!("  {}", row.join(" "));
    }

    let x = Tensor::uniform(&[9, 8], -1.0, 1.0, &mut rng);
    let p = AttentionParams::random(8, 1, &mut rng).with_identity_output();
    let (q, k, v) = qkv_project(&x, &p)?;
    for act in ActivationVariant::ALL {
        let site = bias_application_site(act);
        let on_logits = attention_forward(&x, &p, &AttentionConfig::new(9, 8, 1, act)?, Some(&bias))?;
        match decomposed_bias_attention(&q, &k, &v, &bias, 1, act) {
            Ok(on_values) => println!("{act:<15} {site:?}: max |Δ| = {:.2e}", on_logits.max_abs_diff(&on_values)?),
            Err(_) => println!("{act:<15} {site:?}"),
        }
    }
    Ok(())
}
