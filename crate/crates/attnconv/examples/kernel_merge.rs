//! Without a non-linearity on the logits, the two dynamic convolutions
//! collapse into one merged `C_h x C_h` kernel per head.

use attnconv::activation::ActivationVariant;
use attnconv::attention::{qkv_project, AttentionParams};
use attnconv::conv::{build_kernel_bank, conv_form_attention, merge_selected_kernels, ConvFormConfig, SelectionRule};
use attnconv::tensor::Tensor;
use rand::SeedableRng;

fn main() -> attnconv::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (n, c) = (49, 8);
    let x = Tensor::uniform(&[n, c], -1.0, 1.0, &mut rng);
    let p = AttentionParams::random(c, 1, &mut rng);
    let (q, k, v) = qkv_project(&x, &p)?;

    let act = ActivationVariant::SCALING;
    let two_step = conv_form_attention(&q, &build_kernel_bank(&k, &v)?, &SelectionRule::Global, &ConvFormConfig::new(1, act), None)?;
    let g = merge_selected_kernels(&k, &v, act.logit_scale(c))?;
    let merged = q.matmul(&g)?;
    println!("merged kernel {:?}, two-step vs merged max |Δ| = {:.2e}", g.shape(), two_step.max_abs_diff(&merged)?);
    println!("cost per query: two-step {} MACs, merged {} MACs", 2 * n * c, c * c);
    Ok(())
}
