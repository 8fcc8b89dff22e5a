//! Runs self-attention directly and as a dynamic 1x1 convolution over a
//! kernel bank, globally and with a local window, and prints the gap.

use attnconv::activation::ActivationVariant;
use attnconv::attention::{attention_forward, local_attention_forward, qkv_project, AttentionConfig, AttentionParams};
use attnconv::conv::{build_kernel_bank, conv_form_attention, ConvFormConfig, SelectionRule};
use attnconv::tensor::Tensor;
use rand::SeedableRng;

fn main() -> attnconv::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let (grid, window, c, heads) = ((4, 4), (2, 2), 16, 4);
    let n = grid.0 * grid.1;
    let x = Tensor::uniform(&[n, c], -1.0, 1.0, &mut rng);
    // identity output projection so both paths end at the same place
    let p = AttentionParams::random(c, heads, &mut rng).with_identity_output();
    let (q, k, v) = qkv_project(&x, &p)?;
    let bank = build_kernel_bank(&k, &v)?;
    println!("bank: {} kernel pairs, {} -> 1 -> {}", bank.len(), bank.c_in(), bank.c_out());

    for act in [ActivationVariant::SOFTMAX, ActivationVariant::SCALING_RELU] {
        let cfg = AttentionConfig::new(n, c, heads, act)?;
        let conv_cfg = ConvFormConfig::new(heads, act);
        let global = attention_forward(&x, &p, &cfg, None)?;
        let as_conv = conv_form_attention(&q, &bank, &SelectionRule::Global, &conv_cfg, None)?;
        let local = local_attention_forward(&x, &p, &cfg, grid, window, None)?;
        let rule = SelectionRule::local(window.0, window.1, grid.0, grid.1);
        let as_local_conv = conv_form_attention(&q, &bank, &rule, &conv_cfg, None)?;
        println!(
            "{act:<13} global max |Δ| = {:.2e}   window max |Δ| = {:.2e}",
            global.max_abs_diff(&as_conv)?,
            local.max_abs_diff(&as_local_conv)?
        );
    }
    Ok(())
}
