//! Depth-wise attention: the selected key kernels are averaged into one
//! per-channel kernel, plus a positional term. Compares it to the
//! standard block and checks window locality.

use attnconv::conv::SelectionRule;
use attnconv::depthwise::{depthwise_attention_forward, depthwise_locality_check, depthwise_reference, DepthwiseConfig, DepthwiseParams};
use attnconv::position::RelativeBiasTable;
use attnconv::tensor::Tensor;
use rand::SeedableRng;

fn main() -> attnconv::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (c, heads) = (32, 4);
    let standard = 4 * c * c + 4 * c;
    let p = DepthwiseParams::random(c, &mut rng);
    println!("parameters: standard {standard}, depth-wise {}", p.param_count());

    let x = Tensor::uniform(&[64, c], -1.0, 1.0, &mut rng);
    for per_channel in [false, true] {
        let rows = if per_channel { c } else { heads };
        let table = RelativeBiasTable::random(rows, 4, 4, false, &mut rng);
        let cfg = DepthwiseConfig::new(c, heads, SelectionRule::local(4, 4, 8, 8), table);
        let out = depthwise_attention_forward(&x, &p, &cfg)?;
        let loops = depthwise_reference(&x, &p, &cfg)?;
        println!(
            "{:?} bias, 4x4 windows on 8x8: vs loops {:.2e}, local: {}",
            cfg.granularity()?,
            out.max_abs_diff(&loops)?,
            depthwise_locality_check(&p, &cfg, &x)?
        );
    }

    let mut cfg = DepthwiseConfig::new(c, heads, SelectionRule::Global, RelativeBiasTable::zeros(heads, 8, 8, false));
    cfg.rel_table = None;
    if let Err(e) = depthwise_attention_forward(&x, &p, &cfg) {
        println!("without a position table: {e}");
    }
    Ok(())
}
