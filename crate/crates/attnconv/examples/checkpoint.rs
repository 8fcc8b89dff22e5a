//! Builds a model from a preset, saves it, loads it back and classifies a
//! batch with both copies.

use attnconv::model::{build_model, forward_classify, Model, ModelConfig, PositionMode};
use attnconv::tensor::Tensor;
use rand::SeedableRng;

fn main() -> attnconv::Result<()> {
    let cfg = ModelConfig::preset("toy-vit")?.with_position(PositionMode::Rel);
    let model = build_model(&cfg, 0)?;
    println!("{}: {} parameters in {} tensors", cfg.name, model.param_count(), model.params().len());

    let dir = std::env::temp_dir().join("attnconv_example_ckpt");
    model.save(&dir)?;
    let loaded = Model::load(&dir)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
    let a = forward_classify(&model, &images)?;
    let b = forward_classify(&loaded, &images)?;
    println!("logits {:?}, identical after reload: {}", a.shape(), a == b);
    std::fs::remove_dir_all(dir)?;
    Ok(())
}
