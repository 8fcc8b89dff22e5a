//! Trains toy-vit on the synthetic 10-class set and prints the epoch log.
//!
//! `cargo run --release --example train_toy -- [variant] [epochs] [seed]`

use attnconv::data::{generate_synthetic, Split, SyntheticConfig};
use attnconv::model::ModelConfig;
use attnconv::train::{apply_variant, train, TrainConfig};
use attnconv::model::build_model;

fn main() -> attnconv::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = args.first().map(String::as_str).unwrap_or("softmax");
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let train_set = generate_synthetic(&SyntheticConfig::new(512, 1000 + seed), Split::Train)?;
    let val_set = generate_synthetic(&SyntheticConfig::new(256, 2000 + seed), Split::Val)?;
    let cfg = apply_variant(&ModelConfig::preset("toy-vit")?, variant)?;
    let mut model = build_model(&cfg, seed)?;
    let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let log = train(&mut model, &train_set, Some(&val_set), &tc)?;
    print!("{}", log.to_csv());
    Ok(())
}
