//! Trains toy-vit under several attention variants on identical data and
//! seed, and prints the comparative CSV.
//!
//! `cargo run --release --example ablation -- [epochs] [variants...]`

use attnconv::data::{generate_synthetic, Split, SyntheticConfig};
use attnconv::model::ModelConfig;
use attnconv::train::{ablate, TrainConfig};

fn main() -> attnconv::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let variants: Vec<&str> = if args.len() > 1 {
        args[1..].iter().map(String::as_str).collect()
    } else {
        vec!["softmax", "scaling+relu", "depthwise"]
    };
    let train_set = generate_synthetic(&SyntheticConfig::new(512, 1000), Split::Train)?;
    let val_set = generate_synthetic(&SyntheticConfig::new(256, 2000), Split::Val)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let bundle = ablate(&variants, &ModelConfig::preset("toy-vit")?, &train_set, Some(&val_set), &cfg)?;
    print!("{}", bundle.to_csv());
    Ok(())
}
