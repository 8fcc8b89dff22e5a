//! Generates the seeded 10-class plane-wave dataset, writes it to disk and
//! reads it back.

use attnconv::data::{class_frequencies, generate_synthetic, load_dataset, Split, SyntheticConfig};

fn main() -> attnconv::Result<()> {
    let cfg = SyntheticConfig::new(512, 0);
    let ds = generate_synthetic(&cfg, Split::Train)?;
    println!("{} images of {}x{}, {} classes", ds.len(), ds.image_size(), ds.image_size(), ds.num_classes());
    println!("class frequencies (fx, fy): {:?}", class_frequencies(cfg.num_classes));
    println!("channel means: {:?}", ds.channel_means());

    let mut counts = vec![0; ds.num_classes()];
    ds.labels().iter().for_each(|&l| counts[l] += 1);
    println!("per-class counts: {counts:?}");

    let path = std::env::temp_dir().join("attnconv_example.atcv");
    ds.save(&path)?;
    let back = load_dataset(&path)?;
    println!("round trip identical: {}", back.images() == ds.images() && back.labels() == ds.labels());
    std::fs::remove_file(path)?;
    Ok(())
}
