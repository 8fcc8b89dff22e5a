//! Prints GFLOPs / MParams / MActs for the full-size presets under every
//! activation and kernel type compared in the depth-wise study.

use attnconv::activation::ActivationVariant;
use attnconv::complexity::{count, format_table, savings};
use attnconv::model::{AttentionKind, ModelConfig, PositionMode};

fn main() -> attnconv::Result<()> {
    let rows: Vec<(&str, ActivationVariant, AttentionKind, PositionMode)> = vec![
        ("deit-s", ActivationVariant::SOFTMAX, AttentionKind::Standard, PositionMode::Abs),
        ("deit-s", ActivationVariant::SCALING, AttentionKind::Standard, PositionMode::Abs),
        ("deit-s", ActivationVariant::SCALING, AttentionKind::Depthwise, PositionMode::Abs),
        ("deit-s", ActivationVariant::SOFTMAX, AttentionKind::Standard, PositionMode::Rel),
        ("deit-s", ActivationVariant::SCALING, AttentionKind::Standard, PositionMode::Rel),
        ("deit-s", ActivationVariant::SCALING, AttentionKind::Depthwise, PositionMode::Rel),
        ("deit-b", ActivationVariant::SOFTMAX, AttentionKind::Standard, PositionMode::Abs),
        ("deit-b", ActivationVariant::SOFTMAX, AttentionKind::Standard, PositionMode::Rel),
        ("deit-b", ActivationVariant::SCALING, AttentionKind::Depthwise, PositionMode::Rel),
        ("swin-t", ActivationVariant::SOFTMAX, AttentionKind::Standard, PositionMode::Rel),
        ("swin-t", ActivationVariant::SCALING, AttentionKind::Standard, PositionMode::Rel),
        ("swin-t", ActivationVariant::SCALING, AttentionKind::Depthwise, PositionMode::Rel),
        ("swin-b", ActivationVariant::SOFTMAX, AttentionKind::Standard, PositionMode::Rel),
        ("swin-b", ActivationVariant::SCALING, AttentionKind::Standard, PositionMode::Rel),
        ("swin-b", ActivationVariant::SCALING, AttentionKind::Depthwise, PositionMode::Rel),
    ];
    let mut entries = Vec::new();
    for (preset, act, kind, pos) in rows {
        let cfg = ModelConfig::preset(preset)?
            .with_activation(act)
            .with_attention(kind)
            .with_position(pos);
        let report = count(&cfg, 224)?;
        entries.push((cfg, report));
    }
    print!("{}", format_table(&entries));

    let s = savings(&entries[4].1, &entries[5].1)?;
    println!("\ndeit-s rel, scaling -> depth-wise: flops -{:.1}%", 100.0 * s.flops);
    let s = savings(&entries[12].1, &entries[14].1)?;
    println!("swin-b, softmax -> depth-wise: params -{:.1}%", 100.0 * s.params);
    Ok(())
}
