use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attnconv::activation::{ActivationVariant, Normalization};
use attnconv::attention::{attention_forward, qkv_project, softmax, AttentionConfig, AttentionParams};
use attnconv::complexity::count;
use attnconv::conv::{build_kernel_bank, conv_form_attention, ConvFormConfig, SelectionRule, StaticKernelBank};
use attnconv::data::Dataset;
use attnconv::data::Split;
use attnconv::depthwise::DepthwiseParams;
use attnconv::model::{AttentionKind, ModelConfig, PositionMode, PRESETS};
use attnconv::position::{decomposed_bias_attention, materialize_relative_bias, RelativeBiasTable};
use attnconv::tensor::Tensor;
use attnconv::train::{EpochRecord, TrainLog};
use attnconv::verify::window_leak;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn variant() -> impl Strategy<Value = ActivationVariant> {
    (0usize..6).prop_map(|i| ActivationVariant::ALL[i])
}

fn params_for(c: usize, h: usize, scope: usize, act: ActivationVariant, r: &mut ChaCha8Rng) -> AttentionParams {
    let mut p = AttentionParams::random(c, h, r);
    if act.normalization() == Normalization::LayerNorm {
        p.ln_affine = Some((Tensor::uniform(&[scope], 0.5, 1.5, r), Tensor::uniform(&[scope], -0.2, 0.2, r)));
    }
    p
}

fn conv_cfg(p: &AttentionParams, act: ActivationVariant) -> ConvFormConfig {
    ConvFormConfig {
        ln_affine: p.ln_affine.as_ref().map(|(g, b)| (g.data().to_vec(), b.data().to_vec())),
        ..ConvFormConfig::new(p.heads, act)
    }
}

fn with_output(o: &Tensor, p: &AttentionParams) -> Tensor {
    let mut y = o.matmul(&p.w_o).unwrap();
    let c = y.cols();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += p.b_o.data()[i % c];
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::uniform(&[m, k], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[k, n], -1.0, 1.0, &mut r);
        let got = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                let mut mag = 0.0;
                for t in 0..k {
                    s += a.at(i, t) * b.at(t, j);
                    mag += (a.at(i, t) * b.at(t, j)).abs();
                }
                prop_assert!((got.at(i, j) - s).abs() <= 1e-12 * mag.max(1e-300));
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[rows, cols], -5.0, 5.0, &mut r);
        let s = softmax(&x, 1.0).unwrap();
        for i in 0..rows {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.row(i).iter().all(|&v| v > 0.0 && v < 1.0 || cols == 1 && v == 1.0));
        }
        let shifted = softmax(&x.map(|v| v + shift), 1.0).unwrap();
        prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn forward_is_bitwise_deterministic(n in 2usize..20, seed in any::<u64>(), act in variant()) {
        let mut r = rng(seed);
        let p = params_for(8, 2, n, act, &mut r);
        let x = Tensor::uniform(&[n, 8], -1.0, 1.0, &mut r);
        let cfg = AttentionConfig::new(n, 8, 2, act).unwrap();
        prop_assert_eq!(attention_forward(&x, &p, &cfg, None).unwrap(), attention_forward(&x, &p, &cfg, None).unwrap());
    }

    #[test]
    fn softmax_attention_is_permutation_equivariant(perm in Just((0..9usize).collect::<Vec<_>>()).prop_shuffle(), seed in any::<u64>()) {
        let n = perm.len();
        let mut r = rng(seed);
        let p = AttentionParams::random(8, 2, &mut r);
        let x = Tensor::uniform(&[n, 8], -1.0, 1.0, &mut r);
        let px = Tensor::from_fn(&[n, 8], |i| x.at(perm[i / 8], i % 8));
        let cfg = AttentionConfig::new(n, 8, 2, ActivationVariant::SOFTMAX).unwrap();
        let o = attention_forward(&x, &p, &cfg, None).unwrap();
        let po = attention_forward(&px, &p, &cfg, None).unwrap();
        for i in 0..n {
            for j in 0..8 {
                prop_assert!((po.at(i, j) - o.at(perm[i], j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_form_matches_attention_for_every_variant(n in 1usize..=40, heads in prop::sample::select(vec![1usize, 2, 4]), per in 2usize..=8, act in variant(), seed in any::<u64>()) {
        let c = heads * per;
        let mut r = rng(seed);
        let p = params_for(c, heads, n, act, &mut r);
        let x = Tensor::uniform(&[n, c], -1.0, 1.0, &mut r);
        let direct = attention_forward(&x, &p, &AttentionConfig::new(n, c, heads, act).unwrap(), None).unwrap();
        let (q, k, v) = qkv_project(&x, &p).unwrap();
        let conv = conv_form_attention(&q, &build_kernel_bank(&k, &v).unwrap(), &SelectionRule::Global, &conv_cfg(&p, act), None).unwrap();
        prop_assert!(direct.max_abs_diff(&with_output(&conv, &p)).unwrap() < 1e-9);
    }

    #[test]
    fn window_rule_never_reads_outside_its_window(wh in 1usize..=3, ww in 1usize..=3, mh in 1usize..=3, mw in 1usize..=3, act in variant(), seed in any::<u64>()) {
        let (gh, gw) = (wh * mh, ww * mw);
        let mut r = rng(seed);
        let p = params_for(8, 2, wh * ww, act, &mut r);
        let x = Tensor::uniform(&[gh * gw, 8], -1.0, 1.0, &mut r);
        let rule = SelectionRule::local(wh, ww, gh, gw);
        let leak = window_leak(|y| {
            let (q, k, v) = qkv_project(y, &p)?;
            conv_form_attention(&q, &build_kernel_bank(&k, &v)?, &rule, &conv_cfg(&p, act), None)
        }, &x, &rule, seed).unwrap();
        prop_assert_eq!(leak, 0.0);
    }

    #[test]
    fn identity_soft_projection_is_global(n in 1usize..=20, act in variant(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = params_for(8, 2, n, act, &mut r);
        let x = Tensor::uniform(&[n, 8], -1.0, 1.0, &mut r);
        let (q, k, v) = qkv_project(&x, &p).unwrap();
        let bank = build_kernel_bank(&k, &v).unwrap();
        let global = conv_form_attention(&q, &bank, &SelectionRule::Global, &conv_cfg(&p, act), None).unwrap();
        let soft = SelectionRule::SoftProjection { projection: Tensor::eye(n) };
        let projected = conv_form_attention(&q, &bank, &soft, &conv_cfg(&p, act), None).unwrap();
        prop_assert_eq!(global, projected);
    }

    #[test]
    fn static_bank_coefficients_sum_to_one(k in 1usize..8, c in 1usize..8, n in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let bank = StaticKernelBank::random(k, c, c, &mut r);
        let x = Tensor::uniform(&[n, c], -3.0, 3.0, &mut r);
        let coef = bank.coefficients(&x).unwrap();
        prop_assert!((coef.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bias_can_move_to_values_for_linear_variants(gh in 1usize..=5, gw in 1usize..=5, linear in any::<bool>(), seed in any::<u64>()) {
        let act = if linear { ActivationVariant::SCALING } else { ActivationVariant::NONE };
        let n = gh * gw;
        let mut r = rng(seed);
        let p = AttentionParams::random(8, 2, &mut r);
        let x = Tensor::uniform(&[n, 8], -1.0, 1.0, &mut r);
        let table = RelativeBiasTable::random(2, gh, gw, false, &mut r);
        let bias = materialize_relative_bias((gh, gw), &SelectionRule::Global, &table).unwrap();
        let logits_site = attention_forward(&x, &p, &AttentionConfig::new(n, 8, 2, act).unwrap(), Some(&bias)).unwrap();
        let (q, k, v) = qkv_project(&x, &p).unwrap();
        let values_site = with_output(&decomposed_bias_attention(&q, &k, &v, &bias, 2, act).unwrap(), &p);
        prop_assert!(logits_site.max_abs_diff(&values_site).unwrap() < 1e-10);
    }

    #[test]
    fn depthwise_block_has_fewer_parameters(heads in 1usize..5, per in 1usize..9, seed in any::<u64>()) {
        let c = heads * per;
        let mut r = rng(seed);
        let dw = DepthwiseParams::random(c, &mut r).param_count();
        prop_assert!(dw < 4 * c * c + 4 * c);
        prop_assert_eq!(dw, 3 * c * c + 3 * c);
    }

    #[test]
    fn log_csv_round_trips(rows in prop::collection::vec((0.0f64..10.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..1e-2), 1..20)) {
        let log = TrainLog {
            records: rows
                .iter()
                .enumerate()
                .map(|(i, &(l, ta, va, lr))| EpochRecord { epoch: i + 1, train_loss: l, train_acc: ta, val_acc: va, lr, wall_time: i as f64 * 0.5 })
                .collect(),
        };
        prop_assert_eq!(TrainLog::from_csv(&log.to_csv()).unwrap(), log);
    }

    #[test]
    fn dataset_bytes_round_trip(m in 1usize..6, s in 1usize..6, classes in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let images = Tensor::uniform(&[m, 3, s, s], -0.4, 0.4, &mut r);
        let labels: Vec<usize> = (0..m).map(|i| i % classes).collect();
        let ds = Dataset::new(images, labels, classes, Split::Train).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        prop_assert_eq!(back.images(), ds.images());
        prop_assert_eq!(back.labels(), ds.labels());
    }
}

#[test]
fn relative_bias_breaks_permutation_equivariance() {
    let mut r = rng(9);
    let p = AttentionParams::random(8, 2, &mut r);
    let x = Tensor::uniform(&[9, 8], -1.0, 1.0, &mut r);
    let table = RelativeBiasTable::random(2, 3, 3, false, &mut r);
    let bias = materialize_relative_bias((3, 3), &SelectionRule::Global, &table).unwrap();
    let cfg = AttentionConfig::new(9, 8, 2, ActivationVariant::SOFTMAX).unwrap();
    // swap a corner and the centre token
    let perm = [4usize, 1, 2, 3, 0, 5, 6, 7, 8];
    let px = Tensor::from_fn(&[9, 8], |i| x.at(perm[i / 8], i % 8));
    let o = attention_forward(&x, &p, &cfg, Some(&bias)).unwrap();
    let po = attention_forward(&px, &p, &cfg, Some(&bias)).unwrap();
    let moved = (0..9).flat_map(|i| (0..8).map(move |j| (i, j))).map(|(i, j)| (po.at(i, j) - o.at(perm[i], j)).abs()).fold(0.0, f64::max);
    assert!(moved > 1e-6, "{moved}");
}

#[test]
fn depthwise_reduces_every_preset_on_every_metric() {
    for name in PRESETS {
        let base = ModelConfig::preset(name).unwrap().with_position(PositionMode::Rel);
        let std = count(&base.clone().with_activation(ActivationVariant::SCALING), base.image_size).unwrap();
        let dw = count(&base.clone().with_activation(ActivationVariant::SCALING).with_attention(AttentionKind::Depthwise), base.image_size).unwrap();
        assert!(dw.mparams < std.mparams && dw.gflops < std.gflops && dw.macts < std.macts, "{name}");
    }
}

#[test]
fn only_position_mode_moves_parameter_counts() {
    for name in PRESETS {
        let base = ModelConfig::preset(name).unwrap();
        let size = base.image_size;
        let counts: Vec<usize> = ActivationVariant::ALL
            .iter()
            .filter(|a| a.normalization() != Normalization::LayerNorm)
            .map(|&a| count(&base.clone().with_activation(a), size).unwrap().params())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{name}: {counts:?}");
    }
    let abs = count(&ModelConfig::preset("deit-s").unwrap().with_position(PositionMode::Abs), 224).unwrap();
    let rel = count(&ModelConfig::preset("deit-s").unwrap().with_position(PositionMode::Rel), 224).unwrap();
    assert!(((abs.mparams - rel.mparams) - (22.051 - 22.028)).abs() < 0.005 * 22.0);
}
