//! Numerical suites behind the `verify-equivalence` and `grad-check`
//! commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::{ActivationVariant, Normalization};
use crate::attention::{
    attention_forward, attention_tape, local_attention_forward, qkv_project, AttentionConfig, AttentionParams,
};
use crate::autodiff::{finite_diff_check, finite_diff_check_coords};
use crate::conv::{build_kernel_bank, conv_form_attention, merge_selected_kernels, ConvFormConfig, SelectionRule};
use crate::depthwise::{
    depthwise_attention_forward, depthwise_attention_tape, depthwise_reference, DepthwiseConfig,
    DepthwiseParams,
};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig};
use crate::position::{decomposed_bias_attention, materialize_relative_bias, RelativeBiasTable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
        }
    }

    /// Strictly below the tolerance; a zero tolerance demands exactly 0.
    pub fn passed(&self) -> bool {
        if self.tolerance == 0.0 {
            self.value == 0.0
        } else {
            self.value < self.tolerance
        }
    }
}

/// Largest change of a window's outputs when every token outside that
/// window is perturbed, over the first, middle and last window.
pub fn window_leak<F>(forward: F, x: &Tensor, rule: &SelectionRule, seed: u64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let tokens = x.rows();
    rule.validate(tokens)?;
    let base = forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for anchor in [0, tokens / 2, tokens - 1] {
        let inside = rule.selected_origins(anchor, tokens)?;
        let mut y = x.clone();
        let c = x.cols();
        for i in (0..tokens).filter(|i| !inside.contains(i)) {
            for v in &mut y.data_mut()[i * c..(i + 1) * c] {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        let out = forward(&y)?;
        for &i in &inside {
            for (a, b) in out.row(i).iter().zip(base.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Grid `h×w = n` with `h` the largest divisor not above `√n`.
pub fn grid_for(n: usize) -> (usize, usize) {
    let h = (1..=n).filter(|d| n % d == 0 && d * d <= n).max().unwrap_or(1);
    (h, n / h)
}

fn params_for(c: usize, heads: usize, n: usize, act: ActivationVariant, rng: &mut ChaCha8Rng) -> AttentionParams {
    let mut p = AttentionParams::random(c, heads, rng).with_identity_output();
    if act.normalization() == Normalization::LayerNorm {
        p.ln_affine = Some((Tensor::uniform(&[n], 0.5, 1.5, rng), Tensor::uniform(&[n], -0.2, 0.2, rng)));
    }
    p
}

fn conv_cfg(p: &AttentionParams, act: ActivationVariant) -> ConvFormConfig {
    ConvFormConfig {
        ln_affine: p.ln_affine.as_ref().map(|(g, b)| (g.data().to_vec(), b.data().to_vec())),
        ..ConvFormConfig::new(p.heads, act)
    }
}

/// Attention vs its convolution form (global and windowed), merged-kernel
/// identity, logit-site vs value-site relative bias and the depth-wise
/// block vs its plain-loop reference.
pub fn equivalence_suite(n: usize, c: usize, heads: usize, seed: u64) -> Result<Vec<Check>> {
    if n == 0 || heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("need n > 0 and {c} channels divisible by {heads} heads")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let x = Tensor::uniform(&[n, c], -1.0, 1.0, &mut rng);
    let grid = grid_for(n);

    for act in ActivationVariant::ALL {
        let p = params_for(c, heads, n, act, &mut rng);
        let cfg = AttentionConfig::new(n, c, heads, act)?;
        let direct = attention_forward(&x, &p, &cfg, None)?;
        let (q, k, v) = qkv_project(&x, &p)?;
        let bank = build_kernel_bank(&k, &v)?;
        let conv = conv_form_attention(&q, &bank, &SelectionRule::Global, &conv_cfg(&p, act), None)?;
        checks.push(Check::new(format!("global conv form, {act}"), direct.max_abs_diff(&conv)?, 1e-9));
    }

    if grid.0 % 2 == 0 && grid.1 % 2 == 0 {
        let win = (grid.0 / 2, grid.1 / 2);
        let rule = SelectionRule::local(win.0, win.1, grid.0, grid.1);
        for act in ActivationVariant::ALL {
            let p = params_for(c, heads, win.0 * win.1, act, &mut rng);
            let cfg = AttentionConfig::new(n, c, heads, act)?;
            let direct = local_attention_forward(&x, &p, &cfg, grid, win, None)?;
            let conv_of = |y: &Tensor| -> Result<Tensor> {
                let (q, k, v) = qkv_project(y, &p)?;
                conv_form_attention(&q, &build_kernel_bank(&k, &v)?, &rule, &conv_cfg(&p, act), None)
            };
            checks.push(Check::new(format!("window conv form, {act}"), direct.max_abs_diff(&conv_of(&x)?)?, 1e-9));
            checks.push(Check::new(format!("window locality, {act}"), window_leak(&conv_of, &x, &rule, seed)?, 0.0));
        }
    }

    // Two dynamic convolutions vs one merged kernel per head.
    let p = params_for(c, heads, n, ActivationVariant::SCALING, &mut rng);
    let (q, k, v) = qkv_project(&x, &p)?;
    let bank = build_kernel_bank(&k, &v)?;
    let two_step = conv_form_attention(&q, &bank, &SelectionRule::Global, &ConvFormConfig::new(heads, ActivationVariant::SCALING), None)?;
    let ch = c / heads;
    let mut merged = Tensor::zeros(&[n, c]);
    for h in 0..heads {
        let cols = |t: &Tensor| Tensor::from_fn(&[n, ch], |i| t.at(i / ch, h * ch + i % ch));
        let g = merge_selected_kernels(&cols(&k), &cols(&v), ActivationVariant::SCALING.logit_scale(ch))?;
        let o = cols(&q).matmul(&g)?;
        for i in 0..n {
            for d in 0..ch {
                merged.set(&[i, h * ch + d], o.at(i, d));
            }
        }
    }
    checks.push(Check::new("merged kernel, scaling", two_step.max_abs_diff(&merged)?, 1e-10));

    // Relative bias on the logits vs on the values.
    let table = RelativeBiasTable::random(heads, grid.0, grid.1, false, &mut rng);
    let bias = materialize_relative_bias(grid, &SelectionRule::Global, &table)?;
    for act in [ActivationVariant::SCALING, ActivationVariant::NONE] {
        let p = params_for(c, heads, n, act, &mut rng);
        let cfg = AttentionConfig::new(n, c, heads, act)?;
        let logit_site = attention_forward(&x, &p, &cfg, Some(&bias))?;
        let (q, k, v) = qkv_project(&x, &p)?;
        let value_site = decomposed_bias_attention(&q, &k, &v, &bias, heads, act)?;
        checks.push(Check::new(format!("bias site, {act}"), logit_site.max_abs_diff(&value_site)?, 1e-10));
    }

    let dp = DepthwiseParams::random(c, &mut rng);
    let dcfg = DepthwiseConfig::new(c, heads, SelectionRule::Global, RelativeBiasTable::random(heads, grid.0, grid.1, false, &mut rng));
    let tape_out = depthwise_attention_forward(&x, &dp, &dcfg)?;
    checks.push(Check::new("depth-wise vs loops", tape_out.max_abs_diff(&depthwise_reference(&x, &dp, &dcfg)?)?, 1e-10));
    Ok(checks)
}

/// Finite-difference checks for the attention block under every
/// activation variant, the depth-wise block and `coords` parameters of
/// the toy model.
pub fn gradient_suite(seed: u64, coords: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let (n, c, heads) = (6, 8, 2);
    let x = Tensor::uniform(&[1, n, c], -1.0, 1.0, &mut rng);
    for act in ActivationVariant::ALL {
        let p = params_for(c, heads, n, act, &mut rng);
        let bias = Tensor::uniform(&[heads, n, n], -0.5, 0.5, &mut rng);
        let f = |tape: &mut crate::autodiff::GradTape, xv| {
            let vars = p.bind(tape);
            let rb = tape.constant(bias.clone());
            let o = attention_tape(tape, xv, &vars, heads, act, 1.0, Some(rb))?;
            let sq = tape.mul(o, o)?;
            Ok(tape.sum(sq))
        };
        checks.push(Check::new(format!("attention block, {act}"), finite_diff_check(f, &x, 1e-6)?, 1e-4));
        let wq = p.w_q.clone();
        let g = |tape: &mut crate::autodiff::GradTape, w| {
            let mut vars = p.bind(tape);
            vars.w_q = w;
            let xv = tape.constant(x.clone());
            let o = attention_tape(tape, xv, &vars, heads, act, 1.0, None)?;
            let sq = tape.mul(o, o)?;
            Ok(tape.sum(sq))
        };
        checks.push(Check::new(format!("attention query weights, {act}"), finite_diff_check(g, &wq, 1e-6)?, 1e-4));
    }

    let grid = (3, 3);
    let xd = Tensor::uniform(&[1, 9, c], -1.0, 1.0, &mut rng);
    let dp = DepthwiseParams::random(c, &mut rng);
    let table = RelativeBiasTable::random(heads, grid.0, grid.1, false, &mut rng);
    let dcfg = DepthwiseConfig::new(c, heads, SelectionRule::Global, table.clone());
    let f = |tape: &mut crate::autodiff::GradTape, xv| {
        let vars = dp.bind(tape);
        let t = tape.constant(table.table().clone());
        let o = depthwise_attention_tape(tape, xv, &vars, &dcfg, t)?;
        let sq = tape.mul(o, o)?;
        Ok(tape.sum(sq))
    };
    checks.push(Check::new("depth-wise block", finite_diff_check(f, &xd, 1e-6)?, 1e-4));

    let model = build_model(&ModelConfig::preset("toy-vit")?, seed)?;
    let img = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
    let labels = [seed as usize % 10, (seed as usize + 3) % 10];
    let names = ["blocks.0.attn.q.weight", "blocks.1.attn.k.weight", "blocks.1.mlp.fc1.weight", "head.weight"];
    let per = coords.div_ceil(names.len());
    let mut worst: f64 = 0.0;
    for name in names {
        let idx = model.params().position(name).expect("toy parameter");
        let w = model.params().tensors()[idx].clone();
        let picks: Vec<usize> = (0..per).map(|i| (i * 7919 + seed as usize) % w.numel()).collect();
        let e = finite_diff_check_coords(
            |tape, v| {
                let mut bound = model.bind(tape);
                bound.replace(idx, v);
                let xi = tape.constant(img.clone());
                let logits = model.forward_tape(tape, &bound, xi)?;
                tape.cross_entropy(logits, &labels, 0.1)
            },
            &w,
            1e-5,
            &picks,
        )?;
        worst = worst.max(e);
    }
    checks.push(Check::new(format!("toy model, {} coordinates", per * names.len()), worst, 1e-4));
    Ok(checks)
}
