//! Self-attention as static + dynamic 1×1 convolutions.
//!
//! After the query/key/value projections (static 1×1 convolutions), every
//! spatial location contributes one key kernel (`C_in → 1`) and one value
//! kernel (`1 → C_out`) to a per-image [`KernelBank`]. A [`SelectionRule`]
//! decides which kernels each query location uses; the selected key kernels
//! project the query to scalars, the activation is applied across those
//! scalars, and the paired value kernels project them back and are summed.
//!
//! Softmax also biases selection towards key kernels with high cosine
//! similarity to the query; that effect is qualitative and not modelled.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{activate_row, ActivationVariant};
use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Per-image bank of paired key/value kernels, one pair per location.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    key_kernels: Tensor,
    value_kernels: Tensor,
    origin: Vec<usize>,
}

impl KernelBank {
    pub fn key_kernels(&self) -> &Tensor {
        &self.key_kernels
    }

    pub fn value_kernels(&self) -> &Tensor {
        &self.value_kernels
    }

    /// Source location of each kernel pair.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn c_in(&self) -> usize {
        self.key_kernels.cols()
    }

    pub fn c_out(&self) -> usize {
        self.value_kernels.cols()
    }

    /// Writes `keys.ten`, `values.ten` and a `bank.json` sidecar holding the
    /// origins and the selection rule.
    pub fn save(&self, dir: impl AsRef<Path>, rule: &SelectionRule) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.key_kernels.save(dir.join("keys.ten"))?;
        self.value_kernels.save(dir.join("values.ten"))?;
        let meta = BankMeta {
            schema_version: 1,
            origins: self.origin.clone(),
            rule: RuleMeta::from_rule(rule),
        };
        match rule {
            SelectionRule::SoftProjection { projection } => projection.save(dir.join("projection.ten"))?,
            SelectionRule::StaticSoft(bank) => {
                bank.kernels.save(dir.join("static_kernels.ten"))?;
                bank.coef_w.save(dir.join("coef_w.ten"))?;
                bank.coef_b.save(dir.join("coef_b.ten"))?;
            }
            _ => {}
        }
        fs::write(dir.join("bank.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(KernelBank, SelectionRule)> {
        let dir = dir.as_ref();
        let meta: BankMeta = serde_json::from_str(&fs::read_to_string(dir.join("bank.json"))?)?;
        let keys = Tensor::load(dir.join("keys.ten"))?;
        let values = Tensor::load(dir.join("values.ten"))?;
        let mut bank = build_kernel_bank(&keys, &values)?;
        if meta.origins.len() != bank.len() {
            return Err(Error::Config("bank.json origin count does not match kernels".into()));
        }
        bank.origin = meta.origins;
        let rule = match meta.rule {
            RuleMeta::Global => SelectionRule::Global,
            RuleMeta::LocalWindow {
                window_h,
                window_w,
                grid_h,
                grid_w,
            } => SelectionRule::LocalWindow {
                window_h,
                window_w,
                grid_h,
                grid_w,
            },
            RuleMeta::SoftProjection { .. } => SelectionRule::SoftProjection {
                projection: Tensor::load(dir.join("projection.ten"))?,
            },
            RuleMeta::StaticSoft { .. } => SelectionRule::StaticSoft(StaticKernelBank {
                kernels: Tensor::load(dir.join("static_kernels.ten"))?,
                coef_w: Tensor::load(dir.join("coef_w.ten"))?,
                coef_b: Tensor::load(dir.join("coef_b.ten"))?,
            }),
        };
        Ok((bank, rule))
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    schema_version: u32,
    origins: Vec<usize>,
    rule: RuleMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RuleMeta {
    Global,
    LocalWindow {
        window_h: usize,
        window_w: usize,
        grid_h: usize,
        grid_w: usize,
    },
    SoftProjection {
        target_count: usize,
    },
    StaticSoft {
        bank_size: usize,
    },
}

impl RuleMeta {
    fn from_rule(rule: &SelectionRule) -> Self {
        match rule {
            SelectionRule::Global => RuleMeta::Global,
            &SelectionRule::LocalWindow {
                window_h,
                window_w,
                grid_h,
                grid_w,
            } => RuleMeta::LocalWindow {
                window_h,
                window_w,
                grid_h,
                grid_w,
            },
            SelectionRule::SoftProjection { projection } => RuleMeta::SoftProjection {
                target_count: projection.rows(),
            },
            SelectionRule::StaticSoft(b) => RuleMeta::StaticSoft { bank_size: b.len() },
        }
    }
}

/// Row `i` of each feature map becomes kernel `i` with origin `i`.
pub fn build_kernel_bank(k_feat: &Tensor, v_feat: &Tensor) -> Result<KernelBank> {
    if k_feat.rank() != 2 || v_feat.rank() != 2 || k_feat.rows() != v_feat.rows() {
        return Err(Error::dim("build_kernel_bank", k_feat.shape(), v_feat.shape()));
    }
    Ok(KernelBank {
        key_kernels: k_feat.clone(),
        value_kernels: v_feat.clone(),
        origin: (0..k_feat.rows()).collect(),
    })
}

/// Which bank kernels a query location uses.
#[derive(Clone, Debug, PartialEq)]
pub enum SelectionRule {
    /// Every kernel in the bank (global attention).
    Global,
    /// Kernels whose origin lies in the query's non-overlapping window.
    LocalWindow {
        window_h: usize,
        window_w: usize,
        grid_h: usize,
        grid_w: usize,
    },
    /// `m` kernels, each a fixed linear combination of all `N`
    /// (`projection: [m×N]`, shared by keys and values).
    SoftProjection { projection: Tensor },
    /// Input-predicted combination of a learned static bank.
    StaticSoft(StaticKernelBank),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankKind {
    Dynamic,
    Static,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionKind {
    HardAll,
    HardLocal,
    Soft,
    None,
}

impl SelectionRule {
    pub fn local(window_h: usize, window_w: usize, grid_h: usize, grid_w: usize) -> Self {
        SelectionRule::LocalWindow {
            window_h,
            window_w,
            grid_h,
            grid_w,
        }
    }

    pub fn validate(&self, tokens: usize) -> Result<()> {
        match self {
            SelectionRule::Global => Ok(()),
            &SelectionRule::LocalWindow {
                window_h,
                window_w,
                grid_h,
                grid_w,
            } => {
                if window_h == 0 || window_w == 0 || grid_h % window_h != 0 || grid_w % window_w != 0 {
                    return Err(Error::Config(format!(
                        "{window_h}x{window_w} windows do not tile a {grid_h}x{grid_w} grid"
                    )));
                }
                if grid_h * grid_w != tokens {
                    return Err(Error::Config(format!(
                        "grid {grid_h}x{grid_w} does not match {tokens} tokens"
                    )));
                }
                Ok(())
            }
            SelectionRule::SoftProjection { projection } => {
                if projection.rank() != 2 || projection.cols() != tokens {
                    return Err(Error::dim("soft projection", projection.shape(), &[projection.rows(), tokens]));
                }
                if !projection.is_finite() {
                    return Err(Error::Config("soft projection weights must be finite".into()));
                }
                Ok(())
            }
            SelectionRule::StaticSoft(bank) => bank.validate(),
        }
    }

    /// Origins selected for `location` under a hard rule, in ascending order.
    pub fn selected_origins(&self, location: usize, tokens: usize) -> Result<Vec<usize>> {
        self.validate(tokens)?;
        if location >= tokens {
            return Err(Error::Contract(format!("location {location} >= {tokens}")));
        }
        match self {
            SelectionRule::Global => Ok((0..tokens).collect()),
            &SelectionRule::LocalWindow {
                window_h,
                window_w,
                grid_w,
                ..
            } => {
                let (r, c) = (location / grid_w, location % grid_w);
                let (r0, c0) = (r / window_h * window_h, c / window_w * window_w);
                Ok((r0..r0 + window_h)
                    .flat_map(|rr| (c0..c0 + window_w).map(move |cc| rr * grid_w + cc))
                    .collect())
            }
            _ => Err(Error::Config("soft rules select combinations, not origins".into())),
        }
    }

    pub fn bank_kind(&self) -> BankKind {
        match self {
            SelectionRule::StaticSoft(_) => BankKind::Static,
            _ => BankKind::Dynamic,
        }
    }

    pub fn selection_kind(&self) -> SelectionKind {
        match self {
            SelectionRule::Global => SelectionKind::HardAll,
            SelectionRule::LocalWindow { .. } => SelectionKind::HardLocal,
            _ => SelectionKind::Soft,
        }
    }
}

/// Kernels chosen for one query location.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedKernels {
    pub keys: Tensor,
    pub values: Tensor,
    /// Origins for hard rules; `None` for soft combinations.
    pub origins: Option<Vec<usize>>,
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.cols();
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::from_parts(vec![rows.len(), w], data)
}

pub fn select_kernels(bank: &KernelBank, rule: &SelectionRule, location: usize) -> Result<SelectedKernels> {
    let n = bank.len();
    match rule {
        SelectionRule::Global | SelectionRule::LocalWindow { .. } => {
            let wanted = rule.selected_origins(location, n)?;
            // Kernels are looked up by origin, not by bank position.
            let mut pos = vec![usize::MAX; n];
            for (i, &o) in bank.origin.iter().enumerate() {
                pos[o] = i;
            }
            let rows: Vec<usize> = wanted.iter().map(|&o| pos[o]).collect();
            Ok(SelectedKernels {
                keys: gather_rows(&bank.key_kernels, &rows),
                values: gather_rows(&bank.value_kernels, &rows),
                origins: Some(wanted),
            })
        }
        SelectionRule::SoftProjection { projection } => {
            rule.validate(n)?;
            if location >= n {
                return Err(Error::Contract(format!("location {location} >= {n}")));
            }
            Ok(SelectedKernels {
                keys: projection.matmul(&bank.key_kernels)?,
                values: projection.matmul(&bank.value_kernels)?,
                origins: None,
            })
        }
        SelectionRule::StaticSoft(_) => Err(Error::Config(
            "static-soft selection draws from a static bank; use dconv_reference".into(),
        )),
    }
}

/// Settings of the convolution-form evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFormConfig {
    pub heads: usize,
    pub activation: ActivationVariant,
    pub tau: f64,
    /// LayerNorm gain/bias over the kernel index (LayerNorm variants).
    pub ln_affine: Option<(Vec<f64>, Vec<f64>)>,
}

impl ConvFormConfig {
    pub fn new(heads: usize, activation: ActivationVariant) -> Self {
        ConvFormConfig {
            heads,
            activation,
            tau: 1.0,
            ln_affine: None,
        }
    }
}

/// Evaluates attention location by location as two dynamic 1×1
/// convolutions: for query `i` and head `h`, each selected key kernel maps
/// the query to a scalar, the activation runs across those scalars (with
/// the bias row `rel_bias[h][i]` added first), and the value kernels map
/// each scalar back to channels before summation.
pub fn conv_form_attention(
    q_map: &Tensor,
    bank: &KernelBank,
    rule: &SelectionRule,
    cfg: &ConvFormConfig,
    rel_bias: Option<&Tensor>,
) -> Result<Tensor> {
    let n = bank.len();
    if q_map.rank() != 2 || q_map.rows() != n || q_map.cols() != bank.c_in() {
        return Err(Error::dim("conv_form_attention", q_map.shape(), bank.key_kernels.shape()));
    }
    let (c_in, c_out) = (bank.c_in(), bank.c_out());
    let h = cfg.heads;
    if h == 0 || c_in % h != 0 || c_out % h != 0 {
        return Err(Error::Config(format!("channels {c_in}/{c_out} not divisible by {h} heads")));
    }
    if rel_bias.is_some() && matches!(rule, SelectionRule::SoftProjection { .. }) {
        return Err(Error::Config("relative bias is undefined under soft-projection selection".into()));
    }
    let (ci_h, co_h) = (c_in / h, c_out / h);
    // Soft selections do not depend on the location.
    let shared = match rule {
        SelectionRule::SoftProjection { .. } => Some(select_kernels(bank, rule, 0)?),
        _ => None,
    };
    let mut out = vec![0.0; n * c_out];
    for i in 0..n {
        let owned;
        let sel = match &shared {
            Some(s) => s,
            None => {
                owned = select_kernels(bank, rule, i)?;
                &owned
            }
        };
        let m = sel.keys.rows();
        if let Some(rb) = rel_bias {
            if rb.shape() != [h, n, m] {
                return Err(Error::dim("relative bias", rb.shape(), &[h, n, m]));
            }
        }
        let q = q_map.row(i);
        for hd in 0..h {
            let qh = &q[hd * ci_h..(hd + 1) * ci_h];
            let scalars: Vec<f64> = (0..m)
                .map(|j| {
                    let kj = &sel.keys.row(j)[hd * ci_h..(hd + 1) * ci_h];
                    kj.iter().zip(qh).map(|(a, b)| a * b).sum()
                })
                .collect();
            let bias = rel_bias.map(|rb| &rb.data()[(hd * n + i) * m..(hd * n + i + 1) * m]);
            let affine = cfg.ln_affine.as_ref().map(|(g, b)| (g.as_slice(), b.as_slice()));
            let act = activate_row(&scalars, cfg.activation, ci_h, cfg.tau, bias, affine);
            let o = &mut out[i * c_out + hd * co_h..i * c_out + (hd + 1) * co_h];
            for (j, &a) in act.iter().enumerate() {
                let vj = &sel.values.row(j)[hd * co_h..(hd + 1) * co_h];
                for (ov, &vv) in o.iter_mut().zip(vj) {
                    *ov += a * vv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c_out], out))
}

/// Merges a kv selection under linear scaling into one
/// `C_in × C_out` kernel: `g = scale · k_selᵀ v_sel`.
pub fn merge_selected_kernels(k_sel: &Tensor, v_sel: &Tensor, scale: f64) -> Result<Tensor> {
    if k_sel.rank() != 2 || v_sel.rank() != 2 || k_sel.rows() != v_sel.rows() {
        return Err(Error::dim("merge_selected_kernels", k_sel.shape(), v_sel.shape()));
    }
    let g = k_sel.t()?.matmul(v_sel)?;
    Ok(g.map(|x| x * scale))
}

/// Learned static kernel bank whose combination coefficients are predicted
/// from the mean-pooled input.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticKernelBank {
    /// `[K × C_in × C_out]`
    pub kernels: Tensor,
    /// `[C_in × K]`
    pub coef_w: Tensor,
    /// `[K]`
    pub coef_b: Tensor,
}

impl StaticKernelBank {
    pub fn random<R: Rng + ?Sized>(k: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let s = 1.0 / (c_in as f64).sqrt();
        StaticKernelBank {
            kernels: Tensor::uniform(&[k, c_in, c_out], -s, s, rng),
            coef_w: Tensor::uniform(&[c_in, k], -s, s, rng),
            coef_b: Tensor::uniform(&[k], -0.1, 0.1, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.kernels.shape();
        if s.len() != 3 || s[0] == 0 {
            return Err(Error::Config(format!("static bank must be [K×C_in×C_out], got {s:?}")));
        }
        if self.coef_w.shape() != [s[1], s[0]] || self.coef_b.shape() != [s[0]] {
            return Err(Error::dim("coefficient predictor", self.coef_w.shape(), &[s[1], s[0]]));
        }
        Ok(())
    }

    /// `softmax(mean_tokens(x) · coef_w + coef_b)`
    pub fn coefficients(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.validate()?;
        let c_in = self.kernels.shape()[1];
        if x.rank() != 2 || x.cols() != c_in {
            return Err(Error::dim("dconv coefficients", x.shape(), &[x.rows(), c_in]));
        }
        let k = self.len();
        let mut pooled = vec![0.0; c_in];
        for i in 0..x.rows() {
            for (p, &v) in pooled.iter_mut().zip(x.row(i)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= x.rows() as f64);
        let mut logits = self.coef_b.data().to_vec();
        for (j, l) in logits.iter_mut().enumerate() {
            for (c, &p) in pooled.iter().enumerate() {
                *l += p * self.coef_w.at(c, j);
            }
        }
        Ok(softmax_rows(&logits, k, 1.0))
    }
}

/// Dynamic convolution over a static bank: the predicted coefficients mix
/// the bank into one `C_in × C_out` kernel applied at every location.
pub fn dconv_reference(x: &Tensor, bank: &StaticKernelBank) -> Result<Tensor> {
    let coef = bank.coefficients(x)?;
    let s = bank.kernels.shape();
    let (c_in, c_out) = (s[1], s[2]);
    let mut combined = vec![0.0; c_in * c_out];
    for (j, &a) in coef.iter().enumerate() {
        let kj = &bank.kernels.data()[j * c_in * c_out..(j + 1) * c_in * c_out];
        for (cv, &kv) in combined.iter_mut().zip(kj) {
            *cv += a * kv;
        }
    }
    let mut out = vec![0.0; x.rows() * c_out];
    gemm(x.data(), &combined, &mut out, x.rows(), c_in, c_out);
    Ok(Tensor::from_parts(vec![x.rows(), c_out], out))
}

/// Affine generator of per-location depth-wise weights: `w(x_i) = x_i·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseGenerator {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseGenerator {
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let s = 1.0 / (c as f64).sqrt();
        DepthwiseGenerator {
            weight: Tensor::uniform(&[c, c], -s, s, rng),
            bias: Tensor::uniform(&[c], -0.1, 0.1, rng),
        }
    }

    /// Generator that always emits `value` per channel.
    pub fn constant(c: usize, value: f64) -> Self {
        DepthwiseGenerator {
            weight: Tensor::zeros(&[c, c]),
            bias: Tensor::full(&[c], value),
        }
    }
}

/// Dynamic depth-wise 1×1 convolution with a dedicated kernel per location:
/// `o_i = x_i ⊙ w(x_i)`.
pub fn ddwconv_reference(x: &Tensor, generator: &DepthwiseGenerator) -> Result<Tensor> {
    let c = x.cols();
    if x.rank() != 2 || generator.weight.shape() != [c, c] || generator.bias.shape() != [c] {
        return Err(Error::dim("ddwconv_reference", x.shape(), generator.weight.shape()));
    }
    let w = x.matmul(&generator.weight)?;
    let data = x
        .data()
        .iter()
        .zip(w.data())
        .enumerate()
        .map(|(idx, (&xv, &wv))| xv * (wv + generator.bias.data()[idx % c]))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Families placed side by side along bank / selection / type / size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Vit,
    Swin,
    Linformer,
    DynamicConv,
    DynamicDepthwiseConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Characterization {
    pub bank: BankKind,
    pub selection: SelectionKind,
    pub kernel_type: &'static str,
    pub kernel_size: (usize, usize),
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Vit,
        Architecture::Swin,
        Architecture::Linformer,
        Architecture::DynamicConv,
        Architecture::DynamicDepthwiseConv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Vit => "ViT",
            Architecture::Swin => "Swin Transformer",
            Architecture::Linformer => "Linformer",
            Architecture::DynamicConv => "Dynamic Conv.",
            Architecture::DynamicDepthwiseConv => "Dynamic DW-Conv.",
        }
    }

    pub fn characterize(&self) -> Characterization {
        let pair = "C->1->C";
        match self {
            Architecture::Vit => Characterization {
                bank: BankKind::Dynamic,
                selection: SelectionKind::HardAll,
                kernel_type: pair,
                kernel_size: (1, 1),
            },
            Architecture::Swin => Characterization {
                bank: BankKind::Dynamic,
                selection: SelectionKind::HardLocal,
                kernel_type: pair,
                kernel_size: (1, 1),
            },
            Architecture::Linformer => Characterization {
                bank: BankKind::Dynamic,
                selection: SelectionKind::Soft,
                kernel_type: pair,
                kernel_size: (1, 1),
            },
            Architecture::DynamicConv => Characterization {
                bank: BankKind::Static,
                selection: SelectionKind::Soft,
                kernel_type: "C->C",
                kernel_size: (3, 3),
            },
            Architecture::DynamicDepthwiseConv => Characterization {
                bank: BankKind::None,
                selection: SelectionKind::None,
                kernel_type: "depth-wise",
                kernel_size: (7, 7),
            },
        }
    }

    /// Parameters of a one-layer generator producing the kernel from a
    /// `c`-dimensional vector.
    pub fn generator_params(&self, c: usize, c_in: usize, c_out: usize) -> usize {
        let (kh, kw) = self.characterize().kernel_size;
        match self {
            Architecture::Vit | Architecture::Swin | Architecture::Linformer => c * c_in + c * c_out,
            Architecture::DynamicDepthwiseConv => c * kh * kw * c_in,
            Architecture::DynamicConv => c * kh * kw * c_in * c_out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_pair_bank() {
        let k = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![4.0, 5.0]).unwrap();
        let bank = build_kernel_bank(&k, &v).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.origin(), &[0]);
        let q = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let o = conv_form_attention(&q, &bank, &SelectionRule::Global, &ConvFormConfig::new(1, ActivationVariant::SOFTMAX), None)
            .unwrap();
        assert_eq!(o.data(), &[4.0, 5.0]);
        assert!(build_kernel_bank(&k, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn identity_bank_is_orthonormal() {
        let bank = build_kernel_bank(&Tensor::eye(4), &Tensor::eye(4)).unwrap();
        let g = bank.key_kernels().matmul(&bank.key_kernels().t().unwrap()).unwrap();
        assert_eq!(g, Tensor::eye(4));
    }

    #[test]
    fn window_arithmetic() {
        let rule = SelectionRule::local(2, 2, 4, 4);
        assert_eq!(rule.selected_origins(0, 16).unwrap(), vec![0, 1, 4, 5]);
        assert_eq!(rule.selected_origins(15, 16).unwrap(), vec![10, 11, 14, 15]);
        assert_eq!(rule.selected_origins(6, 16).unwrap(), vec![2, 3, 6, 7]);
        assert!(matches!(SelectionRule::local(3, 2, 4, 4).validate(16), Err(Error::Config(_))));
    }

    #[test]
    fn global_selects_all_in_origin_order() {
        let mut r = rng(0);
        let k = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[5, 2], -1.0, 1.0, &mut r);
        let bank = build_kernel_bank(&k, &v).unwrap();
        let sel = select_kernels(&bank, &SelectionRule::Global, 3).unwrap();
        assert_eq!(sel.keys, k);
        assert_eq!(sel.values, v);
        assert_eq!(sel.origins, Some(vec![0, 1, 2, 3, 4]));
        assert!(select_kernels(&bank, &SelectionRule::Global, 5).is_err());
    }

    #[test]
    fn identity_soft_projection_equals_global() {
        let mut r = rng(1);
        let k = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r);
        let q = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r);
        let bank = build_kernel_bank(&k, &v).unwrap();
        let soft = SelectionRule::SoftProjection {
            projection: Tensor::eye(6),
        };
        let sel = select_kernels(&bank, &soft, 2).unwrap();
        assert_eq!(sel.keys, k);
        assert_eq!(sel.values, v);
        for act in ActivationVariant::ALL {
            let cfg = ConvFormConfig::new(2, act);
            let a = conv_form_attention(&q, &bank, &SelectionRule::Global, &cfg, None).unwrap();
            let b = conv_form_attention(&q, &bank, &soft, &cfg, None).unwrap();
            assert_eq!(a, b);
        }
        let bias = Tensor::zeros(&[2, 6, 6]);
        assert!(conv_form_attention(&q, &bank, &soft, &ConvFormConfig::new(2, ActivationVariant::SOFTMAX), Some(&bias)).is_err());
    }

    #[test]
    fn merge_identities() {
        let k0 = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let v0 = Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap();
        let g = merge_selected_kernels(&k0, &v0, 1.0).unwrap();
        assert_eq!(g.data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
        assert_eq!(merge_selected_kernels(&Tensor::eye(3), &Tensor::eye(3), 1.0).unwrap(), Tensor::eye(3));
        assert!(merge_selected_kernels(&k0, &Tensor::eye(3), 1.0).is_err());
    }

    #[test]
    fn merged_kernel_matches_two_step_path() {
        let mut r = rng(2);
        let (n, c) = (8, 16);
        let k = Tensor::uniform(&[n, c], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[n, c], -1.0, 1.0, &mut r);
        let q = Tensor::uniform(&[n, c], -1.0, 1.0, &mut r);
        let bank = build_kernel_bank(&k, &v).unwrap();
        let two_step = conv_form_attention(&q, &bank, &SelectionRule::Global, &ConvFormConfig::new(1, ActivationVariant::SCALING), None)
            .unwrap();
        let g = merge_selected_kernels(&k, &v, 1.0 / c as f64).unwrap();
        let one_step = q.matmul(&g).unwrap();
        assert!(two_step.max_abs_diff(&one_step).unwrap() < 1e-10);
    }

    #[test]
    fn dconv_single_kernel_and_equal_kernels() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut r);
        let bank = StaticKernelBank::random(1, 4, 3, &mut r);
        let out = dconv_reference(&x, &bank).unwrap();
        let k0 = bank.kernels.clone().reshape(&[4, 3]).unwrap();
        assert!(out.max_abs_diff(&x.matmul(&k0).unwrap()).unwrap() < 1e-15);

        let mut bank = StaticKernelBank::random(3, 4, 3, &mut r);
        let k0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        bank.kernels = Tensor::from_fn(&[3, 4, 3], |i| k0.data()[i % 12]);
        let out = dconv_reference(&x, &bank).unwrap();
        assert!(out.max_abs_diff(&x.matmul(&k0).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn dconv_matches_explicit_combination() {
        let mut r = rng(4);
        let x = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r);
        let bank = StaticKernelBank::random(3, 4, 5, &mut r);
        let coef = bank.coefficients(&x).unwrap();
        assert!((coef.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // oracle by hand: pool, affine, softmax, mix, multiply
        let pooled: Vec<f64> = (0..4).map(|c| (0..6).map(|i| x.at(i, c)).sum::<f64>() / 6.0).collect();
        let logits: Vec<f64> = (0..3)
            .map(|j| bank.coef_b.data()[j] + (0..4).map(|c| pooled[c] * bank.coef_w.at(c, j)).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let a: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let out = dconv_reference(&x, &bank).unwrap();
        for i in 0..6 {
            for o in 0..5 {
                let mut s = 0.0;
                for c in 0..4 {
                    let w: f64 = (0..3).map(|j| a[j] * bank.kernels.get(&[j, c, o])).sum();
                    s += x.at(i, c) * w;
                }
                assert!((out.at(i, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddwconv_cases() {
        let mut r = rng(5);
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        assert_eq!(ddwconv_reference(&x, &DepthwiseGenerator::constant(3, 1.0)).unwrap(), x);
        assert_eq!(ddwconv_reference(&x, &DepthwiseGenerator::constant(3, 0.0)).unwrap(), Tensor::zeros(&[4, 3]).map(|v| v * 0.0));
        let g = DepthwiseGenerator::random(3, &mut r);
        let out = ddwconv_reference(&x, &g).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let w: f64 = g.bias.data()[c] + (0..3).map(|j| x.at(i, j) * g.weight.at(j, c)).sum::<f64>();
                assert!((out.at(i, c) - x.at(i, c) * w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bank_save_load_roundtrip() {
        let mut r = rng(6);
        let bank = build_kernel_bank(
            &Tensor::uniform(&[16, 4], -1.0, 1.0, &mut r),
            &Tensor::uniform(&[16, 4], -1.0, 1.0, &mut r),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for rule in [
            SelectionRule::Global,
            SelectionRule::local(2, 2, 4, 4),
            SelectionRule::SoftProjection {
                projection: Tensor::uniform(&[3, 16], -1.0, 1.0, &mut r),
            },
            SelectionRule::StaticSoft(StaticKernelBank::random(2, 4, 4, &mut r)),
        ] {
            let d = dir.path().join(format!("{:?}", rule.selection_kind()));
            bank.save(&d, &rule).unwrap();
            let (b2, r2) = KernelBank::load(&d).unwrap();
            assert_eq!(b2, bank);
            assert_eq!(r2, rule);
        }
    }

    #[test]
    fn taxonomy_generator_costs() {
        assert_eq!(Architecture::Vit.generator_params(8, 8, 8), 128);
        assert_eq!(Architecture::DynamicDepthwiseConv.generator_params(8, 8, 8), 8 * 49 * 8);
        assert_eq!(Architecture::DynamicConv.characterize().bank, BankKind::Static);
        assert_eq!(Architecture::Swin.characterize().selection, SelectionKind::HardLocal);
    }
}
