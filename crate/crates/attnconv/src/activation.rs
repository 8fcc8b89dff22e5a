//! Activation functions placed between the two dynamic convolutions.
//!
//! A variant is a normalization (`softmax`, `none`, `scaling`,
//! `layernorm`) optionally followed by ReLU. Softmax supplies its own
//! non-linearity and is never combined with ReLU. All variants act on the
//! last axis, which indexes the selected kernels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradTape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Softmax,
    None,
    Scaling,
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    None,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ActivationVariant {
    normalization: Normalization,
    nonlinearity: Nonlinearity,
    layernorm_affine: bool,
}

impl ActivationVariant {
    pub const SOFTMAX: Self = Self::raw(Normalization::Softmax, Nonlinearity::None);
    pub const NONE: Self = Self::raw(Normalization::None, Nonlinearity::None);
    pub const SCALING: Self = Self::raw(Normalization::Scaling, Nonlinearity::None);
    pub const SCALING_RELU: Self = Self::raw(Normalization::Scaling, Nonlinearity::Relu);
    pub const LAYERNORM: Self = Self::raw(Normalization::LayerNorm, Nonlinearity::None);
    pub const LAYERNORM_RELU: Self = Self::raw(Normalization::LayerNorm, Nonlinearity::Relu);

    /// The six ablation rows, in encoding order.
    pub const ALL: [Self; 6] = [
        Self::SOFTMAX,
        Self::NONE,
        Self::SCALING,
        Self::SCALING_RELU,
        Self::LAYERNORM,
        Self::LAYERNORM_RELU,
    ];

    const fn raw(normalization: Normalization, nonlinearity: Nonlinearity) -> Self {
        ActivationVariant {
            normalization,
            nonlinearity,
            layernorm_affine: true,
        }
    }

    pub fn new(normalization: Normalization, nonlinearity: Nonlinearity) -> Result<Self> {
        if normalization == Normalization::Softmax && nonlinearity != Nonlinearity::None {
            return Err(Error::Config(
                "softmax already supplies the non-linearity; it cannot be combined with relu".into(),
            ));
        }
        Ok(Self::raw(normalization, nonlinearity))
    }

    pub fn with_layernorm_affine(mut self, affine: bool) -> Self {
        self.layernorm_affine = affine;
        self
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    /// Whether learnable LayerNorm gain/bias are used (LayerNorm variants only).
    pub fn layernorm_affine(&self) -> bool {
        self.layernorm_affine && self.normalization == Normalization::LayerNorm
    }

    /// True when the variant is a linear map of its input, which is what
    /// allows two consecutive convolutions to be merged.
    pub fn is_linear(&self) -> bool {
        matches!(self.normalization, Normalization::None | Normalization::Scaling)
            && self.nonlinearity == Nonlinearity::None
    }

    /// Multiplier applied to raw `q·k` products before normalization.
    pub fn logit_scale(&self, c_h: usize) -> f64 {
        match self.normalization {
            Normalization::Softmax => 1.0 / (c_h as f64).sqrt(),
            Normalization::Scaling => 1.0 / c_h as f64,
            Normalization::None | Normalization::LayerNorm => 1.0,
        }
    }

    pub fn encoding(&self) -> &'static str {
        use Nonlinearity as L;
        use Normalization as N;
        match (self.normalization, self.nonlinearity) {
            (N::Softmax, _) => "softmax",
            (N::None, L::None) => "none",
            (N::None, L::Relu) => "relu",
            (N::Scaling, L::None) => "scaling",
            (N::Scaling, L::Relu) => "scaling+relu",
            (N::LayerNorm, L::None) => "layernorm",
            (N::LayerNorm, L::Relu) => "layernorm+relu",
        }
    }
}

impl Default for ActivationVariant {
    fn default() -> Self {
        Self::SOFTMAX
    }
}

impl fmt::Display for ActivationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.encoding())
    }
}

impl FromStr for ActivationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.encoding() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|v| v.encoding()).collect();
                Error::Config(format!(
                    "unknown activation variant {s:?}; valid encodings: {}",
                    valid.join(", ")
                ))
            })
    }
}

impl TryFrom<String> for ActivationVariant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ActivationVariant> for String {
    fn from(v: ActivationVariant) -> String {
        v.encoding().to_string()
    }
}

/// Learnable LayerNorm gain and bias over the kernel-index axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormAffine {
    pub gamma: Var,
    pub beta: Var,
}

/// Applies `variant` to raw logits on the tape:
/// `normalize(raw · logit_scale + bias)` followed by the optional ReLU.
/// `bias` must have the shape of `raw`.
pub fn activate(
    tape: &mut GradTape,
    raw: Var,
    variant: ActivationVariant,
    c_h: usize,
    tau: f64,
    bias: Option<Var>,
    affine: Option<LayerNormAffine>,
) -> Result<Var> {
    if c_h == 0 {
        return Err(Error::Contract("per-head channel count must be positive".into()));
    }
    let mut s = match variant.logit_scale(c_h) {
        f if f == 1.0 => raw,
        f => tape.scale(raw, f),
    };
    if let Some(b) = bias {
        s = tape.add(s, b)?;
    }
    let shape = tape.shape(s).to_vec();
    let mut out = match variant.normalization {
        Normalization::Softmax => tape.softmax(s, tau)?,
        Normalization::None | Normalization::Scaling => s,
        Normalization::LayerNorm => {
            let mut y = tape.layer_norm(s, LAYERNORM_EPS);
            if let Some(LayerNormAffine { gamma, beta }) = affine {
                let g = tape.expand(gamma, &shape)?;
                let b = tape.expand(beta, &shape)?;
                y = tape.mul(y, g)?;
                y = tape.add(y, b)?;
            }
            y
        }
    };
    if variant.nonlinearity == Nonlinearity::Relu {
        out = tape.relu(out);
    }
    Ok(out)
}

/// Tensor-level activation on raw `q·k` logits (τ = 1, no bias, unit
/// LayerNorm affine).
pub fn apply_activation(logits: &Tensor, variant: ActivationVariant, c_h: usize) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let x = tape.constant(logits.clone());
    let y = activate(&mut tape, x, variant, c_h, 1.0, None, None)?;
    Ok(tape.value(y).clone())
}

/// Plain-slice evaluation of one row of activations. Kept separate from
/// the tape path so the convolution form is computed independently.
///
/// `gamma`/`beta` are applied only for LayerNorm variants.
pub fn activate_row(
    raw: &[f64],
    variant: ActivationVariant,
    c_h: usize,
    tau: f64,
    bias: Option<&[f64]>,
    affine: Option<(&[f64], &[f64])>,
) -> Vec<f64> {
    let scale = variant.logit_scale(c_h);
    let mut s: Vec<f64> = raw.iter().map(|v| v * scale).collect();
    if let Some(b) = bias {
        for (x, &bv) in s.iter_mut().zip(b) {
            *x += bv;
        }
    }
    match variant.normalization {
        Normalization::Softmax => {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in s.iter_mut() {
                *x = ((*x - m) / tau).exp();
                z += *x;
            }
            for x in s.iter_mut() {
                *x /= z;
            }
        }
        Normalization::None | Normalization::Scaling => {}
        Normalization::LayerNorm => {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (j, x) in s.iter_mut().enumerate() {
                *x = (*x - mean) * r;
                if let Some((g, b)) = affine {
                    *x = *x * g[j] + b[j];
                }
            }
        }
    }
    if variant.nonlinearity == Nonlinearity::Relu {
        for x in s.iter_mut() {
            *x = x.max(0.0);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn encodings_roundtrip() {
        for v in ActivationVariant::ALL {
            assert_eq!(v.encoding().parse::<ActivationVariant>().unwrap(), v);
        }
        let err = "gelu".parse::<ActivationVariant>().unwrap_err().to_string();
        assert!(err.contains("scaling+relu"));
        assert!(ActivationVariant::new(Normalization::Softmax, Nonlinearity::Relu).is_err());
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let y = apply_activation(&row(&[2.0; 5]), ActivationVariant::SOFTMAX, 4).unwrap();
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_divides_by_head_width() {
        let y = apply_activation(&row(&[4.0, 8.0, -4.0]), ActivationVariant::SCALING, 4).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, -1.0]);
        let y = apply_activation(&row(&[4.0, -8.0]), ActivationVariant::SCALING_RELU, 4).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn layernorm_standardizes() {
        let v = ActivationVariant::LAYERNORM.with_layernorm_affine(false);
        let y = apply_activation(&row(&[1.0, 2.0, 3.0]), v, 4).unwrap();
        let e = (1.5f64).sqrt();
        for (a, b) in y.data().iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_head_width_is_rejected() {
        assert!(apply_activation(&row(&[1.0]), ActivationVariant::SCALING, 0).is_err());
    }

    #[test]
    fn tape_and_row_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 7], -2.0, 2.0, &mut rng);
        for v in ActivationVariant::ALL {
            let a = apply_activation(&x, v, 5).unwrap();
            for i in 0..3 {
                let r = activate_row(x.row(i), v, 5, 1.0, None, None);
                for (p, q) in a.row(i).iter().zip(&r) {
                    assert!((p - q).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn every_variant_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in ActivationVariant::ALL {
            let x = loop {
                let x = Tensor::uniform(&[2, 3, 6], -1.0, 1.0, &mut rng);
                // Scaling by 1/c_h keeps the ReLU input away from the kink.
                if x.data().iter().all(|a| a.abs() > 1e-2) {
                    break x;
                }
            };
            let w = Tensor::uniform(&[2, 3, 6], -1.0, 1.0, &mut rng);
            let gamma = Tensor::uniform(&[6], 0.5, 1.5, &mut rng);
            let beta = Tensor::uniform(&[6], -0.5, 0.5, &mut rng);
            let err = finite_diff_check(
                |tape, xv| {
                    let affine = LayerNormAffine {
                        gamma: tape.constant(gamma.clone()),
                        beta: tape.constant(beta.clone()),
                    };
                    let y = activate(tape, xv, v, 3, 0.9, None, Some(affine))?;
                    let wv = tape.constant(w.clone());
                    let p = tape.mul(y, wv)?;
                    Ok(tape.sum(p))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{v}: {err}");
        }
    }

    proptest! {
        #[test]
        fn layernorm_moments_and_shift_invariance(
            v in proptest::collection::vec(-10.0f64..10.0, 2..16),
            c in -5.0f64..5.0,
        ) {
            prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-2));
            let var = ActivationVariant::LAYERNORM.with_layernorm_affine(false);
            let y = activate_row(&v, var, 4, 1.0, None, None);
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let variance = y.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            // eps shrinks the variance slightly below 1
            let raw_var = {
                let m = v.iter().sum::<f64>() / n;
                v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n
            };
            prop_assert!((variance - raw_var / (raw_var + LAYERNORM_EPS)).abs() < 1e-9);
            if raw_var > 1.0 {
                prop_assert!((variance - 1.0).abs() < 1e-5);
            }
            let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
            let ys = activate_row(&shifted, var, 4, 1.0, None, None);
            for (a, b) in y.iter().zip(&ys) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn relu_is_nonnegative_and_identity_on_nonnegative(
            v in proptest::collection::vec(-10.0f64..10.0, 1..16),
        ) {
            let y = activate_row(&v, ActivationVariant::SCALING_RELU, 4, 1.0, None, None);
            prop_assert!(y.iter().all(|&a| a >= 0.0));
            let pos: Vec<f64> = v.iter().map(|a| a.abs()).collect();
            let yp = activate_row(&pos, ActivationVariant::SCALING_RELU, 4, 1.0, None, None);
            let ys = activate_row(&pos, ActivationVariant::SCALING, 4, 1.0, None, None);
            prop_assert_eq!(yp, ys);
        }

        #[test]
        fn scaling_is_linear(
            v in proptest::collection::vec(-10.0f64..10.0, 1..16),
            alpha in -4.0f64..4.0,
        ) {
            let y = activate_row(&v, ActivationVariant::SCALING, 8, 1.0, None, None);
            let scaled: Vec<f64> = v.iter().map(|a| a * alpha).collect();
            let ya = activate_row(&scaled, ActivationVariant::SCALING, 8, 1.0, None, None);
            for (a, b) in y.iter().zip(&ya) {
                prop_assert!((a * alpha - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            v in proptest::collection::vec(-10.0f64..10.0, 1..16),
            c in -50.0f64..50.0,
        ) {
            let y = activate_row(&v, ActivationVariant::SOFTMAX, 4, 1.0, None, None);
            let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
            let ys = activate_row(&shifted, ActivationVariant::SOFTMAX, 4, 1.0, None, None);
            for (a, b) in y.iter().zip(&ys) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
