//! Standard multi-head self-attention.
//!
//! Tokens are rows: `x` is `[N×C]` (or `[B×N×C]`), projections are
//! `x·W + b` with `W: [C×C]`. Per head the logits are `q kᵀ` scaled per the
//! activation variant, then the activation, then multiplication by `v`.

use rand::Rng;

use crate::activation::{activate, ActivationVariant, LayerNormAffine};
use crate::autodiff::{GradTape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Projection weights of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub heads: usize,
    /// LayerNorm gain/bias over the kernel-index axis (LayerNorm variants).
    pub ln_affine: Option<(Tensor, Tensor)>,
}

impl AttentionParams {
    /// Weights uniform in `[-1/√C, 1/√C)`, biases uniform in `[-0.1, 0.1)`.
    pub fn random<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Self {
        let s = 1.0 / (channels as f64).sqrt();
        let mut w = || Tensor::uniform(&[channels, channels], -s, s, rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let mut b = || Tensor::uniform(&[channels], -0.1, 0.1, rng);
        AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: b(),
            b_k: b(),
            b_v: b(),
            b_o: b(),
            heads,
            ln_affine: None,
        }
    }

    /// Identity projections and zero biases.
    pub fn identity(channels: usize, heads: usize) -> Self {
        let eye = Tensor::eye(channels);
        let zero = Tensor::zeros(&[channels]);
        AttentionParams {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            b_q: zero.clone(),
            b_k: zero.clone(),
            b_v: zero.clone(),
            b_o: zero,
            heads,
            ln_affine: None,
        }
    }

    /// Same projections with the output projection replaced by identity.
    pub fn with_identity_output(mut self) -> Self {
        let c = self.channels();
        self.w_o = Tensor::eye(c);
        self.b_o = Tensor::zeros(&[c]);
        self
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {c} must be divisible by heads {}",
                self.heads
            )));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [c, c] {
                return Err(Error::dim("attention weight", w.shape(), &[c, c]));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o] {
            if b.shape() != [c] {
                return Err(Error::dim("attention bias", b.shape(), &[c]));
            }
        }
        let all = [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.b_q, &self.b_k, &self.b_v, &self.b_o,
        ];
        if all.iter().any(|t| !t.is_finite()) {
            return Err(Error::Contract("attention parameters must be finite".into()));
        }
        Ok(())
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut GradTape) -> AttentionVars {
        AttentionVars {
            w_q: tape.param(self.w_q.clone()),
            b_q: tape.param(self.b_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            b_k: tape.param(self.b_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            b_v: tape.param(self.b_v.clone()),
            w_o: tape.param(self.w_o.clone()),
            b_o: tape.param(self.b_o.clone()),
            ln: self.ln_affine.as_ref().map(|(g, b)| LayerNormAffine {
                gamma: tape.param(g.clone()),
                beta: tape.param(b.clone()),
            }),
        }
    }
}

/// Tape handles for [`AttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln: Option<LayerNormAffine>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub activation: ActivationVariant,
    /// Softmax temperature applied after the `1/√C_h` scaling.
    pub tau: f64,
}

impl AttentionConfig {
    pub fn new(tokens: usize, channels: usize, heads: usize, activation: ActivationVariant) -> Result<Self> {
        let cfg = AttentionConfig {
            tokens,
            channels,
            heads,
            activation,
            tau: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        self.tau = tau;
        self.validate()?;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.channels == 0 {
            return Err(Error::Config("tokens and channels must be positive".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Contract(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `[B,N,C] -> [B,H,N,C/H]`
pub(crate) fn split_heads(tape: &mut GradTape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, n, heads, c / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B,H,N,C_h] -> [B,N,H·C_h]`
pub(crate) fn merge_heads(tape: &mut GradTape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, n, ch) = (s[0], s[1], s[2], s[3]);
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, n, h * ch])
}

fn as_batched(tape: &mut GradTape, x: Var) -> Result<(Var, bool)> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        2 => Ok((tape.reshape(x, &[1, s[0], s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::Contract(format!("expected [N×C] or [B×N×C], got {s:?}"))),
    }
}

/// Records the three projections.
pub fn qkv_project_tape(tape: &mut GradTape, x: Var, p: &AttentionVars) -> Result<(Var, Var, Var)> {
    Ok((
        tape.linear(x, p.w_q, Some(p.b_q))?,
        tape.linear(x, p.w_k, Some(p.b_k))?,
        tape.linear(x, p.w_v, Some(p.b_v))?,
    ))
}

pub fn qkv_project(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, Tensor, Tensor)> {
    params.validate()?;
    if x.cols() != params.channels() {
        return Err(Error::dim("qkv_project", x.shape(), params.w_q.shape()));
    }
    if !x.is_finite() {
        return Err(Error::Contract("input must be finite".into()));
    }
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let vars = params.bind(&mut tape);
    let (q, k, v) = qkv_project_tape(&mut tape, xv, &vars)?;
    Ok((tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone()))
}

/// Softmax of `x / tau` over the last axis.
pub fn softmax(x: &Tensor, tau: f64) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v, tau)?;
    Ok(tape.value(y).clone())
}

/// Multi-head attention on the tape. `x` is `[N×C]` or `[B×N×C]`;
/// `rel_bias`, when present, is `[H×N×N]` and is added to the scaled
/// logits before the activation.
pub fn attention_tape(
    tape: &mut GradTape,
    x: Var,
    p: &AttentionVars,
    heads: usize,
    activation: ActivationVariant,
    tau: f64,
    rel_bias: Option<Var>,
) -> Result<Var> {
    let (xb, squeeze) = as_batched(tape, x)?;
    let s = tape.shape(xb).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("channels {c} not divisible by heads {heads}")));
    }
    let ch = c / heads;
    let (q, k, v) = qkv_project_tape(tape, xb, p)?;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let kt = tape.transpose(kh)?;
    let logits = tape.matmul(qh, kt)?; // [B,H,N,N]
    let bias = match rel_bias {
        Some(rb) => {
            if tape.shape(rb) != [heads, n, n] {
                return Err(Error::dim("relative bias", tape.shape(rb), &[heads, n, n]));
            }
            Some(tape.expand(rb, &[b, heads, n, n])?)
        }
        None => None,
    };
    let attn = activate(tape, logits, activation, ch, tau, bias, p.ln)?;
    let o = tape.matmul(attn, vh)?;
    let merged = merge_heads(tape, o)?;
    let out = tape.linear(merged, p.w_o, Some(p.b_o))?;
    if squeeze {
        tape.reshape(out, &[n, c])
    } else {
        Ok(out)
    }
}

/// Multi-head self-attention forward pass.
pub fn attention_forward(
    x: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    rel_bias: Option<&Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    params.validate()?;
    if params.heads != cfg.heads || params.channels() != cfg.channels {
        return Err(Error::Config("attention params do not match config".into()));
    }
    if x.rank() != 2 || x.shape() != [cfg.tokens, cfg.channels] {
        return Err(Error::dim("attention_forward", x.shape(), &[cfg.tokens, cfg.channels]));
    }
    if !x.is_finite() {
        return Err(Error::Contract("input must be finite".into()));
    }
    if let Some(rb) = rel_bias {
        if rb.shape() != [cfg.heads, cfg.tokens, cfg.tokens] {
            return Err(Error::dim("relative bias", rb.shape(), &[cfg.heads, cfg.tokens, cfg.tokens]));
        }
        if !rb.is_finite() {
            return Err(Error::Contract("relative bias must be finite".into()));
        }
    }
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let vars = params.bind(&mut tape);
    let rb = rel_bias.map(|t| tape.constant(t.clone()));
    let out = attention_tape(&mut tape, xv, &vars, cfg.heads, cfg.activation, cfg.tau, rb)?;
    Ok(tape.value(out).clone())
}

/// `[B, gh·gw, C] -> [B·windows, wh·ww, C]`, windows in row-major order.
pub fn window_partition(tape: &mut GradTape, x: Var, grid: (usize, usize), window: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let ((gh, gw), (wh, ww)) = (grid, window);
    if s.len() != 3 || s[1] != gh * gw || wh == 0 || ww == 0 || gh % wh != 0 || gw % ww != 0 {
        return Err(Error::Config(format!("{wh}x{ww} windows do not tile {gh}x{gw} for input {s:?}")));
    }
    let (b, c) = (s[0], s[2]);
    let r = tape.reshape(x, &[b, gh / wh, wh, gw / ww, ww, c])?;
    let p = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(p, &[b * (gh / wh) * (gw / ww), wh * ww, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(tape: &mut GradTape, x: Var, grid: (usize, usize), window: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let ((gh, gw), (wh, ww)) = (grid, window);
    let per_image = (gh / wh) * (gw / ww);
    let c = s[2];
    let b = s[0] / per_image;
    let r = tape.reshape(x, &[b, gh / wh, gw / ww, wh, ww, c])?;
    let p = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(p, &[b, gh * gw, c])
}

/// Attention restricted to non-overlapping windows. `x` is `[B, N, C]`
/// over a `grid`; `rel_bias` is one `[H×n×n]` block shared by all windows.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_tape(
    tape: &mut GradTape,
    x: Var,
    p: &AttentionVars,
    heads: usize,
    grid: (usize, usize),
    window: (usize, usize),
    activation: ActivationVariant,
    tau: f64,
    rel_bias: Option<Var>,
) -> Result<Var> {
    let w = window_partition(tape, x, grid, window)?;
    let o = attention_tape(tape, w, p, heads, activation, tau, rel_bias)?;
    window_reverse(tape, o, grid, window)
}

/// Windowed attention on one image `x: [N×C]`.
pub fn local_attention_forward(
    x: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    grid: (usize, usize),
    window: (usize, usize),
    rel_bias: Option<&Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    params.validate()?;
    if x.rank() != 2 || x.shape() != [cfg.tokens, cfg.channels] {
        return Err(Error::dim("local_attention_forward", x.shape(), &[cfg.tokens, cfg.channels]));
    }
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone().reshape(&[1, cfg.tokens, cfg.channels])?);
    let vars = params.bind(&mut tape);
    let rb = rel_bias.map(|t| tape.constant(t.clone()));
    let out = window_attention_tape(&mut tape, xv, &vars, cfg.heads, grid, window, cfg.activation, cfg.tau, rb)?;
    tape.value(out).clone().reshape(&[cfg.tokens, cfg.channels])
}
