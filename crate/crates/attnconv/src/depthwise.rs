//! Depth-wise self-attention.
//!
//! The value bank is dropped. For each query the selected key kernels are
//! averaged into one kernel that multiplies the query channel by channel,
//! and the relative bias is applied to the keys:
//! `o_i = q_i ⊙ mean(k_sel) + p_i · k_sel`, followed by the output
//! projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{merge_heads, split_heads, window_partition, window_reverse};
use crate::autodiff::{GradTape, Var};
use crate::conv::SelectionRule;
use crate::error::{Error, Result};
use crate::position::{materialize_relative_bias, RelativeBiasTable};
use crate::tensor::Tensor;

/// Whether the positional bias has one row per head or one per channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasGranularity {
    #[default]
    PerHead,
    PerChannel,
}

impl BiasGranularity {
    pub fn rows(&self, channels: usize, heads: usize) -> usize {
        match self {
            BiasGranularity::PerHead => heads,
            BiasGranularity::PerChannel => channels,
        }
    }
}

/// Query, key and output projections; there is no value projection.
#[derive(Clone, Debug)]
pub struct DepthwiseParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DepthwiseVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl DepthwiseParams {
    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let s = 1.0 / (channels as f64).sqrt();
        let mut w = || Tensor::uniform(&[channels, channels], -s, s, rng);
        let (w_q, w_k, w_o) = (w(), w(), w());
        let mut b = || Tensor::uniform(&[channels], -0.1, 0.1, rng);
        DepthwiseParams {
            w_q,
            b_q: b(),
            w_k,
            b_k: b(),
            w_o,
            b_o: b(),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn param_count(&self) -> usize {
        [&self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_o, &self.b_o]
            .iter()
            .map(|t| t.numel())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for w in [&self.w_q, &self.w_k, &self.w_o] {
            if w.shape() != [c, c] {
                return Err(Error::dim("depthwise weight", w.shape(), &[c, c]));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_o] {
            if b.shape() != [c] {
                return Err(Error::dim("depthwise bias", b.shape(), &[c]));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut GradTape) -> DepthwiseVars {
        DepthwiseVars {
            w_q: tape.param(self.w_q.clone()),
            b_q: tape.param(self.b_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            b_k: tape.param(self.b_k.clone()),
            w_o: tape.param(self.w_o.clone()),
            b_o: tape.param(self.b_o.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConfig {
    pub channels: usize,
    pub heads: usize,
    pub rule: SelectionRule,
    pub rel_table: Option<RelativeBiasTable>,
}

impl DepthwiseConfig {
    pub fn new(channels: usize, heads: usize, rule: SelectionRule, rel_table: RelativeBiasTable) -> Self {
        DepthwiseConfig {
            channels,
            heads,
            rule,
            rel_table: Some(rel_table),
        }
    }

    pub fn granularity(&self) -> Result<BiasGranularity> {
        let t = self.table()?;
        if t.rows() == self.heads {
            Ok(BiasGranularity::PerHead)
        } else if t.rows() == self.channels {
            Ok(BiasGranularity::PerChannel)
        } else {
            Err(Error::Config(format!(
                "relative table has {} rows; expected {} heads or {} channels",
                t.rows(),
                self.heads,
                self.channels
            )))
        }
    }

    pub fn table(&self) -> Result<&RelativeBiasTable> {
        self.rel_table.as_ref().ok_or_else(|| {
            Error::Config(
                "depthwise attention needs a relative position table: without it the block is linear \
                 in the query and has no non-linearity, and it fails to train"
                    .into(),
            )
        })
    }

    /// Grid the block runs over, and the token count.
    pub fn grid(&self) -> Result<((usize, usize), usize)> {
        let t = self.table()?;
        match &self.rule {
            SelectionRule::Global => {
                let g = t.scope();
                Ok((g, g.0 * g.1 + usize::from(t.class_token())))
            }
            &SelectionRule::LocalWindow { grid_h, grid_w, .. } => Ok(((grid_h, grid_w), grid_h * grid_w)),
            _ => Err(Error::Config("depthwise attention needs a hard selection rule".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        self.granularity()?;
        let (_, tokens) = self.grid()?;
        if let SelectionRule::LocalWindow { window_h, window_w, .. } = self.rule {
            if self.table()?.scope() != (window_h, window_w) {
                return Err(Error::Config("window table scope must equal the window".into()));
            }
        }
        self.rule.validate(tokens)
    }
}

/// Records `mean(k) ⊙ q + p·k` then the output projection over `x: [B,n,C]`
/// treated as one attention scope. `bias` is `[rows, n, n]`.
fn depthwise_core(tape: &mut GradTape, x: Var, p: &DepthwiseVars, heads: usize, bias: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let rows = tape.shape(bias)[0];
    let q = tape.linear(x, p.w_q, Some(p.b_q))?;
    let k = tape.linear(x, p.w_k, Some(p.b_k))?;
    let kbar = tape.mean_axis(k, 1)?; // [B,C]
    let kbar = tape.reshape(kbar, &[b, 1, c])?;
    let kbar = tape.expand(kbar, &[b, n, c])?;
    let term1 = tape.mul(q, kbar)?;
    let term2 = if rows == heads {
        let kh = split_heads(tape, k, heads)?; // [B,H,n,Ch]
        let pb = tape.expand(bias, &[b, heads, n, n])?;
        let t = tape.matmul(pb, kh)?;
        merge_heads(tape, t)?
    } else {
        let kc = tape.permute(k, &[0, 2, 1])?; // [B,C,n]
        let kc = tape.reshape(kc, &[b, c, n, 1])?;
        let pb = tape.expand(bias, &[b, c, n, n])?;
        let t = tape.matmul(pb, kc)?; // [B,C,n,1]
        let t = tape.reshape(t, &[b, c, n])?;
        tape.permute(t, &[0, 2, 1])?
    };
    let o = tape.add(term1, term2)?;
    tape.linear(o, p.w_o, Some(p.b_o))
}

/// Depth-wise attention on the tape. `x` is `[B,N,C]`; `table` is the
/// relative table as a tape variable `[rows × cells]`.
pub fn depthwise_attention_tape(
    tape: &mut GradTape,
    x: Var,
    p: &DepthwiseVars,
    cfg: &DepthwiseConfig,
    table: Var,
) -> Result<Var> {
    cfg.validate()?;
    let t = cfg.table()?;
    let ((gh, gw), tokens) = cfg.grid()?;
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != tokens || s[2] != cfg.channels {
        return Err(Error::dim("depthwise_attention", &s, &[s[0], tokens, cfg.channels]));
    }
    match cfg.rule {
        SelectionRule::Global => {
            let (_, n, idx) = crate::position::relative_index((gh, gw), &cfg.rule, t)?;
            let g = tape.gather(table, &idx)?;
            let bias = tape.reshape(g, &[t.rows(), n, n])?;
            depthwise_core(tape, x, p, cfg.heads, bias)
        }
        SelectionRule::LocalWindow { window_h, window_w, .. } => {
            let idx = t.window_index();
            let n = window_h * window_w;
            let g = tape.gather(table, &idx)?;
            let bias = tape.reshape(g, &[t.rows(), n, n])?;
            let w = window_partition(tape, x, (gh, gw), (window_h, window_w))?;
            let o = depthwise_core(tape, w, p, cfg.heads, bias)?;
            window_reverse(tape, o, (gh, gw), (window_h, window_w))
        }
        _ => unreachable!("validated"),
    }
}

/// Depth-wise attention on one image `x: [N×C]`.
pub fn depthwise_attention_forward(x: &Tensor, params: &DepthwiseParams, cfg: &DepthwiseConfig) -> Result<Tensor> {
    cfg.validate()?;
    params.validate()?;
    if params.channels() != cfg.channels {
        return Err(Error::Config("depthwise params do not match config".into()));
    }
    let (_, tokens) = cfg.grid()?;
    if x.rank() != 2 || x.shape() != [tokens, cfg.channels] {
        return Err(Error::dim("depthwise_attention_forward", x.shape(), &[tokens, cfg.channels]));
    }
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone().reshape(&[1, tokens, cfg.channels])?);
    let vars = params.bind(&mut tape);
    let table = tape.constant(cfg.table()?.table().clone());
    let o = depthwise_attention_tape(&mut tape, xv, &vars, cfg, table)?;
    tape.value(o).clone().reshape(&[tokens, cfg.channels])
}

/// The `[rows × N × n]` bias the block applies to its selected keys.
pub fn depthwise_bias(cfg: &DepthwiseConfig) -> Result<Tensor> {
    let ((gh, gw), _) = cfg.grid()?;
    materialize_relative_bias((gh, gw), &cfg.rule, cfg.table()?)
}

/// Plain-loop evaluation of the block on `x: [N×C]`, independent of the
/// tape: per query and channel, `q ⊙ mean(k_sel) + Σ_j p_j k_sel[j]`.
pub fn depthwise_reference(x: &Tensor, params: &DepthwiseParams, cfg: &DepthwiseConfig) -> Result<Tensor> {
    cfg.validate()?;
    params.validate()?;
    let (_, tokens) = cfg.grid()?;
    let c = cfg.channels;
    if x.shape() != [tokens, c] {
        return Err(Error::dim("depthwise_reference", x.shape(), &[tokens, c]));
    }
    let affine = |w: &Tensor, b: &Tensor, row: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|o| b.data()[o] + row.iter().enumerate().map(|(i, &v)| v * w.at(i, o)).sum::<f64>())
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..tokens).map(|i| affine(&params.w_q, &params.b_q, x.row(i))).collect();
    let k: Vec<Vec<f64>> = (0..tokens).map(|i| affine(&params.w_k, &params.b_k, x.row(i))).collect();
    let bias = depthwise_bias(cfg)?;
    let per_head = cfg.granularity()? == BiasGranularity::PerHead;
    let ch = c / cfg.heads;
    let mut out = Vec::with_capacity(tokens * c);
    for i in 0..tokens {
        let sel = cfg.rule.selected_origins(i, tokens)?;
        let mut o = vec![0.0; c];
        for (d, od) in o.iter_mut().enumerate() {
            let mean = sel.iter().map(|&j| k[j][d]).sum::<f64>() / sel.len() as f64;
            let r = if per_head { d / ch } else { d };
            let pos: f64 = sel.iter().enumerate().map(|(a, &j)| bias.get(&[r, i, a]) * k[j][d]).sum();
            *od = q[i][d] * mean + pos;
        }
        out.extend(affine(&params.w_o, &params.b_o, &o));
    }
    Tensor::new(vec![tokens, c], out)
}

/// Perturbs every token outside one window and reports whether the
/// window's outputs stay bitwise unchanged. Non-windowed rules pass
/// vacuously.
pub fn locality_check<F>(forward: F, x: &Tensor, rule: &SelectionRule, seed: u64) -> Result<bool>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    use rand::SeedableRng;
    let SelectionRule::LocalWindow { grid_h, grid_w, .. } = *rule else {
        return Ok(true);
    };
    let tokens = grid_h * grid_w;
    rule.validate(tokens)?;
    let base = forward(x)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for anchor in [0, tokens - 1, tokens / 2] {
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
            if out.row(i) != base.row(i) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn depthwise_locality_check(params: &DepthwiseParams, cfg: &DepthwiseConfig, x: &Tensor) -> Result<bool> {
    locality_check(|y| depthwise_attention_forward(y, params, cfg), x, &cfg.rule, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn project(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let mut out = x.matmul(w).unwrap();
        let c = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        out
    }

    /// Scalar loops over the definition, per query and channel.
    fn oracle(x: &Tensor, p: &DepthwiseParams, cfg: &DepthwiseConfig) -> Tensor {
        let q = project(x, &p.w_q, &p.b_q);
        let k = project(x, &p.w_k, &p.b_k);
        let bias = depthwise_bias(cfg).unwrap();
        let (n_tok, c) = (x.rows(), x.cols());
        let ch = c / cfg.heads;
        let per_head = bias.shape()[0] == cfg.heads;
        let mut o = Tensor::zeros(&[n_tok, c]);
        for i in 0..n_tok {
            let sel = cfg.rule.selected_origins(i, n_tok).unwrap();
            for d in 0..c {
                let mean = sel.iter().map(|&j| k.at(j, d)).sum::<f64>() / sel.len() as f64;
                let row = if per_head { d / ch } else { d };
                let pos: f64 = sel.iter().enumerate().map(|(a, &j)| bias.get(&[row, i, a]) * k.at(j, d)).sum();
                o.set(&[i, d], q.at(i, d) * mean + pos);
            }
        }
        project(&o, &p.w_o, &p.b_o)
    }

    #[test]
    fn matches_scalar_oracle_global_and_local() {
        let mut r = rng(0);
        let p = DepthwiseParams::random(8, &mut r);
        let x = Tensor::uniform(&[9, 8], -1.0, 1.0, &mut r);
        let cfg = DepthwiseConfig::new(8, 2, SelectionRule::Global, RelativeBiasTable::random(2, 3, 3, false, &mut r));
        let d = depthwise_attention_forward(&x, &p, &cfg).unwrap().max_abs_diff(&oracle(&x, &p, &cfg)).unwrap();
        assert!(d < 1e-12, "{d}");

        let x = Tensor::uniform(&[16, 8], -1.0, 1.0, &mut r);
        for rows in [2, 8] {
            let cfg = DepthwiseConfig::new(8, 2, SelectionRule::local(2, 2, 4, 4), RelativeBiasTable::random(rows, 2, 2, false, &mut r));
            let d = depthwise_attention_forward(&x, &p, &cfg).unwrap().max_abs_diff(&oracle(&x, &p, &cfg)).unwrap();
            assert!(d < 1e-12, "{d}");
        }
    }

    #[test]
    fn degenerate_banks() {
        let mut r = rng(1);
        let c = 4;
        // Keys constant k0 (zero key weights), p = 0: o = q ⊙ k0.
        let mut p = DepthwiseParams::random(c, &mut r);
        p.w_k = Tensor::zeros(&[c, c]);
        p.w_o = Tensor::eye(c);
        p.b_o = Tensor::zeros(&[c]);
        let x = Tensor::uniform(&[4, c], -1.0, 1.0, &mut r);
        let cfg = DepthwiseConfig::new(c, 2, SelectionRule::Global, RelativeBiasTable::zeros(2, 2, 2, false));
        let o = depthwise_attention_forward(&x, &p, &cfg).unwrap();
        let q = project(&x, &p.w_q, &p.b_q);
        for i in 0..4 {
            for d in 0..c {
                assert!((o.at(i, d) - q.at(i, d) * p.b_k.data()[d]).abs() < 1e-14);
            }
        }
        // q = 0: only the positional term remains.
        let mut p = DepthwiseParams::random(c, &mut r);
        p.w_q = Tensor::zeros(&[c, c]);
        p.b_q = Tensor::zeros(&[c]);
        p.w_o = Tensor::eye(c);
        p.b_o = Tensor::zeros(&[c]);
        let cfg = DepthwiseConfig::new(c, 2, SelectionRule::Global, RelativeBiasTable::random(2, 2, 2, false, &mut r));
        let o = depthwise_attention_forward(&x, &p, &cfg).unwrap();
        let k = project(&x, &p.w_k, &p.b_k);
        let bias = depthwise_bias(&cfg).unwrap();
        for i in 0..4 {
            for d in 0..c {
                let e: f64 = (0..4).map(|j| bias.get(&[d / 2, i, j]) * k.at(j, d)).sum();
                assert!((o.at(i, d) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn missing_table_is_config_error() {
        let cfg = DepthwiseConfig {
            channels: 4,
            heads: 2,
            rule: SelectionRule::Global,
            rel_table: None,
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("non-linearity")));
    }

    #[test]
    fn linear_in_query_path() {
        let mut r = rng(2);
        let mut p = DepthwiseParams::random(4, &mut r);
        p.w_o = Tensor::eye(4);
        p.b_o = Tensor::zeros(&[4]);
        let x = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let cfg = DepthwiseConfig::new(4, 1, SelectionRule::Global, RelativeBiasTable::random(1, 2, 2, false, &mut r));
        let base = depthwise_attention_forward(&x, &p, &cfg).unwrap();
        let mut p0 = p.clone();
        p0.w_q = Tensor::zeros(&[4, 4]);
        p0.b_q = Tensor::zeros(&[4]);
        let term2 = depthwise_attention_forward(&x, &p0, &cfg).unwrap();
        let mut p3 = p.clone();
        p3.w_q = p.w_q.map(|v| 3.0 * v);
        p3.b_q = p.b_q.map(|v| 3.0 * v);
        let scaled = depthwise_attention_forward(&x, &p3, &cfg).unwrap();
        for i in 0..16 {
            let t1 = base.data()[i] - term2.data()[i];
            assert!((scaled.data()[i] - term2.data()[i] - 3.0 * t1).abs() < 1e-12);
        }
    }

    #[test]
    fn locality_and_mutation() {
        let mut r = rng(3);
        let p = DepthwiseParams::random(4, &mut r);
        let x = Tensor::uniform(&[16, 4], -1.0, 1.0, &mut r);
        let cfg = DepthwiseConfig::new(4, 2, SelectionRule::local(2, 2, 4, 4), RelativeBiasTable::random(2, 2, 2, false, &mut r));
        assert!(depthwise_locality_check(&p, &cfg, &x).unwrap());
        let g = DepthwiseConfig::new(4, 2, SelectionRule::Global, RelativeBiasTable::random(2, 4, 4, false, &mut r));
        assert!(depthwise_locality_check(&p, &g, &x).unwrap());
        // Off-by-one window: every output also sees the next token.
        let leaky = |y: &Tensor| -> Result<Tensor> {
            let mut o = depthwise_attention_forward(y, &p, &cfg)?;
            for i in 0..15 {
                for d in 0..4 {
                    let v = o.at(i, d) + 1e-3 * y.at(i + 1, d);
                    o.set(&[i, d], v);
                }
            }
            Ok(o)
        };
        assert!(!locality_check(leaky, &x, &cfg.rule, 0).unwrap());
    }

    #[test]
    fn gradients_pass_finite_difference() {
        let mut r = rng(4);
        let p = DepthwiseParams::random(4, &mut r);
        let x = Tensor::uniform(&[1, 16, 4], -1.0, 1.0, &mut r);
        for (rule, scope, rows) in [
            (SelectionRule::Global, (4, 4), 2),
            (SelectionRule::local(2, 2, 4, 4), (2, 2), 4),
        ] {
            let table = RelativeBiasTable::random(rows, scope.0, scope.1, false, &mut r);
            let cfg = DepthwiseConfig::new(4, 2, rule, table.clone());
            let err = finite_diff_check(
                |tape, xv| {
                    let vars = p.bind(tape);
                    let t = tape.param(table.table().clone());
                    let o = depthwise_attention_tape(tape, xv, &vars, &cfg, t)?;
                    let sq = tape.mul(o, o)?;
                    Ok(tape.sum(sq))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
            let err = finite_diff_check(
                |tape, tv| {
                    let vars = p.bind(tape);
                    let xv = tape.constant(x.clone());
                    let o = depthwise_attention_tape(tape, xv, &vars, &cfg, tv)?;
                    let sq = tape.mul(o, o)?;
                    Ok(tape.sum(sq))
                },
                table.table(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
