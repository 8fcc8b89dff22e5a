//! Classifier assembly: DeiT-style (one stage, global attention) and
//! Swin-lite (four stages, windowed attention, patch merging, no shifted
//! windows).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationVariant, LayerNormAffine, Normalization, LAYERNORM_EPS};
use crate::attention::{attention_tape, window_attention_tape, AttentionVars};
use crate::autodiff::{GradTape, Var};
use crate::conv::SelectionRule;
use crate::depthwise::{depthwise_attention_tape, BiasGranularity, DepthwiseConfig, DepthwiseVars};
use crate::error::{Error, Result};
use crate::position::{relative_index, RelativeBiasTable};
use crate::tensor::Tensor;

pub const PRESETS: [&str; 5] = ["deit-s", "deit-b", "swin-t", "swin-b", "toy-vit"];
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Abs,
    Rel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClassToken,
    GlobalAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Standard,
    Depthwise,
}

impl FromStr for PositionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(PositionMode::Abs),
            "rel" => Ok(PositionMode::Rel),
            _ => Err(Error::Config(format!("unknown position mode {s:?}; expected abs or rel"))),
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_token" | "cls" => Ok(Pooling::ClassToken),
            "global_average" | "gap" => Ok(Pooling::GlobalAverage),
            _ => Err(Error::Config(format!(
                "unknown pooling {s:?}; expected class_token or global_average"
            ))),
        }
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionMode::Abs => "abs",
            PositionMode::Rel => "rel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub image_size: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Window side for windowed (hierarchical) models.
    pub window_size: Option<usize>,
    pub activation: ActivationVariant,
    pub position: PositionMode,
    pub pooling: Pooling,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
    /// Row layout of the depth-wise positional bias.
    #[serde(default)]
    pub dw_bias: BiasGranularity,
    pub num_classes: usize,
    /// Accepted for config compatibility; has no effect.
    #[serde(default)]
    pub drop_path: f64,
}

fn three() -> usize {
    3
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let deit = |name: &str, c: usize, h: usize| ModelConfig {
            name: name.into(),
            image_size: 224,
            in_channels: 3,
            patch_size: 16,
            embed_dims: vec![c],
            depths: vec![12],
            heads: vec![h],
            window_size: None,
            activation: ActivationVariant::SOFTMAX,
            position: PositionMode::Abs,
            pooling: Pooling::ClassToken,
            mlp_ratio: 4,
            attention: AttentionKind::Standard,
            dw_bias: BiasGranularity::PerHead,
            num_classes: 1000,
            drop_path: 0.0,
        };
        let swin = |name: &str, c: usize, depths: [usize; 4], heads: [usize; 4]| ModelConfig {
            name: name.into(),
            image_size: 224,
            in_channels: 3,
            patch_size: 4,
            embed_dims: vec![c, 2 * c, 4 * c, 8 * c],
            depths: depths.to_vec(),
            heads: heads.to_vec(),
            window_size: Some(7),
            activation: ActivationVariant::SOFTMAX,
            position: PositionMode::Rel,
            pooling: Pooling::GlobalAverage,
            mlp_ratio: 4,
            attention: AttentionKind::Standard,
            dw_bias: BiasGranularity::PerHead,
            num_classes: 1000,
            drop_path: 0.0,
        };
        match name {
            "deit-s" => Ok(deit(name, 384, 6)),
            "deit-b" => Ok(deit(name, 768, 12)),
            "swin-t" => Ok(ModelConfig {
                dw_bias: BiasGranularity::PerChannel,
                ..swin(name, 96, [2, 2, 6, 2], [3, 6, 12, 24])
            }),
            "swin-b" => Ok(swin(name, 128, [2, 2, 18, 2], [4, 8, 16, 32])),
            "toy-vit" => Ok(ModelConfig {
                image_size: 32,
                patch_size: 8,
                embed_dims: vec![64],
                depths: vec![2],
                heads: vec![4],
                num_classes: 10,
                ..deit(name, 64, 4)
            }),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?}; valid presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn with_activation(mut self, activation: ActivationVariant) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_position(mut self, position: PositionMode) -> Self {
        self.position = position;
        self
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_attention(mut self, attention: AttentionKind) -> Self {
        self.attention = attention;
        self
    }

    pub fn hierarchical(&self) -> bool {
        self.embed_dims.len() > 1
    }

    pub fn stages(&self) -> usize {
        self.embed_dims.len()
    }

    /// Token-grid side at each stage.
    pub fn stage_grids(&self) -> Vec<usize> {
        let g = self.image_size / self.patch_size;
        (0..self.stages()).map(|s| g >> s).collect()
    }

    /// Window side used at a stage, clipped to the grid.
    pub fn stage_window(&self, stage: usize) -> Option<usize> {
        self.window_size.map(|w| w.min(self.stage_grids()[stage]))
    }

    pub fn class_token(&self) -> bool {
        self.pooling == Pooling::ClassToken
    }

    /// Tokens entering the stage's blocks.
    pub fn stage_tokens(&self, stage: usize) -> usize {
        let g = self.stage_grids()[stage];
        g * g + usize::from(self.class_token())
    }

    /// Keys each query attends to at a stage.
    pub fn scope_tokens(&self, stage: usize) -> usize {
        match self.stage_window(stage) {
            Some(w) => w * w,
            None => self.stage_tokens(stage),
        }
    }

    /// Checks shape bookkeeping only; the depth-wise kind additionally
    /// needs relative position to build a runnable model.
    pub fn validate_shapes(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.depths.len() != s || self.heads.len() != s {
            return Err(Error::Config("embed_dims, depths and heads need one entry per stage".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("in_channels, num_classes and mlp_ratio must be positive".into()));
        }
        let grid = self.image_size / self.patch_size;
        for st in 0..s {
            let (c, h) = (self.embed_dims[st], self.heads[st]);
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!("stage {st}: channels {c} not divisible by heads {h}")));
            }
            if st > 0 && (c != 2 * self.embed_dims[st - 1] || (grid >> (st - 1)) % 2 != 0) {
                return Err(Error::Config(format!(
                    "stage {st}: each merge must halve an even grid and double channels"
                )));
            }
        }
        if self.hierarchical() {
            if self.class_token() {
                return Err(Error::Config("class_token pooling needs a single-stage model".into()));
            }
            let Some(w) = self.window_size else {
                return Err(Error::Config("hierarchical models need a window size".into()));
            };
            if w == 0 {
                return Err(Error::Config("window size must be positive".into()));
            }
            for st in 0..s {
                let (g, w) = (self.stage_grids()[st], self.stage_window(st).unwrap());
                if g % w != 0 {
                    return Err(Error::Config(format!("stage {st}: window {w} does not tile grid {g}")));
                }
            }
        } else if self.window_size.is_some() {
            return Err(Error::Config("windowed single-stage models are not supported".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        if self.attention == AttentionKind::Depthwise && self.position != PositionMode::Rel {
            return Err(Error::Config(
                "depthwise attention needs relative position: without it the block has no \
                 non-linearity and fails to train"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, i: usize, o: usize, bias: bool) {
    spec(out, format!("{prefix}.weight"), &[i, o], Init::TruncNormal);
    if bias {
        spec(out, format!("{prefix}.bias"), &[o], Init::Zeros);
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    spec(out, format!("{prefix}.weight"), &[c], Init::Ones);
    spec(out, format!("{prefix}.bias"), &[c], Init::Zeros);
}

fn block_prefix(cfg: &ModelConfig, stage: usize, block: usize) -> String {
    if cfg.hierarchical() {
        format!("stages.{stage}.blocks.{block}")
    } else {
        format!("blocks.{block}")
    }
}

fn rel_scope(cfg: &ModelConfig, stage: usize) -> (usize, usize) {
    match cfg.stage_window(stage) {
        Some(w) => (w, w),
        None => {
            let g = cfg.stage_grids()[stage];
            (g, g)
        }
    }
}

fn rel_rows(cfg: &ModelConfig, stage: usize) -> usize {
    match cfg.attention {
        AttentionKind::Standard => cfg.heads[stage],
        AttentionKind::Depthwise => cfg.dw_bias.rows(cfg.embed_dims[stage], cfg.heads[stage]),
    }
}

/// Every learnable tensor in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let c0 = cfg.embed_dims[0];
    let patch_in = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    linear_specs(&mut out, "patch_embed", patch_in, c0, true);
    if cfg.hierarchical() {
        norm_specs(&mut out, "patch_embed.norm", c0);
    }
    if cfg.class_token() {
        spec(&mut out, "cls_token".into(), &[1, c0], Init::TruncNormal);
    }
    if cfg.position == PositionMode::Abs {
        spec(&mut out, "pos_embed".into(), &[cfg.stage_tokens(0), c0], Init::TruncNormal);
    }
    for st in 0..cfg.stages() {
        let c = cfg.embed_dims[st];
        if st > 0 {
            let prev = cfg.embed_dims[st - 1];
            norm_specs(&mut out, &format!("stages.{st}.merge.norm"), 4 * prev);
            linear_specs(&mut out, &format!("stages.{st}.merge.reduction"), 4 * prev, c, false);
        }
        for b in 0..cfg.depths[st] {
            let p = block_prefix(cfg, st, b);
            norm_specs(&mut out, &format!("{p}.norm1"), c);
            linear_specs(&mut out, &format!("{p}.attn.q"), c, c, true);
            linear_specs(&mut out, &format!("{p}.attn.k"), c, c, true);
            if cfg.attention == AttentionKind::Standard {
                linear_specs(&mut out, &format!("{p}.attn.v"), c, c, true);
            }
            linear_specs(&mut out, &format!("{p}.attn.proj"), c, c, true);
            if cfg.position == PositionMode::Rel {
                let (sh, sw) = rel_scope(cfg, st);
                let cells = RelativeBiasTable::cells_for(sh, sw, cfg.class_token());
                spec(&mut out, format!("{p}.attn.rel_table"), &[rel_rows(cfg, st), cells], Init::TruncNormal);
            }
            if cfg.attention == AttentionKind::Standard
                && cfg.activation.normalization() == Normalization::LayerNorm
                && cfg.activation.layernorm_affine()
            {
                norm_specs(&mut out, &format!("{p}.attn.logit_norm"), cfg.scope_tokens(st));
            }
            norm_specs(&mut out, &format!("{p}.norm2"), c);
            linear_specs(&mut out, &format!("{p}.mlp.fc1"), c, cfg.mlp_ratio * c, true);
            linear_specs(&mut out, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * c, c, true);
        }
    }
    let cl = *cfg.embed_dims.last().unwrap();
    norm_specs(&mut out, "norm", cl);
    linear_specs(&mut out, "head", cl, cfg.num_classes, true);
    Ok(out)
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let (names, tensors) = entries.into_iter().unzip();
        ParamStore { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Deterministic construction: weights truncated normal (σ = 0.02),
/// biases zero, normalization gains one.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let specs = param_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = specs
        .into_iter()
        .map(|s| {
            let t = match s.init {
                Init::TruncNormal => Tensor::trunc_normal(&s.shape, 0.02, &mut rng),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
            };
            (s.name, t)
        })
        .collect();
    Ok(Model {
        config: cfg.clone(),
        params: ParamStore::new(entries),
    })
}

/// Parameter handles recorded on a tape, aligned with the store.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Swaps the handle at `index`, e.g. to differentiate one parameter.
    pub fn replace(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.store.position(name).map(|i| self.vars[i])
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind<'a>(&'a self, tape: &mut GradTape) -> BoundParams<'a> {
        BoundParams {
            store: &self.params,
            vars: self.params.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Records the forward pass of `images: [B×3×S×S]` and returns the
    /// `[B×classes]` logits.
    pub fn forward_tape(&self, tape: &mut GradTape, p: &BoundParams<'_>, images: Var) -> Result<Var> {
        let cfg = &self.config;
        let (s, ps, ch) = (cfg.image_size, cfg.patch_size, cfg.in_channels);
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [ch, s, s] {
            return Err(Error::dim("forward_classify", &shape, &[shape.first().copied().unwrap_or(0), ch, s, s]));
        }
        let b = shape[0];
        let g = s / ps;
        // Non-overlapping patches as rows, flattened channel-major.
        let r = tape.reshape(images, &[b, ch, g, ps, g, ps])?;
        let r = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
        let r = tape.reshape(r, &[b, g * g, ch * ps * ps])?;
        let mut x = tape.linear(r, p.get("patch_embed.weight")?, Some(p.get("patch_embed.bias")?))?;
        if cfg.hierarchical() {
            x = self.layer_norm(tape, p, x, "patch_embed.norm")?;
        }
        let c0 = cfg.embed_dims[0];
        if cfg.class_token() {
            let cls = tape.reshape(p.get("cls_token")?, &[1, 1, c0])?;
            let cls = tape.expand(cls, &[b, 1, c0])?;
            x = tape.concat(&[cls, x], 1)?;
        }
        if let Some(pos) = p.opt("pos_embed") {
            let t = cfg.stage_tokens(0);
            let pe = tape.expand(pos, &[b, t, c0])?;
            x = tape.add(x, pe)?;
        }
        for st in 0..cfg.stages() {
            if st > 0 {
                x = self.patch_merge(tape, p, x, st)?;
            }
            for blk in 0..cfg.depths[st] {
                x = self.block(tape, p, x, st, blk)?;
            }
        }
        x = self.layer_norm(tape, p, x, "norm")?;
        let feat = match cfg.pooling {
            Pooling::ClassToken => {
                let c = cfg.embed_dims[0];
                let f = tape.narrow(x, 1, 0, 1)?;
                tape.reshape(f, &[b, c])?
            }
            Pooling::GlobalAverage => tape.mean_axis(x, 1)?,
        };
        tape.linear(feat, p.get("head.weight")?, Some(p.get("head.bias")?))
    }

    fn layer_norm(&self, tape: &mut GradTape, p: &BoundParams<'_>, x: Var, prefix: &str) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let y = tape.layer_norm(x, LAYERNORM_EPS);
        let g = tape.expand(p.get(&format!("{prefix}.weight"))?, &shape)?;
        let bb = tape.expand(p.get(&format!("{prefix}.bias"))?, &shape)?;
        let y = tape.mul(y, g)?;
        tape.add(y, bb)
    }

    fn patch_merge(&self, tape: &mut GradTape, p: &BoundParams<'_>, x: Var, stage: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, c) = (s[0], s[2]);
        let g = self.config.stage_grids()[stage - 1];
        let h = g / 2;
        // Channel groups ordered (even row, even col), (odd, even), (even, odd), (odd, odd).
        let r = tape.reshape(x, &[b, h, 2, h, 2, c])?;
        let r = tape.permute(r, &[0, 1, 3, 4, 2, 5])?;
        let r = tape.reshape(r, &[b, h * h, 4 * c])?;
        let r = self.layer_norm(tape, p, r, &format!("stages.{stage}.merge.norm"))?;
        tape.linear(r, p.get(&format!("stages.{stage}.merge.reduction.weight"))?, None)
    }

    fn block(&self, tape: &mut GradTape, p: &BoundParams<'_>, x: Var, stage: usize, blk: usize) -> Result<Var> {
        let cfg = &self.config;
        let pre = block_prefix(cfg, stage, blk);
        let h = self.layer_norm(tape, p, x, &format!("{pre}.norm1"))?;
        let a = self.attention(tape, p, h, stage, &pre)?;
        let x = tape.add(x, a)?;
        let h = self.layer_norm(tape, p, x, &format!("{pre}.norm2"))?;
        let h = tape.linear(h, p.get(&format!("{pre}.mlp.fc1.weight"))?, Some(p.get(&format!("{pre}.mlp.fc1.bias"))?))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, p.get(&format!("{pre}.mlp.fc2.weight"))?, Some(p.get(&format!("{pre}.mlp.fc2.bias"))?))?;
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut GradTape, p: &BoundParams<'_>, x: Var, stage: usize, pre: &str) -> Result<Var> {
        let cfg = &self.config;
        let heads = cfg.heads[stage];
        let c = cfg.embed_dims[stage];
        let g = cfg.stage_grids()[stage];
        let w = |n: &str| p.get(&format!("{pre}.attn.{n}"));
        let table_var = p.opt(&format!("{pre}.attn.rel_table"));
        let (sh, sw) = rel_scope(cfg, stage);
        match cfg.attention {
            AttentionKind::Standard => {
                let vars = AttentionVars {
                    w_q: w("q.weight")?,
                    b_q: w("q.bias")?,
                    w_k: w("k.weight")?,
                    b_k: w("k.bias")?,
                    w_v: w("v.weight")?,
                    b_v: w("v.bias")?,
                    w_o: w("proj.weight")?,
                    b_o: w("proj.bias")?,
                    ln: match (w("logit_norm.weight"), w("logit_norm.bias")) {
                        (Ok(gamma), Ok(beta)) => Some(LayerNormAffine { gamma, beta }),
                        _ => None,
                    },
                };
                let table = RelativeBiasTable::zeros(heads, sh, sw, cfg.class_token());
                match cfg.stage_window(stage) {
                    None => {
                        let bias = match table_var {
                            Some(tv) => {
                                let (nq, n, idx) = relative_index((g, g), &SelectionRule::Global, &table)?;
                                let gth = tape.gather(tv, &idx)?;
                                Some(tape.reshape(gth, &[heads, nq, n])?)
                            }
                            None => None,
                        };
                        attention_tape(tape, x, &vars, heads, cfg.activation, 1.0, bias)
                    }
                    Some(win) => {
                        let bias = match table_var {
                            Some(tv) => {
                                let gth = tape.gather(tv, &table.window_index())?;
                                Some(tape.reshape(gth, &[heads, win * win, win * win])?)
                            }
                            None => None,
                        };
                        window_attention_tape(tape, x, &vars, heads, (g, g), (win, win), cfg.activation, 1.0, bias)
                    }
                }
            }
            AttentionKind::Depthwise => {
                let vars = DepthwiseVars {
                    w_q: w("q.weight")?,
                    b_q: w("q.bias")?,
                    w_k: w("k.weight")?,
                    b_k: w("k.bias")?,
                    w_o: w("proj.weight")?,
                    b_o: w("proj.bias")?,
                };
                let rows = rel_rows(cfg, stage);
                let table = RelativeBiasTable::zeros(rows, sh, sw, cfg.class_token());
                let rule = match cfg.stage_window(stage) {
                    None => SelectionRule::Global,
                    Some(win) => SelectionRule::local(win, win, g, g),
                };
                let dcfg = DepthwiseConfig::new(c, heads, rule, table);
                let tv = table_var.ok_or_else(|| Error::Config(format!("missing {pre}.attn.rel_table")))?;
                depthwise_attention_tape(tape, x, &vars, &dcfg, tv)
            }
        }
    }

    /// Saves one `.ten` per parameter plus `config.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA,
            config: self.config.clone(),
        };
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&meta)?)?;
        for (name, t) in self.params.iter() {
            t.save(dir.join(format!("{name}.ten")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
        let dir = dir.as_ref();
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        if meta.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Config(format!(
                "checkpoint schema {} is not {CHECKPOINT_SCHEMA}",
                meta.schema_version
            )));
        }
        let specs = param_specs(&meta.config)?;
        let mut entries = Vec::with_capacity(specs.len());
        for s in specs {
            let t = Tensor::load(dir.join(format!("{}.ten", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
            entries.push((s.name, t));
        }
        Ok(Model {
            config: meta.config,
            params: ParamStore::new(entries),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    config: ModelConfig,
}

/// Logits for a batch of images.
pub fn forward_classify(model: &Model, images: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let bound = BoundParams {
        store: &model.params,
        vars: model.params.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
    };
    let x = tape.constant(images.clone());
    let out = model.forward_tape(&mut tape, &bound, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check_coords;

    fn toy() -> ModelConfig {
        ModelConfig::preset("toy-vit").unwrap()
    }

    /// Hand-summed toy-vit count: patch 192·64+64, cls 64, pos 17·64,
    /// per block 2·(2·64) norms + 4·(64·64+64) attention + fc1 64·256+256
    /// + fc2 256·64+64, final norm 128, head 64·10+10.
    #[test]
    fn toy_param_count_by_hand() {
        let block = 4 * 64 + 4 * (64 * 64 + 64) + (64 * 256 + 256) + (256 * 64 + 64);
        let expected = (192 * 64 + 64) + 64 + 17 * 64 + 2 * block + 128 + (64 * 10 + 10);
        assert_eq!(expected, 114_250);
        assert_eq!(build_model(&toy(), 0).unwrap().param_count(), expected);
    }

    #[test]
    fn presets_and_errors() {
        for p in PRESETS {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        let err = ModelConfig::preset("vit-h").unwrap_err().to_string();
        assert!(err.contains("swin-t"));
        let bad = ModelConfig::preset("swin-t").unwrap().with_pooling(Pooling::ClassToken);
        assert!(bad.validate().is_err());
        let dw_abs = toy().with_attention(AttentionKind::Depthwise);
        assert!(matches!(build_model(&dw_abs, 0), Err(Error::Config(_))));
        let sw = ModelConfig::preset("swin-t").unwrap();
        assert_eq!(sw.stage_grids(), vec![56, 28, 14, 7]);
    }

    #[test]
    fn zero_head_and_identical_rows() {
        let mut m = build_model(&toy(), 1).unwrap();
        let mut img = Tensor::zeros(&[2, 3, 32, 32]);
        *m.params_mut().get_mut("head.weight").unwrap() = Tensor::zeros(&[64, 10]);
        assert_eq!(forward_classify(&m, &img).unwrap(), Tensor::zeros(&[2, 10]));
        let m = build_model(&toy(), 1).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i % 3072) as f64 * 0.37).sin();
        }
        let o = forward_classify(&m, &img).unwrap();
        assert!(o.is_finite());
        assert_eq!(o.row(0), o.row(1));
        assert!(forward_classify(&m, &Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn every_variant_runs_and_reaches_every_parameter() {
        let img = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 7919) % 97) as f64 / 97.0 - 0.5);
        let mut cfgs: Vec<ModelConfig> = ActivationVariant::ALL.iter().map(|&a| toy().with_activation(a)).collect();
        cfgs.push(toy().with_position(PositionMode::Rel).with_attention(AttentionKind::Depthwise));
        cfgs.push(toy().with_position(PositionMode::Rel).with_pooling(Pooling::GlobalAverage));
        for cfg in cfgs {
            let m = build_model(&cfg, 2).unwrap();
            let mut tape = GradTape::new();
            let p = m.bind(&mut tape);
            let x = tape.constant(img.clone());
            let logits = m.forward_tape(&mut tape, &p, x).unwrap();
            let loss = tape.cross_entropy(logits, &[1, 7], 0.1).unwrap();
            tape.backward(loss).unwrap();
            for (v, name) in p.vars().iter().zip(m.params().names()) {
                let g = tape.grad(*v).unwrap();
                assert!(g.iter().all(|x| x.is_finite()));
                assert!(g.iter().any(|&x| x != 0.0), "{name} under {:?}", cfg.activation);
            }
        }
    }

    #[test]
    fn swin_lite_small_shapes() {
        let cfg = ModelConfig {
            image_size: 32,
            patch_size: 2,
            embed_dims: vec![8, 16, 32, 64],
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 2, 2, 4],
            window_size: Some(4),
            num_classes: 5,
            ..ModelConfig::preset("swin-t").unwrap()
        };
        assert_eq!(cfg.stage_grids(), vec![16, 8, 4, 2]);
        assert_eq!(cfg.stage_window(3), Some(2));
        for kind in [AttentionKind::Standard, AttentionKind::Depthwise] {
            let m = build_model(&cfg.clone().with_attention(kind), 3).unwrap();
            let o = forward_classify(&m, &Tensor::ones(&[1, 3, 32, 32])).unwrap();
            assert_eq!(o.shape(), &[1, 5]);
            assert!(o.is_finite());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = build_model(&toy().with_position(PositionMode::Rel), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(Model::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn construction_is_seeded() {
        assert_eq!(build_model(&toy(), 9).unwrap(), build_model(&toy(), 9).unwrap());
        assert_ne!(build_model(&toy(), 9).unwrap(), build_model(&toy(), 10).unwrap());
    }

    #[test]
    fn toy_gradient_subsample() {
        let m = build_model(&toy().with_activation(ActivationVariant::SCALING_RELU), 5).unwrap();
        let img = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let target = "blocks.1.attn.q.weight";
        let x = m.params().get(target).unwrap().clone();
        let coords: Vec<usize> = (0..40).map(|i| i * 97 % x.numel()).collect();
        let idx = m.params().position(target).unwrap();
        let err = finite_diff_check_coords(
            |tape, w| {
                let mut p = m.bind(tape);
                p.vars[idx] = w;
                let xi = tape.constant(img.clone());
                let logits = m.forward_tape(tape, &p, xi)?;
                tape.cross_entropy(logits, &[3, 4], 0.0)
            },
            &x,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
