//! Closed-form FLOPs, parameter and activation counts for a model
//! configuration, without building or running the network.
//!
//! Two cost models are provided. [`CostModel::MAC`] follows the common
//! counter convention for vision backbones: one FLOP per multiply-add,
//! elementwise ops free except LayerNorm, and linear attention evaluated
//! in whichever association order is cheaper. [`CostModel::ANALYTIC`]
//! counts two FLOPs per multiply-add, charges every attention activation
//! per element and never reassociates.

use std::fmt::Write as _;

use serde::Serialize;

use crate::activation::{Nonlinearity, Normalization};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, ModelConfig, PositionMode};
use crate::position::RelativeBiasTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostModel {
    pub version: &'static str,
    pub flops_per_mac: f64,
    pub softmax_per_elem: f64,
    pub scaling_per_elem: f64,
    pub relu_per_elem: f64,
    pub layernorm_per_elem: f64,
    /// Averaging adds and channel products in the depth-wise block.
    pub elementwise_per_elem: f64,
    /// Evaluate linear attention as `q (kᵀ v)` when that is cheaper.
    pub reassociate_linear: bool,
}

impl CostModel {
    pub const MAC: CostModel = CostModel {
        version: "mac-v1",
        flops_per_mac: 1.0,
        softmax_per_elem: 0.0,
        scaling_per_elem: 0.0,
        relu_per_elem: 0.0,
        layernorm_per_elem: 5.0,
        elementwise_per_elem: 0.0,
        reassociate_linear: true,
    };

    pub const ANALYTIC: CostModel = CostModel {
        version: "analytic-v1",
        flops_per_mac: 2.0,
        softmax_per_elem: 5.0,
        scaling_per_elem: 1.0,
        relu_per_elem: 1.0,
        layernorm_per_elem: 8.0,
        elementwise_per_elem: 1.0,
        reassociate_linear: false,
    };
}

/// Raw counts of one layer or group of layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LayerCost {
    pub flops: f64,
    pub params: f64,
    pub acts: f64,
}

impl std::ops::AddAssign for LayerCost {
    fn add_assign(&mut self, o: LayerCost) {
        self.flops += o.flops;
        self.params += o.params;
        self.acts += o.acts;
    }
}

/// `I → O` over `tokens` rows.
pub fn linear_cost(tokens: usize, inputs: usize, outputs: usize, bias: bool, cost: &CostModel) -> LayerCost {
    let (t, i, o) = (tokens as f64, inputs as f64, outputs as f64);
    LayerCost {
        flops: cost.flops_per_mac * t * i * o,
        params: i * o + if bias { o } else { 0.0 },
        acts: t * o,
    }
}

fn layer_norm_cost(tokens: usize, channels: usize, cost: &CostModel) -> LayerCost {
    LayerCost {
        flops: cost.layernorm_per_elem * (tokens * channels) as f64,
        params: 2.0 * channels as f64,
        acts: 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BreakdownRow {
    pub name: String,
    pub flops: f64,
    pub params: f64,
    pub acts: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub gflops: f64,
    pub mparams: f64,
    pub macts: f64,
    pub cost_model: &'static str,
    pub breakdown: Vec<BreakdownRow>,
}

impl ComplexityReport {
    fn from_rows(rows: Vec<BreakdownRow>, cost: &CostModel) -> Self {
        let (f, p, a) = rows
            .iter()
            .fold((0.0, 0.0, 0.0), |(f, p, a), r| (f + r.flops, p + r.params, a + r.acts));
        ComplexityReport {
            gflops: f / 1e9,
            mparams: p / 1e6,
            macts: a / 1e6,
            cost_model: cost.version,
            breakdown: rows,
        }
    }

    /// Learnable scalars, exactly.
    pub fn params(&self) -> usize {
        self.breakdown.iter().map(|r| r.params as usize).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn attention_cost(cfg: &ModelConfig, stage: usize, cost: &CostModel) -> LayerCost {
    let c = cfg.embed_dims[stage];
    let h = cfg.heads[stage];
    let ch = c / h;
    let t = cfg.stage_tokens(stage);
    let n = cfg.scope_tokens(stage);
    let (tf, cf, nf, chf, hf) = (t as f64, c as f64, n as f64, ch as f64, h as f64);
    let rel = cfg.position == PositionMode::Rel;
    let mut total = LayerCost::default();
    let mac = cost.flops_per_mac;
    if rel {
        let (sh, sw) = match cfg.stage_window(stage) {
            Some(w) => (w, w),
            None => {
                let g = cfg.stage_grids()[stage];
                (g, g)
            }
        };
        let rows = match cfg.attention {
            AttentionKind::Standard => h,
            AttentionKind::Depthwise => cfg.dw_bias.rows(c, h),
        };
        total.params += (rows * RelativeBiasTable::cells_for(sh, sw, cfg.class_token())) as f64;
    }
    match cfg.attention {
        AttentionKind::Standard => {
            for _ in 0..4 {
                total += linear_cost(t, c, c, true, cost);
            }
            let act = cfg.activation;
            if act.normalization() == Normalization::LayerNorm && act.layernorm_affine() {
                total.params += 2.0 * nf;
            }
            let map = hf * tf * nf;
            let standard = 2.0 * tf * nf * cf;
            // kᵀv per attention scope, then q·(kᵀv), plus p·v for the bias.
            let groups = tf / nf;
            let reassoc = 2.0 * tf * cf * chf + if rel { tf * nf * cf } else { 0.0 };
            if act.is_linear() && cost.reassociate_linear && reassoc < standard {
                total.flops += mac * reassoc;
                total.acts += groups * hf * chf * chf + tf * cf + if rel { tf * cf } else { 0.0 };
            } else {
                total.flops += mac * standard;
                total.acts += map + tf * cf;
                let per = match act.normalization() {
                    Normalization::Softmax => cost.softmax_per_elem,
                    Normalization::Scaling => cost.scaling_per_elem,
                    Normalization::LayerNorm => cost.layernorm_per_elem,
                    Normalization::None => 0.0,
                };
                let relu = if act.nonlinearity() == Nonlinearity::Relu {
                    cost.relu_per_elem
                } else {
                    0.0
                };
                total.flops += (per + relu) * map;
            }
        }
        AttentionKind::Depthwise => {
            for _ in 0..3 {
                total += linear_cost(t, c, c, true, cost);
            }
            total.flops += cost.elementwise_per_elem * (tf * nf * cf + tf * cf);
            if rel {
                total.flops += mac * tf * nf * cf;
                total.acts += tf * cf;
            }
        }
    }
    total
}

fn row(name: String, c: LayerCost) -> BreakdownRow {
    BreakdownRow {
        name,
        flops: c.flops,
        params: c.params,
        acts: c.acts,
    }
}

/// Complexity under the default ([`CostModel::MAC`]) convention.
pub fn count(cfg: &ModelConfig, image_size: usize) -> Result<ComplexityReport> {
    count_with(cfg, image_size, &CostModel::MAC)
}

pub fn count_with(cfg: &ModelConfig, image_size: usize, cost: &CostModel) -> Result<ComplexityReport> {
    let cfg = ModelConfig {
        image_size,
        ..cfg.clone()
    };
    cfg.validate_shapes()?;
    let mut rows = Vec::new();
    let g0 = cfg.stage_grids()[0];
    let c0 = cfg.embed_dims[0];
    let patch_in = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    let mut stem = linear_cost(g0 * g0, patch_in, c0, true, cost);
    if cfg.hierarchical() {
        stem += layer_norm_cost(g0 * g0, c0, cost);
    }
    if cfg.class_token() {
        stem.params += c0 as f64;
    }
    if cfg.position == PositionMode::Abs {
        stem.params += (cfg.stage_tokens(0) * c0) as f64;
    }
    rows.push(row("patch_embed".into(), stem));
    for st in 0..cfg.stages() {
        let c = cfg.embed_dims[st];
        let t = cfg.stage_tokens(st);
        if st > 0 {
            let prev = cfg.embed_dims[st - 1];
            let mut m = layer_norm_cost(t, 4 * prev, cost);
            m += linear_cost(t, 4 * prev, c, false, cost);
            rows.push(row(format!("stages.{st}.merge"), m));
        }
        for b in 0..cfg.depths[st] {
            let mut blk = layer_norm_cost(t, c, cost);
            blk += attention_cost(&cfg, st, cost);
            blk += layer_norm_cost(t, c, cost);
            blk += linear_cost(t, c, cfg.mlp_ratio * c, true, cost);
            blk += linear_cost(t, cfg.mlp_ratio * c, c, true, cost);
            let name = if cfg.hierarchical() {
                format!("stages.{st}.blocks.{b}")
            } else {
                format!("blocks.{b}")
            };
            rows.push(row(name, blk));
        }
    }
    let last = cfg.stages() - 1;
    let cl = cfg.embed_dims[last];
    let mut head = layer_norm_cost(cfg.stage_tokens(last), cl, cost);
    head += linear_cost(1, cl, cfg.num_classes, true, cost);
    rows.push(row("head".into(), head));
    Ok(ComplexityReport::from_rows(rows, cost))
}

/// Relative reductions `1 − variant/base`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Savings {
    pub flops: f64,
    pub params: f64,
    pub acts: f64,
}

pub fn savings(base: &ComplexityReport, variant: &ComplexityReport) -> Result<Savings> {
    if base.gflops == 0.0 || base.mparams == 0.0 || base.macts == 0.0 {
        return Err(Error::Contract("savings against a zero baseline".into()));
    }
    Ok(Savings {
        flops: 1.0 - variant.gflops / base.gflops,
        params: 1.0 - variant.mparams / base.mparams,
        acts: 1.0 - variant.macts / base.macts,
    })
}

/// Aligned text table with one line per configuration.
pub fn format_table(entries: &[(ModelConfig, ComplexityReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<14} {:<12} {:<4} {:>9} {:>9} {:>9}",
        "Base", "Act. Func.", "Kernel", "Pos.", "GFLOPs", "MParams", "MActs"
    );
    for (cfg, r) in entries {
        let kernel = match cfg.attention {
            AttentionKind::Standard => "C->1->C",
            AttentionKind::Depthwise => "depth-wise",
        };
        let _ = writeln!(
            s,
            "{:<8} {:<14} {:<12} {:<4} {:>9.3} {:>9.3} {:>9.3}",
            cfg.name,
            cfg.activation.encoding(),
            kernel,
            cfg.position.to_string(),
            r.gflops,
            r.mparams,
            r.macts
        );
    }
    s
}
