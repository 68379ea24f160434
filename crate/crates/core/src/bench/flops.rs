//! Closed-form operation counts.
//!
//! Matrix products are counted in multiply-adds (`macs`). Everything else
//! (norms, activations, bias adds, pooling, residuals, divisions) is counted
//! once per element in `elementwise`. Reported GFLOPs follow
//! [`FlopConvention`].

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::backbone::ModelSpec;
use crate::block::BlockConfig;
use crate::error::{domain, Result};

/// Elementwise operations per element of a layer norm: mean, variance,
/// normalize, scale, shift.
pub const LAYER_NORM_OPS: u64 = 5;
/// Elementwise operations per score of a softmax row: scale, exp, normalize.
pub const SOFTMAX_OPS: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-add is one FLOP.
    #[default]
    MacIsOne,
    /// One multiply-add is two FLOPs.
    MacIsTwo,
}

impl FlopConvention {
    pub fn describe(self) -> &'static str {
        match self {
            FlopConvention::MacIsOne => "1 multiply-add = 1 FLOP; norms, activations, bias adds, pooling and residuals = 1 FLOP per element",
            FlopConvention::MacIsTwo => "1 multiply-add = 2 FLOPs; norms, activations, bias adds, pooling and residuals = 1 FLOP per element",
        }
    }

    pub fn flops(self, cost: Cost) -> u64 {
        match self {
            FlopConvention::MacIsOne => cost.macs + cost.elementwise,
            FlopConvention::MacIsTwo => 2 * cost.macs + cost.elementwise,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    pub elementwise: u64,
}

impl Cost {
    pub fn new(macs: u64, elementwise: u64) -> Self {
        Self { macs, elementwise }
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost::new(self.macs + o.macs, self.elementwise + o.elementwise)
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    PatchEmbed,
    EmbedNorm,
    Norm1,
    QkvProjection,
    /// The attention contraction itself, all heads.
    Attention,
    OutProjection,
    Fpc,
    Residual,
    Norm2,
    Ffn,
    FinalNorm,
    Pool,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEntry {
    /// `None` for the head.
    pub stage: Option<usize>,
    /// `None` for per-stage or head components.
    pub block: Option<usize>,
    pub component: Component,
    pub macs: u64,
    pub elementwise: u64,
}

impl FlopEntry {
    pub fn cost(&self) -> Cost {
        Cost::new(self.macs, self.elementwise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub variant: String,
    pub mode: AttentionMode,
    pub height: usize,
    pub width: usize,
    pub convention: FlopConvention,
    pub convention_note: String,
    pub entries: Vec<FlopEntry>,
    pub total_macs: u64,
    pub total_elementwise: u64,
    pub gflops: f64,
}

impl FlopReport {
    pub fn total(&self) -> Cost {
        Cost::new(self.total_macs, self.total_elementwise)
    }

    /// Sum over entries selected by `keep`.
    pub fn sum_where(&self, keep: impl Fn(&FlopEntry) -> bool) -> Cost {
        self.entries.iter().filter(|e| keep(e)).map(FlopEntry::cost).sum()
    }

    pub fn stage_total(&self, stage: usize) -> Cost {
        self.sum_where(|e| e.stage == Some(stage))
    }

    pub fn block_total(&self, stage: usize, block: usize) -> Cost {
        self.sum_where(|e| e.stage == Some(stage) && e.block == Some(block))
    }

    pub fn component_total(&self, component: Component) -> Cost {
        self.sum_where(|e| e.component == component)
    }

    /// Re-expresses the totals under another convention.
    pub fn gflops_under(&self, convention: FlopConvention) -> f64 {
        convention.flops(self.total()) as f64 / 1e9
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

fn layer_norm(tokens: usize, dim: usize) -> Cost {
    Cost::new(0, LAYER_NORM_OPS * u(tokens * dim))
}

/// Cost of one head's attention contraction over `n` tokens.
pub fn attention_head_cost(mode: AttentionMode, n: usize, head_dim: usize, value_dim: usize) -> Cost {
    let (n, d, dv) = (u(n), u(head_dim), u(value_dim));
    match mode.expansion_factor() {
        Some(f) => {
            let de = u(f) * d;
            // Ke^T V and Qe S, plus the denominator Qe . z.
            let macs = 2 * n * de * dv + n * de;
            // ReLU on Q and K, the two expansions (none for the identity
            // encoding), z = sum Ke, and the division.
            let expand = if f == 1 { 0 } else { 2 * n * de };
            let elementwise = 2 * n * d + expand + n * de + n * dv;
            Cost::new(macs, elementwise)
        }
        None => Cost::new(n * n * d + n * n * dv, SOFTMAX_OPS * n * n),
    }
}

/// Cost of all heads of one block's attention contraction.
pub fn block_attention_cost(config: &BlockConfig, n: usize) -> Cost {
    let c = attention_head_cost(config.mode, n, config.head_dim(), config.head_dim());
    Cost::new(c.macs * u(config.heads), c.elementwise * u(config.heads))
}

/// Per-component cost of one block over `n` tokens.
pub fn block_costs(config: &BlockConfig, n: usize) -> Vec<(Component, Cost)> {
    let (nn, c) = (u(n), u(config.dim));
    let r = u(config.reduced_dim());
    let h = u(config.hidden_dim());
    let mut out = vec![
        (Component::Norm1, layer_norm(n, config.dim)),
        (Component::QkvProjection, Cost::new(3 * nn * c * r, 3 * nn * r)),
        (Component::Attention, block_attention_cost(config, n)),
        (Component::OutProjection, Cost::new(nn * r * c, nn * c)),
    ];
    if config.fpc {
        // Mean pool, fc1 + bias, GELU, fc2 + bias, broadcast add.
        out.push((Component::Fpc, Cost::new(2 * c * c, nn * c + 3 * c + nn * c)));
    }
    out.extend([
        (Component::Residual, Cost::new(0, 2 * nn * c)),
        (Component::Norm2, layer_norm(n, config.dim)),
        // Two linears, their biases and the GELU.
        (Component::Ffn, Cost::new(2 * nn * c * h, nn * h + nn * c + nn * h)),
    ]);
    out
}

/// Full operation count of `spec` run on one `height x width` image.
pub fn flop_model(spec: &ModelSpec, height: usize, width: usize, convention: FlopConvention) -> Result<FlopReport> {
    spec.validate()?;
    let stride = spec.variant.total_stride();
    if height == 0 || width == 0 || !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
        return Err(domain(format!(
            "input {height}x{width} must have sides divisible by {stride}"
        )));
    }
    let mut entries = Vec::new();
    let (mut hh, mut ww, mut in_ch) = (height, width, spec.in_channels);
    for (i, stage) in spec.variant.stages.iter().enumerate() {
        let g = spec.embed_geometry(i);
        hh = g.output_side(hh);
        ww = g.output_side(ww);
        let n = hh * ww;
        let c = stage.channels;
        let mut push = |block, component, cost: Cost| {
            entries.push(FlopEntry {
                stage: Some(i),
                block,
                component,
                macs: cost.macs,
                elementwise: cost.elementwise,
            })
        };
        push(
            None,
            Component::PatchEmbed,
            Cost::new(u(n * g.kernel * g.kernel * in_ch * c), u(n * c)),
        );
        push(None, Component::EmbedNorm, layer_norm(n, c));
        let config = spec.block_config(i);
        for b in 0..stage.depth {
            for (component, cost) in block_costs(&config, n) {
                push(Some(b), component, cost);
            }
        }
        in_ch = c;
    }
    let n = hh * ww;
    let c = spec.variant.final_channels();
    let k = spec.class_count;
    for (component, cost) in [
        (Component::FinalNorm, layer_norm(n, c)),
        (Component::Pool, Cost::new(0, u(n * c))),
        (Component::Classifier, Cost::new(u(c * k), u(k))),
    ] {
        entries.push(FlopEntry {
            stage: None,
            block: None,
            component,
            macs: cost.macs,
            elementwise: cost.elementwise,
        });
    }
    let total: Cost = entries.iter().map(FlopEntry::cost).sum();
    Ok(FlopReport {
        variant: spec.variant.name.clone(),
        mode: spec.mode,
        height,
        width,
        convention,
        convention_note: convention.describe().to_string(),
        entries,
        total_macs: total.macs,
        total_elementwise: total.elementwise,
        gflops: convention.flops(total) as f64 / 1e9,
    })
}

/// Only the attention contractions of `spec` at `height x width`.
pub fn attention_only_cost(spec: &ModelSpec, height: usize, width: usize) -> Result<Cost> {
    let report = flop_model(spec, height, width, FlopConvention::MacIsOne)?;
    Ok(report.component_total(Component::Attention))
}
