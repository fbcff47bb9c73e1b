//! Analytic parameter and operation counts.
//!
//! MACs follow the forward kernels exactly, so for any network the totals
//! here equal the instrumented counter of [`crate::counters`]:
//!
//! | op                      | MACs                          |
//! |-------------------------|-------------------------------|
//! | conv                    | out_vox · Cout · Cin/g · k³   |
//! | transposed conv         | in_vox · Cin · Cout/g · k³    |
//! | linear                  | rows · Cin · Cout             |
//! | causal depthwise 1D     | C · L · k                     |
//! | attention               | 2 · Lq · Lk · C               |
//! | selective scan          | L · C · (C + 2N) + L · C · (4N + 2) |
//!
//! Normalizations, activations and residual adds go into a separate
//! elementwise column: layer norm 5 per element, SiLU, softplus, softmax
//! and exp 4 each, adds and gating multiplies 1.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::{
    layer_name, path_name, AttnLayer, Conv, ConvBlock, DwKind, MambaLayer, Reduction, SeqLayer, StageBody, MSV4_KERNELS,
};
use crate::error::Result;
use crate::ssm::{recurrence_macs, Discretization};

pub const LN_OPS: u64 = 5;
pub const ACT_OPS: u64 = 4;

/// One row of a structure or cost report. Shapes are `[C, D, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub in_shape: [usize; 4],
    pub out_shape: [usize; 4],
    pub params: usize,
    pub macs: u64,
    pub elementwise: u64,
    pub attention_entries: u64,
}

fn vox(s: [usize; 3]) -> u64 {
    s.iter().map(|&e| e as u64).product()
}

fn shape4(c: usize, s: [usize; 3]) -> [usize; 4] {
    [c, s[0], s[1], s[2]]
}

fn spatial(s: [usize; 4]) -> [usize; 3] {
    [s[1], s[2], s[3]]
}

pub fn conv_macs(conv: &Conv, input: [usize; 3]) -> Result<u64> {
    if conv.transposed {
        Ok(conv.spec.tconv_macs(input))
    } else {
        conv.spec.macs(input)
    }
}

pub fn conv_cost(name: &str, conv: &Conv, input: [usize; 4]) -> Result<LayerCost> {
    let s = spatial(input);
    let out = conv.out_spatial(s)?;
    Ok(LayerCost {
        name: name.into(),
        kind: if conv.transposed { "tconv" } else { "conv" }.into(),
        in_shape: input,
        out_shape: shape4(conv.spec.out_channels, out),
        params: conv.param_count(),
        macs: conv_macs(conv, s)?,
        elementwise: 0,
        attention_entries: 0,
    })
}

pub fn conv_block_cost(name: &str, block: &ConvBlock, input: [usize; 4]) -> Result<LayerCost> {
    let mut r = conv_cost(name, &block.conv, input)?;
    let n = vox(spatial(r.out_shape)) * block.out_channels() as u64;
    r.kind = if block.conv.transposed { "tconv_block" } else { "conv_block" }.into();
    r.params = block.param_count();
    r.elementwise = (LN_OPS + ACT_OPS) * n;
    Ok(r)
}

pub fn mamba_cost(name: &str, m: &MambaLayer, input: [usize; 4]) -> LayerCost {
    let cfg = &m.cfg;
    let l = vox(spatial(input));
    let (c, ci, cs, n) = (cfg.channels as u64, cfg.inner() as u64, cfg.ssm_width() as u64, cfg.state_dim as u64);
    let dirs = cfg.directions.len() as u64;
    let dw = if cfg.multiscale {
        MSV4_KERNELS.iter().map(|&k| (k * k * k) as u64).sum::<u64>()
    } else {
        cfg.dw.taps() as u64
    };
    let scan = l * cs * (cs + 2 * n) + recurrence_macs(l as usize, cs as usize, n as usize);
    let gate = if cfg.gated { l * c * cs } else { 0 };
    let macs = l * c * ci + l * ci * dw + dirs * scan + gate + l * cs * c;

    let disc = match cfg.scan.discretization {
        Discretization::Euler => ACT_OPS,
        Discretization::Zoh => 2 * ACT_OPS + 1,
    };
    let per_dir = ACT_OPS * l * cs + disc * l * cs * n;
    let gate_ops = if cfg.gated { (ACT_OPS + 1) * l * cs } else { 0 };
    let elementwise =
        LN_OPS * l * c + ACT_OPS * l * cs + dirs * per_dir + (dirs - 1) * l * cs + gate_ops + l * c;
    LayerCost {
        name: name.into(),
        kind: match (cfg.multiscale, cfg.dw) {
            (true, _) => "mamba_msv4",
            (false, DwKind::D1) => "mamba_1d",
            (false, DwKind::D3) => "mamba_3d",
        }
        .into(),
        in_shape: input,
        out_shape: input,
        params: m.param_count(),
        macs,
        elementwise,
        attention_entries: 0,
    }
}

pub fn attn_cost(name: &str, a: &AttnLayer, input: [usize; 4]) -> Result<LayerCost> {
    let cfg = &a.cfg;
    let s = spatial(input);
    let l = vox(s);
    let lk = vox(cfg.kv_spatial(s)?);
    let (c, f) = (cfg.channels as u64, (cfg.ffn_expand * cfg.channels) as u64);
    let entries = cfg.attention_entries(s)?;
    let (sr_macs, sr_ops) = match (&a.sr, cfg.reduces()) {
        (Some((conv, _)), true) => (conv_macs(conv, s)?, LN_OPS * lk * c),
        (None, true) => (0, l * c),
        _ => (0, 0),
    };
    let macs = l * c * c + sr_macs + 2 * lk * c * c + 2 * l * lk * c + l * c * c + 2 * l * c * f;
    let elementwise = 2 * LN_OPS * l * c + sr_ops + ACT_OPS * entries + 2 * l * c + ACT_OPS * l * f;
    Ok(LayerCost {
        name: name.into(),
        kind: match (cfg.reduces(), cfg.reduction_kind) {
            (false, _) => "attention",
            (true, Reduction::Conv) => "sra_attention",
            (true, Reduction::AvgPool) => "sra_attention_pool",
        }
        .into(),
        in_shape: input,
        out_shape: input,
        params: a.param_count(),
        macs,
        elementwise,
        attention_entries: entries,
    })
}

pub fn seq_cost(name: &str, layer: &SeqLayer, input: [usize; 4]) -> Result<LayerCost> {
    match layer {
        SeqLayer::Mamba(m) => Ok(mamba_cost(name, m, input)),
        SeqLayer::Attn(a) => attn_cost(name, a, input),
    }
}

/// Rows of a stage body, named under `prefix`.
pub fn stage_costs(prefix: &str, body: &StageBody, input: [usize; 4]) -> Result<Vec<LayerCost>> {
    let mut rows = Vec::new();
    let mut feats = Vec::new();
    for (i, p) in body.paths.iter().enumerate() {
        let r = conv_block_cost(&format!("{prefix}.{}", path_name(body.scheme, i)), p, input)?;
        feats.push(r.out_shape);
        rows.push(r);
    }
    let out = feats[0];
    if let Some(proj) = &body.proj {
        let wide = [out[0] * feats.len(), out[1], out[2], out[3]];
        rows.push(seq_cost(&format!("{prefix}.h"), &body.layers[0], wide)?);
        rows.push(conv_cost(&format!("{prefix}.proj"), proj, wide)?);
    } else {
        for (i, l) in body.layers.iter().enumerate() {
            let mut r = seq_cost(&format!("{prefix}.{}", layer_name(body.scheme, i)), l, out)?;
            if i > 0 {
                r.elementwise += vox(spatial(out)) * out[0] as u64;
            }
            rows.push(r);
        }
    }
    Ok(rows)
}

/// Totals over the rows of one network at one input shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub label: String,
    pub input: [usize; 4],
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
    pub elementwise: u64,
    pub peak_attention_entries: u64,
    /// Largest attention matrix the executing layers accept.
    pub attention_limit: u64,
    #[serde(skip)]
    pub rows: Vec<LayerCost>,
}

impl CostReport {
    pub fn from_rows(label: &str, input: [usize; 4], rows: Vec<LayerCost>) -> Self {
        let macs = rows.iter().map(|r| r.macs).sum::<u64>();
        CostReport {
            label: label.into(),
            input,
            params: rows.iter().map(|r| r.params).sum(),
            macs,
            flops: 2 * macs,
            elementwise: rows.iter().map(|r| r.elementwise).sum(),
            peak_attention_entries: rows.iter().map(|r| r.attention_entries).max().unwrap_or(0),
            attention_limit: crate::blocks::DEFAULT_ATTENTION_LIMIT,
            rows,
        }
    }

    /// Whether a forward at this shape would be refused by the memory guard.
    pub fn exceeds_guard(&self) -> bool {
        self.peak_attention_entries > self.attention_limit
    }

    /// Per-layer CSV.
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("layer,type,in_shape,out_shape,params,macs,elementwise,attention_entries\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.kind,
                fmt_shape(r.in_shape),
                fmt_shape(r.out_shape),
                r.params,
                r.macs,
                r.elementwise,
                r.attention_entries
            );
        }
        s
    }
}

pub fn fmt_shape(s: [usize; 4]) -> String {
    format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3])
}

/// `variant,params,macs,flops,peak_attention_entries,oom`, rows in order.
pub fn compare_csv(reports: &[CostReport]) -> String {
    let mut s = String::from("variant,params,macs,flops,peak_attention_entries,oom\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.label,
            r.params,
            r.macs,
            r.flops,
            r.peak_attention_entries,
            r.exceeds_guard()
        );
    }
    s
}

/// Markdown table. "FLOPs (G)" is MACs in the usual vision
/// convention; the doubled count follows. Rows the memory guard would
/// refuse are marked OOM.
pub fn compare_markdown(reports: &[CostReport]) -> String {
    let mut s = String::from(
        "| Variant | Params (M) | FLOPs (G) | 2·MACs (G) | Peak attention entries | Runs |\n|---|---:|---:|---:|---:|---|\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {} | {} |",
            r.label,
            r.params as f64 / 1e6,
            r.macs as f64 / 1e9,
            r.flops as f64 / 1e9,
            r.peak_attention_entries,
            if r.exceeds_guard() { "OOM" } else { "yes" }
        );
    }
    s
}

/// Exponent `p` of `cost ∝ size^p` through two measurements.
pub fn fit_exponent(size_a: f64, cost_a: f64, size_b: f64, cost_b: f64) -> f64 {
    (cost_b / cost_a).ln() / (size_b / size_a).ln()
}
