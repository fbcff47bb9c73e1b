//! U-shaped segmentation networks.
//!
//! ```text
//! stem  : ConvBlock k3 s1                  in → c₀
//! ES1–4 : f (ConvBlock k3 s2) then h       cᵢ₋₁ → cᵢ, extents halve
//! DS1–3 : g (tconv block k2 s2), concat the matching encoder output,
//!         fuse (ConvBlock 1×1×1, 2c → c), then h
//! head  : tconv block k2 s2 to c₀, plus the stem output, then a
//!         1×1×1 conv to the classes
//! ```
//!
//! `h` is a Mamba or attention layer depending on the variant. Decoder
//! attention layers reuse the reduction ratio and heads of the encoder
//! stage at the same resolution.

use std::cell::Cell;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    ensure_finite, AttnConfig, AttnLayer, Conv, ConvBlock, ConvBlockCache, DwKind, MambaConfig,
    MambaLayer, Multiscale, Reduction, SeqCache, SeqKind, SeqLayer, StageBody, StageCache,
    DEFAULT_ATTENTION_LIMIT,
};
use crate::cost::{conv_block_cost, conv_cost, fmt_shape, seq_cost, stage_costs, CostReport, LayerCost};
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::params::{Builder, Grads, ParamStore};
use crate::scan_order::{layer_seed, Direction};
use crate::ssm::{Phase, ScanOptions};
use crate::tensor::{Scalar, Shape3D, Tensor};

/// Input extents must be multiples of this.
pub const DOWNSAMPLING: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mamba_1d")]
    Mamba1d,
    #[serde(rename = "mamba_3d")]
    Mamba3d,
    #[serde(rename = "mamba_3dmt")]
    Mamba3dMt,
    #[serde(rename = "trans_sra")]
    TransSra,
    #[serde(rename = "trans_vanilla")]
    TransVanilla,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Mamba1d, Variant::Mamba3d, Variant::Mamba3dMt, Variant::TransSra, Variant::TransVanilla];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mamba1d => "mamba_1d",
            Variant::Mamba3d => "mamba_3d",
            Variant::Mamba3dMt => "mamba_3dmt",
            Variant::TransSra => "trans_sra",
            Variant::TransVanilla => "trans_vanilla",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Mamba1d => "UlikeMamba_1d",
            Variant::Mamba3d => "UlikeMamba_3d",
            Variant::Mamba3dMt => "UlikeMamba_3dMT",
            Variant::TransSra => "UlikeTrans_SRA",
            Variant::TransVanilla => "UlikeTrans_vanilla",
        }
    }

    pub fn seq_kind(self) -> SeqKind {
        match self {
            Variant::TransSra | Variant::TransVanilla => SeqKind::Attention,
            _ => SeqKind::Mamba,
        }
    }
}

/// Where a multi-scale scheme applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsScope {
    #[default]
    Encoder,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub multiscale: Multiscale,
    pub multiscale_scope: MsScope,
    /// Scan directions of every Mamba layer; the variant's default if unset.
    pub directions: Option<Vec<Direction>>,
    /// Depthwise convolution of Mamba layers; the variant's default if unset.
    pub dwconv: Option<DwKind>,
    pub expand: usize,
    pub state_dim: usize,
    pub gated: bool,
    pub scan: ScanOptions,
    pub sra_reduction: [usize; 4],
    pub sra_heads: [usize; 4],
    pub ffn_expand: usize,
    pub reduction_kind: Reduction,
    pub attention_limit: u64,
    /// Adds the stem output to the upsampled head features.
    pub stem_skip: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::Mamba3d,
            in_channels: 1,
            num_classes: 3,
            stem_channels: 16,
            stage_channels: [32, 64, 128, 256],
            multiscale: Multiscale::None,
            multiscale_scope: MsScope::Encoder,
            directions: None,
            dwconv: None,
            expand: 2,
            state_dim: 16,
            gated: true,
            scan: ScanOptions::default(),
            sra_reduction: [8, 4, 2, 1],
            sra_heads: [1, 2, 4, 8],
            ffn_expand: 4,
            reduction_kind: Reduction::Conv,
            attention_limit: DEFAULT_ATTENTION_LIMIT,
            stem_skip: true,
        }
    }
}

impl NetworkConfig {
    pub fn reference(variant: Variant) -> Self {
        NetworkConfig { variant, ..Default::default() }
    }

    pub fn resolved_dwconv(&self) -> DwKind {
        self.dwconv.unwrap_or(match self.variant {
            Variant::Mamba1d => DwKind::D1,
            _ => DwKind::D3,
        })
    }

    pub fn resolved_directions(&self) -> Vec<Direction> {
        self.directions.clone().unwrap_or_else(|| match self.variant {
            Variant::Mamba3dMt => vec![Direction::ForwardW, Direction::HFirst, Direction::DFirst],
            _ => vec![Direction::ForwardW],
        })
    }

    pub fn resolved_multiscale(&self) -> Multiscale {
        match (self.variant, self.multiscale) {
            (Variant::Mamba3dMt, Multiscale::None) => Multiscale::Msv4,
            (_, m) => m,
        }
    }

    pub fn resolved_scope(&self) -> MsScope {
        match self.variant {
            Variant::Mamba3dMt => MsScope::All,
            _ => self.multiscale_scope,
        }
    }

    /// Fills the variant-dependent fields so the config no longer depends
    /// on the variant's defaults.
    pub fn resolve(&self) -> NetworkConfig {
        let mut c = self.clone();
        if c.variant.seq_kind() == SeqKind::Mamba {
            c.dwconv = Some(self.resolved_dwconv());
            c.directions = Some(self.resolved_directions());
        }
        c.multiscale = self.resolved_multiscale();
        c.multiscale_scope = self.resolved_scope();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.num_classes == 0 || self.stem_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stage_channels.contains(&0) {
            return bad("stage channels must be positive".into());
        }
        match self.variant {
            Variant::Mamba3dMt => {
                if self.resolved_multiscale() != Multiscale::Msv4 {
                    return bad("mamba_3dmt uses the MSv4 layer; leave multiscale unset or msv4".into());
                }
                if self.resolved_dwconv() != DwKind::D3 {
                    return bad("mamba_3dmt uses the 3D depthwise convolution".into());
                }
            }
            Variant::TransSra | Variant::TransVanilla => {
                if self.multiscale == Multiscale::Msv4 {
                    return bad("MSv4 is Mamba-specific".into());
                }
                if self.directions.is_some() || self.dwconv.is_some() {
                    return bad(format!("{} has no Mamba layers to configure", self.variant.name()));
                }
            }
            _ => {}
        }
        if self.resolved_multiscale() == Multiscale::Msv4 && self.resolved_dwconv() != DwKind::D3 {
            return bad("MSv4 replaces the 3D depthwise convolution; set dwconv = \"3d\"".into());
        }
        for i in 0..4 {
            self.attn_config(i, self.stage_channels[i]).validate()?;
        }
        self.mamba_config(self.stem_channels, false).validate()
    }

    pub fn reductions(&self) -> [usize; 4] {
        match self.variant {
            Variant::TransVanilla => [1; 4],
            _ => self.sra_reduction,
        }
    }

    fn attn_config(&self, stage: usize, channels: usize) -> AttnConfig {
        AttnConfig {
            ffn_expand: self.ffn_expand,
            reduction_kind: self.reduction_kind,
            memory_limit: self.attention_limit,
            ..AttnConfig::new(channels, self.sra_heads[stage], self.reductions()[stage])
        }
    }

    fn mamba_config(&self, channels: usize, msv4: bool) -> MambaConfig {
        MambaConfig {
            channels,
            expand: self.expand,
            dw: self.resolved_dwconv(),
            state_dim: self.state_dim,
            directions: self.resolved_directions(),
            multiscale: msv4,
            gated: self.gated,
            scan: self.scan,
        }
    }

    /// Checks that a spatial input can pass through the network.
    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        if spatial.iter().any(|&e| e == 0 || e % DOWNSAMPLING != 0) {
            return Err(Error::Divisibility { shape: spatial, multiple: DOWNSAMPLING });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum DecoderBody {
    Layer(SeqLayer),
    Stage(StageBody),
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub g: ConvBlock,
    pub fuse: ConvBlock,
    pub body: DecoderBody,
}

#[derive(Clone, Debug)]
enum DecoderBodyCache<T> {
    Layer(SeqCache<T>),
    Stage(StageCache<T>),
}

#[derive(Clone, Debug)]
struct DecoderCache<T> {
    g: ConvBlockCache<T>,
    fuse: ConvBlockCache<T>,
    body: DecoderBodyCache<T>,
}

/// Activations of one forward pass, for one sample.
#[derive(Clone, Debug)]
pub struct NetCache<T> {
    stem: ConvBlockCache<T>,
    enc: Vec<StageCache<T>>,
    dec: Vec<DecoderCache<T>>,
    head_up: ConvBlockCache<T>,
    head_in: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Network {
    /// Resolved configuration.
    pub cfg: NetworkConfig,
    pub stem: ConvBlock,
    pub encoder: Vec<StageBody>,
    pub decoder: Vec<DecoderStage>,
    pub head_up: ConvBlock,
    pub head_out: Conv,
}

fn enc_name(i: usize) -> String {
    format!("ES{}", i + 1)
}

fn dec_name(j: usize) -> String {
    format!("DS{}", j + 1)
}

/// Prefixes the layer named by a non-finite error.
fn within<R>(prefix: &str, r: Result<R>) -> Result<R> {
    r.map_err(|e| match e {
        Error::NonFinite { layer } => Error::NonFinite { layer: format!("{prefix}.{layer}") },
        e => e,
    })
}

impl Network {
    /// Builds the network with parameters drawn from `seed`.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<(Network, ParamStore<f64>)> {
        cfg.validate()?;
        let cfg = cfg.resolve();
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut ps, &mut rng);
        let kind = cfg.variant.seq_kind();
        let scheme = cfg.resolved_multiscale();
        let all = cfg.resolved_scope() == MsScope::All;
        let mamba_index = Cell::new(0u64);
        let make_seq = |stage: usize, msv4: bool| {
            let cfg = &cfg;
            let mamba_index = &mamba_index;
            move |b: &mut Builder<'_>, name: &str, c: usize| -> Result<SeqLayer> {
                Ok(match kind {
                    SeqKind::Mamba => {
                        let k = mamba_index.get();
                        mamba_index.set(k + 1);
                        SeqLayer::Mamba(MambaLayer::new(b, name, cfg.mamba_config(c, msv4), layer_seed(seed, k))?)
                    }
                    SeqKind::Attention => SeqLayer::Attn(AttnLayer::new(b, name, cfg.attn_config(stage, c))?),
                })
            }
        };

        let c0 = cfg.stem_channels;
        let ch = cfg.stage_channels;
        let stem = ConvBlock::new(&mut b, "stem", ConvSpec::cubic(cfg.in_channels, c0, 3, 1, 1), false)?;
        let mut encoder = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { c0 } else { ch[i - 1] };
            let mut s = b.scope(&enc_name(i));
            let f = make_seq(i, scheme == Multiscale::Msv4);
            encoder.push(StageBody::new(&mut s, scheme, cin, ch[i], 2, kind, &f)?);
        }
        let mut decoder = Vec::new();
        for j in 0..3 {
            // DS1 sits at the resolution of ES3.
            let stage = 2 - j;
            let (cin, c) = (ch[stage + 1], ch[stage]);
            let mut s = b.scope(&dec_name(j));
            let g = ConvBlock::new(&mut s, "g", ConvSpec::cubic(cin, c, 2, 2, 0), true)?;
            let fuse = ConvBlock::new(&mut s, "fuse", ConvSpec::cubic(2 * c, c, 1, 1, 0), false)?;
            let body = match (all, scheme) {
                (true, Multiscale::Msv1 | Multiscale::Msv2 | Multiscale::Msv3) => {
                    DecoderBody::Stage(StageBody::new(&mut s, scheme, c, c, 1, kind, &make_seq(stage, false))?)
                }
                _ => DecoderBody::Layer(make_seq(stage, all && scheme == Multiscale::Msv4)(&mut s, "h", c)?),
            };
            decoder.push(DecoderStage { g, fuse, body });
        }
        let head_up = ConvBlock::new(&mut b, "head.up", ConvSpec::cubic(ch[0], c0, 2, 2, 0), true)?;
        let head_out = Conv::new(&mut b, "head.out", ConvSpec::cubic(c0, cfg.num_classes, 1, 1, 0), false)?;
        let net = Network { cfg, stem, encoder, decoder, head_up, head_out };
        debug_assert_eq!(net.param_count(), ps.numel());
        Ok((net, ps))
    }

    /// Parameter count from the layer formulas.
    pub fn param_count(&self) -> usize {
        let dec: usize = self
            .decoder
            .iter()
            .map(|d| {
                d.g.param_count()
                    + d.fuse.param_count()
                    + match &d.body {
                        DecoderBody::Layer(l) => l.param_count(),
                        DecoderBody::Stage(s) => s.param_count(),
                    }
            })
            .sum();
        self.stem.param_count()
            + self.encoder.iter().map(StageBody::param_count).sum::<usize>()
            + dec
            + self.head_up.param_count()
            + self.head_out.param_count()
    }

    /// Layer-by-layer shapes and costs. Only divisibility is checked: the
    /// attention memory guard applies to execution, not to arithmetic.
    pub fn plan(&self, spatial: [usize; 3]) -> Result<Vec<LayerCost>> {
        self.cfg.check_input(spatial)?;
        let mut rows = Vec::new();
        let input = [self.cfg.in_channels, spatial[0], spatial[1], spatial[2]];
        let stem = conv_block_cost("stem", &self.stem, input)?;
        let stem_out = stem.out_shape;
        rows.push(stem);
        let mut x = stem_out;
        let mut skips = Vec::new();
        for (i, body) in self.encoder.iter().enumerate() {
            let sp = [x[1], x[2], x[3]];
            rows.extend(stage_costs(&enc_name(i), body, x)?);
            let o = body.out_spatial(sp)?;
            x = [body.paths[0].out_channels(), o[0], o[1], o[2]];
            skips.push(x);
        }
        for (j, d) in self.decoder.iter().enumerate() {
            let name = dec_name(j);
            let g = conv_block_cost(&format!("{name}.g"), &d.g, x)?;
            let skip = skips[2 - j];
            let cat = [g.out_shape[0] + skip[0], skip[1], skip[2], skip[3]];
            rows.push(g);
            let fuse = conv_block_cost(&format!("{name}.fuse"), &d.fuse, cat)?;
            x = fuse.out_shape;
            rows.push(fuse);
            match &d.body {
                DecoderBody::Layer(l) => rows.push(seq_cost(&format!("{name}.h"), l, x)?),
                DecoderBody::Stage(s) => rows.extend(stage_costs(&name, s, x)?),
            }
        }
        let mut up = conv_block_cost("head.up", &self.head_up, x)?;
        if self.cfg.stem_skip {
            up.elementwise += stem_out.iter().map(|&e| e as u64).product::<u64>();
        }
        let up_out = up.out_shape;
        rows.push(up);
        rows.push(conv_cost("head.out", &self.head_out, up_out)?);
        Ok(rows)
    }

    pub fn cost(&self, spatial: [usize; 3]) -> Result<CostReport> {
        let input = [self.cfg.in_channels, spatial[0], spatial[1], spatial[2]];
        let mut r = CostReport::from_rows(self.cfg.variant.display_name(), input, self.plan(spatial)?);
        r.attention_limit = self.cfg.attention_limit;
        Ok(r)
    }

    /// Plain-text structure listing.
    pub fn describe(&self, spatial: [usize; 3]) -> Result<String> {
        let rows = self.plan(spatial)?;
        let mut s = String::new();
        let _ = writeln!(s, "network {}", self.cfg.variant.display_name());
        let _ = writeln!(
            s,
            "encoder stages {}, decoder stages {}, parameters {}",
            self.encoder.len(),
            self.decoder.len(),
            self.param_count()
        );
        let _ = writeln!(s, "{:<14} {:<20} {:>16} {:>16} {:>10}", "layer", "type", "in", "out", "params");
        for r in &rows {
            let _ = writeln!(
                s,
                "{:<14} {:<20} {:>16} {:>16} {:>10}",
                r.name,
                r.kind,
                fmt_shape(r.in_shape),
                fmt_shape(r.out_shape),
                r.params
            );
        }
        Ok(s)
    }

    /// `layer,type,in_shape,out_shape,params`
    pub fn describe_csv(&self, spatial: [usize; 3]) -> Result<String> {
        let mut s = String::from("layer,type,in_shape,out_shape,params\n");
        for r in self.plan(spatial)? {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.kind, fmt_shape(r.in_shape), fmt_shape(r.out_shape), r.params);
        }
        Ok(s)
    }

    /// Divisibility and attention memory checks for an input extent.
    pub fn preflight(&self, spatial: [usize; 3]) -> Result<()> {
        self.cfg.check_input(spatial)?;
        let mut s = spatial;
        for body in &self.encoder {
            body.check_memory(s)?;
            s = body.out_spatial(s)?;
        }
        for d in &self.decoder {
            s = d.g.conv.out_spatial(s)?;
            match &d.body {
                DecoderBody::Layer(l) => l.check_memory(s)?,
                DecoderBody::Stage(b) => b.check_memory(s)?,
            }
        }
        Ok(())
    }

    fn check_sample<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = Shape3D::of(x)?;
        if s.channels != self.cfg.in_channels {
            return Err(Error::dim("network input channels", x.shape(), &[self.cfg.in_channels]));
        }
        self.preflight(s.spatial())
    }

    /// Logits `[classes, D, H, W]` for one sample `[C_in, D, H, W]`.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, NetCache<T>)> {
        self.check_sample(x)?;
        let (s0, stem) = self.stem.forward(ps, x)?;
        ensure_finite(&s0, || "stem".into())?;
        let mut enc = Vec::with_capacity(4);
        let mut skips = Vec::with_capacity(4);
        let mut h = s0.clone();
        for (i, body) in self.encoder.iter().enumerate() {
            let (y, c) = within(&enc_name(i), body.forward(ps, &h, phase))?;
            enc.push(c);
            skips.push(y.clone());
            h = y;
        }
        let mut dec = Vec::with_capacity(3);
        for (j, d) in self.decoder.iter().enumerate() {
            let name = dec_name(j);
            let (up, g) = d.g.forward(ps, &h)?;
            ensure_finite(&up, || format!("{name}.g"))?;
            let cat = Tensor::concat0(&[&up, &skips[2 - j]])?;
            let (f, fuse) = d.fuse.forward(ps, &cat)?;
            ensure_finite(&f, || format!("{name}.fuse"))?;
            let (y, body) = match &d.body {
                DecoderBody::Layer(l) => {
                    let (y, c) = l.forward(ps, &f, phase)?;
                    ensure_finite(&y, || format!("{name}.h"))?;
                    (y, DecoderBodyCache::Layer(c))
                }
                DecoderBody::Stage(s) => {
                    let (y, c) = within(&name, s.forward(ps, &f, phase))?;
                    (y, DecoderBodyCache::Stage(c))
                }
            };
            dec.push(DecoderCache { g, fuse, body });
            h = y;
        }
        let (mut u, head_up) = self.head_up.forward(ps, &h)?;
        if self.cfg.stem_skip {
            u.add_assign(&s0)?;
        }
        ensure_finite(&u, || "head.up".into())?;
        let logits = self.head_out.forward(ps, &u)?;
        ensure_finite(&logits, || "head.out".into())?;
        Ok((logits, NetCache { stem, enc, dec, head_up, head_in: u }))
    }

    /// Accumulates parameter gradients for upstream `gy`; returns the input
    /// gradient.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &NetCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let gu = self.head_out.backward(ps, &cache.head_in, gy, grads)?;
        let mut gh = self.head_up.backward(ps, &cache.head_up, &gu, grads)?;
        let mut gskips: Vec<Option<Tensor<T>>> = vec![None; 3];
        for (j, d) in self.decoder.iter().enumerate().rev() {
            let c = &cache.dec[j];
            let gf = match (&d.body, &c.body) {
                (DecoderBody::Layer(l), DecoderBodyCache::Layer(lc)) => l.backward(ps, lc, &gh, grads)?,
                (DecoderBody::Stage(s), DecoderBodyCache::Stage(sc)) => s.backward(ps, sc, &gh, grads)?,
                _ => return Err(Error::Invalid("decoder cache of the wrong kind".into())),
            };
            let gcat = d.fuse.backward(ps, &c.fuse, &gf, grads)?;
            let c_up = d.g.out_channels();
            let mut parts = gcat.split0(&[c_up, gcat.shape()[0] - c_up])?;
            gskips[2 - j] = parts.pop();
            gh = d.g.backward(ps, &c.g, &parts[0], grads)?;
        }
        for (i, body) in self.encoder.iter().enumerate().rev() {
            if let Some(Some(g)) = gskips.get(i) {
                gh.add_assign(g)?;
            }
            gh = body.backward(ps, &cache.enc[i], &gh, grads)?;
        }
        if self.cfg.stem_skip {
            gh.add_assign(&gu)?;
        }
        self.stem.backward(ps, &cache.stem, &gh, grads)
    }

    /// Forward over a batch `[B, C_in, D, H, W]`, one sample at a time.
    pub fn forward_batch<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: Phase,
    ) -> Result<(Tensor<T>, Vec<NetCache<T>>)> {
        let (b, sample) = split_batch(x)?;
        let mut out = Vec::new();
        let mut caches = Vec::with_capacity(b);
        let mut oshape = Vec::new();
        for i in 0..b {
            let xi = Tensor::new(&x.shape()[1..], x.data()[i * sample..(i + 1) * sample].to_vec())?;
            let (y, c) = self.forward(ps, &xi, phase)?;
            oshape = y.shape().to_vec();
            out.extend_from_slice(y.data());
            caches.push(c);
        }
        let mut shape = vec![b];
        shape.extend(oshape);
        Ok((Tensor::new(&shape, out)?, caches))
    }
}

/// One cost report per labelled config at a common input extent, in the
/// given order.
pub fn compare_table(entries: &[(String, NetworkConfig)], spatial: [usize; 3]) -> Result<Vec<CostReport>> {
    entries
        .iter()
        .map(|(label, cfg)| {
            let (net, _) = Network::build(cfg, 0)?;
            let mut r = net.cost(spatial)?;
            r.label = label.clone();
            Ok(r)
        })
        .collect()
}

fn split_batch<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.rank() != 5 || x.shape()[0] == 0 {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "expected a nonempty batch [B, C, D, H, W]".into(),
        });
    }
    Ok((x.shape()[0], x.len() / x.shape()[0]))
}

#[cfg(test)]
mod tests;
