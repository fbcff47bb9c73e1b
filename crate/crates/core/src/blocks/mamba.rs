//! Mamba layer over a volume.
//!
//! ```text
//! s  = seq(x)                              [L, C]
//! n  = LN(s)
//! xi = n·W_x + b_x                         [L, Ci]    Ci = E·C
//! v  = DWConv(xi)                          [L, Cs]    Cs = Ci, or 3·Ci for MSv4
//! u  = SiLU(v)
//! y  = Σ_k scatter_k(SSM_k(gather_k(u)))   one SSM per direction
//! y  = y ⊙ SiLU(n·W_z + b_z)               if gated
//! out = vol(s + y·W_o + b_o)
//! ```
//!
//! The depthwise convolution is shared by all directions and runs once in
//! canonical voxel order: along the row-major sequence for the 1D kind,
//! on the volume for the 3D kinds.

use serde::{Deserialize, Serialize};

use super::common::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::nn::{
    dwconv1d, dwconv1d_backward, dwconv3d, dwconv3d_backward, silu, silu_backward,
    silu_grad_scalar, silu_scalar, NormCache,
};
use crate::params::{Builder, Grads, ParamId, ParamStore};
use crate::scan_order::{layer_seed, Direction, ScanOrder};
use crate::ssm::{
    selective_scan, selective_scan_backward, Phase, ScanOptions, SsmCache, SsmParams, SsmRef,
    DEFAULT_STATE_DIM,
};
use crate::tensor::{seq_to_volume, transpose2d, volume_to_seq, Scalar, Shape3D, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DwKind {
    /// Causal depthwise 1D convolution, kernel 4, on the row-major sequence.
    #[serde(rename = "1d")]
    D1,
    /// Depthwise 3D convolution, kernel 3, on the volume.
    #[serde(rename = "3d")]
    D3,
}

impl DwKind {
    pub fn kernel(self) -> usize {
        match self {
            DwKind::D1 => 4,
            DwKind::D3 => 3,
        }
    }

    /// Weights per channel.
    pub fn taps(self) -> usize {
        match self {
            DwKind::D1 => 4,
            DwKind::D3 => 27,
        }
    }
}

/// Kernel sizes of the parallel depthwise 3D convolutions of MSv4.
pub const MSV4_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub channels: usize,
    pub expand: usize,
    pub dw: DwKind,
    pub state_dim: usize,
    pub directions: Vec<Direction>,
    /// MSv4: parallel depthwise 3D convolutions 3/5/7 replace the single one.
    pub multiscale: bool,
    pub gated: bool,
    pub scan: ScanOptions,
}

impl MambaConfig {
    pub fn new(channels: usize) -> Self {
        MambaConfig {
            channels,
            expand: 2,
            dw: DwKind::D1,
            state_dim: DEFAULT_STATE_DIM,
            directions: vec![Direction::ForwardW],
            multiscale: false,
            gated: true,
            scan: ScanOptions::default(),
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.channels
    }

    /// Channel width of the scanned stream.
    pub fn ssm_width(&self) -> usize {
        if self.multiscale {
            MSV4_KERNELS.len() * self.inner()
        } else {
            self.inner()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.expand == 0 || self.state_dim == 0 {
            return bad("mamba channels, expansion and state dim must be positive".into());
        }
        if self.directions.is_empty() {
            return bad("mamba layer needs at least one scan direction".into());
        }
        for (i, d) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(d) {
                return bad(format!("duplicate scan direction {}", d.name()));
            }
        }
        if self.multiscale && self.dw != DwKind::D3 {
            return bad("MSv4 replaces the 3D depthwise convolution; set dwconv = \"3d\"".into());
        }
        Ok(())
    }

    /// Parameter count from the configuration alone.
    pub fn param_count(&self) -> usize {
        let (c, ci, cs, n) = (self.channels, self.inner(), self.ssm_width(), self.state_dim);
        let norm = 2 * c;
        let in_x = c * ci + ci;
        let in_z = if self.gated { c * cs + cs } else { 0 };
        let dw = if self.multiscale {
            MSV4_KERNELS.iter().map(|k| ci * k * k * k + ci).sum()
        } else {
            ci * self.dw.taps() + ci
        };
        let ssm = self.directions.len() * crate::ssm::ssm_param_count(cs, n);
        let out = cs * c + c;
        norm + in_x + in_z + dw + ssm + out
    }
}

#[derive(Clone, Debug)]
pub struct SsmIds {
    pub a_log: ParamId,
    pub d: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
}

impl SsmIds {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, n: usize) -> Result<Self> {
        let p = SsmParams::init(channels, n, b.rng());
        let mut s = b.scope(name);
        Ok(SsmIds {
            a_log: s.add("a_log", p.a_log)?,
            d: s.add("d", p.d)?,
            w_delta: s.add("w_delta", p.w_delta)?,
            b_delta: s.add("b_delta", p.b_delta)?,
            w_b: s.add("w_b", p.w_b)?,
            w_c: s.add("w_c", p.w_c)?,
        })
    }

    pub fn view<'a, T: Scalar>(&self, ps: &'a ParamStore<T>) -> SsmRef<'a, T> {
        SsmRef {
            a_log: ps.get(self.a_log),
            d: ps.get(self.d),
            w_delta: ps.get(self.w_delta),
            b_delta: ps.get(self.b_delta),
            w_b: ps.get(self.w_b),
            w_c: ps.get(self.w_c),
        }
    }

    fn accumulate<T: Scalar>(&self, g: &SsmParams<T>, grads: &mut Grads<T>) -> Result<()> {
        grads.accumulate(self.a_log, &g.a_log)?;
        grads.accumulate(self.d, &g.d)?;
        grads.accumulate(self.w_delta, &g.w_delta)?;
        grads.accumulate(self.b_delta, &g.b_delta)?;
        grads.accumulate(self.w_b, &g.w_b)?;
        grads.accumulate(self.w_c, &g.w_c)
    }
}

#[derive(Clone, Debug)]
pub struct DwParams {
    pub kernel: usize,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub cfg: MambaConfig,
    /// Seed of this layer's random scan orders.
    pub seed: u64,
    pub norm: LayerNorm,
    pub in_x: Linear,
    pub in_z: Option<Linear>,
    pub dw: Vec<DwParams>,
    pub ssm: Vec<SsmIds>,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct MambaCache<T> {
    spatial: [usize; 3],
    norm: NormCache<T>,
    n: Tensor<T>,
    xi: Tensor<T>,
    /// Convolution output before SiLU, `[L, Cs]`.
    v: Tensor<T>,
    ssm: Vec<SsmCache<T>>,
    y: Tensor<T>,
    z: Option<Tensor<T>>,
    gated: Tensor<T>,
}

impl MambaLayer {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: MambaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope(name);
        let (c, ci, cs) = (cfg.channels, cfg.inner(), cfg.ssm_width());
        let norm = LayerNorm::new(&mut s, "norm", c)?;
        let in_x = Linear::new(&mut s, "in_x", c, ci, true)?;
        let in_z = if cfg.gated { Some(Linear::new(&mut s, "in_z", c, cs, true)?) } else { None };
        let kernels: Vec<usize> = if cfg.multiscale { MSV4_KERNELS.to_vec() } else { vec![cfg.dw.kernel()] };
        let mut dw = Vec::new();
        for &k in &kernels {
            let name = if cfg.multiscale { format!("dw{k}") } else { "dw".to_string() };
            let mut d = s.scope(&name);
            let (shape, fan) = match cfg.dw {
                DwKind::D1 => (vec![ci, k], k),
                DwKind::D3 => (vec![ci, 1, k, k, k], k * k * k),
            };
            dw.push(DwParams {
                kernel: k,
                w: d.fan_in("w", &shape, fan)?,
                b: d.constant("b", &[ci], 0.0)?,
            });
        }
        let mut ssm = Vec::new();
        for k in 0..cfg.directions.len() {
            ssm.push(SsmIds::new(&mut s, &format!("ssm{k}"), cs, cfg.state_dim)?);
        }
        let out = Linear::new(&mut s, "out", cs, c, true)?;
        Ok(MambaLayer { cfg, seed, norm, in_x, in_z, dw, ssm, out })
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    pub fn orders(&self, spatial: [usize; 3]) -> Result<Vec<ScanOrder>> {
        self.cfg
            .directions
            .iter()
            .enumerate()
            .map(|(k, d)| ScanOrder::new(d.resolve(layer_seed(self.seed, k as u64)), spatial))
            .collect()
    }

    fn conv_forward<T: Scalar>(&self, ps: &ParamStore<T>, xi: &Tensor<T>, spatial: [usize; 3]) -> Result<Tensor<T>> {
        match self.cfg.dw {
            DwKind::D1 => {
                let p = &self.dw[0];
                let y = dwconv1d(&transpose2d(xi), ps.get(p.w), ps.get(p.b))?;
                Ok(transpose2d(&y))
            }
            DwKind::D3 => {
                let vol = seq_to_volume(xi, spatial)?;
                let outs = self
                    .dw
                    .iter()
                    .map(|p| dwconv3d(&vol, ps.get(p.w), ps.get(p.b)))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor<T>> = outs.iter().collect();
                volume_to_seq(&Tensor::concat0(&refs)?)
            }
        }
    }

    fn conv_backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        xi: &Tensor<T>,
        gv: &Tensor<T>,
        spatial: [usize; 3],
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        match self.cfg.dw {
            DwKind::D1 => {
                let p = &self.dw[0];
                let g = dwconv1d_backward(&transpose2d(xi), ps.get(p.w), &transpose2d(gv))?;
                grads.accumulate(p.w, &g.weight)?;
                grads.accumulate(p.b, g.bias.as_ref().expect("depthwise bias"))?;
                Ok(transpose2d(&g.input))
            }
            DwKind::D3 => {
                let vol = seq_to_volume(xi, spatial)?;
                let gvol = seq_to_volume(gv, spatial)?;
                let ci = self.cfg.inner();
                let parts = gvol.split0(&vec![ci; self.dw.len()])?;
                let mut gx = Tensor::zeros(vol.shape());
                for (p, gp) in self.dw.iter().zip(&parts) {
                    let g = dwconv3d_backward(&vol, ps.get(p.w), gp)?;
                    grads.accumulate(p.w, &g.weight)?;
                    grads.accumulate(p.b, g.bias.as_ref().expect("depthwise bias"))?;
                    gx.add_assign(&g.input)?;
                }
                volume_to_seq(&gx)
            }
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: Phase,
    ) -> Result<(Tensor<T>, MambaCache<T>)> {
        let shape = Shape3D::of(x)?;
        if shape.channels != self.cfg.channels {
            return Err(Error::dim("mamba layer input", x.shape(), &[self.cfg.channels]));
        }
        let spatial = shape.spatial();
        let s = volume_to_seq(x)?;
        let (n, norm) = self.norm.forward(ps, &s)?;
        let xi = self.in_x.forward(ps, &n)?;
        let v = self.conv_forward(ps, &xi, spatial)?;
        let u = silu(&v);
        let orders = self.orders(spatial)?;
        let views: Vec<SsmRef<'_, T>> = self.ssm.iter().map(|i| i.view(ps)).collect();
        let (y, ssm) = multi_scan(&u, &orders, &views, self.cfg.scan, phase)?;
        let z = self.in_z.as_ref().map(|l| l.forward(ps, &n)).transpose()?;
        let gated = match &z {
            Some(z) => y.zip_map(z, |a, b| a * silu_scalar(b))?,
            None => y.clone(),
        };
        let mut o = self.out.forward(ps, &gated)?;
        o.add_assign(&s)?;
        let out = seq_to_volume(&o, spatial)?;
        Ok((out, MambaCache { spatial, norm, n, xi, v, ssm, y, z, gated }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &MambaCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let gs_out = volume_to_seq(gy)?;
        let ggated = self.out.backward(ps, &cache.gated, &gs_out, grads)?;
        let (gysum, gn_z) = match (&self.in_z, &cache.z) {
            (Some(in_z), Some(z)) => {
                let gysum = ggated.zip_map(z, |g, zv| g * silu_scalar(zv))?;
                let gz = ggated
                    .mul(&cache.y)?
                    .zip_map(z, |g, zv| g * silu_grad_scalar(zv))?;
                (gysum, Some(in_z.backward(ps, &cache.n, &gz, grads)?))
            }
            _ => (ggated, None),
        };
        let orders = self.orders(cache.spatial)?;
        let mut gu = Tensor::zeros(cache.v.shape());
        for ((ord, ids), c) in orders.iter().zip(&self.ssm).zip(&cache.ssm) {
            let g = selective_scan_backward(&ord.gather_seq(&gysum)?, c, ids.view(ps))?;
            ids.accumulate(&g.params, grads)?;
            gu.add_assign(&ord.scatter_seq(&g.input)?)?;
        }
        let gv = silu_backward(&cache.v, &gu)?;
        let gxi = self.conv_backward(ps, &cache.xi, &gv, cache.spatial, grads)?;
        let mut gn = self.in_x.backward(ps, &cache.n, &gxi, grads)?;
        if let Some(gz) = gn_z {
            gn.add_assign(&gz)?;
        }
        let mut gs = self.norm.backward(ps, &cache.norm, &gn, grads)?;
        gs.add_assign(&gs_out)?;
        seq_to_volume(&gs, cache.spatial)
    }
}

/// Runs one scan per order over the canonical sequence `u: [L, C]` and
/// sums the results back in canonical order.
pub fn multi_scan<T: Scalar>(
    u: &Tensor<T>,
    orders: &[ScanOrder],
    params: &[SsmRef<'_, T>],
    opts: ScanOptions,
    phase: Phase,
) -> Result<(Tensor<T>, Vec<SsmCache<T>>)> {
    if orders.len() != params.len() || orders.is_empty() {
        return Err(Error::Invalid(format!(
            "{} scan orders for {} parameter sets",
            orders.len(),
            params.len()
        )));
    }
    let mut outs = Vec::with_capacity(orders.len());
    let mut caches = Vec::with_capacity(orders.len());
    for (ord, p) in orders.iter().zip(params) {
        let (y, c) = selective_scan(&ord.gather_seq(u)?, *p, opts, phase)?;
        outs.push(ord.scatter_seq(&y)?);
        caches.push(c);
    }
    Ok((multi_scan_merge(&outs)?, caches))
}

/// Elementwise sum of per-direction outputs in direction order.
pub fn multi_scan_merge<T: Scalar>(outputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = outputs
        .split_first()
        .ok_or_else(|| Error::Invalid("merge of zero scan outputs".into()))?;
    let mut acc = first.clone();
    for o in rest {
        acc.add_assign(o)?;
    }
    Ok(acc)
}
