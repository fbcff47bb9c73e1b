//! Direct 3D convolution kernels.
//!
//! All three kernels (forward, data-adjoint, weight-adjoint) walk the same
//! loop nest: output channel, input channel within the group, kernel tap,
//! then the valid output rows for that tap. Padding is zero; taps that fall
//! into the padding are skipped rather than multiplied by zero.

use crate::counters;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape3D, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Cubic kernel, dense, with bias.
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [s; 3],
            padding: [p; 3],
            groups: 1,
            bias: true,
        }
    }

    /// Shape-preserving depthwise kernel of odd size `k`.
    pub fn depthwise(channels: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Invalid(format!(
                "depthwise 3D kernel size {k} is even; symmetric padding cannot preserve shape"
            )));
        }
        Ok(ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: [k; 3],
            stride: [1; 3],
            padding: [(k - 1) / 2; 3],
            groups: channels,
            bias: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::Invalid(format!("conv spec: {r}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return bad("channels and groups must be positive".into());
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "groups {} must divide channels {}→{}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return bad("kernel and stride must be positive".into());
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels / self.groups, kd, kh, kw]
    }

    /// Weight shape when the spec describes a transposed convolution.
    pub fn tconv_weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.in_channels, self.out_channels / self.groups, kd, kh, kw]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.taps()
            + if self.bias { self.out_channels } else { 0 }
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn out_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if self.kernel[a] > padded {
                return Err(Error::Invalid(format!(
                    "kernel {:?} larger than padded input {:?}",
                    self.kernel, input
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(in - 1)·s - 2p + k` per axis.
    pub fn tconv_out_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::Invalid(format!(
                    "transposed conv output extent < 1 for input {input:?}"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }

    /// Dense multiply-accumulate count of the forward pass at `input`.
    pub fn macs(&self, input: [usize; 3]) -> Result<u64> {
        let out = self.out_spatial(input)?;
        Ok(out.iter().product::<usize>() as u64
            * self.out_channels as u64
            * (self.in_channels / self.groups) as u64
            * self.taps() as u64)
    }

    pub fn tconv_macs(&self, input: [usize; 3]) -> u64 {
        input.iter().product::<usize>() as u64
            * self.in_channels as u64
            * (self.out_channels / self.groups) as u64
            * self.taps() as u64
    }
}

/// Loop geometry in convolution orientation: `src` is the strided,
/// padded side and `dst` the side with `floor((src + 2p - k)/s) + 1` extents.
struct Geom {
    src: [usize; 3],
    dst: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    cin: usize,
    cout: usize,
    groups: usize,
}

impl Geom {
    fn new(spec: &ConvSpec, src: [usize; 3], dst: [usize; 3]) -> Self {
        Geom {
            src,
            dst,
            k: spec.kernel,
            s: spec.stride,
            p: spec.padding,
            cin: spec.in_channels,
            cout: spec.out_channels,
            groups: spec.groups,
        }
    }

    fn src_vox(&self) -> usize {
        self.src.iter().product()
    }

    fn dst_vox(&self) -> usize {
        self.dst.iter().product()
    }

    /// Output indices `o` along `axis` with `o*s + tap - p` inside the source.
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (n, s, p) = (self.src[axis] as isize, self.s[axis] as isize, self.p[axis] as isize);
        let t = tap as isize;
        let lo = if p > t { (p - t + s - 1) / s } else { 0 };
        let hi_incl = (n - 1 + p - t).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.dst[axis] as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    /// Calls `f(dst_row, src_row, lo, hi)` for every valid `(od, oh)` row of
    /// tap `(kd, kh, kw)`; the element pairs are `dst_row + o` and
    /// `src_row + o*sw` for `o` in `lo..hi`.
    #[inline]
    fn for_each_row(
        &self,
        kd: usize,
        kh: usize,
        kw: usize,
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let (dlo, dhi) = self.valid(0, kd);
        let (hlo, hhi) = self.valid(1, kh);
        let (wlo, whi) = self.valid(2, kw);
        if wlo >= whi {
            return;
        }
        let [_, sh, sw] = self.src;
        let [_, dh, dw] = self.dst;
        for od in dlo..dhi {
            let id = od * self.s[0] + kd - self.p[0];
            for oh in hlo..hhi {
                let ih = oh * self.s[1] + kh - self.p[1];
                let src_row = (id * sh + ih) * sw + wlo * self.s[2] + kw - self.p[2];
                f((od * dh + oh) * dw + wlo, src_row, 0, whi - wlo);
            }
        }
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }
}

/// dst[oc] = Σ w[oc, ic, tap] · src[ic] (shifted), `dst` pre-initialized.
fn kernel_fwd<T: Scalar>(src: &[T], w: &[T], g: &Geom, dst: &mut [T], count: bool) {
    let (sv, dv) = (g.src_vox(), g.dst_vox());
    let (cig, cog) = (g.cin / g.groups, g.cout / g.groups);
    let sw = g.s[2];
    let [kd_, kh_, kw_] = g.k;
    for grp in 0..g.groups {
        for ocg in 0..cog {
            let oc = grp * cog + ocg;
            let out = &mut dst[oc * dv..(oc + 1) * dv];
            for icg in 0..cig {
                let ic = grp * cig + icg;
                let inp = &src[ic * sv..(ic + 1) * sv];
                let wbase = (oc * cig + icg) * g.taps();
                for kd in 0..kd_ {
                    for kh in 0..kh_ {
                        for kw in 0..kw_ {
                            let wv = w[wbase + (kd * kh_ + kh) * kw_ + kw];
                            g.for_each_row(kd, kh, kw, |drow, srow, lo, hi| {
                                let o = &mut out[drow + lo..drow + hi];
                                if sw == 1 {
                                    for (ov, &iv) in o.iter_mut().zip(&inp[srow..srow + hi - lo]) {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for (j, ov) in o.iter_mut().enumerate() {
                                        *ov += wv * inp[srow + j * sw];
                                    }
                                }
                            });
                        }
                    }
                }
            }
            if count {
                counters::add_macs((dv * cig * g.taps()) as u64);
            }
        }
    }
}

/// Adjoint of [`kernel_fwd`] w.r.t. `src`: src_grad[ic] += Σ w · dst_grad[oc].
fn kernel_bwd_src<T: Scalar>(dgrad: &[T], w: &[T], g: &Geom, sgrad: &mut [T], count: bool) {
    let (sv, dv) = (g.src_vox(), g.dst_vox());
    let (cig, cog) = (g.cin / g.groups, g.cout / g.groups);
    let sw = g.s[2];
    let [kd_, kh_, kw_] = g.k;
    for grp in 0..g.groups {
        for ocg in 0..cog {
            let oc = grp * cog + ocg;
            let gout = &dgrad[oc * dv..(oc + 1) * dv];
            for icg in 0..cig {
                let ic = grp * cig + icg;
                let gin = &mut sgrad[ic * sv..(ic + 1) * sv];
                let wbase = (oc * cig + icg) * g.taps();
                for kd in 0..kd_ {
                    for kh in 0..kh_ {
                        for kw in 0..kw_ {
                            let wv = w[wbase + (kd * kh_ + kh) * kw_ + kw];
                            g.for_each_row(kd, kh, kw, |drow, srow, lo, hi| {
                                let go = &gout[drow + lo..drow + hi];
                                if sw == 1 {
                                    for (gi, &gv) in gin[srow..srow + hi - lo].iter_mut().zip(go) {
                                        *gi += wv * gv;
                                    }
                                } else {
                                    for (j, &gv) in go.iter().enumerate() {
                                        gin[srow + j * sw] += wv * gv;
                                    }
                                }
                            });
                        }
                    }
                }
            }
            if count {
                counters::add_macs((dv * cig * g.taps()) as u64);
            }
        }
    }
}

/// Adjoint of [`kernel_fwd`] w.r.t. `w`.
fn kernel_bwd_weight<T: Scalar>(src: &[T], dgrad: &[T], g: &Geom, wgrad: &mut [T]) {
    let (sv, dv) = (g.src_vox(), g.dst_vox());
    let (cig, cog) = (g.cin / g.groups, g.cout / g.groups);
    let sw = g.s[2];
    let [kd_, kh_, kw_] = g.k;
    for grp in 0..g.groups {
        for ocg in 0..cog {
            let oc = grp * cog + ocg;
            let gout = &dgrad[oc * dv..(oc + 1) * dv];
            for icg in 0..cig {
                let ic = grp * cig + icg;
                let inp = &src[ic * sv..(ic + 1) * sv];
                let wbase = (oc * cig + icg) * g.taps();
                for kd in 0..kd_ {
                    for kh in 0..kh_ {
                        for kw in 0..kw_ {
                            let mut acc = T::zero();
                            g.for_each_row(kd, kh, kw, |drow, srow, lo, hi| {
                                let go = &gout[drow + lo..drow + hi];
                                if sw == 1 {
                                    for (&gv, &iv) in go.iter().zip(&inp[srow..srow + hi - lo]) {
                                        acc += gv * iv;
                                    }
                                } else {
                                    for (j, &gv) in go.iter().enumerate() {
                                        acc += gv * inp[srow + j * sw];
                                    }
                                }
                            });
                            wgrad[wbase + (kd * kh_ + kh) * kw_ + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn check_weights<T: Scalar>(
    spec: &ConvSpec,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    shape: [usize; 5],
) -> Result<()> {
    spec.validate()?;
    w.expect_shape("conv weights", &shape)?;
    match (spec.bias, b) {
        (true, Some(b)) => b.expect_shape("conv bias", &[spec.out_channels]),
        (false, None) => Ok(()),
        (true, None) => Err(Error::Invalid("conv spec requires a bias".into())),
        (false, Some(_)) => Err(Error::Invalid("conv spec has no bias".into())),
    }
}

fn channel_fill<T: Scalar>(c: usize, vox: usize, b: Option<&Tensor<T>>) -> Vec<T> {
    match b {
        Some(b) => b
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(vox))
            .collect(),
        None => vec![T::zero(); c * vox],
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.shape()[0];
    let vox = g.len() / c;
    Tensor::from_parts(
        vec![c],
        g.data().chunks_exact(vox).map(|ch| ch.iter().copied().sum()).collect(),
    )
}

/// Gradients of a convolution-like op.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Zero-padded cross-correlation; `w` is `[C_out, C_in/groups, kd, kh, kw]`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_weights(spec, w, b, spec.weight_shape())?;
    let s = Shape3D::of(x)?;
    if s.channels != spec.in_channels {
        return Err(Error::dim("conv3d input channels", x.shape(), &[spec.in_channels]));
    }
    let out = spec.out_spatial(s.spatial())?;
    let g = Geom::new(spec, s.spatial(), out);
    let mut y = channel_fill(spec.out_channels, g.dst_vox(), b);
    kernel_fwd(x.data(), w.data(), &g, &mut y, true);
    Ok(Tensor::from_parts(
        Shape3D::with_spatial(spec.out_channels, out).dims().to_vec(),
        y,
    ))
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let s = Shape3D::of(x)?;
    let out = spec.out_spatial(s.spatial())?;
    gy.expect_shape(
        "conv3d_backward",
        &Shape3D::with_spatial(spec.out_channels, out).dims(),
    )?;
    w.expect_shape("conv weights", &spec.weight_shape())?;
    let g = Geom::new(spec, s.spatial(), out);
    let mut gx = vec![T::zero(); x.len()];
    kernel_bwd_src(gy.data(), w.data(), &g, &mut gx, false);
    let mut gw = vec![T::zero(); w.len()];
    kernel_bwd_weight(x.data(), gy.data(), &g, &mut gw);
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weight: Tensor::from_parts(w.shape().to_vec(), gw),
        bias: spec.bias.then(|| channel_sums(gy)),
    })
}

/// Transposed (fractionally strided) convolution; `w` is
/// `[C_in, C_out/groups, kd, kh, kw]`. Its forward map is the input-adjoint
/// of [`conv3d`] with the same kernel.
pub fn tconv3d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_weights(spec, w, b, spec.tconv_weight_shape())?;
    let s = Shape3D::of(x)?;
    if s.channels != spec.in_channels {
        return Err(Error::dim("tconv3d input channels", x.shape(), &[spec.in_channels]));
    }
    let out = spec.tconv_out_spatial(s.spatial())?;
    let g = Geom::new(&conv_view(spec), out, s.spatial());
    let mut y = channel_fill(spec.out_channels, g.src_vox(), b);
    kernel_bwd_src(x.data(), w.data(), &g, &mut y, true);
    Ok(Tensor::from_parts(
        Shape3D::with_spatial(spec.out_channels, out).dims().to_vec(),
        y,
    ))
}

pub fn tconv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let s = Shape3D::of(x)?;
    let out = spec.tconv_out_spatial(s.spatial())?;
    gy.expect_shape(
        "tconv3d_backward",
        &Shape3D::with_spatial(spec.out_channels, out).dims(),
    )?;
    w.expect_shape("tconv weights", &spec.tconv_weight_shape())?;
    let g = Geom::new(&conv_view(spec), out, s.spatial());
    let mut gx = vec![T::zero(); x.len()];
    kernel_fwd(gy.data(), w.data(), &g, &mut gx, false);
    let mut gw = vec![T::zero(); w.len()];
    kernel_bwd_weight(gy.data(), x.data(), &g, &mut gw);
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weight: Tensor::from_parts(w.shape().to_vec(), gw),
        bias: spec.bias.then(|| channel_sums(gy)),
    })
}

/// The conv whose input-adjoint is the given transposed conv.
fn conv_view(spec: &ConvSpec) -> ConvSpec {
    ConvSpec {
        in_channels: spec.out_channels,
        out_channels: spec.in_channels,
        ..*spec
    }
}

/// Shape-preserving per-channel 3D convolution (odd `k`, padding `(k-1)/2`);
/// `w` is `[C, 1, k, k, k]`.
pub fn dwconv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let spec = dw3_spec(x, w)?;
    conv3d(x, &spec, w, Some(b))
}

pub fn dwconv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let spec = dw3_spec(x, w)?;
    conv3d_backward(x, &spec, w, gy)
}

fn dw3_spec<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<ConvSpec> {
    let c = Shape3D::of(x)?.channels;
    match w.shape() {
        &[wc, 1, k, k2, k3] if wc == c && k == k2 && k == k3 => ConvSpec::depthwise(c, k),
        s => Err(Error::dim("dwconv3d weights", s, &[c, 1])),
    }
}

/// Causal depthwise 1D convolution over `x: [C, L]` with `w: [C, k]`:
/// `y[c,t] = b[c] + Σ_j w[c,j]·x[c, t-(k-1)+j]`, zero left padding of `k-1`.
pub fn dwconv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, l, k) = dw1_dims(x, w, b)?;
    let mut y = vec![T::zero(); c * l];
    for ch in 0..c {
        let xs = &x.data()[ch * l..(ch + 1) * l];
        let ws = &w.data()[ch * k..(ch + 1) * k];
        let ys = &mut y[ch * l..(ch + 1) * l];
        for (t, yv) in ys.iter_mut().enumerate() {
            let mut acc = b.data()[ch];
            for (j, &wv) in ws.iter().enumerate() {
                if let Some(src) = (t + j).checked_sub(k - 1) {
                    acc += wv * xs[src];
                }
            }
            *yv = acc;
        }
    }
    counters::add_macs((c * l * k) as u64);
    Ok(Tensor::from_parts(vec![c, l], y))
}

pub fn dwconv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (c, l) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    gy.expect_same_shape("dwconv1d_backward", x)?;
    let mut gx = vec![T::zero(); c * l];
    let mut gw = vec![T::zero(); c * k];
    for ch in 0..c {
        let xs = &x.data()[ch * l..(ch + 1) * l];
        let gs = &gy.data()[ch * l..(ch + 1) * l];
        for (t, &g) in gs.iter().enumerate() {
            for j in 0..k {
                if let Some(src) = (t + j).checked_sub(k - 1) {
                    gx[ch * l + src] += w.data()[ch * k + j] * g;
                    gw[ch * k + j] += xs[src] * g;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(vec![c, l], gx),
        weight: Tensor::from_parts(vec![c, k], gw),
        bias: Some(Tensor::from_parts(
            vec![c],
            gy.data().chunks_exact(l).map(|r| r.iter().copied().sum()).collect(),
        )),
    })
}

fn dw1_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (c, l) = match x.shape() {
        &[c, l] => (c, l),
        s => return Err(Error::dim("dwconv1d input", s, &[0, 0])),
    };
    match w.shape() {
        &[wc, k] if wc == c && k >= 1 => {
            b.expect_shape("dwconv1d bias", &[c])?;
            Ok((c, l, k))
        }
        s => Err(Error::dim("dwconv1d weights", s, &[c])),
    }
}
