//! Parameterized wrappers around the nn primitives.

use crate::error::Result;
use crate::nn::{
    conv3d, conv3d_backward, layer_norm, layer_norm_backward, linear, linear_backward, silu,
    silu_backward, tconv3d, tconv3d_backward, ConvSpec, NormCache, NormSpec,
};
use crate::params::{Builder, Grads, ParamId, ParamStore};
use crate::tensor::{seq_to_volume, volume_to_seq, Scalar, Shape3D, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let w = s.fan_in("w", &[cin, cout], cin)?;
        let bias = if bias { Some(s.constant("b", &[cout], 0.0)?) } else { None };
        Ok(Linear { w, b: bias, cin, cout })
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout + if self.b.is_some() { self.cout } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, ps.get(self.w), self.b.map(|b| ps.get(b)))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g = linear_backward(x, ps.get(self.w), gy)?;
        grads.accumulate(self.w, &g.weight)?;
        if let Some(b) = self.b {
            grads.accumulate(b, &g.bias)?;
        }
        Ok(g.input)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub spec: NormSpec,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(LayerNorm {
            gain: s.constant("gain", &[channels], 1.0)?,
            shift: s.constant("shift", &[channels], 0.0)?,
            spec: NormSpec::new(channels),
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.spec.normalized_channels
    }

    /// Normalizes the rows of `x: [L, C]`.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, NormCache<T>)> {
        layer_norm(x, ps.get(self.gain), ps.get(self.shift), self.spec.epsilon)
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &NormCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g = layer_norm_backward(cache, ps.get(self.gain), gy)?;
        grads.accumulate(self.gain, &g.gain)?;
        grads.accumulate(self.shift, &g.shift)?;
        Ok(g.input)
    }
}

/// A plain or transposed 3D convolution with its weights.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub transposed: bool,
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv {
    pub fn new(b: &mut Builder<'_>, name: &str, spec: ConvSpec, transposed: bool) -> Result<Self> {
        spec.validate()?;
        let mut s = b.scope(name);
        let (shape, fan_in) = if transposed {
            let sh = spec.tconv_weight_shape();
            (sh, sh[1] * spec.taps())
        } else {
            let sh = spec.weight_shape();
            (sh, sh[1] * spec.taps())
        };
        let w = s.fan_in("w", &shape, fan_in)?;
        let bias = if spec.bias { Some(s.constant("b", &[spec.out_channels], 0.0)?) } else { None };
        Ok(Conv { spec, transposed, w, b: bias })
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.transposed {
            self.spec.tconv_out_spatial(input)
        } else {
            self.spec.out_spatial(input)
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.b.map(|b| ps.get(b));
        if self.transposed {
            tconv3d(x, &self.spec, ps.get(self.w), b)
        } else {
            conv3d(x, &self.spec, ps.get(self.w), b)
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g = if self.transposed {
            tconv3d_backward(x, &self.spec, ps.get(self.w), gy)?
        } else {
            conv3d_backward(x, &self.spec, ps.get(self.w), gy)?
        };
        grads.accumulate(self.w, &g.weight)?;
        if let (Some(b), Some(gb)) = (self.b, &g.bias) {
            grads.accumulate(b, gb)?;
        }
        Ok(g.input)
    }
}

/// Convolution, layer norm over channels, SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T> {
    x: Tensor<T>,
    norm: NormCache<T>,
    /// Normalized sequence, the SiLU input.
    pre: Tensor<T>,
    spatial: [usize; 3],
}

impl ConvBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, spec: ConvSpec, transposed: bool) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(ConvBlock {
            conv: Conv::new(&mut s, "conv", spec, transposed)?,
            norm: LayerNorm::new(&mut s, "norm", spec.out_channels)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
        let c = self.conv.forward(ps, x)?;
        let spatial = Shape3D::of(&c)?.spatial();
        let (pre, norm) = self.norm.forward(ps, &volume_to_seq(&c)?)?;
        let y = seq_to_volume(&silu(&pre), spatial)?;
        Ok((
            y,
            ConvBlockCache {
                x: x.clone(),
                norm,
                pre,
                spatial,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &ConvBlockCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g = silu_backward(&cache.pre, &volume_to_seq(gy)?)?;
        let g = self.norm.backward(ps, &cache.norm, &g, grads)?;
        self.conv.backward(ps, &cache.x, &seq_to_volume(&g, cache.spatial)?, grads)
    }
}
