//! Pre-norm attention layer with optional spatial reduction of keys and
//! values, followed by a two-layer feed-forward network.
//!
//! ```text
//! s  = seq(x)
//! n  = LN₁(s)
//! r  = n                                  R = 1
//! r  = LN_r(seq(Conv_{k=s=R}(vol(n))))     R > 1
//! s' = s + MHA(n·W_q, r·W_k, r·W_v)·W_o
//! out = vol(s' + FFN(LN₂(s')))            FFN = Linear → SiLU → Linear
//! ```

use serde::{Deserialize, Serialize};

use super::common::{Conv, LayerNorm, Linear};
use crate::counters;
use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, softmax_row, softmax_row_backward, ConvSpec, NormCache};
use crate::params::{Builder, Grads, ParamStore};
use crate::tensor::ops::{mm_acc, mm_acc_at, mm_acc_bt};
use crate::tensor::{seq_to_volume, volume_to_seq, Scalar, Shape3D, Tensor};

/// Largest attention matrix, in entries over all heads, a layer will build.
pub const DEFAULT_ATTENTION_LIMIT: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Learned strided convolution, kernel = stride = R.
    #[default]
    Conv,
    /// Parameter-free average pooling, window = stride = R.
    AvgPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub reduction: usize,
    pub ffn_expand: usize,
    pub reduction_kind: Reduction,
    pub memory_limit: u64,
}

impl AttnConfig {
    pub fn new(channels: usize, heads: usize, reduction: usize) -> Self {
        AttnConfig {
            channels,
            heads,
            reduction,
            ffn_expand: 4,
            reduction_kind: Reduction::Conv,
            memory_limit: DEFAULT_ATTENTION_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        if self.reduction < 1 {
            return Err(Error::Config("reduction ratio must be ≥ 1".into()));
        }
        if self.ffn_expand < 1 {
            return Err(Error::Config("FFN expansion must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn reduces(&self) -> bool {
        self.reduction > 1
    }

    /// Key/value grid for a query grid, checking divisibility.
    pub fn kv_spatial(&self, spatial: [usize; 3]) -> Result<[usize; 3]> {
        let r = self.reduction;
        if spatial.iter().any(|&e| e % r != 0) {
            return Err(Error::Divisibility { shape: spatial, multiple: r });
        }
        Ok(spatial.map(|e| e / r))
    }

    /// Attention entries over all heads at a query grid.
    pub fn attention_entries(&self, spatial: [usize; 3]) -> Result<u64> {
        let lq: u64 = spatial.iter().map(|&e| e as u64).product();
        let lk: u64 = self.kv_spatial(spatial)?.iter().map(|&e| e as u64).product();
        Ok(self.heads as u64 * lq * lk)
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let f = self.ffn_expand * c;
        let mut p = 2 * c + 4 * (c * c + c) + 2 * c + (c * f + f) + (f * c + c);
        if self.reduces() && self.reduction_kind == Reduction::Conv {
            p += c * c * self.reduction.pow(3) + c + 2 * c;
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub cfg: AttnConfig,
    pub name: String,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub sr: Option<(Conv, LayerNorm)>,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

#[derive(Clone, Debug)]
struct Reduced<T> {
    conv_in: Tensor<T>,
    norm: NormCache<T>,
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    spatial: [usize; 3],
    norm1: NormCache<T>,
    n1: Tensor<T>,
    reduced: Option<Reduced<T>>,
    kv_in: Tensor<T>,
    mha: MhaCache<T>,
    attn: Tensor<T>,
    norm2: NormCache<T>,
    n2: Tensor<T>,
    h1: Tensor<T>,
    a1: Tensor<T>,
}

impl AttnLayer {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: AttnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope(name);
        let c = cfg.channels;
        let f = cfg.ffn_expand * c;
        let norm1 = LayerNorm::new(&mut s, "norm1", c)?;
        let q = Linear::new(&mut s, "q", c, c, true)?;
        let k = Linear::new(&mut s, "k", c, c, true)?;
        let v = Linear::new(&mut s, "v", c, c, true)?;
        let sr = if cfg.reduces() && cfg.reduction_kind == Reduction::Conv {
            let r = cfg.reduction;
            let spec = ConvSpec::cubic(c, c, r, r, 0);
            Some((Conv::new(&mut s, "sr", spec, false)?, LayerNorm::new(&mut s, "sr_norm", c)?))
        } else {
            None
        };
        let proj = Linear::new(&mut s, "proj", c, c, true)?;
        let norm2 = LayerNorm::new(&mut s, "norm2", c)?;
        let ffn1 = Linear::new(&mut s, "ffn1", c, f, true)?;
        let ffn2 = Linear::new(&mut s, "ffn2", f, c, true)?;
        Ok(AttnLayer {
            cfg,
            name: s.prefix().to_string(),
            norm1,
            q,
            k,
            v,
            sr,
            proj,
            norm2,
            ffn1,
            ffn2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Refuses shapes whose attention matrices exceed the memory limit.
    pub fn check_memory(&self, spatial: [usize; 3]) -> Result<()> {
        let entries = self.cfg.attention_entries(spatial)?;
        if entries > self.cfg.memory_limit {
            return Err(Error::AttentionMemory {
                layer: self.name.clone(),
                entries,
                limit: self.cfg.memory_limit,
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, AttnCache<T>)> {
        let shape = Shape3D::of(x)?;
        if shape.channels != self.cfg.channels {
            return Err(Error::dim("attention layer input", x.shape(), &[self.cfg.channels]));
        }
        let spatial = shape.spatial();
        self.check_memory(spatial)?;
        let s = volume_to_seq(x)?;
        let (n1, norm1) = self.norm1.forward(ps, &s)?;
        let (kv_in, reduced) = self.reduce_forward(ps, &n1, spatial)?;
        let q = self.q.forward(ps, &n1)?;
        let k = self.k.forward(ps, &kv_in)?;
        let v = self.v.forward(ps, &kv_in)?;
        let (attn, mha) = multi_head_attention(&q, &k, &v, self.cfg.heads)?;
        let mut s1 = self.proj.forward(ps, &attn)?;
        s1.add_assign(&s)?;
        let (n2, norm2) = self.norm2.forward(ps, &s1)?;
        let h1 = self.ffn1.forward(ps, &n2)?;
        let a1 = silu(&h1);
        let mut s2 = self.ffn2.forward(ps, &a1)?;
        s2.add_assign(&s1)?;
        Ok((
            seq_to_volume(&s2, spatial)?,
            AttnCache { spatial, norm1, n1, reduced, kv_in, mha, attn, norm2, n2, h1, a1 },
        ))
    }

    fn reduce_forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        n1: &Tensor<T>,
        spatial: [usize; 3],
    ) -> Result<(Tensor<T>, Option<Reduced<T>>)> {
        let kv_spatial = self.cfg.kv_spatial(spatial)?;
        if !self.cfg.reduces() {
            return Ok((n1.clone(), None));
        }
        let vol = seq_to_volume(n1, spatial)?;
        match &self.sr {
            Some((conv, norm)) => {
                let r = volume_to_seq(&conv.forward(ps, &vol)?)?;
                let (out, nc) = norm.forward(ps, &r)?;
                Ok((out, Some(Reduced { conv_in: vol, norm: nc })))
            }
            None => Ok((volume_to_seq(&avg_pool(&vol, self.cfg.reduction, kv_spatial))?, None)),
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &AttnCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g2 = volume_to_seq(gy)?;
        let ga1 = self.ffn2.backward(ps, &cache.a1, &g2, grads)?;
        let gh1 = silu_backward(&cache.h1, &ga1)?;
        let gn2 = self.ffn1.backward(ps, &cache.n2, &gh1, grads)?;
        let mut g1 = self.norm2.backward(ps, &cache.norm2, &gn2, grads)?;
        g1.add_assign(&g2)?;
        let gattn = self.proj.backward(ps, &cache.attn, &g1, grads)?;
        let (gq, gk, gv) = multi_head_attention_backward(&cache.mha, &gattn)?;
        let mut gn1 = self.q.backward(ps, &cache.n1, &gq, grads)?;
        let mut gkv = self.k.backward(ps, &cache.kv_in, &gk, grads)?;
        gkv.add_assign(&self.v.backward(ps, &cache.kv_in, &gv, grads)?)?;
        if self.cfg.reduces() {
            let kv_spatial = self.cfg.kv_spatial(cache.spatial)?;
            let gvol = match (&self.sr, &cache.reduced) {
                (Some((conv, norm)), Some(red)) => {
                    let gr = norm.backward(ps, &red.norm, &gkv, grads)?;
                    conv.backward(ps, &red.conv_in, &seq_to_volume(&gr, kv_spatial)?, grads)?
                }
                _ => avg_pool_backward(&seq_to_volume(&gkv, kv_spatial)?, self.cfg.reduction, cache.spatial),
            };
            gn1.add_assign(&volume_to_seq(&gvol)?)?;
        } else {
            gn1.add_assign(&gkv)?;
        }
        let mut gs = self.norm1.backward(ps, &cache.norm1, &gn1, grads)?;
        gs.add_assign(&g1)?;
        seq_to_volume(&gs, cache.spatial)
    }
}

fn avg_pool<T: Scalar>(x: &Tensor<T>, r: usize, out: [usize; 3]) -> Tensor<T> {
    let [c, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let inv = T::one() / T::from_usize(r * r * r);
    Tensor::from_fn(&[c, out[0], out[1], out[2]], |i| {
        let ow = i % out[2];
        let oh = (i / out[2]) % out[1];
        let od = (i / (out[2] * out[1])) % out[0];
        let ch = i / (out[0] * out[1] * out[2]);
        let mut acc = T::zero();
        for a in 0..r {
            for b in 0..r {
                for e in 0..r {
                    acc += x.data()[((ch * d + od * r + a) * h + oh * r + b) * w + ow * r + e];
                }
            }
        }
        acc * inv
    })
}

fn avg_pool_backward<T: Scalar>(g: &Tensor<T>, r: usize, spatial: [usize; 3]) -> Tensor<T> {
    let c = g.shape()[0];
    let [_, gd, gh, gw] = [c, g.shape()[1], g.shape()[2], g.shape()[3]];
    let inv = T::one() / T::from_usize(r * r * r);
    let [_, h, w] = spatial;
    Tensor::from_fn(&[c, spatial[0], spatial[1], spatial[2]], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let z = (i / (w * h)) % spatial[0];
        let ch = i / (w * h * spatial[0]);
        g.data()[((ch * gd + z / r) * gh + y / r) * gw + x / r] * inv
    })
}

/// Saved softmax probabilities and head-split inputs.
#[derive(Clone, Debug)]
pub struct MhaCache<T> {
    heads: usize,
    lq: usize,
    lk: usize,
    c: usize,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// `[H, Lq, Lk]`
    probs: Vec<T>,
}

impl<T: Scalar> MhaCache<T> {
    /// Attention probabilities of head `h`, `[Lq, Lk]`.
    pub fn probs(&self, h: usize) -> Tensor<T> {
        let n = self.lq * self.lk;
        Tensor::from_parts(vec![self.lq, self.lk], self.probs[h * n..(h + 1) * n].to_vec())
    }
}

/// Columns `[h·dh, (h+1)·dh)` of `x: [L, C]` as a contiguous `[L, dh]`.
fn head_cols<T: Scalar>(x: &[T], l: usize, c: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(l * dh);
    for i in 0..l {
        out.extend_from_slice(&x[i * c + h * dh..i * c + (h + 1) * dh]);
    }
    out
}

fn add_head_cols<T: Scalar>(dst: &mut [T], src: &[T], l: usize, c: usize, h: usize, dh: usize) {
    for i in 0..l {
        for (d, &v) in dst[i * c + h * dh..i * c + (h + 1) * dh].iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *d += v;
        }
    }
}

/// Multi-head scaled dot-product attention, `softmax(q_h k_hᵀ / √dh) v_h`
/// per head, heads concatenated on channels.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    let (lq, c) = match q.shape() {
        &[l, c] => (l, c),
        s => return Err(Error::dim("attention q", s, &[0, 0])),
    };
    let lk = k.shape()[0];
    k.expect_shape("attention k", &[lk, c])?;
    v.expect_shape("attention v", &[lk, c])?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("heads {heads} must divide channels {c}")));
    }
    let dh = c / heads;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let mut out = vec![T::zero(); lq * c];
    let mut probs = vec![T::zero(); heads * lq * lk];
    let mut oh = vec![T::zero(); lq * dh];
    for h in 0..heads {
        let qh = head_cols(q.data(), lq, c, h, dh);
        let kh = head_cols(k.data(), lk, c, h, dh);
        let vh = head_cols(v.data(), lk, c, h, dh);
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        mm_acc_bt(&qh, &kh, p, lq, lk, dh);
        for row in p.chunks_exact_mut(lk) {
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_row(row);
        }
        oh.fill(T::zero());
        mm_acc(p, &vh, &mut oh, lq, lk, dh);
        add_head_cols(&mut out, &oh, lq, c, h, dh);
    }
    counters::add_macs(2 * (lq * lk * c) as u64);
    Ok((
        Tensor::from_parts(vec![lq, c], out),
        MhaCache {
            heads,
            lq,
            lk,
            c,
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
        },
    ))
}

/// Gradients with respect to `(q, k, v)`.
pub fn multi_head_attention_backward<T: Scalar>(
    cache: &MhaCache<T>,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (heads, lq, lk, c) = (cache.heads, cache.lq, cache.lk, cache.c);
    gout.expect_shape("attention backward", &[lq, c])?;
    let dh = c / heads;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let mut gq = vec![T::zero(); lq * c];
    let mut gk = vec![T::zero(); lk * c];
    let mut gv = vec![T::zero(); lk * c];
    let mut gp = vec![T::zero(); lq * lk];
    for h in 0..heads {
        let qh = head_cols(cache.q.data(), lq, c, h, dh);
        let kh = head_cols(cache.k.data(), lk, c, h, dh);
        let vh = head_cols(cache.v.data(), lk, c, h, dh);
        let go = head_cols(gout.data(), lq, c, h, dh);
        let p = &cache.probs[h * lq * lk..(h + 1) * lq * lk];
        let mut gvh = vec![T::zero(); lk * dh];
        mm_acc_at(p, &go, &mut gvh, lq, lk, dh);
        gp.fill(T::zero());
        mm_acc_bt(&go, &vh, &mut gp, lq, lk, dh);
        for (g, pr) in gp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
            softmax_row_backward(pr, g);
            g.iter_mut().for_each(|v| *v *= scale);
        }
        let mut gqh = vec![T::zero(); lq * dh];
        mm_acc(&gp, &kh, &mut gqh, lq, lk, dh);
        let mut gkh = vec![T::zero(); lk * dh];
        mm_acc_at(&gp, &qh, &mut gkh, lq, lk, dh);
        add_head_cols(&mut gq, &gqh, lq, c, h, dh);
        add_head_cols(&mut gk, &gkh, lk, c, h, dh);
        add_head_cols(&mut gv, &gvh, lk, c, h, dh);
    }
    Ok((
        Tensor::from_parts(vec![lq, c], gq),
        Tensor::from_parts(vec![lk, c], gk),
        Tensor::from_parts(vec![lk, c], gv),
    ))
}
