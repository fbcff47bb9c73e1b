//! Composite layers: Mamba and attention sequence layers and the
//! multi-scale stage bodies built from them.

mod attention;
mod common;
mod mamba;
mod multiscale;

pub use attention::{
    multi_head_attention, multi_head_attention_backward, AttnCache, AttnConfig, AttnLayer,
    MhaCache, Reduction, DEFAULT_ATTENTION_LIMIT,
};
pub use common::{Conv, ConvBlock, ConvBlockCache, LayerNorm, Linear};
pub use mamba::{
    multi_scan, multi_scan_merge, DwKind, DwParams, MambaCache, MambaConfig, MambaLayer, SsmIds,
    MSV4_KERNELS,
};
pub use multiscale::{layer_name, path_name, Multiscale, SeqFactory, StageBody, StageCache};

use crate::error::Result;
use crate::params::{Grads, ParamStore};
use crate::ssm::Phase;
use crate::tensor::{Scalar, Tensor};

/// `Error::NonFinite` naming `layer` if `t` holds a NaN or infinity.
pub(crate) fn ensure_finite<T: Scalar>(t: &Tensor<T>, layer: impl FnOnce() -> String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(crate::Error::NonFinite { layer: layer() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqKind {
    Mamba,
    Attention,
}

/// The `h` component of a stage.
#[derive(Clone, Debug)]
pub enum SeqLayer {
    Mamba(MambaLayer),
    Attn(AttnLayer),
}

#[derive(Clone, Debug)]
pub enum SeqCache<T> {
    Mamba(MambaCache<T>),
    Attn(AttnCache<T>),
}

impl SeqLayer {
    pub fn kind(&self) -> SeqKind {
        match self {
            SeqLayer::Mamba(_) => SeqKind::Mamba,
            SeqLayer::Attn(_) => SeqKind::Attention,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            SeqLayer::Mamba(m) => m.param_count(),
            SeqLayer::Attn(a) => a.param_count(),
        }
    }

    pub fn check_memory(&self, spatial: [usize; 3]) -> Result<()> {
        match self {
            SeqLayer::Mamba(_) => Ok(()),
            SeqLayer::Attn(a) => a.check_memory(spatial),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: Phase,
    ) -> Result<(Tensor<T>, SeqCache<T>)> {
        match self {
            SeqLayer::Mamba(m) => m.forward(ps, x, phase).map(|(y, c)| (y, SeqCache::Mamba(c))),
            SeqLayer::Attn(a) => a.forward(ps, x).map(|(y, c)| (y, SeqCache::Attn(c))),
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &SeqCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (SeqLayer::Mamba(m), SeqCache::Mamba(c)) => m.backward(ps, c, gy, grads),
            (SeqLayer::Attn(a), SeqCache::Attn(c)) => a.backward(ps, c, gy, grads),
            _ => Err(crate::Error::Invalid("sequence layer cache of the wrong kind".into())),
        }
    }
}

#[cfg(test)]
mod tests;
