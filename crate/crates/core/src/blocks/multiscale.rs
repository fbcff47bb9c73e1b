//! Stage bodies: a convolution block followed by a sequence layer, or one
//! of the multi-scale arrangements of parallel convolutions.
//!
//! | scheme | paths        | merge                                           |
//! |--------|--------------|-------------------------------------------------|
//! | plain  | k3           | `h(f(x))`                                       |
//! | MSv1   | k3, k7       | `h₃(f₃(x)) + h₇(f₇(x))`                         |
//! | MSv2   | k3, k7       | `P(h([f₃(x); f₇(x)]))`, `P` a 1×1×1 conv 2C→C   |
//! | MSv3   | k3, k5, k7   | `P(h([f₃(x); f₅(x); f₇(x)]))`, 3C→C             |
//! | MSv4   | k3           | plain, with parallel depthwise convs inside `h` |

use serde::{Deserialize, Serialize};

use super::common::{Conv, ConvBlock, ConvBlockCache};
use super::{ensure_finite, SeqCache, SeqKind, SeqLayer};
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::params::{Builder, Grads, ParamStore};
use crate::ssm::Phase;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiscale {
    #[default]
    None,
    Msv1,
    Msv2,
    Msv3,
    Msv4,
}

impl Multiscale {
    /// Kernel sizes of the parallel convolution paths.
    pub fn kernels(self) -> &'static [usize] {
        match self {
            Multiscale::None | Multiscale::Msv4 => &[3],
            Multiscale::Msv1 | Multiscale::Msv2 => &[3, 7],
            Multiscale::Msv3 => &[3, 5, 7],
        }
    }

    pub fn concatenates(self) -> bool {
        matches!(self, Multiscale::Msv2 | Multiscale::Msv3)
    }

    pub fn name(self) -> &'static str {
        match self {
            Multiscale::None => "none",
            Multiscale::Msv1 => "msv1",
            Multiscale::Msv2 => "msv2",
            Multiscale::Msv3 => "msv3",
            Multiscale::Msv4 => "msv4",
        }
    }
}

/// Parameter scope of convolution path `i`.
pub fn path_name(scheme: Multiscale, i: usize) -> String {
    match scheme.kernels() {
        [_] => "f".into(),
        ks => format!("f{}", ks[i]),
    }
}

/// Parameter scope of sequence layer `i`.
pub fn layer_name(scheme: Multiscale, i: usize) -> String {
    match scheme.kernels() {
        ks if ks.len() > 1 && !scheme.concatenates() => format!("h{}", ks[i]),
        _ => "h".into(),
    }
}

/// Builds the sequence layer of a stage at a given channel width.
pub type SeqFactory<'f> = dyn Fn(&mut Builder<'_>, &str, usize) -> Result<SeqLayer> + 'f;

#[derive(Clone, Debug)]
pub struct StageBody {
    pub scheme: Multiscale,
    pub paths: Vec<ConvBlock>,
    pub layers: Vec<SeqLayer>,
    pub proj: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct StageCache<T> {
    paths: Vec<ConvBlockCache<T>>,
    layers: Vec<SeqCache<T>>,
    /// Input of the projection, when there is one.
    cat: Option<Tensor<T>>,
}

impl StageBody {
    /// `stride` 2 for encoder stages, 1 for decoder stages.
    pub fn new(
        b: &mut Builder<'_>,
        scheme: Multiscale,
        cin: usize,
        cout: usize,
        stride: usize,
        seq_kind: SeqKind,
        make_seq: &SeqFactory<'_>,
    ) -> Result<Self> {
        if scheme == Multiscale::Msv4 && seq_kind != SeqKind::Mamba {
            return Err(Error::Config("MSv4 is Mamba-specific".into()));
        }
        let kernels = scheme.kernels();
        let mut paths = Vec::new();
        for (i, &k) in kernels.iter().enumerate() {
            paths.push(ConvBlock::new(b, &path_name(scheme, i), ConvSpec::cubic(cin, cout, k, stride, (k - 1) / 2), false)?);
        }
        let mut layers = Vec::new();
        let mut proj = None;
        if scheme.concatenates() {
            let wide = kernels.len() * cout;
            layers.push(make_seq(b, "h", wide)?);
            proj = Some(Conv::new(b, "proj", ConvSpec::cubic(wide, cout, 1, 1, 0), false)?);
        } else {
            for i in 0..kernels.len() {
                layers.push(make_seq(b, &layer_name(scheme, i), cout)?);
            }
        }
        Ok(StageBody { scheme, paths, layers, proj })
    }

    pub fn param_count(&self) -> usize {
        self.paths.iter().map(ConvBlock::param_count).sum::<usize>()
            + self.layers.iter().map(SeqLayer::param_count).sum::<usize>()
            + self.proj.as_ref().map_or(0, Conv::param_count)
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.paths[0].conv.out_spatial(input)
    }

    pub fn check_memory(&self, spatial: [usize; 3]) -> Result<()> {
        let s = self.out_spatial(spatial)?;
        self.layers.iter().try_for_each(|l| l.check_memory(s))
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        phase: Phase,
    ) -> Result<(Tensor<T>, StageCache<T>)> {
        let mut feats = Vec::with_capacity(self.paths.len());
        let mut pcs = Vec::with_capacity(self.paths.len());
        for (i, p) in self.paths.iter().enumerate() {
            let (f, c) = p.forward(ps, x)?;
            ensure_finite(&f, || path_name(self.scheme, i))?;
            feats.push(f);
            pcs.push(c);
        }
        if let Some(proj) = &self.proj {
            let refs: Vec<&Tensor<T>> = feats.iter().collect();
            let cat = Tensor::concat0(&refs)?;
            let (h, hc) = self.layers[0].forward(ps, &cat, phase)?;
            ensure_finite(&h, || "h".into())?;
            let y = proj.forward(ps, &h)?;
            ensure_finite(&y, || "proj".into())?;
            return Ok((y, StageCache { paths: pcs, layers: vec![hc], cat: Some(h) }));
        }
        let mut out: Option<Tensor<T>> = None;
        let mut lcs = Vec::with_capacity(self.layers.len());
        for (i, (l, f)) in self.layers.iter().zip(&feats).enumerate() {
            let (h, hc) = l.forward(ps, f, phase)?;
            ensure_finite(&h, || layer_name(self.scheme, i))?;
            lcs.push(hc);
            match &mut out {
                Some(o) => o.add_assign(&h)?,
                None => out = Some(h),
            }
        }
        Ok((out.expect("at least one path"), StageCache { paths: pcs, layers: lcs, cat: None }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &StageCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let gfeats: Vec<Tensor<T>> = match (&self.proj, &cache.cat) {
            (Some(proj), Some(h)) => {
                let gh = proj.backward(ps, h, gy, grads)?;
                let gcat = self.layers[0].backward(ps, &cache.layers[0], &gh, grads)?;
                let cout = self.paths[0].out_channels();
                gcat.split0(&vec![cout; self.paths.len()])?
            }
            _ => self
                .layers
                .iter()
                .zip(&cache.layers)
                .map(|(l, c)| l.backward(ps, c, gy, grads))
                .collect::<Result<_>>()?,
        };
        let mut gx: Option<Tensor<T>> = None;
        for ((p, c), g) in self.paths.iter().zip(&cache.paths).zip(&gfeats) {
            let gi = p.backward(ps, c, g, grads)?;
            match &mut gx {
                Some(a) => a.add_assign(&gi)?,
                None => gx = Some(gi),
            }
        }
        Ok(gx.expect("at least one path"))
    }
}
