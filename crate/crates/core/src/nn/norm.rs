use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormSpec {
    pub normalized_channels: usize,
    pub epsilon: f64,
}

impl NormSpec {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        NormSpec {
            normalized_channels: channels,
            epsilon: Self::DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.normalized_channels == 0 {
            return Err(Error::Invalid("layer norm over zero channels".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Invalid(format!("layer norm epsilon {} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

/// Saved statistics: the normalized input and per-row reciprocal std.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Per-row normalization over the last axis of `x: [L, C]`, then
/// `xhat·gain + shift`. Variance is the biased (population) estimate.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = match x.shape() {
        &[_, c] => c,
        s => {
            return Err(Error::Shape {
                shape: s.to_vec(),
                reason: "layer norm expects L×C".into(),
            })
        }
    };
    NormSpec { normalized_channels: c, epsilon: eps }.validate()?;
    gain.expect_shape("layer norm gain", &[c])?;
    shift.expect_shape("layer norm shift", &[c])?;
    let inv_c = T::one() / T::from_usize(c);
    let eps = T::from_f64(eps);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / c);
    for ((row, xh), yr) in x
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(y.chunks_exact_mut(c))
    {
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        for (j, (&v, h)) in row.iter().zip(xh.iter_mut()).enumerate() {
            *h = (v - mean) * r;
            yr[j] = *h * gain.data()[j] + shift.data()[j];
        }
        rstd.push(r);
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        NormCache {
            xhat: Tensor::from_parts(shape, xhat),
            rstd,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    gy.expect_same_shape("layer_norm_backward", &cache.xhat)?;
    let c = gain.len();
    let inv_c = T::one() / T::from_usize(c);
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gs = vec![T::zero(); c];
    let mut gxh = vec![T::zero(); c];
    for (((g, xh), out), &r) in gy
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
        .zip(&cache.rstd)
    {
        let (mut m1, mut m2) = (T::zero(), T::zero());
        for j in 0..c {
            gg[j] += g[j] * xh[j];
            gs[j] += g[j];
            gxh[j] = g[j] * gain.data()[j];
            m1 += gxh[j];
            m2 += gxh[j] * xh[j];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for j in 0..c {
            out[j] = r * (gxh[j] - m1 - xh[j] * m2);
        }
    }
    Ok(NormGrads {
        input: Tensor::from_parts(gy.shape().to_vec(), gx),
        gain: Tensor::from_parts(vec![c], gg),
        shift: Tensor::from_parts(vec![c], gs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn constant_and_normalized_rows() {
        let (g, s) = ones(4);
        let (y, _) = layer_norm(&Tensor::full(&[1, 4], 3.0), &g, &s, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (g, s) = ones(2);
        let x = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let (y, _) = layer_norm(&x, &g, &s, 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn two_pass_oracle() {
        let row = [0.3, -1.7, 2.2, 0.05, 4.0, -0.6];
        let x = Tensor::new(&[1, 6], row.to_vec()).unwrap();
        let g = Tensor::new(&[6], vec![1.5, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let s = Tensor::new(&[6], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (y, _) = layer_norm(&x, &g, &s, 1e-5).unwrap();
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let e = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + s.data()[j];
            assert!((y.data()[j] - e).abs() <= 1e-10);
        }
    }

    #[test]
    fn scalar_affine_moments() {
        let x = Tensor::<f64>::from_fn(&[3, 8], |i| ((i * 7) % 11) as f64 - 4.0);
        let (y, _) = layer_norm(&x, &Tensor::full(&[8], 2.0), &Tensor::full(&[8], -1.0), 1e-9).unwrap();
        for row in y.data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!((m + 1.0).abs() < 1e-9 && (v - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let (g, s) = ones(3);
        assert!(layer_norm(&Tensor::<f64>::zeros(&[2, 4]), &g, &s, 1e-5).is_err());
        assert!(layer_norm(&Tensor::<f64>::zeros(&[2, 3]), &g, &s, 0.0).is_err());
        assert!(NormSpec { normalized_channels: 0, epsilon: 1e-5 }.validate().is_err());
    }
}
