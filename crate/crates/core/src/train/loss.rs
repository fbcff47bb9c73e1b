//! Soft Dice plus cross-entropy on per-voxel softmax probabilities.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub dice: f64,
    pub ce: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

/// Loss of logits `[K, D, H, W]` (or any `[K, …]`) against labels in
/// voxel order, and its gradient with respect to the logits.
///
/// `1 − mean_k (2Σ p_k g_k + s) / (Σ p_k + Σ g_k + s)` over all classes,
/// plus the voxel-mean cross-entropy, with equal weights.
pub fn dice_ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(LossParts, Tensor<T>)> {
    let k = *logits.shape().first().ok_or_else(|| Error::dim("dice_ce_loss", logits.shape(), &[0]))?;
    let v = logits.len() / k.max(1);
    if k < 2 || v != labels.len() {
        return Err(Error::dim("dice_ce_loss", logits.shape(), &[k, labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c as usize >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    let z = logits.data();
    let mut p = vec![0.0f64; k * v];
    let mut ce = 0.0;
    for i in 0..v {
        let m = (0..k).map(|c| z[c * v + i].to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = (z[c * v + i].to_f64() - m).exp();
            p[c * v + i] = e;
            s += e;
        }
        for c in 0..k {
            p[c * v + i] /= s;
        }
        ce -= z[labels[i] as usize * v + i].to_f64() - m - s.ln();
    }
    ce /= v as f64;

    // Dice terms and ∂L/∂p.
    let mut gp = vec![0.0f64; k * v];
    let mut dice_mean = 0.0;
    for c in 0..k {
        let pc = &p[c * v..(c + 1) * v];
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (i, &pv) in pc.iter().enumerate() {
            let g = (labels[i] as usize == c) as u8 as f64;
            inter += pv * g;
            sp += pv;
            sg += g;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sp + sg + DICE_SMOOTH;
        dice_mean += num / den;
        for i in 0..v {
            let g = (labels[i] as usize == c) as u8 as f64;
            gp[c * v + i] = -(2.0 * g * den - num) / (den * den) / k as f64;
        }
    }
    dice_mean /= k as f64;

    // Through the softmax, then add the cross-entropy gradient.
    let mut gz = vec![T::zero(); k * v];
    for i in 0..v {
        let dot: f64 = (0..k).map(|c| p[c * v + i] * gp[c * v + i]).sum();
        for c in 0..k {
            let pc = p[c * v + i];
            let onehot = (labels[i] as usize == c) as u8 as f64;
            gz[c * v + i] = T::from_f64(pc * (gp[c * v + i] - dot) + (pc - onehot) / v as f64);
        }
    }
    Ok((
        LossParts { dice: 1.0 - dice_mean, ce },
        Tensor::new(logits.shape(), gz)?,
    ))
}

/// Per-voxel arg-max class of logits `[K, …]`; ties go to the lower class.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[0];
    let v = logits.len() / k;
    let z = logits.data();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if z[c * v + i] > z[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
