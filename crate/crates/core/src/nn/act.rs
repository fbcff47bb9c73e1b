use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[inline]
pub fn sigmoid_scalar<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu_scalar<T: Scalar>(u: T) -> T {
    u * sigmoid_scalar(u)
}

#[inline]
pub fn silu_grad_scalar<T: Scalar>(u: T) -> T {
    let s = sigmoid_scalar(u);
    s * (T::one() + u * (T::one() - s))
}

/// `ln(1 + eᵘ)` without overflow.
#[inline]
pub fn softplus_scalar<T: Scalar>(u: T) -> T {
    u.max(T::zero()) + (-u.abs()).exp().ln_1p()
}

/// Inverse of softplus for `y > 0`: `ln(eʸ - 1)`.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// Gradient through SiLU given its input `x`.
pub fn silu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, |u, g| g * silu_grad_scalar(u))
}

/// Gradient through softplus given its input `x`; the derivative is σ(x).
pub fn softplus_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, |u, g| g * sigmoid_scalar(u))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Invalid("softmax of a rank-0 tensor".into()))?;
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(n) {
        softmax_row(row);
    }
    Ok(y)
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Gradient through softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    y.expect_same_shape("softmax_backward", gy)?;
    let n = *y.shape().last().unwrap_or(&1);
    let mut gx = gy.clone();
    for (g, p) in gx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
        softmax_row_backward(p, g);
    }
    Ok(gx)
}

/// In place: `g ← p ⊙ (g − ⟨g, p⟩)`.
pub(crate) fn softmax_row_backward<T: Scalar>(p: &[T], g: &mut [T]) {
    let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
    for (gv, &pv) in g.iter_mut().zip(p) {
        *gv = pv * (*gv - dot);
    }
}
