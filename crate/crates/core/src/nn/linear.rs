use crate::error::{Error, Result};
use crate::tensor::ops::{mm_acc_at, mm_acc_bt};
use crate::tensor::{matmul, Scalar, Tensor};

/// Row-wise affine map `x·W + b` with `x: [L, C_in]`, `W: [C_in, C_out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        let n = w.shape()[1];
        b.expect_shape("linear bias", &[n])?;
        for row in y.data_mut().chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (m, k) = match x.shape() {
        &[m, k] => (m, k),
        s => return Err(Error::dim("linear_backward", s, w.shape())),
    };
    w.expect_shape("linear_backward weights", &[k, gy.shape().get(1).copied().unwrap_or(0)])?;
    let n = w.shape()[1];
    gy.expect_shape("linear_backward", &[m, n])?;
    let mut gx = vec![T::zero(); m * k];
    let mut gw = vec![T::zero(); k * n];
    mm_acc_bt(gy.data(), w.data(), &mut gx, m, k, n);
    mm_acc_at(x.data(), gy.data(), &mut gw, m, k, n);
    let mut gb = vec![T::zero(); n];
    for row in gy.data().chunks_exact(n) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(vec![m, k], gx),
        weight: Tensor::from_parts(vec![k, n], gw),
        bias: Tensor::from_parts(vec![n], gb),
    })
}
