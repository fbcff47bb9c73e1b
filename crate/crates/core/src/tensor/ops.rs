use super::{numel_of, Scalar, Tensor};
use crate::counters;
use crate::error::{Error, Result};

fn expect_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::Shape {
            shape: s.to_vec(),
            reason: format!("{op} expects a matrix"),
        }),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`; the sum over k runs in index order.
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn mm_acc_bt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn mm_acc_at<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_matrix("matmul", a)?;
    let (k2, n) = expect_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    mm_acc(a.data(), b.data(), &mut out, m, k, n);
    counters::add_macs((m * k * n) as u64);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Adjoint of [`matmul`]: returns `(∂a, ∂b)` for upstream gradient `gc`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = expect_matrix("matmul_backward", a)?;
    let (_, n) = expect_matrix("matmul_backward", b)?;
    gc.expect_shape("matmul_backward", &[m, n])?;
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    mm_acc_bt(gc.data(), b.data(), &mut ga, m, k, n);
    mm_acc_at(a.data(), gc.data(), &mut gb, m, k, n);
    Ok((
        Tensor::from_parts(vec![m, k], ga),
        Tensor::from_parts(vec![k, n], gb),
    ))
}

pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = match x.shape() {
        &[r, c] => (r, c),
        s => panic!("transpose2d on shape {s:?}"),
    };
    let src = x.data();
    let mut out = vec![T::zero(); r * c];
    // Blocked to keep both sides cache-friendly on long sequences.
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Materialized axis permutation: `out.shape[i] = x.shape[perm[i]]`.
pub fn permute_axes<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let p = Permutation::new(perm.to_vec())?;
    if p.len() != rank {
        return Err(Error::Permutation(format!(
            "permutation of length {} for rank-{rank} tensor",
            p.len()
        )));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&a| x.shape()[a]).collect();
    // stride in the source for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&a| in_strides[a]).collect();
    let n = numel_of(&out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let src = x.data();
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// A validated bijection on `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(idx: Vec<usize>) -> Result<Self> {
        let n = idx.len();
        let mut seen = vec![false; n];
        for &i in &idx {
            if i >= n {
                return Err(Error::Permutation(format!("index {i} out of range 0..{n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Permutation(format!("index {i} repeated")));
            }
        }
        Ok(Permutation(idx))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (pos, &i) in self.0.iter().enumerate() {
            inv[i] = pos;
        }
        Permutation(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| i == v)
    }
}

fn check_rows<T: Scalar>(op: &'static str, x: &Tensor<T>, idx: &Permutation) -> Result<usize> {
    if x.rank() != 2 || x.shape()[0] != idx.len() {
        return Err(Error::dim(op, x.shape(), &[idx.len()]));
    }
    Ok(x.shape()[1])
}

/// `out[i, :] = x[idx[i], :]`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &Permutation) -> Result<Tensor<T>> {
    let c = check_rows("gather_rows", x, idx)?;
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for &i in idx.as_slice() {
        out.extend_from_slice(&src[i * c..(i + 1) * c]);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Adjoint of [`gather_rows`]: `out[idx[i], :] = g[i, :]`.
pub fn scatter_rows<T: Scalar>(g: &Tensor<T>, idx: &Permutation) -> Result<Tensor<T>> {
    let c = check_rows("scatter_rows", g, idx)?;
    let src = g.data();
    let mut out = vec![T::zero(); g.len()];
    for (pos, &i) in idx.as_slice().iter().enumerate() {
        out[i * c..(i + 1) * c].copy_from_slice(&src[pos * c..(pos + 1) * c]);
    }
    Ok(Tensor::from_parts(g.shape().to_vec(), out))
}
