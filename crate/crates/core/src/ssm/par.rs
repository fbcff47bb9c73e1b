//! Work-efficient (Blelloch) scan over affine maps `h ↦ a·h + b`.
//!
//! Elements compose left to right, `(a₁,b₁)∘(a₂,b₂) = (a₁a₂, a₂b₁ + b₂)`,
//! with identity `(1, 0)`. Every tree node carries one element per lane so
//! all `C·N` recurrences advance together.

use super::{lane_terms, Discretization, Projected};
use crate::counters;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> ScanElement<T> {
    pub fn identity() -> Self {
        ScanElement { a: T::one(), b: T::zero() }
    }

    /// Result of applying the map to `h`.
    pub fn apply(&self, h: T) -> T {
        self.a * h + self.b
    }
}

#[inline]
pub fn combine<T: Scalar>(e1: ScanElement<T>, e2: ScanElement<T>) -> ScanElement<T> {
    ScanElement {
        a: e1.a * e2.a,
        b: e2.a * e1.b + e2.b,
    }
}

/// Lane-vectorized `dst ← src ∘ dst`.
#[inline]
fn combine_into<T: Scalar>(src_a: &[T], src_b: &[T], dst_a: &mut [T], dst_b: &mut [T]) {
    for ((da, db), (&sa, &sb)) in dst_a.iter_mut().zip(dst_b.iter_mut()).zip(src_a.iter().zip(src_b)) {
        *db = *da * sb + *db;
        *da *= sa;
    }
}

/// Two distinct rows `j < i` of a `[rows, lanes]` buffer.
fn rows2<T>(buf: &mut [T], lanes: usize, j: usize, i: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(j < i);
    let (lo, hi) = buf.split_at_mut(i * lanes);
    (&mut lo[j * lanes..(j + 1) * lanes], &mut hi[..lanes])
}

/// Exclusive prefix compositions of `[len, lanes]` elements, in place.
/// `len` must be a power of two.
fn blelloch_exclusive<T: Scalar>(a: &mut [T], b: &mut [T], len: usize, lanes: usize) {
    debug_assert!(len.is_power_of_two());
    let mut s = 1;
    while s < len {
        for i in (2 * s - 1..len).step_by(2 * s) {
            let (aj, ai) = rows2(a, lanes, i - s, i);
            let (bj, bi) = rows2(b, lanes, i - s, i);
            combine_into(aj, bj, ai, bi);
            counters::add_scan_combines(lanes as u64);
        }
        s *= 2;
    }
    a[(len - 1) * lanes..].fill(T::one());
    b[(len - 1) * lanes..].fill(T::zero());
    let mut tmp_a = vec![T::zero(); lanes];
    let mut tmp_b = vec![T::zero(); lanes];
    s = len / 2;
    while s >= 1 {
        for i in (2 * s - 1..len).step_by(2 * s) {
            let (aj, ai) = rows2(a, lanes, i - s, i);
            let (bj, bi) = rows2(b, lanes, i - s, i);
            // Left subtree total moves right; its slot gets the prefix.
            tmp_a.copy_from_slice(aj);
            tmp_b.copy_from_slice(bj);
            aj.copy_from_slice(ai);
            bj.copy_from_slice(bi);
            // ai ← ai ∘ tmp
            for ((pa, pb), (&ta, &tb)) in ai.iter_mut().zip(bi.iter_mut()).zip(tmp_a.iter().zip(&tmp_b)) {
                *pb = ta * *pb + tb;
                *pa *= ta;
            }
            counters::add_scan_combines(lanes as u64);
        }
        s /= 2;
    }
}

/// Inclusive scan of per-row elements over `[len, lanes]`; returns the
/// drive part of each prefix, i.e. the state reached from `h = 0`.
pub fn scan_pairs_par<T: Scalar>(a: &[T], b: &[T], lanes: usize) -> Vec<T> {
    let len = a.len() / lanes.max(1);
    let padded = len.next_power_of_two();
    let mut pa = vec![T::one(); padded * lanes];
    let mut pb = vec![T::zero(); padded * lanes];
    pa[..len * lanes].copy_from_slice(a);
    pb[..len * lanes].copy_from_slice(b);
    blelloch_exclusive(&mut pa, &mut pb, padded, lanes);
    let mut h = vec![T::zero(); len * lanes];
    for t in 0..len {
        for l in 0..lanes {
            let i = t * lanes + l;
            h[i] = a[i] * pb[i] + b[i];
        }
        counters::add_scan_combines(lanes as u64);
    }
    h
}

pub(super) fn scan_par<T: Scalar>(
    u: &[T],
    pr: &Projected<T>,
    a: &[T],
    d: &[T],
    disc: Discretization,
    every: usize,
) -> (Vec<T>, Vec<T>) {
    let (l, c, n) = (pr.l, pr.c, pr.n);
    let lanes = c * n;
    let mut ea = vec![0.0f64; l * lanes];
    let mut eb = vec![0.0f64; l * lanes];
    for t in 0..l {
        for ch in 0..c {
            for s in 0..n {
                let (ab, drive) = lane_terms(pr, u, a, disc, t, ch, s);
                ea[t * lanes + ch * n + s] = ab.to_f64();
                eb[t * lanes + ch * n + s] = drive.to_f64();
            }
        }
    }
    let h = scan_pairs_par(&ea, &eb, lanes);
    let mut y = vec![T::zero(); l * c];
    let mut ckpt = Vec::with_capacity((l / every) * lanes);
    for t in 0..l {
        let crow = &pr.cm[t * n..(t + 1) * n];
        for ch in 0..c {
            let hl = &h[t * lanes + ch * n..t * lanes + (ch + 1) * n];
            let mut acc = (d[ch] * u[t * c + ch]).to_f64();
            for (&cv, &hv) in crow.iter().zip(hl) {
                acc += cv.to_f64() * hv;
            }
            y[t * c + ch] = T::from_f64(acc);
        }
        if (t + 1) % every == 0 && t + 1 < l {
            ckpt.extend(h[t * lanes..(t + 1) * lanes].iter().map(|&v| T::from_f64(v)));
        }
    }
    (y, ckpt)
}
