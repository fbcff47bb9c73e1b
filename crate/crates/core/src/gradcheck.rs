//! Central finite-difference checks of adjoint maps at 64-bit.
//!
//! A component is a map from named input tensors to one output tensor plus
//! its adjoint. The check contracts the output with a random probe `w`,
//! takes central differences `D(h) = ⟨w, y(x+h) − y(x−h)⟩ / 2h` at sampled
//! coordinates and compares the extrapolation `(4·D(h/2) − D(h)) / 3`
//! against the analytic gradient.
//!
//! Inputs and probes are drawn on a dyadic grid and `h` is a power of two,
//! so `x ± h` is exact and maps that are linear with unit slopes report an
//! error of exactly zero.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1.0 / 16384.0;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;

/// Step refinements (each divides the step by 4) tried until two
/// extrapolated estimates agree to a tenth of the tolerance or their gaps
/// start growing; then the estimate with the smallest gap to its neighbours
/// is kept.
pub const MAX_REFINE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub component: String,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{}: {} (max rel err {:.3e}, tol {:.1e})",
            self.component,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )?;
        for g in &self.groups {
            writeln!(f, "  {:<24} n={:<5} {:.3e}", g.name, g.checked, g.max_rel_err)?;
        }
        Ok(())
    }
}

/// Uniform draw from `[-1, 1]` rounded to multiples of 2⁻¹⁰.
pub fn dyadic(rng: &mut impl Rng) -> f64 {
    rng.gen_range(-1024i32..=1024) as f64 / 1024.0
}

pub fn dyadic_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| dyadic(rng))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
    }
}

/// Checks `grad` against central differences of `forward` at `inputs`.
///
/// `grad(inputs, w)` returns one gradient per input, in order. At most
/// `samples` coordinates per input are perturbed.
pub fn check<F, G>(
    component: &str,
    names: &[&str],
    inputs: Vec<Tensor<f64>>,
    forward: F,
    grad: G,
    samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    G: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    assert_eq!(names.len(), inputs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = forward(&inputs)?;
    let w = dyadic_tensor(y.shape(), &mut rng);
    let grads = grad(&inputs, &w)?;
    let mut groups = Vec::with_capacity(inputs.len());
    let mut xs = inputs;
    for (k, name) in names.iter().enumerate() {
        let n = xs[k].len();
        let idx = sample(&mut rng, n, samples.min(n)).into_vec();
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = xs[k].data()[i];
            let mut central = |h: f64| -> Result<f64> {
                xs[k].data_mut()[i] = orig + h;
                let yp = forward(&xs)?;
                xs[k].data_mut()[i] = orig - h;
                let ym = forward(&xs)?;
                xs[k].data_mut()[i] = orig;
                Ok(yp
                    .data()
                    .iter()
                    .zip(ym.data())
                    .zip(w.data())
                    .map(|((&p, &m), &wv)| (p - m) * wv)
                    .sum::<f64>()
                    / (2.0 * h))
            };
            let mut richardson = |h: f64| -> Result<f64> {
                let coarse = central(h)?;
                let fine = central(h / 2.0)?;
                Ok(if coarse == fine { fine } else { (4.0 * fine - coarse) / 3.0 })
            };
            let mut h = FD_STEP;
            let mut est = vec![richardson(h)?];
            let mut gaps: Vec<f64> = Vec::new();
            for _ in 0..MAX_REFINE {
                h /= 4.0;
                est.push(richardson(h)?);
                let d = rel_err(est[est.len() - 1], est[est.len() - 2]);
                gaps.push(d);
                // Settled, or roundoff now dominates the truncation error.
                if d <= tolerance / 10.0 || (gaps.len() > 1 && d > 2.0 * gaps[gaps.len() - 2]) {
                    break;
                }
            }
            let err_of = |k: usize| {
                let left = if k > 0 { gaps[k - 1] } else { 0.0 };
                left.max(gaps.get(k).copied().unwrap_or(0.0))
            };
            let best = if gaps.last().is_some_and(|&d| d <= tolerance / 10.0) {
                est.len() - 1
            } else {
                (0..est.len())
                    .min_by(|&a, &b| err_of(a).total_cmp(&err_of(b)))
                    .unwrap()
            };
            let num = est[best];
            worst = worst.max(rel_err(grads[k].data()[i], num));
        }
        groups.push(GroupReport {
            name: name.to_string(),
            checked: idx.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradReport {
        component: component.to_string(),
        tolerance,
        groups,
    })
}

/// Checks a parameterized map `x ↦ y` against its backward pass for the
/// input and every tensor of `store`.
///
/// `backward(store, x, w)` returns the input gradient and parameter
/// gradients for upstream gradient `w`.
pub fn check_params<F, G>(
    component: &str,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    forward: F,
    backward: G,
    samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&ParamStore<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    G: Fn(&ParamStore<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<(Tensor<f64>, Grads<f64>)>,
{
    let mut names = vec!["input".to_string()];
    let mut inputs = vec![x.clone()];
    for (n, t) in store.iter() {
        names.push(n.to_string());
        inputs.push(t.clone());
    }
    let rebuild = |v: &[Tensor<f64>]| {
        let mut s = store.clone();
        for (dst, src) in s.tensors_mut().zip(&v[1..]) {
            dst.data_mut().copy_from_slice(src.data());
        }
        s
    };
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    check(
        component,
        &name_refs,
        inputs,
        |v| forward(&rebuild(v), &v[0]),
        |v, w| {
            let (gx, g) = backward(&rebuild(v), &v[0], w)?;
            let mut out = vec![gx];
            out.extend(g.iter().cloned());
            Ok(out)
        },
        samples,
        tolerance,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = dyadic_tensor(&[4, 5], &mut rng);
        let r = check(
            "identity",
            &["x"],
            vec![x],
            |v| Ok(v[0].clone()),
            |_, w| Ok(vec![w.clone()]),
            20,
            0.0,
            1,
        )
        .unwrap();
        assert_eq!(r.max_rel_err(), 0.0);
        assert!(r.passed());
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = dyadic_tensor(&[6], &mut rng);
        let r = check(
            "square",
            &["x"],
            vec![x],
            |v| Ok(v[0].map(|a| a * a)),
            |v, w| Ok(vec![v[0].mul(w).unwrap()]),
            6,
            1e-6,
            2,
        )
        .unwrap();
        assert!(!r.passed());
    }
}
