use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Scalar;

/// Adam with decoupled weight decay.
///
/// Each step first scales every parameter by `1 − lr·wd`, then subtracts
/// `lr · m̂ / (√v̂ + ε)` with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        AdamW { lr, betas, eps, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let shrink = T::from_f64(1.0 - self.lr * self.weight_decay);
        let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
        let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let (ic1, ic2) = (T::from_f64(1.0 / c1), T::from_f64(1.0 / c2));
        let (lr, eps) = (T::from_f64(self.lr), T::from_f64(self.eps));
        for (((p, g), m), v) in store.tensors_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = tb1 * *mv + ob1 * gv;
                *vv = tb2 * *vv + ob2 * gv * gv;
                *pv *= shrink;
                *pv -= lr * (*mv * ic1) / ((*vv * ic2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
