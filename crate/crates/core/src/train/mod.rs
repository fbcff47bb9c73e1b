//! Toy-scale training and evaluation on synthetic volumes.

pub mod checks;
mod data;
mod loss;
mod metrics;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{
    gen_dataset, gen_sample, train_val_split, Sample, SyntheticVolumeSpec, BACKGROUND, BODY, LESION, NUM_CLASSES,
};
pub use loss::{argmax_labels, dice_ce_loss, LossParts, DICE_SMOOTH};
pub use metrics::{dice_score, DiceReport};
pub use optim::AdamW;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::{Grads, ParamStore};
use crate::scan_order::layer_seed;
use crate::ssm::Phase;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-2,
            epochs: 30,
            iterations: 50,
            batch_size: 2,
            train_samples: 200,
            val_samples: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 || self.iterations == 0 || self.batch_size == 0 {
            return bad("epochs, iterations and batch size must be at least 1");
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return bad("train and validation sets must be nonempty");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.eps >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("betas must lie in [0, 1); eps and weight decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val: DiceReport,
    pub wall_seconds: f64,
}

/// Mean Dice of arg-max predictions over `samples`.
pub fn evaluate<T: Scalar>(net: &Network, ps: &ParamStore<T>, samples: &[Sample]) -> Result<DiceReport> {
    let k = net.cfg.num_classes;
    let reports = samples
        .iter()
        .map(|s| {
            let (y, _) = net.forward(ps, &s.volume.cast::<T>(), Phase::Infer)?;
            dice_score(&argmax_labels(&y), &s.labels, k)
        })
        .collect::<Result<Vec<_>>>()?;
    DiceReport::mean(&reports)
}

/// Mean loss over a batch and the accumulated parameter gradients.
pub fn batch_gradient<T: Scalar>(
    net: &Network,
    ps: &ParamStore<T>,
    batch: &[&Sample],
    grads: &mut Grads<T>,
) -> Result<f64> {
    grads.zero();
    let mut total = 0.0;
    for s in batch {
        let (y, cache) = net.forward(ps, &s.volume.cast::<T>(), Phase::Train)?;
        let (l, gy) = dice_ce_loss(&y, &s.labels)?;
        if !l.total().is_finite() {
            return Err(Error::NonFinite { layer: "loss".into() });
        }
        total += l.total();
        net.backward(ps, &cache, &gy, grads)?;
    }
    grads.scale(T::from_f64(1.0 / batch.len() as f64));
    Ok(total / batch.len() as f64)
}

/// Runs `cfg.epochs × cfg.iterations` AdamW steps on batches drawn from a
/// per-epoch shuffle of `train`, validating after every epoch.
pub fn train<T: Scalar>(
    net: &Network,
    mut ps: ParamStore<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ParamStore<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training needs nonempty train and validation sets".into()));
    }
    let mut opt = AdamW::new(&ps, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay);
    let mut grads = Grads::zeros_like(&ps);
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, u64::MAX));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.iterations {
            let batch: Vec<&Sample> = (0..cfg.batch_size)
                .map(|_| {
                    let s = &train[order[cursor % order.len()]];
                    cursor += 1;
                    s
                })
                .collect();
            loss_sum += batch_gradient(net, &ps, &batch, &mut grads)?;
            opt.step(&mut ps, &grads)?;
            if let Some(name) = ps.first_non_finite() {
                return Err(Error::NonFinite { layer: name.to_string() });
            }
        }
        let val_report = evaluate(net, &ps, val)?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / cfg.iterations as f64,
            val: val_report,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok((ps, records))
}

/// `epoch,loss,val_dice_macro,dice_c0,…` with fixed formatting; wall times
/// go to [`timing_csv`] so this file is reproducible byte for byte.
pub fn log_csv(records: &[EpochRecord]) -> String {
    let k = records.first().map_or(0, |r| r.val.per_class.len());
    let mut s = String::from("epoch,loss,val_dice_macro");
    for c in 0..k {
        let _ = write!(s, ",dice_c{c}");
    }
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{:.8},{:.8}", r.epoch, r.loss, r.val.macro_fg);
        for d in &r.val.per_class {
            let _ = write!(s, ",{d:.8}");
        }
        s.push('\n');
    }
    s
}

pub fn timing_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,wall_seconds\n");
    for r in records {
        let _ = writeln!(s, "{},{:.3}", r.epoch, r.wall_seconds);
    }
    s
}

/// Trailing means over `window` consecutive values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

pub fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

/// One-hot logits `[K, D, H, W]` whose arg-max is `labels`.
pub fn labels_as_logits<T: Scalar>(labels: &[u8], shape: [usize; 3], classes: usize) -> Result<Tensor<T>> {
    let v = labels.len();
    Tensor::new(
        &[classes, shape[0], shape[1], shape[2]],
        (0..classes * v).map(|j| T::from_f64((labels[j % v] as usize == j / v) as u8 as f64)).collect(),
    )
}

#[cfg(test)]
mod tests;
