//! Synthetic three-class volumes: background, one large ellipsoidal body
//! and a few small spherical lesions inside it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan_order::layer_seed;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const BODY: u8 = 1;
pub const LESION: u8 = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticVolumeSpec {
    /// Edge length of the cubic volume.
    pub extent: usize,
    /// Body semi-axes as fractions of the extent, drawn per axis.
    pub body_radius: [f64; 2],
    /// Inclusive range of the lesion count.
    pub lesions: [usize; 2],
    /// Lesion radii as fractions of the extent.
    pub lesion_radius: [f64; 2],
    /// Mean intensity per class.
    pub means: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticVolumeSpec {
    fn default() -> Self {
        SyntheticVolumeSpec {
            extent: 32,
            body_radius: [0.25, 0.40],
            lesions: [1, 4],
            lesion_radius: [0.03, 0.08],
            means: [0.0, 1.0, 2.0],
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticVolumeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        let range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if self.extent < 4 {
            return bad("extent must be at least 4");
        }
        if self.lesion_radius[1] <= 0.0 || self.lesion_radius[0] <= 0.0 {
            return bad("lesion radius must be positive");
        }
        if !range(self.body_radius) || !range(self.lesion_radius) {
            return bad("radius ranges must satisfy 0 < lo ≤ hi");
        }
        if self.body_radius[1] > 0.5 {
            return bad("body radius must stay inside the volume (≤ 0.5)");
        }
        if self.lesions[0] == 0 || self.lesions[0] > self.lesions[1] {
            return bad("lesion count range must satisfy 1 ≤ lo ≤ hi");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.extent.pow(3)
    }
}

/// One volume `[1, E, E, E]` and its labels in row-major voxel order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Tensor<f32>,
    pub labels: Vec<u8>,
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn generate(spec: &SyntheticVolumeSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let e = spec.extent;
    let ef = e as f64;
    let mid = (ef - 1.0) / 2.0;
    let radii: [f64; 3] = std::array::from_fn(|_| draw(rng, spec.body_radius) * ef);
    // Up to half the free margin of jitter per axis.
    let centre: [f64; 3] = std::array::from_fn(|a| mid + rng.gen_range(-0.5..0.5) * (mid - radii[a]).max(0.0));
    let mut labels = vec![BACKGROUND; e * e * e];
    let idx = |d: usize, h: usize, w: usize| (d * e + h) * e + w;
    for d in 0..e {
        for h in 0..e {
            for w in 0..e {
                let p = [d as f64, h as f64, w as f64];
                let q: f64 = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum();
                if q <= 1.0 {
                    labels[idx(d, h, w)] = BODY;
                }
            }
        }
    }
    let count = rng.gen_range(spec.lesions[0]..=spec.lesions[1]);
    for _ in 0..count {
        // Centre uniform in the inner 60% of the body.
        let dir = loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                break v;
            }
        };
        let c: [usize; 3] =
            std::array::from_fn(|a| (centre[a] + 0.6 * dir[a] * radii[a]).round().clamp(0.0, ef - 1.0) as usize);
        let r = draw(rng, spec.lesion_radius) * ef;
        let reach = r.ceil() as usize;
        for d in c[0].saturating_sub(reach)..(c[0] + reach + 1).min(e) {
            for h in c[1].saturating_sub(reach)..(c[1] + reach + 1).min(e) {
                for w in c[2].saturating_sub(reach)..(c[2] + reach + 1).min(e) {
                    let dd = [d, h, w].iter().zip(&c).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
                    if dd <= r * r {
                        labels[idx(d, h, w)] = LESION;
                    }
                }
            }
        }
    }
    labels
}

/// Sample `index` of the stream defined by `spec.seed`.
pub fn gen_sample(spec: &SyntheticVolumeSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(spec.seed, index));
    let labels = loop {
        let l = generate(spec, &mut rng);
        let mut seen = [false; NUM_CLASSES];
        l.iter().for_each(|&c| seen[c as usize] = true);
        if seen.iter().all(|&s| s) {
            break l;
        }
    };
    let e = spec.extent;
    let volume = Tensor::new(
        &[1, e, e, e],
        labels
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (spec.means[c as usize] + spec.noise_sigma * z) as f32
            })
            .collect(),
    )?;
    Ok(Sample { volume, labels })
}

pub fn gen_dataset(spec: &SyntheticVolumeSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    (0..n as u64).map(|i| gen_sample(spec, i)).collect()
}

/// The first `train` samples and the `val` samples after them.
pub fn train_val_split(spec: &SyntheticVolumeSpec, train: usize, val: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut all = gen_dataset(spec, train + val)?;
    let v = all.split_off(train);
    Ok((all, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticVolumeSpec {
        SyntheticVolumeSpec { extent: 16, ..Default::default() }
    }

    #[test]
    fn deterministic_and_split_consistent() {
        let a = gen_dataset(&small(), 6).unwrap();
        let b = gen_dataset(&small(), 6).unwrap();
        assert_eq!(a, b);
        let (t, v) = train_val_split(&small(), 4, 2).unwrap();
        assert_eq!(t[..], a[..4]);
        assert_eq!(v[..], a[4..]);
        let other = gen_dataset(&SyntheticVolumeSpec { seed: 1, ..small() }, 1).unwrap();
        assert_ne!(other[0], a[0]);
    }

    #[test]
    fn every_class_is_present() {
        for s in gen_dataset(&SyntheticVolumeSpec::default(), 20).unwrap() {
            let mut seen = [0usize; 3];
            s.labels.iter().for_each(|&c| seen[c as usize] += 1);
            assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
            assert_eq!(s.volume.shape(), &[1, 32, 32, 32]);
            assert_eq!(s.labels.len(), 32 * 32 * 32);
        }
    }

    #[test]
    fn class_fractions_are_ordered() {
        let mut counts = [0usize; 3];
        for s in gen_dataset(&SyntheticVolumeSpec::default(), 100).unwrap() {
            s.labels.iter().for_each(|&c| counts[c as usize] += 1);
        }
        assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
    }

    #[test]
    fn intensities_follow_class_means() {
        let spec = SyntheticVolumeSpec { noise_sigma: 0.0, ..small() };
        let s = gen_sample(&spec, 3).unwrap();
        for (&v, &c) in s.volume.data().iter().zip(&s.labels) {
            assert_eq!(v as f64, spec.means[c as usize]);
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let zero = SyntheticVolumeSpec { lesion_radius: [0.0, 0.0], ..small() };
        assert!(matches!(gen_dataset(&zero, 1), Err(Error::Config(_))));
        let none = SyntheticVolumeSpec { lesions: [0, 0], ..small() };
        assert!(gen_dataset(&none, 1).is_err());
        assert!(gen_dataset(&small(), 0).is_err());
    }
}
