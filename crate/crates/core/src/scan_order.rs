//! Bijections between voxel grids and sequences.
//!
//! Axis-major orders list the spatial axes (0 = depth, 1 = height,
//! 2 = width) from slowest to fastest varying:
//!
//! | kind        | slow → fast | reads as    |
//! |-------------|-------------|-------------|
//! | `ForwardW`  | d, h, w     | left-right  |
//! | `BackwardW` | reversed `ForwardW` |     |
//! | `HFirst`    | w, d, h     | up-down     |
//! | `DFirst`    | h, w, d     | front-back  |
//!
//! Sequence position `i` holds voxel `perm[i]`, where voxel indices are
//! row-major `(d·H + h)·W + w`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gather_rows, scatter_rows, seq_to_volume, volume_to_seq, Permutation, Scalar, Shape3D, Tensor};

/// Scan direction as it appears in layer configs. Random orders get their
/// seed from the layer that owns them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ForwardW,
    BackwardW,
    HFirst,
    DFirst,
    Random,
}

impl Direction {
    pub fn resolve(self, seed: u64) -> ScanKind {
        match self {
            Direction::ForwardW => ScanKind::ForwardW,
            Direction::BackwardW => ScanKind::BackwardW,
            Direction::HFirst => ScanKind::HFirst,
            Direction::DFirst => ScanKind::DFirst,
            Direction::Random => ScanKind::RandomPerm(seed),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::ForwardW => "forward_w",
            Direction::BackwardW => "backward_w",
            Direction::HFirst => "h_first",
            Direction::DFirst => "d_first",
            Direction::Random => "random",
        }
    }
}

/// Named direction sets: one forward scan, forward plus backward, forward
/// plus a random order, and the three axis-major scans.
pub const DIRECTION_PRESETS: [&str; 4] = ["single", "dual_fb", "dual_rand", "tri"];

pub fn direction_preset(name: &str) -> Option<Vec<Direction>> {
    use Direction::*;
    Some(match name {
        "single" => vec![ForwardW],
        "dual_fb" => vec![ForwardW, BackwardW],
        "dual_rand" => vec![ForwardW, Random],
        "tri" => vec![ForwardW, HFirst, DFirst],
        _ => return None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanKind {
    ForwardW,
    BackwardW,
    HFirst,
    DFirst,
    RandomPerm(u64),
    /// Any axis-major order, slowest axis first.
    AxisMajor([usize; 3]),
}

impl ScanKind {
    pub fn axis_order(self) -> Option<[usize; 3]> {
        match self {
            ScanKind::ForwardW => Some([0, 1, 2]),
            ScanKind::HFirst => Some([2, 0, 1]),
            ScanKind::DFirst => Some([1, 2, 0]),
            ScanKind::AxisMajor(a) => Some(a),
            ScanKind::BackwardW | ScanKind::RandomPerm(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    kind: ScanKind,
    spatial: [usize; 3],
    perm: Permutation,
    inv: Permutation,
}

fn axis_major(spatial: [usize; 3], order: [usize; 3]) -> Result<Vec<usize>> {
    let mut sorted = order;
    sorted.sort_unstable();
    if sorted != [0, 1, 2] {
        return Err(Error::Permutation(format!("axis order {order:?}")));
    }
    let [_, h, w] = spatial;
    let ext = order.map(|a| spatial[a]);
    let mut out = Vec::with_capacity(spatial.iter().product());
    let mut coord = [0usize; 3];
    for i0 in 0..ext[0] {
        coord[order[0]] = i0;
        for i1 in 0..ext[1] {
            coord[order[1]] = i1;
            for i2 in 0..ext[2] {
                coord[order[2]] = i2;
                out.push((coord[0] * h + coord[1]) * w + coord[2]);
            }
        }
    }
    Ok(out)
}

impl ScanOrder {
    pub fn new(kind: ScanKind, spatial: [usize; 3]) -> Result<Self> {
        if spatial.contains(&0) {
            return Err(Error::Shape {
                shape: spatial.to_vec(),
                reason: "scan over an empty grid".into(),
            });
        }
        let l: usize = spatial.iter().product();
        let idx = match kind {
            ScanKind::BackwardW => (0..l).rev().collect(),
            ScanKind::RandomPerm(seed) => {
                let mut v: Vec<usize> = (0..l).collect();
                v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                v
            }
            k => axis_major(spatial, k.axis_order().expect("axis-major kind"))?,
        };
        let perm = Permutation::new(idx)?;
        Ok(ScanOrder {
            kind,
            spatial,
            inv: perm.inverse(),
            perm,
        })
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Voxel visited at each sequence position.
    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    /// Sequence position of each voxel.
    pub fn inverse(&self) -> &Permutation {
        &self.inv
    }

    /// `C×D×H×W` volume to an `L×C` sequence in this order.
    pub fn flatten<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = Shape3D::of(x)?;
        if s.spatial() != self.spatial {
            return Err(Error::dim("flatten", &s.spatial(), &self.spatial));
        }
        self.gather_seq(&volume_to_seq(x)?)
    }

    /// Inverse of [`flatten`](Self::flatten); also its adjoint.
    pub fn unflatten<T: Scalar>(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        seq_to_volume(&self.scatter_seq(s)?, self.spatial)
    }

    /// Reorders a sequence in canonical (`ForwardW`) order into this order.
    pub fn gather_seq<T: Scalar>(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if self.perm.is_identity() {
            check_len(s, self.len())?;
            return Ok(s.clone());
        }
        gather_rows(s, &self.perm)
    }

    /// Inverse of [`gather_seq`](Self::gather_seq).
    pub fn scatter_seq<T: Scalar>(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if self.perm.is_identity() {
            check_len(s, self.len())?;
            return Ok(s.clone());
        }
        scatter_rows(s, &self.perm)
    }

    /// `position,index` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["position", "index"])?;
        for (pos, &i) in self.perm.as_slice().iter().enumerate() {
            w.write_record([pos.to_string(), i.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_len<T: Scalar>(s: &Tensor<T>, l: usize) -> Result<()> {
    if s.rank() != 2 || s.shape()[0] != l {
        return Err(Error::dim("scan order sequence", s.shape(), &[l]));
    }
    Ok(())
}

pub fn make_random_order(spatial: [usize; 3], seed: u64) -> Result<ScanOrder> {
    ScanOrder::new(ScanKind::RandomPerm(seed), spatial)
}

/// Seed of the random order owned by layer `layer` under a global seed.
pub fn layer_seed(global: u64, layer: u64) -> u64 {
    let mut z = global ^ layer.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::permute_axes;
    use rand::Rng;

    fn vol(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&shape, |_| r.gen_range(-1.0..1.0))
    }

    fn all_kinds() -> Vec<ScanKind> {
        vec![
            ScanKind::ForwardW,
            ScanKind::BackwardW,
            ScanKind::HFirst,
            ScanKind::DFirst,
            ScanKind::RandomPerm(7),
        ]
    }

    #[test]
    fn forward_w_is_row_major() {
        let o = ScanOrder::new(ScanKind::ForwardW, [2, 2, 2]).unwrap();
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    assert_eq!(o.inverse().as_slice()[(d * 2 + h) * 2 + w], 4 * d + 2 * h + w);
                }
            }
        }
    }

    #[test]
    fn d_first_enumeration() {
        let o = ScanOrder::new(ScanKind::DFirst, [2, 2, 2]).unwrap();
        assert_eq!(o.permutation().as_slice(), &[0, 4, 1, 5, 2, 6, 3, 7]);
        // Brute force: sort coordinate tuples by (h, w, d).
        let mut tuples: Vec<(usize, usize, usize)> =
            (0..2).flat_map(|d| (0..2).flat_map(move |h| (0..2).map(move |w| (d, h, w)))).collect();
        tuples.sort_by_key(|&(d, h, w)| (h, w, d));
        let expect: Vec<usize> = tuples.iter().map(|&(d, h, w)| d * 4 + h * 2 + w).collect();
        assert_eq!(o.permutation().as_slice(), expect.as_slice());

        let o = ScanOrder::new(ScanKind::HFirst, [2, 3, 2]).unwrap();
        let mut tuples: Vec<(usize, usize, usize)> =
            (0..2).flat_map(|d| (0..3).flat_map(move |h| (0..2).map(move |w| (d, h, w)))).collect();
        tuples.sort_by_key(|&(d, h, w)| (w, d, h));
        let expect: Vec<usize> = tuples.iter().map(|&(d, h, w)| (d * 3 + h) * 2 + w).collect();
        assert_eq!(o.permutation().as_slice(), expect.as_slice());
    }

    #[test]
    fn backward_reverses_forward() {
        let x = vol([3, 2, 3, 4], 1);
        let f = ScanOrder::new(ScanKind::ForwardW, [2, 3, 4]).unwrap().flatten(&x).unwrap();
        let b = ScanOrder::new(ScanKind::BackwardW, [2, 3, 4]).unwrap().flatten(&x).unwrap();
        for i in 0..24 {
            assert_eq!(f.data()[i * 3..i * 3 + 3], b.data()[(23 - i) * 3..(23 - i) * 3 + 3]);
        }
    }

    #[test]
    fn round_trips_and_bijections() {
        let x = vol([2, 3, 4, 5], 2);
        for k in all_kinds() {
            let o = ScanOrder::new(k, [3, 4, 5]).unwrap();
            let mut seen = vec![false; o.len()];
            for &i in o.permutation().as_slice() {
                assert!(!std::mem::replace(&mut seen[i], true));
            }
            assert_eq!(o.unflatten(&o.flatten(&x).unwrap()).unwrap(), x, "{k:?}");
            let c = Tensor::full(&[2, 3, 4, 5], 1.5);
            assert_eq!(o.unflatten(&o.flatten(&c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn random_round_trip_uses_inverse_table() {
        let o = make_random_order([3, 4, 5], 7).unwrap();
        let x = vol([2, 3, 4, 5], 3);
        let s = o.flatten(&x).unwrap();
        let seq = volume_to_seq(&x).unwrap();
        // Row of voxel v sits at position inv[v].
        for v in 0..60 {
            let p = o.inverse().as_slice()[v];
            assert_eq!(s.data()[p * 2..p * 2 + 2], seq.data()[v * 2..v * 2 + 2]);
        }
        assert_eq!(o.unflatten(&s).unwrap(), x);
    }

    #[test]
    fn random_orders() {
        assert!(make_random_order([1, 1, 1], 3).unwrap().permutation().is_identity());
        let a = make_random_order([8, 8, 8], 7).unwrap();
        assert_eq!(a, make_random_order([8, 8, 8], 7).unwrap());
        assert_ne!(a.permutation(), make_random_order([8, 8, 8], 8).unwrap().permutation());
        assert_ne!(layer_seed(0, 1), layer_seed(0, 2));
    }

    #[test]
    fn shape_errors() {
        let o = ScanOrder::new(ScanKind::ForwardW, [2, 2, 2]).unwrap();
        assert!(o.flatten(&Tensor::<f64>::zeros(&[1, 2, 2, 3])).is_err());
        assert!(o.unflatten(&Tensor::<f64>::zeros(&[7, 1])).is_err());
        assert!(ScanOrder::new(ScanKind::AxisMajor([0, 0, 1]), [2, 2, 2]).is_err());
    }

    /// flatten(transpose(x, σ), σ-mapped order) == flatten(x, order) for all
    /// six σ and all six axis-major orders.
    #[test]
    fn axis_orders_commute_with_transposition() {
        let x = vol([2, 2, 3, 4], 4);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for sigma in perms {
            let y = permute_axes(&x, &[0, sigma[0] + 1, sigma[1] + 1, sigma[2] + 1]).unwrap();
            let ys = [y.shape()[1], y.shape()[2], y.shape()[3]];
            // Original axis k sits at position pos[k] of y.
            let mut pos = [0; 3];
            for (i, &k) in sigma.iter().enumerate() {
                pos[k] = i;
            }
            for a in perms {
                let fx = ScanOrder::new(ScanKind::AxisMajor(a), [2, 3, 4]).unwrap().flatten(&x).unwrap();
                let fy = ScanOrder::new(ScanKind::AxisMajor(a.map(|k| pos[k])), ys)
                    .unwrap()
                    .flatten(&y)
                    .unwrap();
                assert_eq!(fx, fy, "σ={sigma:?} a={a:?}");
            }
        }
    }

    #[test]
    fn csv_export() {
        let dir = std::env::temp_dir().join(format!("scan_order_csv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("perm.csv");
        ScanOrder::new(ScanKind::DFirst, [2, 2, 2]).unwrap().write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("position,index\n0,0\n1,4\n"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
