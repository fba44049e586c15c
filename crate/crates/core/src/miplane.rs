//! Histogram mutual-information estimates and information-plane traces.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{BicdError, Result};
use crate::model::{ChangeNet, PROBE_LAYERS};
use crate::synthdata::{stack_batch, ChangePair};
use crate::trainer::checkpoint::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinningConfig {
    pub n_bins: usize,
    /// Upper bound on distinct joint bins for multi-dimensional samples.
    pub z_joint_cap: usize,
    /// Number of fixed random directions `x` is projected onto before binning.
    pub x_projections: usize,
    /// Seed of the projection directions.
    pub seed: u64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            n_bins: 30,
            z_joint_cap: 4096,
            x_projections: 4,
            seed: 0,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(BicdError::Config(format!("n_bins must be >= 2, got {}", self.n_bins)));
        }
        if self.z_joint_cap < 2 {
            return Err(BicdError::Config("z_joint_cap must be >= 2".into()));
        }
        if self.x_projections == 0 {
            return Err(BicdError::Config("x_projections must be >= 1".into()));
        }
        Ok(())
    }
}

/// Count table over `(row symbol, column symbol)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
    total: u64,
}

impl JointHistogram {
    pub fn new(rows: usize, cols: usize) -> Self {
        JointHistogram {
            rows,
            cols,
            counts: vec![0; rows * cols],
            total: 0,
        }
    }

    pub fn from_counts(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != rows * cols {
            return Err(BicdError::Shape(format!(
                "{} counts for a {rows}x{cols} table",
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(JointHistogram {
            rows,
            cols,
            counts,
            total,
        })
    }

    pub fn from_pairs(rows: usize, cols: usize, a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(BicdError::Shape(format!("{} vs {} symbols", a.len(), b.len())));
        }
        let mut h = JointHistogram::new(rows, cols);
        for (&i, &j) in a.iter().zip(b) {
            h.add(i, j);
        }
        Ok(h)
    }

    pub fn add(&mut self, row: usize, col: usize) {
        self.counts[row * self.cols + col] += 1;
        self.total += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.cols + col]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn row_marginal(&self) -> Vec<u64> {
        self.counts.chunks(self.cols.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<u64> {
        let mut m = vec![0; self.cols];
        for r in self.counts.chunks(self.cols.max(1)) {
            for (acc, &c) in m.iter_mut().zip(r) {
                *acc += c;
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut t = JointHistogram::new(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.counts[j * self.rows + i] = self.count(i, j);
            }
        }
        t.total = self.total;
        t
    }

    /// Elementwise sum of two shards of the same table.
    pub fn merge(&mut self, other: &JointHistogram) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(BicdError::Shape("histogram shapes differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }
}

/// Shannon entropy in bits of a count vector.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Mutual information in bits of the joint distribution given by `joint`.
pub fn mi_discrete(joint: &JointHistogram) -> Result<f64> {
    if joint.total == 0 {
        return Err(BicdError::Empty("joint histogram".into()));
    }
    let n = joint.total as f64;
    let pr = joint.row_marginal();
    let pc = joint.col_marginal();
    let mut mi = 0.0;
    for (i, &ri) in pr.iter().enumerate() {
        if ri == 0 {
            continue;
        }
        for (j, &cj) in pc.iter().enumerate() {
            let c = joint.count(i, j);
            if c == 0 {
                continue;
            }
            // p(x,z) / (p(x) p(z)) = c·n / (r_i·c_j)
            mi += (c as f64 / n) * ((c as f64 * n) / (ri as f64 * cj as f64)).log2();
        }
    }
    Ok(mi.max(0.0))
}

/// Row-major sample matrix: `len()` samples of `dim` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(BicdError::Shape(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Samples { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn bin_values(values: &[f64], n_bins: usize) -> Vec<usize> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span * n_bins as f64) as usize).min(n_bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Project `x` onto `x_projections` fixed Gaussian directions and bin the
/// projections jointly. Returns the symbols and the number of columns used.
pub fn discretize_projected(x: &Samples, cfg: &BinningConfig) -> (Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = cfg.x_projections;
    let dirs: Vec<f64> = (0..k * x.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut proj = Vec::with_capacity(x.len() * k);
    for i in 0..x.len() {
        let row = x.row(i);
        for dir in dirs.chunks(x.dim) {
            proj.push(row.iter().zip(dir).map(|(a, b)| a * b).sum());
        }
    }
    discretize_joint(&Samples { dim: k, data: proj }, cfg)
}

/// Bin each dimension of `z` over its own range, then map each bin vector to a
/// joint symbol. Symbols are assigned densely in first-seen order; once
/// `z_joint_cap` are taken, further codes are hashed onto existing symbols.
/// Returns the symbols and the number of columns used.
pub fn discretize_joint(z: &Samples, cfg: &BinningConfig) -> (Vec<usize>, usize) {
    let n = z.len();
    let mut per_dim = Vec::with_capacity(z.dim);
    for d in 0..z.dim {
        let col: Vec<f64> = (0..n).map(|i| z.data[i * z.dim + d]).collect();
        per_dim.push(bin_values(&col, cfg.n_bins));
    }
    let mut ids: HashMap<Vec<u16>, usize> = HashMap::new();
    let dense_cap = cfg.z_joint_cap;
    let mut overflow = false;
    let symbols = (0..n)
        .map(|i| {
            let key: Vec<u16> = per_dim.iter().map(|b| b[i] as u16).collect();
            if let Some(&id) = ids.get(&key) {
                return id;
            }
            if ids.len() < dense_cap {
                let id = ids.len();
                ids.insert(key, id);
                id
            } else {
                overflow = true;
                let h = key.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
                    (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
                });
                (h % dense_cap as u64) as usize
            }
        })
        .collect();
    let cols = if overflow { cfg.z_joint_cap } else { ids.len().max(1) };
    (symbols, cols)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoEstimate {
    pub i_xz: f64,
    pub i_zy: f64,
    pub h_x: f64,
    pub h_z: f64,
    pub h_y: f64,
}

/// Estimate `I(X;Z)` and `I(Z;Y)` in bits from aligned samples.
pub fn estimate_ixz_izy(x: &Samples, z: &Samples, y: &[u32], cfg: &BinningConfig) -> Result<InfoEstimate> {
    cfg.validate()?;
    let n = x.len();
    if z.len() != n || y.len() != n {
        return Err(BicdError::Shape(format!(
            "sample counts differ: x {n}, z {}, y {}",
            z.len(),
            y.len()
        )));
    }
    if n < 2 {
        return Err(BicdError::Empty(format!("need at least 2 samples, got {n}")));
    }
    let (xb, x_cols) = discretize_projected(x, cfg);
    let (zb, z_cols) = discretize_joint(z, cfg);
    let y_cols = y.iter().copied().max().unwrap_or(0) as usize + 1;
    let yb: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    let xz = JointHistogram::from_pairs(x_cols, z_cols, &xb, &zb)?;
    let zy = JointHistogram::from_pairs(z_cols, y_cols, &zb, &yb)?;
    Ok(InfoEstimate {
        i_xz: mi_discrete(&xz)?,
        i_zy: mi_discrete(&zy)?,
        h_x: entropy_bits(&xz.row_marginal()),
        h_z: entropy_bits(&zy.row_marginal()),
        h_y: entropy_bits(&zy.col_marginal()),
    })
}

/// Per-pixel samples at the resolution of `features` (N×C×h×w): `x` is the
/// s×s block of both input images above each feature pixel, `y` the block's
/// majority label.
pub fn pixel_samples(
    x0: &[f32],
    x1: &[f32],
    mask: &[f32],
    dims: (usize, usize, usize, usize),
    features: &crate::tensor::Tensor<f32>,
) -> Result<(Samples, Samples, Vec<u32>)> {
    let (n, c_in, h, w) = dims;
    let (fn_, fc, fh, fw) = features.nchw()?;
    if fn_ != n || h % fh != 0 || w % fw != 0 || h / fh != w / fw {
        return Err(BicdError::Shape(format!(
            "feature map {:?} does not tile inputs {n}x{c_in}x{h}x{w}",
            features.dims()
        )));
    }
    let s = h / fh;
    let count = n * fh * fw;
    let mut xs = Vec::with_capacity(count * 2 * c_in * s * s);
    let mut zs = Vec::with_capacity(count * fc);
    let mut ys = Vec::with_capacity(count);
    let fd = features.data();
    for b in 0..n {
        for py in 0..fh {
            for px in 0..fw {
                for img in [x0, x1] {
                    for c in 0..c_in {
                        for dy in 0..s {
                            let row = ((b * c_in + c) * h + py * s + dy) * w + px * s;
                            xs.extend(img[row..row + s].iter().map(|&v| v as f64));
                        }
                    }
                }
                let mut ones = 0.0;
                for dy in 0..s {
                    let row = (b * h + py * s + dy) * w + px * s;
                    ones += mask[row..row + s].iter().map(|&v| v as f64).sum::<f64>();
                }
                ys.push(u32::from(ones / (s * s) as f64 >= 0.5));
                for c in 0..fc {
                    zs.push(fd[((b * fc + c) * fh + py) * fw + px] as f64);
                }
            }
        }
    }
    Ok((Samples::new(2 * c_in * s * s, xs)?, Samples::new(fc, zs)?, ys))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoRow {
    pub iter: u64,
    pub estimate: InfoEstimate,
}

/// Probe `probe_layer` of each checkpoint on `dataset` and estimate the
/// information-plane coordinates.
pub fn trace_info_plane(
    checkpoints: &[PathBuf],
    probe_layer: &str,
    dataset: &[ChangePair],
    cfg: &BinningConfig,
) -> Result<Vec<InfoRow>> {
    if !PROBE_LAYERS.contains(&probe_layer) {
        return Err(BicdError::Config(format!(
            "unknown probe layer `{probe_layer}`; expected one of {PROBE_LAYERS:?}"
        )));
    }
    if dataset.is_empty() {
        return Err(BicdError::Empty("info-plane dataset".into()));
    }
    let (x0, x1, y) = stack_batch(dataset)?;
    let dims = x0.nchw()?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (i, path) in checkpoints.iter().enumerate() {
        let ckpt = Checkpoint::load(path)?;
        let mut net = ChangeNet::<f32>::new(0);
        ckpt.restore_net(&mut net)?;
        let z = net.probe(&x0, &x1, probe_layer)?;
        let (xs, zs, ys) = pixel_samples(x0.data(), x1.data(), y.data(), dims, &z)?;
        let estimate = estimate_ixz_izy(&xs, &zs, &ys, cfg)?;
        let iter = ckpt.meta("epoch").map(|e| e as u64).unwrap_or(i as u64);
        rows.push(InfoRow { iter, estimate });
    }
    Ok(rows)
}

pub fn write_info_csv(rows: &[InfoRow], path: &Path) -> Result<()> {
    let mut out = String::from("iter,i_xz_bits,i_zy_bits\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{:.9}\n", r.iter, r.estimate.i_xz, r.estimate.i_zy));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| BicdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn independent_table_is_zero() {
        // outer product of [1,2,3] and [2,1]
        let h = JointHistogram::from_counts(3, 2, vec![2, 1, 4, 2, 6, 3]).unwrap();
        assert!(mi_discrete(&h).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_identity_is_two_bits() {
        let h = JointHistogram::from_pairs(4, 4, &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert!((mi_discrete(&h).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_histogram_errors() {
        assert!(mi_discrete(&JointHistogram::new(2, 2)).is_err());
    }

    #[test]
    fn constant_z_has_no_information() {
        let x = Samples::new(2, (0..40).map(|v| v as f64).collect()).unwrap();
        let z = Samples::new(3, vec![1.5; 60]).unwrap();
        let y: Vec<u32> = (0..20).map(|i| i % 2).collect();
        let e = estimate_ixz_izy(&x, &z, &y, &BinningConfig::default()).unwrap();
        assert_eq!(e.i_xz, 0.0);
        assert_eq!(e.i_zy, 0.0);
    }

    #[test]
    fn copied_labels_recover_label_entropy() {
        let y: Vec<u32> = (0..30).map(|i| u32::from(i % 3 == 0)).collect();
        let z = Samples::new(1, y.iter().map(|&v| v as f64).collect()).unwrap();
        let x = Samples::new(1, (0..30).map(|v| v as f64).collect()).unwrap();
        let e = estimate_ixz_izy(&x, &z, &y, &BinningConfig::default()).unwrap();
        assert!((e.i_zy - e.h_y).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_error() {
        let s = Samples::new(1, vec![0.0]).unwrap();
        assert!(estimate_ixz_izy(&s, &s, &[0], &BinningConfig::default()).is_err());
    }

    #[test]
    fn joint_cap_bounds_columns() {
        let cfg = BinningConfig {
            z_joint_cap: 8,
            ..Default::default()
        };
        let z = Samples::new(2, (0..200).map(|v| ((v * 37) % 101) as f64).collect()).unwrap();
        let (sym, cols) = discretize_joint(&z, &cfg);
        assert_eq!(cols, 8);
        assert!(sym.iter().all(|&s| s < cols));
    }

    #[test]
    fn pixel_samples_block_layout() {
        let x0: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x1 = vec![0.0f32; 16];
        let mut mask = vec![0.0f32; 16];
        mask[0] = 1.0;
        mask[1] = 1.0;
        let feat = crate::tensor::Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (xs, zs, ys) = pixel_samples(&x0, &x1, &mask, (1, 1, 4, 4), &feat).unwrap();
        assert_eq!(xs.dim, 8);
        assert_eq!(&xs.row(0)[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(zs.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ys, vec![1, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn mi_nonnegative_and_symmetric(rows in 1usize..6, cols in 1usize..6,
                                        seed in proptest::collection::vec(0u64..20, 36)) {
            let counts: Vec<u64> = seed.into_iter().take(rows * cols).collect();
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let h = JointHistogram::from_counts(rows, cols, counts).unwrap();
            let a = mi_discrete(&h).unwrap();
            let b = mi_discrete(&h.transpose()).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn bijection_gives_row_entropy(perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
                                       weights in proptest::collection::vec(1u64..10, 6)) {
            let mut h = JointHistogram::new(6, 6);
            for (i, &w) in weights.iter().enumerate() {
                for _ in 0..w { h.add(i, perm[i]); }
            }
            let mi = mi_discrete(&h).unwrap();
            prop_assert!((mi - entropy_bits(&h.row_marginal())).abs() < 1e-12);
        }

        #[test]
        fn merge_is_commutative(a in proptest::collection::vec(0u64..9, 9), b in proptest::collection::vec(0u64..9, 9)) {
            let ha = JointHistogram::from_counts(3, 3, a).unwrap();
            let hb = JointHistogram::from_counts(3, 3, b).unwrap();
            let mut ab = ha.clone();
            ab.merge(&hb).unwrap();
            let mut ba = hb.clone();
            ba.merge(&ha).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
