//! Synthetic change pairs and the on-disk pair directory format.
//!
//! Each pair shares a textured background. Interest objects are inserted
//! into `x1` or removed from `x0`, and only they set the mask. The second
//! image additionally receives nuisance perturbations: a sub-pixel shift of
//! the background, a global brightness offset and per-pixel Gaussian noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{BicdError, Result};
use crate::netpbm::{self, Image};
use crate::tensor::{MaskTensor, RealTensor, Tensor};

/// Image pair `x0`, `x1` (3×H×W in `[0,1]`) and change mask `y` (1×H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct ChangePair {
    pub x0: RealTensor,
    pub x1: RealTensor,
    pub y: MaskTensor,
}

impl ChangePair {
    pub fn height(&self) -> usize {
        self.x0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.x0.dims()[2]
    }

    pub fn coverage(&self) -> f64 {
        self.y.sum() as f64 / self.y.len() as f64
    }

    /// Mirror all three tensors left to right.
    pub fn hflip(&self) -> ChangePair {
        ChangePair {
            x0: hflip(&self.x0),
            x1: hflip(&self.x1),
            y: hflip(&self.y),
        }
    }

    /// Round every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> ChangePair {
        let q = |t: &RealTensor| t.map(|v| to_u8(v) as f32 / 255.0);
        ChangePair {
            x0: q(&self.x0),
            x1: q(&self.x1),
            y: self.y.clone(),
        }
    }
}

fn hflip(t: &RealTensor) -> RealTensor {
    let w = t.dims()[t.rank() - 1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stack pairs into `N×3×H×W` inputs and an `N×1×H×W` mask.
pub fn stack_batch(pairs: &[ChangePair]) -> Result<(RealTensor, RealTensor, MaskTensor)> {
    let first = pairs
        .first()
        .ok_or_else(|| BicdError::Empty("batch of zero pairs".into()))?;
    let (h, w) = (first.height(), first.width());
    let n = pairs.len();
    let mut x0 = Vec::with_capacity(n * 3 * h * w);
    let mut x1 = Vec::with_capacity(n * 3 * h * w);
    let mut y = Vec::with_capacity(n * h * w);
    for p in pairs {
        if (p.height(), p.width()) != (h, w) {
            return Err(BicdError::Shape(format!(
                "pair is {}x{}, batch is {h}x{w}",
                p.height(),
                p.width()
            )));
        }
        x0.extend_from_slice(p.x0.data());
        x1.extend_from_slice(p.x1.data());
        y.extend_from_slice(p.y.data());
    }
    Ok((
        Tensor::from_vec(&[n, 3, h, w], x0)?,
        Tensor::from_vec(&[n, 3, h, w], x1)?,
        Tensor::from_vec(&[n, 1, h, w], y)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_pairs: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub kinds: Vec<ObjectKind>,
    /// Global brightness offset drawn from `U(-b, b)`.
    pub brightness: f64,
    pub noise_sigma: f64,
    /// Maximum background shift in pixels along each axis.
    pub jitter: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            height: 64,
            width: 64,
            n_pairs: 100,
            min_objects: 1,
            max_objects: 3,
            kinds: vec![ObjectKind::Rectangle, ObjectKind::Ellipse],
            brightness: 0.15,
            noise_sigma: 0.03,
            jitter: 1.0,
            coverage_min: 0.02,
            coverage_max: 0.30,
            max_attempts: 64,
        }
    }
}

impl SynthConfig {
    /// No nuisance perturbations.
    pub fn without_noise(mut self) -> Self {
        self.brightness = 0.0;
        self.noise_sigma = 0.0;
        self.jitter = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BicdError::Config(m));
        if self.height < 4 || self.width < 4 {
            return bad(format!("image must be at least 4x4, got {}x{}", self.height, self.width));
        }
        if self.min_objects > self.max_objects {
            return bad(format!(
                "object range [{}, {}] is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > 0 && self.kinds.is_empty() {
            return bad("no object kinds enabled".into());
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("noise_sigma", self.noise_sigma),
            ("jitter", self.jitter),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.coverage_min)
            || !(0.0..=1.0).contains(&self.coverage_max)
            || self.coverage_min > self.coverage_max
        {
            return bad(format!(
                "coverage range [{}, {}] is invalid",
                self.coverage_min, self.coverage_max
            ));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }
}

fn pair_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate `cfg.n_pairs` pairs. Pairs are produced in parallel, each from
/// its own derived seed, so the output does not depend on thread count.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<ChangePair>> {
    cfg.validate()?;
    (0..cfg.n_pairs)
        .into_par_iter()
        .map(|i| generate_pair(cfg, i))
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Object {
    kind: ObjectKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f32; 3],
    removal: bool,
}

impl Object {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ObjectKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ObjectKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let mut img = vec![0f32; 3 * h * w];
    for c in 0..3 {
        let base: f64 = rng.gen_range(0.3..0.6);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.02..0.08),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = base;
                for &(amp, fy, fx, phase) in &waves {
                    let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                    v += amp * (t + phase).sin();
                }
                img[(c * h + y) * w + x] = v as f32;
            }
        }
    }
    img
}

/// Bilinear resample of a CHW image shifted by `(dy, dx)` with edge clamping.
fn shift(img: &[f32], h: usize, w: usize, dy: f64, dx: f64) -> Vec<f32> {
    let mut out = vec![0f32; img.len()];
    for c in 0..3 {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let sy = (y as f64 - dy).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = (sy - y0 as f64) as f32;
            for x in 0..w {
                let sx = (x as f64 - dx).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = (sx - x0 as f64) as f32;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn sample_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    (0..count)
        .map(|_| {
            let ry = rng.gen_range(0.06..0.2) * h;
            let rx = rng.gen_range(0.06..0.2) * w;
            Object {
                kind: cfg.kinds[rng.gen_range(0..cfg.kinds.len())],
                cy: rng.gen_range(ry..h - ry),
                cx: rng.gen_range(rx..w - rx),
                ry,
                rx,
                color: [rng.gen(), rng.gen(), rng.gen()],
                removal: rng.gen_bool(0.5),
            }
        })
        .collect()
}

fn rasterize(objects: &[Object], h: usize, w: usize) -> Vec<f32> {
    let mut mask = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if objects.iter().any(|o| o.contains(y, x)) {
                mask[y * w + x] = 1.0;
            }
        }
    }
    mask
}

fn paint(img: &mut [f32], objects: &[Object], h: usize, w: usize) {
    for o in objects {
        for y in 0..h {
            for x in 0..w {
                if o.contains(y, x) {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = o.color[c];
                    }
                }
            }
        }
    }
}

/// Generate the `index`-th pair of `cfg`.
pub fn generate_pair(cfg: &SynthConfig, index: usize) -> Result<ChangePair> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, index));
    let base = background(&mut rng, h, w);

    let check_coverage = cfg.max_objects > 0;
    let mut attempt = 0;
    let (objects, mask) = loop {
        attempt += 1;
        let objects = sample_objects(cfg, &mut rng);
        let mask = rasterize(&objects, h, w);
        let cov = mask.iter().sum::<f32>() as f64 / (h * w) as f64;
        if !check_coverage || (cfg.coverage_min..=cfg.coverage_max).contains(&cov) {
            break (objects, mask);
        }
        if attempt >= cfg.max_attempts {
            return Err(BicdError::Coverage {
                index,
                attempts: attempt,
            });
        }
    };
    let (removed, inserted): (Vec<Object>, Vec<Object>) = objects.iter().partition(|o| o.removal);

    let mut x0 = base.clone();
    paint(&mut x0, &removed, h, w);

    let mut x1 = if cfg.jitter > 0.0 {
        let dy = rng.gen_range(-cfg.jitter..=cfg.jitter);
        let dx = rng.gen_range(-cfg.jitter..=cfg.jitter);
        shift(&base, h, w, dy, dx)
    } else {
        base
    };
    paint(&mut x1, &inserted, h, w);
    if cfg.brightness > 0.0 {
        let b = rng.gen_range(-cfg.brightness..=cfg.brightness) as f32;
        x1.iter_mut().for_each(|v| *v += b);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        x1.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    for img in [&mut x0, &mut x1] {
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(ChangePair {
        x0: Tensor::from_vec(&[3, h, w], x0)?,
        x1: Tensor::from_vec(&[3, h, w], x1)?,
        y: Tensor::from_vec(&[1, h, w], mask)?,
    })
}

fn to_image(t: &RealTensor) -> Image {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let mut data = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            data[p * c + ch] = to_u8(t.data()[ch * h * w + p]);
        }
    }
    Image {
        width: w,
        height: h,
        channels: c,
        data,
    }
}

fn from_image(img: &Image) -> RealTensor {
    let (c, hw) = (img.channels, img.width * img.height);
    let mut data = vec![0f32; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            data[ch * hw + p] = img.data[p * c + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[c, img.height, img.width], data).expect("image dims")
}

pub fn pair_stem(index: usize) -> String {
    format!("pair_{index:05}")
}

/// Write pairs as `<root>/{t0,t1,mask}/<stem>.{ppm,pgm}`.
pub fn save_pair_dir(root: &Path, pairs: &[ChangePair]) -> Result<()> {
    for sub in ["t0", "t1", "mask"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| BicdError::io(&dir, e))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let stem = pair_stem(i);
        netpbm::write(&root.join("t0").join(format!("{stem}.ppm")), &to_image(&p.x0))?;
        netpbm::write(&root.join("t1").join(format!("{stem}.ppm")), &to_image(&p.x1))?;
        let mut m = to_image(&p.y);
        m.data.iter_mut().for_each(|v| *v = if *v >= 128 { 255 } else { 0 });
        netpbm::write(&root.join("mask").join(format!("{stem}.pgm")), &m)?;
    }
    Ok(())
}

fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| BicdError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| BicdError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_expect(path: PathBuf, stem: &str, channels: usize) -> Result<Image> {
    if !path.exists() {
        return Err(BicdError::MissingCounterpart {
            stem: stem.to_string(),
            path,
        });
    }
    let img = netpbm::read(&path)?;
    if img.channels != channels {
        return Err(BicdError::Format {
            path,
            msg: format!("expected {channels} channels, found {}", img.channels),
        });
    }
    Ok(img)
}

/// Load every pair under `root`, sorted by stem. Masks are binarized at 128.
pub fn load_pair_dir(root: &Path) -> Result<Vec<ChangePair>> {
    Ok(load_named_pair_dir(root)?.into_iter().map(|(_, p)| p).collect())
}

/// Like [`load_pair_dir`], keeping each pair's file stem.
pub fn load_named_pair_dir(root: &Path) -> Result<Vec<(String, ChangePair)>> {
    let mut all = stems(&root.join("t0"), "ppm")?;
    for (sub, ext) in [("t1", "ppm"), ("mask", "pgm")] {
        all.extend(stems(&root.join(sub), ext)?);
    }
    all.sort();
    all.dedup();
    let mut pairs = Vec::with_capacity(all.len());
    for stem in &all {
        let t0 = read_expect(root.join("t0").join(format!("{stem}.ppm")), stem, 3)?;
        let t1 = read_expect(root.join("t1").join(format!("{stem}.ppm")), stem, 3)?;
        let mpath = root.join("mask").join(format!("{stem}.pgm"));
        let mut m = read_expect(mpath.clone(), stem, 1)?;
        for (img, path) in [
            (&t1, root.join("t1").join(format!("{stem}.ppm"))),
            (&m, mpath),
        ] {
            if (img.width, img.height) != (t0.width, t0.height) {
                return Err(BicdError::Format {
                    path,
                    msg: format!(
                        "dimension mismatch: {}x{} vs t0 {}x{}",
                        img.width, img.height, t0.width, t0.height
                    ),
                });
            }
        }
        m.data.iter_mut().for_each(|v| *v = u8::from(*v >= 128) * 255);
        pairs.push((
            stem.clone(),
            ChangePair {
                x0: from_image(&t0),
                x1: from_image(&t1),
                y: from_image(&m),
            },
        ));
    }
    Ok(pairs)
}
