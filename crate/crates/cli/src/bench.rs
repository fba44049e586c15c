//! Packed binary convolution versus the naive real convolution.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use bicd::binconv::{binary_conv_forward, BinConvLayer};
use bicd::conv::{naive_conv2d, ConvSpec};
use bicd::ops::ActKind;
use bicd::params::ParamSet;
use bicd::{BicdError, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::BenchShape;

const WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub shape: BenchShape,
    pub packed_ns: f64,
    pub naive_ns: f64,
    pub packed_checksum: u64,
    pub oracle_checksum: u64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.naive_ns / self.packed_ns
    }
}

/// FNV-1a over the little-endian bytes of every element.
pub fn checksum(t: &Tensor<f32>) -> u64 {
    t.data()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
}

pub fn median(samples: &mut [Duration]) -> Duration {
    samples.sort_unstable();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

fn time_median<F: FnMut() -> Result<Tensor<f32>>>(iters: usize, mut f: F) -> Result<Duration> {
    for _ in 0..WARMUP {
        std::hint::black_box(f()?);
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(f()?);
        samples.push(t.elapsed());
    }
    Ok(median(&mut samples))
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("dims")
}

fn signs(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Same-padded conv at stride 1. The packed layer has unit scale, zero bias
/// and no activation, so its output is the raw ±1 dot product.
pub fn bench_shape(shape: BenchShape, iters: usize, seed: u64) -> Result<BenchRow> {
    let spec = ConvSpec::new(shape.cin, shape.cout, shape.kernel).padding(shape.kernel / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut layer = BinConvLayer::build(&mut params, "bench", spec, ActKind::Identity, None, seed);
    layer.shift = None;
    *params.get_mut(layer.latent_w) = random(&spec.weight_dims(), &mut rng);
    *params.get_mut(layer.alpha) = Tensor::full(&[shape.cout], 1.0);
    let weight = params.get(layer.latent_w).clone();
    let x = random(&[1, shape.cin, shape.size, shape.size], &mut rng);

    let packed = binary_conv_forward(&params, &x, &layer, None)?;
    let oracle = naive_conv2d(&signs(&x), &signs(&weight), &spec, -1.0)?;
    let (packed_checksum, oracle_checksum) = (checksum(&packed), checksum(&oracle));
    if packed != oracle {
        return Err(BicdError::Contract(format!(
            "bench {shape}: packed output {packed_checksum:016x} differs from oracle {oracle_checksum:016x}"
        )));
    }

    let packed_t = time_median(iters, || binary_conv_forward(&params, &x, &layer, None))?;
    let naive_t = time_median(iters, || naive_conv2d(&x, &weight, &spec, 0.0))?;
    Ok(BenchRow {
        shape,
        packed_ns: packed_t.as_nanos() as f64,
        naive_ns: naive_t.as_nanos() as f64,
        packed_checksum,
        oracle_checksum,
    })
}

pub const BENCH_HEADER: &str = "cin,cout,kernel,size,packed_ns,naive_ns,speedup,packed_checksum,oracle_checksum";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let s = r.shape;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.0},{:.0},{:.3},{:016x},{:016x}",
            s.cin,
            s.cout,
            s.kernel,
            s.size,
            r.packed_ns,
            r.naive_ns,
            r.speedup(),
            r.packed_checksum,
            r.oracle_checksum
        );
    }
    out
}
