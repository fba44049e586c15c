use bicd::binconv::{binary_conv_forward, im2row_packed, BinConvLayer, ChangeGenerator};
use bicd::bitpack::{sign_pack, unpack, xnor_popcount_dot};
use bicd::conv::{naive_conv2d, ConvSpec};
use bicd::ops::ActKind;
use bicd::params::ParamSet;
use bicd::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn signs(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

#[test]
fn sign_pack_4x7_matches_rowwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut x = random(&[4, 7], &mut rng);
    x.data_mut()[3] = 0.0;
    let bits = sign_pack(&x);
    assert_eq!(bits.words_per_row(), 1);
    for r in 0..4 {
        let mut word = 0u64;
        for c in 0..7 {
            if x.data()[r * 7 + c] >= 0.0 {
                word |= 1 << c;
            }
        }
        assert_eq!(bits.words()[r], word, "row {r}");
    }
    assert_eq!(unpack::<f32>(&bits), signs(&x));
}

#[test]
fn im2row_matches_sliding_window_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c, h, w) = (2, 3, 8, 8);
    let x = random(&[n, c, h, w], &mut rng);
    let spec = ConvSpec::new(c, 4, 3).padding(1);
    let pm = im2row_packed(&sign_pack(&x), &spec).unwrap();
    assert_eq!(pm.bits.dims(), &[n * h * w, c * 9]);
    let xs = signs(&x);
    for b in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                let row = (b * h + oy) * w + ox;
                let mut valid = 0;
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                            let expect = inside
                                && xs.data()[((b * c + ci) * h + iy as usize) * w + ix as usize] > 0.0;
                            valid += inside as u32;
                            assert_eq!(pm.bits.get(row, ci * 9 + ky * 3 + kx), expect);
                        }
                    }
                }
                assert_eq!(pm.valid_taps[row], valid);
            }
        }
    }
}

fn plain_layer(params: &mut ParamSet<f32>, spec: ConvSpec, seed: u64) -> BinConvLayer {
    let mut layer = BinConvLayer::build(params, "l", spec, ActKind::Identity, None, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    *params.get_mut(layer.latent_w) = random(&spec.weight_dims(), &mut rng);
    *params.get_mut(layer.alpha) = Tensor::full(&[spec.out_channels], 1.0);
    layer.shift = None;
    layer
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn packed_conv_equals_dense_oracle(
        cin in 1usize..80, cout in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5]),
        h in 3usize..10, w in 3usize..10, stride in 1usize..3, pad in 0usize..3, dil in 1usize..3,
        seed in any::<u64>()
    ) {
        let spec = ConvSpec::new(cin, cout, k).stride(stride).padding(pad).dilation(dil);
        prop_assume!(spec.output_hw(h, w).is_ok());
        let mut ps = ParamSet::new();
        let layer = plain_layer(&mut ps, spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = random(&[2, cin, h, w], &mut rng);
        let got = binary_conv_forward(&ps, &x, &layer, None).unwrap();
        let want = naive_conv2d(&signs(&x), &signs(ps.get(layer.latent_w)), &spec, -1.0).unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn dot_matches_naive_sum(v in proptest::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 1..300)) {
        let a = Tensor::from_vec(&[v.len()], v.iter().map(|p| p.0).collect()).unwrap();
        let b = Tensor::from_vec(&[v.len()], v.iter().map(|p| p.1).collect()).unwrap();
        let naive: f32 = signs(&a).data().iter().zip(signs(&b).data()).map(|(x, y)| x * y).sum();
        prop_assert_eq!(xnor_popcount_dot(sign_pack(&a).row(0), sign_pack(&b).row(0)).unwrap(), naive as i64);
    }
}

#[test]
fn sub_threshold_weight_perturbation_keeps_forward() {
    let spec = ConvSpec::new(4, 3, 3).padding(1);
    let mut ps = ParamSet::new();
    let layer = plain_layer(&mut ps, spec, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[1, 4, 6, 6], &mut rng);
    let before = binary_conv_forward(&ps, &x, &layer, None).unwrap();
    for v in ps.get_mut(layer.latent_w).data_mut() {
        // move toward zero without crossing it
        *v = if *v >= 0.0 { *v * 0.5 + 1e-3 } else { *v * 0.5 };
    }
    assert_eq!(binary_conv_forward(&ps, &x, &layer, None).unwrap(), before);
}

#[test]
fn generator_is_swap_symmetric_and_uses_abs_difference() {
    let spec = ConvSpec::new(5, 5, 3).padding(1);
    let mut ps = ParamSet::new();
    let conv = BinConvLayer::build(&mut ps, "g", spec, ActKind::Prelu, Some(0.3), 2);
    let gen = ChangeGenerator { conv };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f0 = random(&[2, 5, 7, 7], &mut rng);
    let f1 = random(&[2, 5, 7, 7], &mut rng);
    let a = gen.forward(&ps, &f0, &f1, None).unwrap();
    let b = gen.forward(&ps, &f1, &f0, None).unwrap();
    assert_eq!(a, b);
    let d = f0.zip_map(&f1, |p, q| p.max(q) - p.min(q)).unwrap();
    assert_eq!(a, gen.conv.forward(&ps, &d, None).unwrap());
    assert_eq!(d, f0.zip_map(&f1, |p, q| (p - q).abs()).unwrap());
}
