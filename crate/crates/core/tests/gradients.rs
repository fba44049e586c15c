//! Central finite differences at 64-bit precision against the analytic
//! backward passes, restricted to parameters that do not pass through a
//! sign() on the way to the loss.

use bicd::auxobj::{AuxHeads, AuxModule, AuxTape};
use bicd::binconv::{BinConvLayer, GradTape};
use bicd::conv::{ConvSpec, RealConv, RealConvTape};
use bicd::model::ChangeNet;
use bicd::objective::LossWeights;
use bicd::ops::ActKind;
use bicd::params::{Grads, ParamId, ParamSet};
use bicd::trainer::train_step;
use bicd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(dims: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Probe `count` random elements of each parameter in `ids` and return the
/// worst relative error.
fn probe(
    params: &mut ParamSet<f64>,
    grads: &Grads<f64>,
    ids: &[ParamId],
    count: usize,
    rng: &mut ChaCha8Rng,
    loss: &dyn Fn(&ParamSet<f64>) -> f64,
) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for &id in ids {
        let len = params.get(id).len();
        for _ in 0..count.min(len) {
            let i = rng.gen_range(0..len);
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + H;
            let up = loss(params);
            params.get_mut(id).data_mut()[i] = orig - H;
            let down = loss(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads.get(id).data()[i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / scale;
            assert!(
                rel < TOL,
                "`{}`[{i}]: analytic {analytic:e} numeric {numeric:e}",
                params.param(id).name
            );
            worst = worst.max(rel);
            probes += 1;
        }
    }
    (probes, worst)
}

#[test]
fn binary_layer_scales_biases_and_slopes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec::new(6, 4, 3).padding(1);
    let mut ps = ParamSet::<f64>::new();
    let layer = BinConvLayer::build(&mut ps, "b", spec, ActKind::Prelu, None, 3);
    *ps.get_mut(layer.beta_bias) = random(&[4], &mut rng, -0.5, 0.5);
    let x = random(&[2, 6, 5, 5], &mut rng, -1.0, 1.0);
    let r = random(&[2, 4, 5, 5], &mut rng, -1.0, 1.0);
    let mut tape = GradTape::default();
    let mut grads = Grads::zeros_like(&ps);
    layer.forward(&ps, &x, Some(&mut tape)).unwrap();
    layer.backward(&ps, &r, &mut tape, &mut grads).unwrap();
    let slope = ps.id("b.prelu").unwrap();
    let loss = |p: &ParamSet<f64>| dot(&layer.forward(p, &x, None).unwrap(), &r);
    let (n, _) = probe(&mut ps, &grads, &[layer.alpha, layer.beta_bias, slope], 4, &mut rng, &loss);
    assert!(n >= 12);
}

#[test]
fn real_conv_weights_bias_slopes_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ConvSpec::new(3, 5, 3).stride(2).padding(1);
    let mut ps = ParamSet::<f64>::new();
    let conv = RealConv::build(&mut ps, "c", spec, true, ActKind::Prelu, 4);
    let x = random(&[2, 3, 7, 7], &mut rng, -1.0, 1.0);
    let (oh, ow) = spec.output_hw(7, 7).unwrap();
    let r = random(&[2, 5, oh, ow], &mut rng, -1.0, 1.0);
    let mut tape = RealConvTape::default();
    let mut grads = Grads::zeros_like(&ps);
    conv.forward(&ps, &x, Some(&mut tape)).unwrap();
    let gx = conv.backward(&ps, &r, &mut tape, &mut grads).unwrap();
    let ids: Vec<ParamId> = ps.iter().map(|(id, _)| id).collect();
    let loss = |p: &ParamSet<f64>| dot(&conv.forward(p, &x, None).unwrap(), &r);
    probe(&mut ps, &grads, &ids, 6, &mut rng, &loss);

    for _ in 0..5 {
        let i = rng.gen_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let numeric = (dot(&conv.forward(&ps, &xp, None).unwrap(), &r)
            - dot(&conv.forward(&ps, &xm, None).unwrap(), &r))
            / (2.0 * H);
        let a = gx.data()[i];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < TOL);
    }
}

#[test]
fn aux_module_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::<f64>::new();
    let m = AuxModule::build(&mut ps, "aux", 6, 5);
    for (_, p) in ps.iter_mut() {
        if p.name.ends_with(".b") {
            let len = p.value.len();
            p.value = Tensor::from_vec(p.value.dims(), (0..len).map(|_| rng.gen_range(-0.1..0.1)).collect())
                .unwrap();
        }
    }
    let z = random(&[2, 6, 4, 4], &mut rng, -1.0, 1.0);
    let r = random(&[2, 3, 16, 16], &mut rng, -1.0, 1.0);
    let mut tape = AuxTape::default();
    let mut grads = Grads::zeros_like(&ps);
    m.align(&ps, &z, 16, 16, Some(&mut tape)).unwrap();
    m.backward(&ps, &r, &mut tape, &mut grads).unwrap();
    let ids: Vec<ParamId> = ps.iter().map(|(id, _)| id).collect();
    let loss = |p: &ParamSet<f64>| dot(&m.align(p, &z, 16, 16, None).unwrap(), &r);
    let (n, _) = probe(&mut ps, &grads, &ids, 2, &mut rng, &loss);
    assert!(n >= 16);
}

#[test]
fn full_objective_head_and_auxiliary_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = ChangeNet::<f64>::new(7);
    let aux = AuxHeads::<f64>::new(8);
    // keep pre-activations off the PReLU kink at integer dot = 0
    let beta = net.aspp_fuse.beta_bias;
    *net.params.get_mut(beta) = random(&[32], &mut rng, -0.3, 0.3);
    let x0 = random(&[2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let x1 = random(&[2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let y = random(&[2, 1, 16, 16], &mut rng, 0.0, 1.0).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    let w = LossWeights::new(1e-3, 0.5).unwrap();
    let out = train_step(&net, &aux, &x0, &x1, &y, w).unwrap();

    let head_ids: Vec<ParamId> = net
        .params
        .iter()
        .filter(|(_, p)| {
            p.name.starts_with("head.")
                || (p.name.starts_with("aspp.fuse.") && !p.name.ends_with(".w") && !p.name.ends_with(".shift"))
        })
        .map(|(id, _)| id)
        .collect();
    assert!(head_ids.len() >= 5);
    let aux_snapshot = aux.clone();
    let loss = |p: &ParamSet<f64>| {
        let mut n2 = net.clone();
        n2.params = p.clone();
        train_step(&n2, &aux_snapshot, &x0, &x1, &y, w).unwrap().losses.total
    };
    let mut theta = net.params.clone();
    probe(&mut theta, &out.theta, &head_ids, 3, &mut rng, &loss);

    let eta_ids: Vec<ParamId> = aux.params.iter().map(|(id, _)| id).collect();
    let net_snapshot = net.clone();
    let loss = |p: &ParamSet<f64>| {
        let mut a2 = aux.clone();
        a2.params = p.clone();
        train_step(&net_snapshot, &a2, &x0, &x1, &y, w).unwrap().losses.total
    };
    let mut eta = aux.params.clone();
    probe(&mut eta, &out.eta, &eta_ids[..8], 1, &mut rng, &loss);
}

#[test]
fn aux_module_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamSet::<f64>::new();
    let m = AuxModule::build(&mut ps, "aux", 5, 2);
    let z = random(&[2, 5, 4, 4], &mut rng, -1.0, 1.0);
    let r = random(&[2, 3, 16, 16], &mut rng, -1.0, 1.0);
    let mut tape = AuxTape::default();
    let mut grads = Grads::zeros_like(&ps);
    m.align(&ps, &z, 16, 16, Some(&mut tape)).unwrap();
    let gz = m.backward(&ps, &r, &mut tape, &mut grads).unwrap();
    for _ in 0..12 {
        let i = rng.gen_range(0..z.len());
        let mut zp = z.clone();
        zp.data_mut()[i] += H;
        let mut zm = z.clone();
        zm.data_mut()[i] -= H;
        let numeric = (dot(&m.align(&ps, &zp, 16, 16, None).unwrap(), &r)
            - dot(&m.align(&ps, &zm, 16, 16, None).unwrap(), &r))
            / (2.0 * H);
        let a = gz.data()[i];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < TOL, "{a} vs {numeric}");
    }
}

#[test]
fn separability_terms_reach_generator_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = ChangeNet::<f64>::new(3);
    for name in ["gen0.beta", "gen1.beta"] {
        let id = net.params.id(name).unwrap();
        let len = net.params.get(id).len();
        *net.params.get_mut(id) = random(&[len], &mut rng, -0.3, 0.3);
    }
    let aux = AuxHeads::<f64>::new(4);
    let x0 = random(&[2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let x1 = random(&[2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let y = random(&[2, 1, 16, 16], &mut rng, 0.0, 1.0).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    let with = train_step(&net, &aux, &x0, &x1, &y, LossWeights::new(0.0, 1.0).unwrap()).unwrap();
    let without = train_step(&net, &aux, &x0, &x1, &y, LossWeights::new(0.0, 0.0).unwrap()).unwrap();
    let mut psi_grads = with.theta.clone();
    let mut negated = without.theta.clone();
    negated.scale(-1.0);
    for (id, g) in negated.iter() {
        psi_grads.accumulate(id, g).unwrap();
    }
    let ids: Vec<ParamId> = ["gen0.alpha", "gen0.beta", "gen1.alpha", "gen1.beta", "gen1.prelu"]
        .iter()
        .map(|n| net.params.id(n).unwrap())
        .collect();
    let loss = |p: &ParamSet<f64>| {
        let mut n2 = net.clone();
        n2.params = p.clone();
        let l = train_step(&n2, &aux, &x0, &x1, &y, LossWeights::new(0.0, 0.0).unwrap()).unwrap().losses;
        l.l_noise + l.l_interest + l.l_recon
    };
    let mut theta = net.params.clone();
    let (n, _) = probe(&mut theta, &psi_grads, &ids, 2, &mut rng, &loss);
    assert_eq!(n, 10);
}
