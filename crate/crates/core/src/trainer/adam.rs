//! Adam with bias correction and a clamp on latent binary weights.

use crate::error::{BicdError, Result};
use crate::params::{Grads, ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

/// Latent binary weights are kept inside `[-LATENT_CLAMP, LATENT_CLAMP]`.
pub const LATENT_CLAMP: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, p)| Tensor::zeros_like(&p.value)).collect();
        OptimState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &Grads<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(BicdError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((id, p), g) in params.iter().zip(grads.iter().map(|(_, g)| g)) {
        if p.value.dims() != g.dims() || state.m[id.index()].dims() != g.dims() {
            return Err(BicdError::Shape(format!(
                "adam: `{}` has dims {:?}, gradient {:?}",
                p.name,
                p.value.dims(),
                g.dims()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (id, p) in params.iter_mut() {
        let i = id.index();
        let g = grads.get(id).data();
        let clamp = p.kind == ParamKind::LatentBinary;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            let gi = gi.as_f64();
            let mn = beta1 * mi.as_f64() + (1.0 - beta1) * gi;
            let vn = beta2 * vi.as_f64() + (1.0 - beta2) * gi * gi;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let mut nw = w.as_f64() - lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            if clamp {
                nw = nw.clamp(-LATENT_CLAMP, LATENT_CLAMP);
            }
            *w = T::of(nw);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64, kind: ParamKind) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", kind, Tensor::from_vec(&[1], vec![v]).unwrap());
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = scalar_set(0.3, ParamKind::Real);
        let g = Grads::zeros_like(&ps);
        let mut st = OptimState::new(&ps, AdamConfig::default());
        adam_step(&mut ps, &g, &mut st, 0.1).unwrap();
        assert_eq!(ps.by_name("w").unwrap().data(), &[0.3]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let mut ps = scalar_set(0.0, ParamKind::Real);
        let mut g = Grads::zeros_like(&ps);
        g.get_mut(ps.id("w").unwrap()).data_mut()[0] = 1.0;
        let mut st = OptimState::new(&ps, AdamConfig::default());
        adam_step(&mut ps, &g, &mut st, 1e-3).unwrap();
        assert!((ps.by_name("w").unwrap().data()[0] + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn three_steps_on_quadratic_match_reference() {
        // minimise (w - 2)^2 from w = 0
        let lr = 0.1;
        let mut ps = scalar_set(0.0, ParamKind::Real);
        let id = ps.id("w").unwrap();
        let mut st = OptimState::new(&ps, AdamConfig::default());
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (w - 2.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);

            let mut grads = Grads::zeros_like(&ps);
            grads.get_mut(id).data_mut()[0] = 2.0 * (ps.get(id).data()[0] - 2.0);
            adam_step(&mut ps, &grads, &mut st, lr).unwrap();
            assert!((ps.get(id).data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_weights_are_clamped() {
        let mut ps = scalar_set(1.49, ParamKind::LatentBinary);
        let mut g = Grads::zeros_like(&ps);
        g.get_mut(ps.id("w").unwrap()).data_mut()[0] = -1.0;
        let mut st = OptimState::new(&ps, AdamConfig::default());
        adam_step(&mut ps, &g, &mut st, 0.5).unwrap();
        assert_eq!(ps.by_name("w").unwrap().data(), &[LATENT_CLAMP]);
    }

    #[test]
    fn mismatched_grads_error() {
        let mut ps = scalar_set(0.0, ParamKind::Real);
        let other = scalar_set(0.0, ParamKind::Real);
        let mut two = other.clone();
        two.add("x", ParamKind::Real, Tensor::zeros(&[1]));
        let mut st = OptimState::new(&ps, AdamConfig::default());
        assert!(adam_step(&mut ps, &Grads::zeros_like(&two), &mut st, 0.1).is_err());
    }
}
