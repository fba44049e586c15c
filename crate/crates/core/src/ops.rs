//! Element-wise and resampling operators with their adjoints.

use crate::error::{BicdError, Result};
use crate::params::{Grads, ParamId, ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

/// Nonlinearity choice at construction time, before parameters exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Identity,
    Relu,
    Prelu,
}

impl ActKind {
    /// Register any parameters the activation needs under `name`.
    pub fn register<T: Real>(self, params: &mut ParamSet<T>, name: &str, channels: usize) -> Activation {
        match self {
            ActKind::Identity => Activation::Identity,
            ActKind::Relu => Activation::Relu,
            ActKind::Prelu => Activation::Prelu(params.add(
                format!("{name}.prelu"),
                ParamKind::Real,
                Tensor::full(&[channels], T::of(0.25)),
            )),
        }
    }
}

/// Output nonlinearity `φ` of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    /// Per-channel learnable negative slope.
    Prelu(ParamId),
}

impl Activation {
    /// Apply in place to an N×C×H×W pre-activation.
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &mut Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.nchw()?;
        let plane = h * w;
        match *self {
            Activation::Identity => {}
            Activation::Relu => x.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            }),
            Activation::Prelu(id) => {
                let slopes = params.get(id).data();
                if slopes.len() != c {
                    return Err(BicdError::Shape(format!(
                        "prelu has {} slopes for {} channels",
                        slopes.len(),
                        c
                    )));
                }
                for (i, chunk) in x.data_mut().chunks_exact_mut(plane.max(1)).enumerate() {
                    let s = slopes[i % c];
                    chunk.iter_mut().for_each(|v| {
                        if *v < T::zero() {
                            *v *= s
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Turn `grad_out` into the gradient w.r.t. the pre-activation, in place,
    /// accumulating slope gradients for PReLU.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        pre: &Tensor<T>,
        grad: &mut Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        pre.ensure_same_dims(grad, "activation backward")?;
        let (_, c, h, w) = pre.nchw()?;
        let plane = (h * w).max(1);
        match *self {
            Activation::Identity => {}
            Activation::Relu => {
                for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            Activation::Prelu(id) => {
                let slopes = params.get(id).data().to_vec();
                let mut gs = vec![T::zero(); c];
                for (i, (gc, pc)) in grad
                    .data_mut()
                    .chunks_exact_mut(plane)
                    .zip(pre.data().chunks_exact(plane))
                    .enumerate()
                {
                    let ch = i % c;
                    for (g, &p) in gc.iter_mut().zip(pc) {
                        if p < T::zero() {
                            gs[ch] += *g * p;
                            *g *= slopes[ch];
                        }
                    }
                }
                grads.accumulate_slice(id, &gs);
            }
        }
        Ok(())
    }
}

fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let f = s - i0 as f64;
    (i0, i1, if i0 == i1 { 0.0 } else { f })
}

/// Bilinear resize of an N×C×H×W tensor to `out_h × out_w` using half-pixel
/// centres with edge clamping.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if h == 0 || w == 0 {
        return Err(BicdError::Shape("upsample of empty map".into()));
    }
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let ys: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, w, out_w)).collect();
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_exact_mut(out_h * out_w).enumerate() {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let top = s[y0 * w + x0] * (T::one() - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (T::one() - fx) + s[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`]: scatters `grad` (N×C×out_h×out_w) back to
/// the `in_h × in_w` source grid.
pub fn upsample_bilinear_backward<T: Real>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, out_h, out_w) = grad.nchw()?;
    let mut out = Tensor::zeros(&[n, c, in_h, in_w]);
    let ys: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, in_h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, in_w, out_w)).collect();
    let g = grad.data();
    for (plane, dst) in out.data_mut().chunks_exact_mut(in_h * in_w).enumerate() {
        let gs = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let v = gs[oy * out_w + ox];
                dst[y0 * in_w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * in_w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * in_w + x0] += v * fy * (T::one() - fx);
                dst[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
    Ok(out)
}

/// Parameter-free channel-wise average pooling: output channel `k` is the
/// mean of input channels `[k·g, (k+1)·g)` with `g = C / out_channels`.
pub fn channel_avg_pool<T: Real>(x: &Tensor<T>, out_channels: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if out_channels == 0 || c % out_channels != 0 {
        return Err(BicdError::Shape(format!(
            "cannot pool {c} channels into {out_channels}"
        )));
    }
    let group = c / out_channels;
    let plane = h * w;
    let inv = T::one() / T::of(group as f64);
    let mut out = Tensor::zeros(&[n, out_channels, h, w]);
    let src = x.data();
    for b in 0..n {
        for k in 0..out_channels {
            let dst = &mut out.data_mut()[(b * out_channels + k) * plane..][..plane];
            for g in 0..group {
                let s = &src[(b * c + k * group + g) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Ok(out)
}

pub fn channel_avg_pool_backward<T: Real>(grad: &Tensor<T>, in_channels: usize) -> Result<Tensor<T>> {
    let (n, k, h, w) = grad.nchw()?;
    if k == 0 || !in_channels.is_multiple_of(k) {
        return Err(BicdError::Shape(format!(
            "cannot unpool {k} channels into {in_channels}"
        )));
    }
    let group = in_channels / k;
    let plane = h * w;
    let inv = T::one() / T::of(group as f64);
    let mut out = Tensor::zeros(&[n, in_channels, h, w]);
    let g = grad.data();
    for b in 0..n {
        for ch in 0..in_channels {
            let s = &g[(b * k + ch / group) * plane..][..plane];
            let d = &mut out.data_mut()[(b * in_channels + ch) * plane..][..plane];
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv = sv * inv;
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(a, b) - min(a, b)`.
pub fn abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x.max(y) - x.min(y))
}

/// Concatenate N×Cᵢ×H×W tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = parts
        .first()
        .ok_or_else(|| BicdError::Shape("concat of zero tensors".into()))?
        .nchw()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.nchw()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(BicdError::Shape(format!(
                "concat: dims {:?} vs {:?}",
                p.dims(),
                parts[0].dims()
            )));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for p in parts {
            let c = p.dims()[1];
            data.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::from_vec(&[n, total_c, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.nchw()?;
    if widths.iter().sum::<usize>() != c {
        return Err(BicdError::Shape(format!("split {c} channels into {widths:?}")));
    }
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&k| Vec::with_capacity(n * k * plane)).collect();
    for b in 0..n {
        let mut off = b * c * plane;
        for (o, &k) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&x.data()[off..off + k * plane]);
            off += k * plane;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &k)| Tensor::from_vec(&[n, k, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_identity_scale_is_noop() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(upsample_bilinear(&x, 2, 3).unwrap(), x);
    }

    #[test]
    fn upsample_adjoint_identity() {
        // <U x, g> == <x, U^T g>
        let x = Tensor::<f64>::from_vec(&[1, 2, 3, 2], (0..12).map(|i| (i as f64).sin()).collect())
            .unwrap();
        let g = Tensor::<f64>::from_vec(&[1, 2, 7, 5], (0..70).map(|i| (i as f64 * 0.3).cos()).collect())
            .unwrap();
        let ux = upsample_bilinear(&x, 7, 5).unwrap();
        let utg = upsample_bilinear_backward(&g, 3, 2).unwrap();
        let lhs: f64 = ux.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(utg.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 2.5);
        let u = upsample_bilinear(&x, 16, 16).unwrap();
        assert!(u.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn channel_pool_and_adjoint() {
        let x = Tensor::<f64>::from_vec(&[1, 4, 1, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let p = channel_avg_pool(&x, 2).unwrap();
        assert_eq!(p.data(), &[2., 3., 6., 7.]);
        let g = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1., -1., 2., 0.5]).unwrap();
        let b = channel_avg_pool_backward(&g, 4).unwrap();
        let lhs: f64 = p.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(b.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f32>::from_vec(&[2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 2, 1, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[2, 3, 1, 2]);
        let parts = split_channels(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
