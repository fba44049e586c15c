//! Convolution geometry and the real-valued convolution layer used for the
//! stem, the head and the auxiliary modules.

use crate::error::{BicdError, Result};
use crate::ops::{ActKind, Activation};
use crate::params::{param_rng, uniform, Grads, ParamId, ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, no dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.dilation,
        ];
        if positive.contains(&0) {
            return Err(BicdError::Shape(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Elements in one receptive field: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    fn extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(BicdError::Shape(format!(
                "input extent {input} too small for kernel span {span} with padding {}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// `floor((in + 2p - d(k-1) - 1)/s) + 1` along both spatial axes.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        Ok((self.extent(h, self.kernel_h)?, self.extent(w, self.kernel_w)?))
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source coordinate of kernel tap `(ky, kx)` for output `(oy, ox)`, or
    /// `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
        let x = (ox * self.stride + kx * self.dilation) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Multiply-accumulates for one sample at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((self.out_channels * self.patch_len() * oh * ow) as u64)
    }
}

/// Real im2col for one sample: `x` is C×H×W, result is `(C·kh·kw) × (oh·ow)`
/// with padding taps filled by `pad`.
pub(crate) fn im2col<T: Real>(x: &[T], h: usize, w: usize, spec: &ConvSpec, pad: T) -> Vec<T> {
    let (oh, ow) = spec.output_hw(h, w).expect("validated by caller");
    let p = oh * ow;
    let mut cols = vec![pad; spec.patch_len() * p];
    let mut row = 0;
    for c in 0..spec.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, xx)) = spec.source(oy, ox, ky, kx, h, w) {
                            dst[oy * ow + ox] = plane[y * w + xx];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]; padding taps are dropped.
pub(crate) fn col2im<T: Real>(cols: &[T], h: usize, w: usize, spec: &ConvSpec, out: &mut [T]) {
    let (oh, ow) = spec.output_hw(h, w).expect("validated by caller");
    let p = oh * ow;
    let mut row = 0;
    for c in 0..spec.in_channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, xx)) = spec.source(oy, ox, ky, kx, h, w) {
                            plane[y * w + xx] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Direct seven-loop convolution with a constant padding value and no bias.
/// This is the reference the packed kernel is benchmarked and checked against.
pub fn naive_conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec, pad: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if c != spec.in_channels || weight.dims() != spec.weight_dims() {
        return Err(BicdError::Shape(format!(
            "naive_conv2d: input {:?}, weight {:?}, spec {:?}",
            x.dims(),
            weight.dims(),
            spec
        )));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]);
    let (xd, wd) = (x.data(), weight.data());
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let v = match spec.source(oy, ox, ky, kx, h, w) {
                                    Some((y, xx)) => xd[((b * c + ci) * h + y) * w + xx],
                                    None => pad,
                                };
                                acc += v * wd[((o * c + ci) * spec.kernel_h + ky) * spec.kernel_w + kx];
                            }
                        }
                    }
                    od[((b * spec.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Single-slot record of what a layer needs for its backward pass. Recording
/// overwrites; `take` empties the slot.
#[derive(Clone, Debug)]
pub struct Tape<S>(Option<S>);

impl<S> Default for Tape<S> {
    fn default() -> Self {
        Tape(None)
    }
}

impl<S> Tape<S> {
    pub fn record(&mut self, saved: S) {
        self.0 = Some(saved);
    }

    pub fn take(&mut self, what: &'static str) -> Result<S> {
        self.0.take().ok_or(BicdError::MissingTape(what))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct RealConvSaved<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

pub type RealConvTape<T> = Tape<RealConvSaved<T>>;

/// Full-precision convolution `φ(W ∗ x + b)`.
#[derive(Clone, Debug)]
pub struct RealConv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub act: Activation,
}

impl RealConv {
    /// Register a freshly initialised layer under `name` (He-uniform weights,
    /// zero bias).
    pub fn build<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        spec: ConvSpec,
        bias: bool,
        act: ActKind,
        seed: u64,
    ) -> Self {
        spec.validate().expect("valid conv spec");
        let wname = format!("{name}.w");
        let bound = (6.0 / spec.patch_len() as f64).sqrt();
        let w = uniform(&spec.weight_dims(), bound, &mut param_rng(seed, &wname));
        let weight = params.add(wname, ParamKind::Real, w);
        let bias = bias.then(|| {
            params.add(
                format!("{name}.b"),
                ParamKind::Real,
                Tensor::zeros(&[spec.out_channels]),
            )
        });
        let act = act.register(params, name, spec.out_channels);
        RealConv {
            spec,
            weight,
            bias,
            act,
        }
    }

    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        tape: Option<&mut RealConvTape<T>>,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.nchw()?;
        if c != self.spec.in_channels {
            return Err(BicdError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        x.ensure_finite("conv input")?;
        let (oh, ow) = self.spec.output_hw(h, w)?;
        let (k, p, co) = (self.spec.patch_len(), oh * ow, self.spec.out_channels);
        let wt = params.get(self.weight).data();
        let mut pre = Tensor::zeros(&[n, co, oh, ow]);
        for b in 0..n {
            let xs = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let dst = &mut pre.data_mut()[b * co * p..(b + 1) * co * p];
            if self.spec.is_pointwise() {
                T::gemm(co, k, p, wt, false, xs, false, dst, false);
            } else {
                let cols = im2col(xs, h, w, &self.spec, T::zero());
                T::gemm(co, k, p, wt, false, &cols, false, dst, false);
            }
            if let Some(bias) = self.bias {
                for (o, &bv) in params.get(bias).data().iter().enumerate() {
                    dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut out = pre.clone();
        self.act.forward(params, &mut out)?;
        if let Some(tape) = tape {
            tape.record(RealConvSaved {
                input: x.clone(),
                pre,
            });
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        grad_out: &Tensor<T>,
        tape: &mut RealConvTape<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let RealConvSaved { input, pre } = tape.take("real conv")?;
        let mut g = grad_out.clone();
        self.act.backward(params, &pre, &mut g, grads)?;
        let (n, c, h, w) = input.nchw()?;
        let (_, co, oh, ow) = pre.nchw()?;
        let (k, p) = (self.spec.patch_len(), oh * ow);
        let wt = params.get(self.weight).data();
        let mut gw = vec![T::zero(); co * k];
        let mut gb = vec![T::zero(); co];
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            let gs = &g.data()[b * co * p..(b + 1) * co * p];
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gs[o * p..(o + 1) * p].iter().copied().sum::<T>();
            }
            let xs = &input.data()[b * c * h * w..(b + 1) * c * h * w];
            let gxs = &mut gx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            if self.spec.is_pointwise() {
                T::gemm(co, p, k, gs, false, xs, true, &mut gw, true);
                T::gemm(k, co, p, wt, true, gs, false, gxs, false);
            } else {
                let cols = im2col(xs, h, w, &self.spec, T::zero());
                T::gemm(co, p, k, gs, false, &cols, true, &mut gw, true);
                let mut gcols = vec![T::zero(); k * p];
                T::gemm(k, co, p, wt, true, gs, false, &mut gcols, false);
                col2im(&gcols, h, w, &self.spec, gxs);
            }
        }
        grads.accumulate_slice(self.weight, &gw);
        if let Some(bias) = self.bias {
            grads.accumulate_slice(bias, &gb);
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let s = ConvSpec::new(1, 1, 3).stride(2).padding(1);
        assert_eq!(s.output_hw(64, 64).unwrap(), (32, 32));
        let d = ConvSpec::new(1, 1, 3).padding(4).dilation(4);
        assert_eq!(d.output_hw(16, 16).unwrap(), (16, 16));
        assert!(ConvSpec::new(1, 1, 5).output_hw(3, 3).is_err());
        assert!(ConvSpec::new(0, 1, 1).validate().is_err());
    }

    #[test]
    fn real_conv_matches_naive_with_zero_padding() {
        let spec = ConvSpec::new(2, 3, 3).stride(2).padding(1).dilation(1);
        let mut ps = ParamSet::<f64>::new();
        let wdata: Vec<f64> = (0..spec.weight_dims().iter().product::<usize>())
            .map(|i| ((i * 7 % 13) as f64 - 6.0) / 10.0)
            .collect();
        let wt = Tensor::from_vec(&spec.weight_dims(), wdata).unwrap();
        let weight = ps.add("w", ParamKind::Real, wt.clone());
        let layer = RealConv {
            spec,
            weight,
            bias: None,
            act: Activation::Identity,
        };
        let x = Tensor::from_vec(&[2, 2, 5, 4], (0..80).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let got = layer.forward(&ps, &x, None).unwrap();
        let want = naive_conv2d(&x, &wt, &spec, 0.0).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_tape_errors() {
        let mut ps = ParamSet::<f32>::new();
        let weight = ps.add("w", ParamKind::Real, Tensor::zeros(&[1, 1, 1, 1]));
        let layer = RealConv {
            spec: ConvSpec::new(1, 1, 1),
            weight,
            bias: None,
            act: Activation::Identity,
        };
        let mut grads = Grads::zeros_like(&ps);
        let mut tape = RealConvTape::default();
        let g = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(
            layer.backward(&ps, &g, &mut tape, &mut grads),
            Err(BicdError::MissingTape(_))
        ));
    }
}
