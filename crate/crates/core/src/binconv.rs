//! 1-bit convolution: `φ(α ⊙ (A^b ⊛ W^b) + β)` evaluated with XNOR-PopCount,
//! trained through a clipped straight-through estimator.
//!
//! Activations are binarized as `sign(a - τ_c)` where `τ_c` is an optional
//! learnable per-input-channel threshold (zero reproduces plain `sign(a)`).
//! Spatial padding enters the bit domain as `-1`.

use crate::bitpack::{dot_words, sign_pack, BitTensor};
use crate::conv::{ConvSpec, Tape};
use crate::error::{BicdError, Result};
use crate::ops::{abs_diff, ActKind, Activation};
use crate::params::{param_rng, uniform, Grads, ParamId, ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

/// Half-width of the straight-through window: `∂sign(x)/∂x := 1{|x| ≤ 1}`.
pub const STE_CLIP: f64 = 1.0;

/// Initial half-range of latent weights.
pub const LATENT_INIT: f64 = 0.05;

/// Lowered patch matrix in the bit domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMatrix {
    /// `(N·oh·ow) × (C·kh·kw)`, one word-aligned row per output position.
    pub bits: BitTensor,
    /// Number of taps per row that fall inside the image (the rest are padding).
    pub valid_taps: Vec<u32>,
}

/// Gather receptive fields of an N×C×H×W bit tensor into rows.
pub fn im2row_packed(a_bits: &BitTensor, spec: &ConvSpec) -> Result<PatchMatrix> {
    spec.validate()?;
    let (n, c, h, w) = match a_bits.dims() {
        &[n, c, h, w] => (n, c, h, w),
        d => {
            return Err(BicdError::Shape(format!(
                "im2row expects N×C×H×W bits, got {d:?}"
            )))
        }
    };
    if c != spec.in_channels {
        return Err(BicdError::Shape(format!(
            "im2row: {c} channels vs spec {}",
            spec.in_channels
        )));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let k = spec.patch_len();
    let mut bits = BitTensor::new_negative(&[n * oh * ow, k]);
    let mut valid_taps = vec![0u32; n * oh * ow];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (b * oh + oy) * ow + ox;
                let mut col = 0;
                let mut valid = 0;
                for ci in 0..c {
                    let plane_row = (b * c + ci) * h;
                    for ky in 0..spec.kernel_h {
                        for kx in 0..spec.kernel_w {
                            if let Some((y, x)) = spec.source(oy, ox, ky, kx, h, w) {
                                valid += 1;
                                if a_bits.get(plane_row + y, x) {
                                    bits.set(r, col);
                                }
                            }
                            col += 1;
                        }
                    }
                }
                valid_taps[r] = valid;
            }
        }
    }
    Ok(PatchMatrix { bits, valid_taps })
}

/// Exact integer `A^b ⊛ W^b` for every output position and channel, laid out
/// as N×Cout×oh×ow.
fn packed_dots(patches: &BitTensor, wbits: &BitTensor, n: usize, p: usize) -> Vec<i32> {
    let co = wbits.rows();
    let k = wbits.row_len();
    let wpr = wbits.words_per_row();
    let mut dots = vec![0i32; n * co * p];
    let pw = patches.words();
    let ww = wbits.words();
    for b in 0..n {
        for pos in 0..p {
            let r = b * p + pos;
            let a = &pw[r * wpr..(r + 1) * wpr];
            for o in 0..co {
                dots[(b * co + o) * p + pos] = dot_words(a, &ww[o * wpr..(o + 1) * wpr], k);
            }
        }
    }
    dots
}

#[derive(Clone, Debug)]
pub struct BinConvSaved<T> {
    input: Tensor<T>,
    latent_w: Tensor<T>,
    patches: BitTensor,
    dots: Vec<i32>,
    pre: Tensor<T>,
}

/// Per-call record for the binary convolution backward pass.
pub type GradTape<T> = Tape<BinConvSaved<T>>;

/// Binary convolution with per-output-channel scale `alpha`, bias
/// `beta_bias` and activation `act`.
#[derive(Clone, Debug)]
pub struct BinConvLayer {
    pub spec: ConvSpec,
    pub latent_w: ParamId,
    pub alpha: ParamId,
    pub beta_bias: ParamId,
    pub act: Activation,
    pub shift: Option<ParamId>,
}

impl BinConvLayer {
    /// Register a freshly initialised layer under `name`.
    pub fn build<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        spec: ConvSpec,
        act: ActKind,
        shift_init: Option<f64>,
        seed: u64,
    ) -> Self {
        spec.validate().expect("valid conv spec");
        let wname = format!("{name}.w");
        let latent = uniform(&spec.weight_dims(), LATENT_INIT, &mut param_rng(seed, &wname));
        let latent_w = params.add(wname, ParamKind::LatentBinary, latent);
        let alpha0 = 1.0 / (spec.patch_len() as f64).sqrt();
        let alpha = params.add(
            format!("{name}.alpha"),
            ParamKind::Real,
            Tensor::full(&[spec.out_channels], T::of(alpha0)),
        );
        let beta_bias = params.add(
            format!("{name}.beta"),
            ParamKind::Real,
            Tensor::zeros(&[spec.out_channels]),
        );
        let act = act.register(params, name, spec.out_channels);
        let shift = shift_init.map(|s| {
            params.add(
                format!("{name}.shift"),
                ParamKind::Real,
                Tensor::full(&[spec.in_channels], T::of(s)),
            )
        });
        BinConvLayer {
            spec,
            latent_w,
            alpha,
            beta_bias,
            act,
            shift,
        }
    }

    /// Binarized activations `sign(a - τ)` as an N×C×H×W bit tensor.
    pub fn binarize_input<T: Real>(&self, params: &ParamSet<T>, a: &Tensor<T>) -> Result<BitTensor> {
        let (_, c, h, w) = a.nchw()?;
        match self.shift {
            None => Ok(sign_pack(a)),
            Some(id) => {
                let tau = params.get(id).data();
                if tau.len() != c {
                    return Err(BicdError::Shape("shift length vs channels".into()));
                }
                let plane = (h * w).max(1);
                let mut shifted = a.clone();
                for (i, chunk) in shifted.data_mut().chunks_exact_mut(plane).enumerate() {
                    let t = tau[i % c];
                    chunk.iter_mut().for_each(|v| *v -= t);
                }
                Ok(sign_pack(&shifted))
            }
        }
    }

    pub fn weight_bits<T: Real>(&self, params: &ParamSet<T>) -> BitTensor {
        let k = self.spec.patch_len();
        let w = params.get(self.latent_w).clone().reshape(&[self.spec.out_channels, k]);
        sign_pack(&w.expect("weight dims match spec"))
    }

    /// Forward pass. When `tape` is given, records what backward needs.
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        a: &Tensor<T>,
        tape: Option<&mut GradTape<T>>,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = a.nchw()?;
        if c != self.spec.in_channels {
            return Err(BicdError::Shape(format!(
                "binary conv expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        a.ensure_finite("binary conv input")?;
        let (oh, ow) = self.spec.output_hw(h, w)?;
        let p = oh * ow;
        let co = self.spec.out_channels;
        let a_bits = self.binarize_input(params, a)?;
        let patches = im2row_packed(&a_bits, &self.spec)?.bits;
        let wbits = self.weight_bits(params);
        let dots = packed_dots(&patches, &wbits, n, p);
        let alpha = params.get(self.alpha).data();
        let beta = params.get(self.beta_bias).data();
        let mut pre = Tensor::zeros(&[n, co, oh, ow]);
        for (i, (dst, src)) in pre
            .data_mut()
            .chunks_exact_mut(p)
            .zip(dots.chunks_exact(p))
            .enumerate()
        {
            let o = i % co;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = alpha[o] * T::of(s as f64) + beta[o];
            }
        }
        let mut out = pre.clone();
        self.act.forward(params, &mut out)?;
        if let Some(tape) = tape {
            tape.record(BinConvSaved {
                input: a.clone(),
                latent_w: params.get(self.latent_w).clone(),
                patches,
                dots,
                pre,
            });
        }
        Ok(out)
    }

    /// Backward pass: accumulates gradients for `alpha`, `beta_bias`, PReLU
    /// slopes, the threshold and (through the STE) the latent weights, and
    /// returns the STE gradient w.r.t. the real-valued input.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        grad_out: &Tensor<T>,
        tape: &mut GradTape<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let BinConvSaved {
            input,
            latent_w,
            patches,
            dots,
            pre,
        } = tape.take("binary conv")?;
        let mut g = grad_out.clone();
        self.act.backward(params, &pre, &mut g, grads)?;
        let (n, c, h, w) = input.nchw()?;
        let (_, co, oh, ow) = pre.nchw()?;
        let p = oh * ow;
        let k = self.spec.patch_len();
        let alpha = params.get(self.alpha).data();

        let mut g_alpha = vec![T::zero(); co];
        let mut g_beta = vec![T::zero(); co];
        // Gradient w.r.t. the integer dot, N×Cout×P.
        let mut g_dot = vec![T::zero(); n * co * p];
        for (i, (gc, dc)) in g
            .data()
            .chunks_exact(p)
            .zip(dots.chunks_exact(p))
            .enumerate()
        {
            let o = i % co;
            let dst = &mut g_dot[i * p..(i + 1) * p];
            for ((d, &gv), &dv) in dst.iter_mut().zip(gc).zip(dc) {
                g_alpha[o] += gv * T::of(dv as f64);
                g_beta[o] += gv;
                *d = gv * alpha[o];
            }
        }
        grads.accumulate_slice(self.alpha, &g_alpha);
        grads.accumulate_slice(self.beta_bias, &g_beta);

        let wb: Vec<T> = latent_w
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { T::one() } else { -T::one() })
            .collect();
        let mut g_wb = vec![T::zero(); co * k];
        let mut g_bin = Tensor::zeros(&[n, c, h, w]);
        let mut rows = vec![T::zero(); p * k];
        let mut g_rows = vec![T::zero(); p * k];
        for b in 0..n {
            for pos in 0..p {
                let r = b * p + pos;
                let dst = &mut rows[pos * k..(pos + 1) * k];
                for (col, d) in dst.iter_mut().enumerate() {
                    *d = if patches.get(r, col) { T::one() } else { -T::one() };
                }
            }
            let gd = &g_dot[b * co * p..(b + 1) * co * p];
            T::gemm(co, p, k, gd, false, &rows, false, &mut g_wb, true);
            T::gemm(p, co, k, gd, true, &wb, false, &mut g_rows, false);
            let gb = &mut g_bin.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = &g_rows[(oy * ow + ox) * k..][..k];
                    let mut col = 0;
                    for ci in 0..c {
                        for ky in 0..self.spec.kernel_h {
                            for kx in 0..self.spec.kernel_w {
                                if let Some((y, x)) = self.spec.source(oy, ox, ky, kx, h, w) {
                                    gb[(ci * h + y) * w + x] += src[col];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }

        let clip = T::of(STE_CLIP);
        for (gw, &lw) in g_wb.iter_mut().zip(latent_w.data()) {
            if lw.abs() > clip {
                *gw = T::zero();
            }
        }
        grads.accumulate_slice(self.latent_w, &g_wb);

        let plane = (h * w).max(1);
        let tau: Option<Vec<T>> = self.shift.map(|id| params.get(id).data().to_vec());
        let mut g_tau = vec![T::zero(); c];
        for (i, (gc, ac)) in g_bin
            .data_mut()
            .chunks_exact_mut(plane)
            .zip(input.data().chunks_exact(plane))
            .enumerate()
        {
            let ch = i % c;
            let t = tau.as_ref().map_or(T::zero(), |t| t[ch]);
            for (gv, &av) in gc.iter_mut().zip(ac) {
                if (av - t).abs() > clip {
                    *gv = T::zero();
                }
                g_tau[ch] -= *gv;
            }
        }
        if let Some(id) = self.shift {
            grads.accumulate_slice(id, &g_tau);
        }
        Ok(g_bin)
    }
}

/// `φ(α · (sign(a) ⊛ sign(W)) + β)` for `layer`; see [`BinConvLayer::forward`].
pub fn binary_conv_forward<T: Real>(
    params: &ParamSet<T>,
    a: &Tensor<T>,
    layer: &BinConvLayer,
    tape: Option<&mut GradTape<T>>,
) -> Result<Tensor<T>> {
    layer.forward(params, a, tape)
}

/// See [`BinConvLayer::backward`].
pub fn binary_conv_backward<T: Real>(
    params: &ParamSet<T>,
    grad_out: &Tensor<T>,
    layer: &BinConvLayer,
    tape: &mut GradTape<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    layer.backward(params, grad_out, tape, grads)
}

/// See [`ChangeGenerator::forward`].
pub fn change_generator_forward<T: Real>(
    params: &ParamSet<T>,
    f0: &Tensor<T>,
    f1: &Tensor<T>,
    generator: &ChangeGenerator,
    tape: Option<&mut GeneratorTape<T>>,
) -> Result<Tensor<T>> {
    generator.forward(params, f0, f1, tape)
}

#[derive(Clone, Debug, Default)]
pub struct GeneratorTape<T> {
    /// `true` where `f0 >= f1`, i.e. where `f0` is taken as the max.
    route: Tape<Vec<bool>>,
    conv: GradTape<T>,
}

/// 1-bit change generator: binary convolution of `max(f0,f1) - min(f0,f1)`.
#[derive(Clone, Debug)]
pub struct ChangeGenerator {
    pub conv: BinConvLayer,
}

impl ChangeGenerator {
    /// Elementwise difference map fed to the convolution.
    pub fn difference<T: Real>(f0: &Tensor<T>, f1: &Tensor<T>) -> Result<Tensor<T>> {
        f0.ensure_same_dims(f1, "change generator inputs")?;
        abs_diff(f0, f1)
    }

    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        f0: &Tensor<T>,
        f1: &Tensor<T>,
        tape: Option<&mut GeneratorTape<T>>,
    ) -> Result<Tensor<T>> {
        let d = Self::difference(f0, f1)?;
        match tape {
            None => self.conv.forward(params, &d, None),
            Some(tape) => {
                tape.route
                    .record(f0.data().iter().zip(f1.data()).map(|(a, b)| a >= b).collect());
                self.conv.forward(params, &d, Some(&mut tape.conv))
            }
        }
    }

    /// Returns `(grad_f0, grad_f1)`. At ties `f0` is treated as the max.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        grad_out: &Tensor<T>,
        tape: &mut GeneratorTape<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let route = tape.route.take("change generator")?;
        let gd = self.conv.backward(params, grad_out, &mut tape.conv, grads)?;
        let g0 = Tensor::from_vec(
            gd.dims(),
            gd.data()
                .iter()
                .zip(&route)
                .map(|(&g, &first)| if first { g } else { -g })
                .collect(),
        )?;
        let g1 = g0.map(|v| -v);
        Ok((g0, g1))
    }
}
