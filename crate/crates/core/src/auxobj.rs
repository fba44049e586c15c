//! Training-only auxiliary modules `σ(·, η)` and the Ψ reconstruction terms.
//!
//! An [`AuxModule`] maps a hidden feature map to a 3-channel image-sized map so
//! that it can be compared with the inputs: four parallel per-pixel MLP
//! branches of different widths, a 3×3 output convolution and a bilinear
//! resize. Its parameters live in a separate [`ParamSet`] (the `η`
//! namespace) and are never used by [`ChangeNet::infer`](crate::model::ChangeNet::infer).

use crate::conv::{ConvSpec, RealConv, RealConvTape};
use crate::error::{BicdError, Result};
use crate::model::{STAGE1_CHANNELS, STAGE2_CHANNELS};
use crate::ops::{
    abs_diff, concat_channels, split_channels, upsample_bilinear, upsample_bilinear_backward,
    ActKind,
};
use crate::params::{Grads, ParamSet};
use crate::tensor::{Real, Tensor};

pub const BRANCH_WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const ALIGNED_CHANNELS: usize = 3;

#[derive(Clone, Debug)]
pub struct AuxModule {
    pub in_channels: usize,
    /// Two 1×1 conv + ReLU layers per branch, in [`BRANCH_WIDTHS`] order.
    pub branches: Vec<[RealConv; 2]>,
    pub out_conv: RealConv,
}

#[derive(Clone, Debug, Default)]
pub struct AuxTape<T> {
    branches: Vec<[RealConvTape<T>; 2]>,
    out: RealConvTape<T>,
    small_hw: Option<(usize, usize)>,
}

impl AuxModule {
    pub fn build<T: Real>(params: &mut ParamSet<T>, name: &str, in_channels: usize, seed: u64) -> Self {
        Self::build_in_order(params, name, in_channels, seed, [0, 1, 2, 3])
    }

    /// Like [`build`](Self::build) but registers the branches in `order`.
    /// Initial values are keyed by parameter name, so the order is not
    /// observable in the module's outputs.
    pub fn build_in_order<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        seed: u64,
        order: [usize; 4],
    ) -> Self {
        let mut slots: [Option<[RealConv; 2]>; 4] = Default::default();
        for &i in &order {
            let width = BRANCH_WIDTHS[i];
            let first = RealConv::build(
                params,
                &format!("{name}.b{i}.conv0"),
                ConvSpec::new(in_channels, width, 1),
                true,
                ActKind::Relu,
                seed,
            );
            let second = RealConv::build(
                params,
                &format!("{name}.b{i}.conv1"),
                ConvSpec::new(width, width, 1),
                true,
                ActKind::Relu,
                seed,
            );
            slots[i] = Some([first, second]);
        }
        let branches = slots
            .into_iter()
            .map(|s| s.expect("order is a permutation of 0..4"))
            .collect();
        let out_conv = RealConv::build(
            params,
            &format!("{name}.out"),
            ConvSpec::new(BRANCH_WIDTHS.iter().sum(), ALIGNED_CHANNELS, 3).padding(1),
            true,
            ActKind::Identity,
            seed,
        );
        AuxModule {
            in_channels,
            branches,
            out_conv,
        }
    }

    /// Align `z` (N×C×h×w) to an N×3×`out_h`×`out_w` map.
    pub fn align<T: Real>(
        &self,
        params: &ParamSet<T>,
        z: &Tensor<T>,
        out_h: usize,
        out_w: usize,
        mut tape: Option<&mut AuxTape<T>>,
    ) -> Result<Tensor<T>> {
        let (_, c, h, w) = z.nchw()?;
        if c != self.in_channels {
            return Err(BicdError::Shape(format!(
                "aux module expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if let Some(t) = tape.as_deref_mut() {
            t.branches = (0..self.branches.len()).map(|_| Default::default()).collect();
        }
        let mut outs = Vec::with_capacity(self.branches.len());
        for (i, [l0, l1]) in self.branches.iter().enumerate() {
            let (t0, t1) = match tape.as_deref_mut() {
                Some(t) => {
                    let [a, b] = &mut t.branches[i];
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            let hidden = l0.forward(params, z, t0)?;
            outs.push(l1.forward(params, &hidden, t1)?);
        }
        let cat = concat_channels(&outs.iter().collect::<Vec<_>>())?;
        let small = self
            .out_conv
            .forward(params, &cat, tape.as_deref_mut().map(|t| &mut t.out))?;
        if let Some(t) = tape {
            t.small_hw = Some((h, w));
        }
        upsample_bilinear(&small, out_h, out_w)
    }

    /// Returns the gradient w.r.t. the module input `z`.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        grad: &Tensor<T>,
        tape: &mut AuxTape<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (h, w) = tape.small_hw.take().ok_or(BicdError::MissingTape("aux module"))?;
        let g_small = upsample_bilinear_backward(grad, h, w)?;
        let g_cat = self.out_conv.backward(params, &g_small, &mut tape.out, grads)?;
        let parts = split_channels(&g_cat, &BRANCH_WIDTHS)?;
        let mut g_z: Option<Tensor<T>> = None;
        for (([l0, l1], [t0, t1]), gp) in self
            .branches
            .iter()
            .zip(tape.branches.iter_mut())
            .zip(&parts)
        {
            let gh = l1.backward(params, gp, t1, grads)?;
            let gz = l0.backward(params, &gh, t0, grads)?;
            match g_z.as_mut() {
                None => g_z = Some(gz),
                Some(acc) => acc.add_assign(&gz)?,
            }
        }
        Ok(g_z.expect("four branches"))
    }
}

/// See [`AuxModule::align`].
pub fn aux_align<T: Real>(
    params: &ParamSet<T>,
    z: &Tensor<T>,
    module: &AuxModule,
    out_hw: (usize, usize),
    tape: Option<&mut AuxTape<T>>,
) -> Result<Tensor<T>> {
    module.align(params, z, out_hw.0, out_hw.1, tape)
}

/// The auxiliary parameter namespace `η` with one module per attachment site.
#[derive(Clone, Debug)]
pub struct AuxHeads<T> {
    pub params: ParamSet<T>,
    /// One per change-generator scale.
    pub generators: Vec<AuxModule>,
    /// Shared by both Siamese branches' deepest features.
    pub backbone: AuxModule,
}

impl<T: Real> AuxHeads<T> {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamSet::new();
        let generators = [STAGE1_CHANNELS, STAGE2_CHANNELS]
            .iter()
            .enumerate()
            .map(|(i, &c)| AuxModule::build(&mut params, &format!("aux.gen{i}"), c, seed))
            .collect();
        let backbone = AuxModule::build(&mut params, "aux.backbone", STAGE2_CHANNELS, seed);
        AuxHeads {
            params,
            generators,
            backbone,
        }
    }

    pub fn cast<U: Real>(&self) -> AuxHeads<U> {
        AuxHeads {
            params: self.params.cast(),
            generators: self.generators.clone(),
            backbone: self.backbone.clone(),
        }
    }
}

/// Aligned change features split by the ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures<T> {
    pub z_aligned: Tensor<T>,
    /// `z ⊙ y`: the interest-change component.
    pub z_in: Tensor<T>,
    /// `z ⊙ (1 - y)`: the noise-change component.
    pub z_n: Tensor<T>,
}

fn check_mask<T: Real>(y: &Tensor<T>, like: &Tensor<T>) -> Result<()> {
    let (n, c, h, w) = like.nchw()?;
    let (yn, yc, yh, yw) = y.nchw()?;
    if (yn, yc, yh, yw) != (n, 1, h, w) {
        return Err(BicdError::Shape(format!(
            "mask dims {:?} do not broadcast over {:?}",
            y.dims(),
            like.dims()
        )));
    }
    let _ = c;
    if let Some(v) = y.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(BicdError::InvalidMask(format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

/// `x ⊙ y` with the N×1×H×W mask broadcast over channels.
fn mask_mul<T: Real>(x: &Tensor<T>, y: &Tensor<T>, invert: bool) -> Tensor<T> {
    let dims = x.dims();
    let (c, plane) = (dims[1], dims[2] * dims[3]);
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = i / c;
        let m = &y.data()[b * plane..(b + 1) * plane];
        for (v, &mv) in chunk.iter_mut().zip(m) {
            let keep = if invert { T::one() - mv } else { mv };
            *v *= keep;
        }
    }
    out
}

pub fn split_by_mask<T: Real>(z_aligned: &Tensor<T>, y: &Tensor<T>) -> Result<AlignedFeatures<T>> {
    check_mask(y, z_aligned)?;
    Ok(AlignedFeatures {
        z_in: mask_mul(z_aligned, y, false),
        z_n: mask_mul(z_aligned, y, true),
        z_aligned: z_aligned.clone(),
    })
}

/// `|x0 - x1|` elementwise.
pub fn delta_x<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    x0.ensure_same_dims(x1, "delta_x")?;
    abs_diff(x0, x1)
}

/// `ΔX ⊙ y`.
pub fn delta_x_in<T: Real>(dx: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_mask(y, dx)?;
    Ok(mask_mul(dx, y, false))
}

/// Mean absolute difference over all elements.
pub fn l1_mean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.ensure_same_dims(b, "l1_mean")?;
    if a.is_empty() {
        return Err(BicdError::Empty("l1_mean".into()));
    }
    let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(s / T::of(a.len() as f64))
}

/// `∂ l1_mean(a, b) / ∂a`, using 0 as the subgradient at `a = b`.
pub fn l1_mean_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let inv = T::one() / T::of(a.len().max(1) as f64);
    a.zip_map(b, |x, y| {
        if x > y {
            inv
        } else if x < y {
            -inv
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiTerms<T> {
    pub l_noise: T,
    pub l_interest: T,
    pub l_recon: T,
}

impl<T: Real> PsiTerms<T> {
    pub fn sum(&self) -> T {
        self.l_noise + self.l_interest + self.l_recon
    }
}

/// Ψ as three mean-L1 terms: noise suppression `‖Z_n‖₁`, interest
/// preservation `‖Z_in - ΔX_in‖₁` and input reconstruction `‖Z_bb - X‖₁`.
pub fn psi_terms<T: Real>(
    aligned_gen: &AlignedFeatures<T>,
    aligned_backbone: &Tensor<T>,
    x: &Tensor<T>,
    dx_in: &Tensor<T>,
) -> Result<PsiTerms<T>> {
    let zero = Tensor::zeros_like(&aligned_gen.z_n);
    Ok(PsiTerms {
        l_noise: l1_mean(&aligned_gen.z_n, &zero)?,
        l_interest: l1_mean(&aligned_gen.z_in, dx_in)?,
        l_recon: l1_mean(aligned_backbone, x)?,
    })
}

/// Gradient of `l_noise + l_interest` w.r.t. the aligned generator features.
pub fn separability_grad<T: Real>(
    aligned_gen: &AlignedFeatures<T>,
    y: &Tensor<T>,
    dx_in: &Tensor<T>,
) -> Result<Tensor<T>> {
    let zero = Tensor::zeros_like(&aligned_gen.z_n);
    let g_noise = mask_mul(&l1_mean_grad(&aligned_gen.z_n, &zero)?, y, true);
    let g_int = mask_mul(&l1_mean_grad(&aligned_gen.z_in, dx_in)?, y, false);
    g_noise.zip_map(&g_int, |a, b| a + b)
}
