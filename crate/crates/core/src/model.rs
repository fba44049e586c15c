//! Desk-scale Siamese change-detection network.
//!
//! ```text
//! x0 ─ stem ─ stage1 ─┬─ stage2 ─┬
//!                     │          │      (shared weights)
//! x1 ─ stem ─ stage1 ─┼─ stage2 ─┼
//!                     │          │
//!                   gen0       gen1     1-bit change generators
//!                     └── channel avg pool ──┐
//!                                  ASPP (d = 1, 2, 4) → 1×1 fuse → head → bilinear ↑
//! ```
//!
//! The stem and the head are real-valued; everything in between is 1-bit.
//! There is no batch normalisation, so every sample is processed
//! independently of the rest of its batch.

use crate::binconv::{BinConvLayer, ChangeGenerator, GeneratorTape, GradTape};
use crate::conv::{ConvSpec, RealConv, RealConvTape};
use crate::error::{BicdError, Result};
use crate::ops::{
    channel_avg_pool, channel_avg_pool_backward, concat_channels, split_channels,
    upsample_bilinear, upsample_bilinear_backward, ActKind,
};
use crate::params::{Grads, ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const STEM_CHANNELS: usize = 16;
pub const STAGE1_CHANNELS: usize = 32;
pub const STAGE2_CHANNELS: usize = 64;
pub const FUSE_CHANNELS: usize = 32;
pub const ASPP_DILATIONS: [usize; 3] = [1, 2, 4];

/// Initial activation threshold of the change generators. Their input
/// `max - min` is never negative, so a zero threshold would binarize it to a
/// constant.
pub const GENERATOR_SHIFT_INIT: f64 = 0.5;

/// Layers whose activations can be probed by name.
pub const PROBE_LAYERS: [&str; 7] = ["stem", "stage1", "stage2", "gen0", "gen1", "fused", "aspp"];

/// Per-stage feature maps of one Siamese branch, finest first.
pub type Pyramid<T> = Vec<Tensor<T>>;

#[derive(Clone, Debug)]
pub struct ChangeNet<T> {
    pub params: ParamSet<T>,
    pub stem: RealConv,
    pub stage1: BinConvLayer,
    pub stage2: BinConvLayer,
    pub generators: [ChangeGenerator; 2],
    pub aspp: [BinConvLayer; 3],
    pub aspp_fuse: BinConvLayer,
    pub head: RealConv,
}

/// Intermediate results the objective needs besides the logits.
#[derive(Clone, Debug)]
pub struct ZRecords<T> {
    /// Change-generator outputs `Z(θ)`, one per pyramid scale.
    pub generated: Vec<Tensor<T>>,
    /// Deepest backbone features of each branch.
    pub backbone: [Tensor<T>; 2],
    pub pyramids: [Pyramid<T>; 2],
    /// Channel-pooled generator features entering the ASPP.
    pub fused: Tensor<T>,
    /// ASPP output entering the head.
    pub aspp: Tensor<T>,
    pub stem: [Tensor<T>; 2],
}

/// Extra gradients injected at the recorded intermediates.
#[derive(Clone, Debug, Default)]
pub struct ZGrads<T> {
    pub generated: Vec<Option<Tensor<T>>>,
    pub backbone: [Option<Tensor<T>>; 2],
}

#[derive(Clone, Debug, Default)]
struct BranchTape<T> {
    stem: RealConvTape<T>,
    stage1: GradTape<T>,
    stage2: GradTape<T>,
}

/// Everything recorded by one training forward pass.
#[derive(Clone, Debug, Default)]
pub struct NetTape<T> {
    branches: [BranchTape<T>; 2],
    generators: [GeneratorTape<T>; 2],
    aspp: [GradTape<T>; 3],
    aspp_fuse: GradTape<T>,
    head: RealConvTape<T>,
    geometry: Option<Geometry>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    head_hw: (usize, usize),
    input_hw: (usize, usize),
}

impl<T: Real> ChangeNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let stem = RealConv::build(
            &mut ps,
            "stem",
            ConvSpec::new(INPUT_CHANNELS, STEM_CHANNELS, 3).stride(2).padding(1),
            true,
            ActKind::Prelu,
            seed,
        );
        let stage1 = BinConvLayer::build(
            &mut ps,
            "stage1",
            ConvSpec::new(STEM_CHANNELS, STAGE1_CHANNELS, 3).stride(2).padding(1),
            ActKind::Prelu,
            Some(0.0),
            seed,
        );
        let stage2 = BinConvLayer::build(
            &mut ps,
            "stage2",
            ConvSpec::new(STAGE1_CHANNELS, STAGE2_CHANNELS, 3).padding(1),
            ActKind::Prelu,
            Some(0.0),
            seed,
        );
        let generators = [(0, STAGE1_CHANNELS), (1, STAGE2_CHANNELS)].map(|(i, c)| ChangeGenerator {
            conv: BinConvLayer::build(
                &mut ps,
                &format!("gen{i}"),
                ConvSpec::new(c, c, 3).padding(1),
                ActKind::Prelu,
                Some(GENERATOR_SHIFT_INIT),
                seed,
            ),
        });
        let aspp = ASPP_DILATIONS.map(|d| {
            BinConvLayer::build(
                &mut ps,
                &format!("aspp.d{d}"),
                ConvSpec::new(FUSE_CHANNELS, FUSE_CHANNELS, 3).padding(d).dilation(d),
                ActKind::Prelu,
                Some(0.0),
                seed,
            )
        });
        let aspp_fuse = BinConvLayer::build(
            &mut ps,
            "aspp.fuse",
            ConvSpec::new(FUSE_CHANNELS * ASPP_DILATIONS.len(), FUSE_CHANNELS, 1),
            ActKind::Prelu,
            Some(0.0),
            seed,
        );
        let head = RealConv::build(
            &mut ps,
            "head",
            ConvSpec::new(FUSE_CHANNELS, 1, 1),
            true,
            ActKind::Identity,
            seed,
        );
        ChangeNet {
            params: ps,
            stem,
            stage1,
            stage2,
            generators,
            aspp,
            aspp_fuse,
            head,
        }
    }

    pub fn cast<U: Real>(&self) -> ChangeNet<U> {
        ChangeNet {
            params: self.params.cast(),
            stem: self.stem.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            generators: self.generators.clone(),
            aspp: self.aspp.clone(),
            aspp_fuse: self.aspp_fuse.clone(),
            head: self.head.clone(),
        }
    }

    /// All binary layers with their parameter-name prefixes.
    pub fn binary_layers(&self) -> Vec<(&'static str, &BinConvLayer)> {
        vec![
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("gen0", &self.generators[0].conv),
            ("gen1", &self.generators[1].conv),
            ("aspp.d1", &self.aspp[0]),
            ("aspp.d2", &self.aspp[1]),
            ("aspp.d4", &self.aspp[2]),
            ("aspp.fuse", &self.aspp_fuse),
        ]
    }

    fn check_inputs(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<(usize, usize)> {
        x0.ensure_same_dims(x1, "siamese inputs")?;
        let (_, c, h, w) = x0.nchw()?;
        if c != INPUT_CHANNELS {
            return Err(BicdError::Shape(format!(
                "expected {INPUT_CHANNELS} input channels, got {c}"
            )));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(BicdError::Shape(format!(
                "input height and width must be positive multiples of 4, got {h}×{w}"
            )));
        }
        Ok((h, w))
    }

    fn encode_branch(
        &self,
        x: &Tensor<T>,
        mut tape: Option<&mut BranchTape<T>>,
    ) -> Result<(Tensor<T>, Pyramid<T>)> {
        let ps = &self.params;
        let s = self.stem.forward(ps, x, tape.as_deref_mut().map(|t| &mut t.stem))?;
        let f1 = self.stage1.forward(ps, &s, tape.as_deref_mut().map(|t| &mut t.stage1))?;
        let f2 = self.stage2.forward(ps, &f1, tape.map(|t| &mut t.stage2))?;
        Ok((s, vec![f1, f2]))
    }

    /// Run both images through the shared backbone.
    pub fn siamese_encode(
        &self,
        x0: &Tensor<T>,
        x1: &Tensor<T>,
        tape: Option<&mut NetTape<T>>,
    ) -> Result<(Pyramid<T>, Pyramid<T>)> {
        Self::check_inputs(x0, x1)?;
        let (_, p0, _, p1) = self.encode_pair(x0, x1, tape)?;
        Ok((p0, p1))
    }

    fn encode_pair(
        &self,
        x0: &Tensor<T>,
        x1: &Tensor<T>,
        tape: Option<&mut NetTape<T>>,
    ) -> Result<(Tensor<T>, Pyramid<T>, Tensor<T>, Pyramid<T>)> {
        match tape {
            Some(t) => {
                let [b0, b1] = &mut t.branches;
                let (s0, p0) = self.encode_branch(x0, Some(b0))?;
                let (s1, p1) = self.encode_branch(x1, Some(b1))?;
                Ok((s0, p0, s1, p1))
            }
            None => {
                let (s0, p0) = self.encode_branch(x0, None)?;
                let (s1, p1) = self.encode_branch(x1, None)?;
                Ok((s0, p0, s1, p1))
            }
        }
    }

    /// Weighted channel pooling of the generator outputs: every scale is
    /// averaged down to `FUSE_CHANNELS` channels and the scales are averaged.
    pub fn fuse(generated: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for g in generated {
            let pooled = channel_avg_pool(g, FUSE_CHANNELS)?;
            match acc.as_mut() {
                None => acc = Some(pooled),
                Some(a) => a.add_assign(&pooled)?,
            }
        }
        let mut fused = acc.ok_or_else(|| BicdError::Shape("no generator outputs".into()))?;
        fused.scale(T::one() / T::of(generated.len() as f64));
        Ok(fused)
    }

    /// Full training/inference forward pass: logits N×1×H×W plus the
    /// intermediates the objective consumes.
    pub fn forward_full(
        &self,
        x0: &Tensor<T>,
        x1: &Tensor<T>,
        mut tape: Option<&mut NetTape<T>>,
    ) -> Result<(Tensor<T>, ZRecords<T>)> {
        let (h, w) = Self::check_inputs(x0, x1)?;
        let ps = &self.params;
        let (s0, p0, s1, p1) = self.encode_pair(x0, x1, tape.as_deref_mut())?;
        let mut generated = Vec::with_capacity(2);
        for (i, g) in self.generators.iter().enumerate() {
            let t = tape.as_deref_mut().map(|t| &mut t.generators[i]);
            generated.push(g.forward(ps, &p0[i], &p1[i], t)?);
        }
        let fused = Self::fuse(&generated)?;
        let mut branches = Vec::with_capacity(3);
        for (i, layer) in self.aspp.iter().enumerate() {
            let t = tape.as_deref_mut().map(|t| &mut t.aspp[i]);
            branches.push(layer.forward(ps, &fused, t)?);
        }
        let cat = concat_channels(&branches.iter().collect::<Vec<_>>())?;
        let aspp = self
            .aspp_fuse
            .forward(ps, &cat, tape.as_deref_mut().map(|t| &mut t.aspp_fuse))?;
        let small = self
            .head
            .forward(ps, &aspp, tape.as_deref_mut().map(|t| &mut t.head))?;
        let (_, _, sh, sw) = small.nchw()?;
        let logits = upsample_bilinear(&small, h, w)?;
        if let Some(t) = tape {
            t.geometry = Some(Geometry {
                head_hw: (sh, sw),
                input_hw: (h, w),
            });
        }
        let backbone = [p0[p0.len() - 1].clone(), p1[p1.len() - 1].clone()];
        Ok((
            logits,
            ZRecords {
                generated,
                backbone,
                pyramids: [p0, p1],
                fused,
                aspp,
                stem: [s0, s1],
            },
        ))
    }

    /// Inference: logits only. Never touches auxiliary parameters.
    pub fn infer(&self, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_full(x0, x1, None)?.0)
    }

    /// Activations of a named layer, N×C×h×w (branch 0 for backbone layers).
    pub fn probe(&self, x0: &Tensor<T>, x1: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
        let (_, z) = self.forward_full(x0, x1, None)?;
        Ok(match layer {
            "stem" => z.stem[0].clone(),
            "stage1" => z.pyramids[0][0].clone(),
            "stage2" => z.pyramids[0][1].clone(),
            "gen0" => z.generated[0].clone(),
            "gen1" => z.generated[1].clone(),
            "fused" => z.fused,
            "aspp" => z.aspp,
            other => {
                return Err(BicdError::Config(format!(
                    "unknown probe layer `{other}` (expected one of {PROBE_LAYERS:?})"
                )))
            }
        })
    }

    /// Reverse of [`forward_full`](Self::forward_full). Accumulates into
    /// `grads`; Siamese-shared parameters receive both branches' contributions.
    pub fn backward_full(
        &self,
        grad_logits: &Tensor<T>,
        z_grads: &ZGrads<T>,
        tape: &mut NetTape<T>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let geo = tape.geometry.take().ok_or(BicdError::MissingTape("network"))?;
        let (_, _, gh, gw) = grad_logits.nchw()?;
        if (gh, gw) != geo.input_hw {
            return Err(BicdError::Shape(format!(
                "grad_logits is {gh}×{gw}, forward input was {:?}",
                geo.input_hw
            )));
        }
        let ps = &self.params;
        let g_small = upsample_bilinear_backward(grad_logits, geo.head_hw.0, geo.head_hw.1)?;
        let g_aspp = self.head.backward(ps, &g_small, &mut tape.head, grads)?;
        let g_cat = self.aspp_fuse.backward(ps, &g_aspp, &mut tape.aspp_fuse, grads)?;
        let parts = split_channels(&g_cat, &[FUSE_CHANNELS; 3])?;
        let mut g_fused: Option<Tensor<T>> = None;
        for ((layer, t), gp) in self.aspp.iter().zip(tape.aspp.iter_mut()).zip(&parts) {
            let g = layer.backward(ps, gp, t, grads)?;
            match g_fused.as_mut() {
                None => g_fused = Some(g),
                Some(acc) => acc.add_assign(&g)?,
            }
        }
        let mut g_fused = g_fused.expect("three ASPP branches");
        g_fused.scale(T::one() / T::of(self.generators.len() as f64));

        // Gradients w.r.t. each branch's pyramid levels.
        let mut g_pyr: [Vec<Option<Tensor<T>>>; 2] = [vec![None, None], vec![None, None]];
        for (i, gen) in self.generators.iter().enumerate() {
            let c = gen.conv.spec.out_channels;
            let mut g_gen = channel_avg_pool_backward(&g_fused, c)?;
            if let Some(Some(extra)) = z_grads.generated.get(i) {
                g_gen.add_assign(extra)?;
            }
            let (g0, g1) = gen.backward(ps, &g_gen, &mut tape.generators[i], grads)?;
            g_pyr[0][i] = Some(g0);
            g_pyr[1][i] = Some(g1);
        }
        for (b, branch) in tape.branches.iter_mut().enumerate() {
            let mut g2 = g_pyr[b][1].take().expect("generator gradient");
            if let Some(extra) = &z_grads.backbone[b] {
                g2.add_assign(extra)?;
            }
            let mut g1 = self.stage2.backward(ps, &g2, &mut branch.stage2, grads)?;
            g1.add_assign(g_pyr[b][0].as_ref().expect("generator gradient"))?;
            let gs = self.stage1.backward(ps, &g1, &mut branch.stage1, grads)?;
            self.stem.backward(ps, &gs, &mut branch.stem, grads)?;
        }
        Ok(())
    }

    /// Number of stored parameters (Siamese weights counted once), split into
    /// `(real, latent_binary)` element counts.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let mut real = 0;
        let mut binary = 0;
        for (_, p) in self.params.iter() {
            match p.kind {
                ParamKind::Real => real += p.value.len(),
                ParamKind::LatentBinary => binary += p.value.len(),
            }
        }
        (real, binary)
    }
}
