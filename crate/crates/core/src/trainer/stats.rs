//! Parameter and operation counts under the 1-bit accounting convention:
//! a binary weight costs 1/32 of a real one and a binary multiply-accumulate
//! 1/64 of a real FLOP.

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::model::ChangeNet;
use crate::params::{ParamKind, ParamSet};
use crate::tensor::Real;

pub const BINARY_PARAM_DIVISOR: f64 = 32.0;
pub const BINARY_OP_DIVISOR: f64 = 64.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub binary: bool,
    /// Real-valued parameters, including per-channel scales and biases.
    pub real_params: usize,
    pub latent_params: usize,
    /// Multiply-accumulates per forward pass, summed over every application.
    pub macs: u64,
}

impl LayerCost {
    pub fn params(&self) -> f64 {
        self.real_params as f64 + self.latent_params as f64 / BINARY_PARAM_DIVISOR
    }

    /// Real layers count two FLOPs per MAC; binary layers 1/64 op per MAC.
    pub fn ops(&self) -> f64 {
        if self.binary {
            self.macs as f64 / BINARY_OP_DIVISOR
        } else {
            2.0 * self.macs as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelStats {
    pub layers: Vec<LayerCost>,
    pub params: f64,
    pub ops: f64,
}

impl ModelStats {
    pub fn params_m(&self) -> f64 {
        self.params / 1e6
    }

    pub fn ops_g(&self) -> f64 {
        self.ops / 1e9
    }
}

/// Cost of a real convolution with `weight + bias` parameters.
pub fn real_conv_cost(name: &str, spec: &ConvSpec, bias: bool, h: usize, w: usize) -> Result<LayerCost> {
    let weights: usize = spec.weight_dims().iter().product();
    Ok(LayerCost {
        name: name.to_string(),
        binary: false,
        real_params: weights + if bias { spec.out_channels } else { 0 },
        latent_params: 0,
        macs: spec.macs(h, w)?,
    })
}

/// Cost of a binary convolution counting only its packed weights.
pub fn binary_conv_cost(name: &str, spec: &ConvSpec, h: usize, w: usize) -> Result<LayerCost> {
    Ok(LayerCost {
        name: name.to_string(),
        binary: true,
        real_params: 0,
        latent_params: spec.weight_dims().iter().product(),
        macs: spec.macs(h, w)?,
    })
}

fn prefixed_counts<T: Real>(params: &ParamSet<T>, prefix: &str) -> (usize, usize) {
    let dotted = format!("{prefix}.");
    params
        .iter()
        .filter(|(_, p)| p.name.starts_with(&dotted))
        .fold((0, 0), |(r, b), (_, p)| match p.kind {
            ParamKind::Real => (r + p.value.len(), b),
            ParamKind::LatentBinary => (r, b + p.value.len()),
        })
}

/// Counts for the network on `h×w` inputs. Backbone layers run once per
/// image, so their MACs are doubled; their weights are stored once.
pub fn model_stats<T: Real>(net: &ChangeNet<T>, h: usize, w: usize) -> Result<ModelStats> {
    let (sh, sw) = net.stem.spec.output_hw(h, w)?;
    let (h1, w1) = net.stage1.spec.output_hw(sh, sw)?;
    let (h2, w2) = net.stage2.spec.output_hw(h1, w1)?;
    let gen_hw = [(h1, w1), (h2, w2)];
    let (fh, fw) = (h2.min(h1), w2.min(w1));

    let mut entries: Vec<(String, &ConvSpec, bool, (usize, usize), u64)> = vec![
        ("stem".into(), &net.stem.spec, false, (h, w), 2),
        ("stage1".into(), &net.stage1.spec, true, (sh, sw), 2),
        ("stage2".into(), &net.stage2.spec, true, (h1, w1), 2),
    ];
    for (i, g) in net.generators.iter().enumerate() {
        entries.push((format!("gen{i}"), &g.conv.spec, true, gen_hw[i], 1));
    }
    for a in &net.aspp {
        entries.push((format!("aspp.d{}", a.spec.dilation), &a.spec, true, (fh, fw), 1));
    }
    entries.push(("aspp.fuse".into(), &net.aspp_fuse.spec, true, (fh, fw), 1));
    entries.push(("head".into(), &net.head.spec, false, (fh, fw), 1));

    let mut layers = Vec::with_capacity(entries.len());
    for (name, spec, binary, (ih, iw), instances) in entries {
        let (real_params, latent_params) = prefixed_counts(&net.params, &name);
        layers.push(LayerCost {
            name,
            binary,
            real_params,
            latent_params,
            macs: spec.macs(ih, iw)? * instances,
        });
    }
    let params = layers.iter().map(LayerCost::params).sum();
    let ops = layers.iter().map(LayerCost::ops).sum();
    Ok(ModelStats { layers, params, ops })
}
