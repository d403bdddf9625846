use super::params::{NetParams, ParamVars, SpecBuilder};
use super::{conv, NetConfig};
use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Bottleneck features plus the per-level skip features (finest first).
#[derive(Clone, Debug)]
pub struct EncoderOutput<T = Var> {
    pub bottleneck: T,
    pub skips: Vec<T>,
}

pub(crate) fn encoder_specs(b: &mut SpecBuilder, prefix: &str, cin: usize, config: &NetConfig) {
    let w0 = config.unet_width(0);
    b.conv(&format!("{prefix}.in"), cin, w0, 3, 1);
    b.conv(&format!("{prefix}.in2"), w0, w0, 3, 1);
    for d in 1..=config.unet_depth {
        let (wp, wd) = (config.unet_width(d - 1), config.unet_width(d));
        b.conv(&format!("{prefix}.down{d}"), wp, wd, 4, 1);
        b.conv(&format!("{prefix}.enc{d}"), wd, wd, 3, 1);
    }
}

/// `unet_depth` stride-2 downsamplings, each followed by a 3×3 conv block.
pub fn encoder_graph(
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    config: &NetConfig,
) -> Result<EncoderOutput> {
    let g = pv.graph;
    let shape = g.shape(x);
    let m = 1 << config.unet_depth;
    if shape.len() != 3 || !shape[1].is_multiple_of(m) || !shape[2].is_multiple_of(m) {
        return shape_err(format!(
            "encoder input {shape:?} not divisible by 2^{}",
            config.unet_depth
        ));
    }
    let act = config.activation;
    let h = g.activation(conv(pv, &format!("{prefix}.in"), x, ConvSpec::same(3)), act);
    let mut h = g.activation(conv(pv, &format!("{prefix}.in2"), h, ConvSpec::same(3)), act);
    let mut skips = Vec::with_capacity(config.unet_depth);
    for d in 1..=config.unet_depth {
        skips.push(h);
        let down = conv(pv, &format!("{prefix}.down{d}"), h, ConvSpec::strided(2, 1));
        let down = g.activation(down, act);
        h = g.activation(conv(pv, &format!("{prefix}.enc{d}"), down, ConvSpec::same(3)), act);
    }
    Ok(EncoderOutput {
        bottleneck: h,
        skips,
    })
}

pub(crate) fn decoder_specs(b: &mut SpecBuilder, prefix: &str, config: &NetConfig) {
    let depth = config.unet_depth;
    let wd = config.unet_width(depth);
    b.conv(&format!("{prefix}.fuse"), 2 * wd, wd, 3, 1);
    for d in (0..depth).rev() {
        let (wn, w) = (config.unet_width(d + 1), config.unet_width(d));
        b.conv(&format!("{prefix}.up{d}"), wn, w, 1, 1);
        b.conv(&format!("{prefix}.dec{d}a"), 3 * w, w, 3, 1);
        b.conv(&format!("{prefix}.dec{d}b"), w, w, 3, 1);
    }
}

/// Decode `Concat(branch, shared)` back to full resolution, concatenating
/// the skip features of both encoders at every level.
pub fn decoder_graph(
    pv: &ParamVars,
    prefix: &str,
    branch: &EncoderOutput,
    shared: &EncoderOutput,
    config: &NetConfig,
) -> Var {
    let g = pv.graph;
    let act = config.activation;
    let cat = g.concat(&[branch.bottleneck, shared.bottleneck]);
    let mut h = g.activation(conv(pv, &format!("{prefix}.fuse"), cat, ConvSpec::same(3)), act);
    for d in (0..config.unet_depth).rev() {
        let up = conv(pv, &format!("{prefix}.up{d}"), g.upsample2(h), ConvSpec::same(1));
        let cat = g.concat(&[up, branch.skips[d], shared.skips[d]]);
        let a = g.activation(conv(pv, &format!("{prefix}.dec{d}a"), cat, ConvSpec::same(3)), act);
        h = g.activation(conv(pv, &format!("{prefix}.dec{d}b"), a, ConvSpec::same(3)), act);
    }
    h
}

/// Run one encoder branch on a `[c, h, w]` input outside of training.
pub fn unet_encode(
    x: &Tensor,
    params: &NetParams,
    prefix: &str,
    config: &NetConfig,
) -> Result<EncoderOutput<Tensor>> {
    let g = Graph::new();
    let pv = ParamVars::bind(&g, params, false);
    let out = encoder_graph(&pv, prefix, g.constant(x.clone()), config)?;
    Ok(EncoderOutput {
        bottleneck: (*g.value(out.bottleneck)).clone(),
        skips: out.skips.iter().map(|&s| (*g.value(s)).clone()).collect(),
    })
}
