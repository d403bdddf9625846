use super::params::{NetParams, ParamVars, SpecBuilder};
use super::{conv, NetConfig};
use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub fn lewin_specs(b: &mut SpecBuilder, prefix: &str, width: usize, config: &NetConfig) {
    let hidden = config.leff_hidden(width);
    b.layer_norm(&format!("{prefix}.ln1"), width);
    for proj in ["q", "k", "v", "out"] {
        b.conv(&format!("{prefix}.attn.{proj}"), width, width, 1, 1);
    }
    b.layer_norm(&format!("{prefix}.ln2"), width);
    b.conv(&format!("{prefix}.leff.expand"), width, hidden, 1, 1);
    b.conv(&format!("{prefix}.leff.dw"), hidden, hidden, 3, hidden);
    b.conv(&format!("{prefix}.leff.contract"), hidden, width, 1, 1);
}

fn check_windows(shape: &[usize], window: usize, heads: usize) -> Result<()> {
    match *shape {
        [c, h, w] if h % window == 0 && w % window == 0 && c % heads == 0 => Ok(()),
        _ => shape_err(format!(
            "features {shape:?} incompatible with window {window} and {heads} heads"
        )),
    }
}

/// Window multi-head self-attention: 1×1 q/k/v projections, attention within
/// non-overlapping windows, 1×1 output projection.
pub fn w_msa_graph(pv: &ParamVars, prefix: &str, x: Var, config: &NetConfig) -> Var {
    let g = pv.graph;
    let q = conv(pv, &format!("{prefix}.q"), x, ConvSpec::same(1));
    let k = conv(pv, &format!("{prefix}.k"), x, ConvSpec::same(1));
    let v = conv(pv, &format!("{prefix}.v"), x, ConvSpec::same(1));
    let a = g.window_attention(q, k, v, config.heads, config.window_size);
    conv(pv, &format!("{prefix}.out"), a, ConvSpec::same(1))
}

/// Locally-enhanced feed-forward: pointwise expansion, 3×3 depthwise
/// convolution, nonlinearity, pointwise contraction.
pub fn leff_graph(pv: &ParamVars, prefix: &str, x: Var, config: &NetConfig) -> Var {
    let g = pv.graph;
    let e = conv(pv, &format!("{prefix}.expand"), x, ConvSpec::same(1));
    let hidden = g.shape(e)[0];
    let d = conv(pv, &format!("{prefix}.dw"), e, ConvSpec::same(3).with_groups(hidden));
    let a = g.activation(d, config.activation);
    conv(pv, &format!("{prefix}.contract"), a, ConvSpec::same(1))
}

fn ln(pv: &ParamVars, name: &str, x: Var, eps: f64) -> Var {
    pv.graph.layer_norm(
        x,
        pv.get(&format!("{name}.gain")),
        pv.get(&format!("{name}.offset")),
        eps,
    )
}

/// `F' = W-MSA(LN(F)) + F`, `F_out = LeFF(LN(F')) + F'`.
pub fn lewin_graph(pv: &ParamVars, prefix: &str, x: Var, config: &NetConfig) -> Var {
    let g = pv.graph;
    let n1 = ln(pv, &format!("{prefix}.ln1"), x, config.ln_eps);
    let attn = w_msa_graph(pv, &format!("{prefix}.attn"), n1, config);
    let mid = g.add(attn, x);
    let n2 = ln(pv, &format!("{prefix}.ln2"), mid, config.ln_eps);
    let ff = leff_graph(pv, &format!("{prefix}.leff"), n2, config);
    g.add(ff, mid)
}

pub(crate) fn gsg_specs(b: &mut SpecBuilder, config: &NetConfig) {
    let k = config.gsg_stages;
    for i in 0..k - 1 {
        for blk in 0..config.blocks_per_stage {
            lewin_specs(b, &format!("gsg.enc{i}.block{blk}"), config.gsg_width(i), config);
        }
        b.conv(&format!("gsg.down{i}"), config.gsg_width(i), config.gsg_width(i + 1), 4, 1);
    }
    for blk in 0..config.blocks_per_stage {
        lewin_specs(b, &format!("gsg.bottleneck.block{blk}"), config.gsg_width(k - 1), config);
    }
    for i in (0..k - 1).rev() {
        let w = config.gsg_width(i);
        b.conv(&format!("gsg.up{i}"), config.gsg_width(i + 1), w, 1, 1);
        b.conv(&format!("gsg.skip{i}"), 2 * w, w, 1, 1);
        for blk in 0..config.blocks_per_stage {
            lewin_specs(b, &format!("gsg.dec{i}.block{blk}"), w, config);
        }
    }
}

/// U-shaped window-attention branch: `K − 1` encoder stages each followed by
/// a stride-2 projection, a bottleneck stage, and mirrored decoder stages
/// (2× nearest upsampling + 1×1 projection, skip concatenation + 1×1
/// projection). Output matches the input resolution and width.
pub fn gsg_graph(pv: &ParamVars, x: Var, config: &NetConfig) -> Result<Var> {
    gsg_graph_traced(pv, x, config, &mut Vec::new())
}

/// [`gsg_graph`], recording the feature shape entering every stage.
pub(crate) fn gsg_graph_traced(
    pv: &ParamVars,
    x: Var,
    config: &NetConfig,
    trace: &mut Vec<Vec<usize>>,
) -> Result<Var> {
    let g = pv.graph;
    let shape = g.shape(x);
    let m = config.window_size << (config.gsg_stages - 1);
    if shape.len() != 3 || !shape[1].is_multiple_of(m) || !shape[2].is_multiple_of(m) {
        return shape_err(format!("global guidance input {shape:?} not divisible by {m}"));
    }
    let blocks = |h: Var, stage: &str| {
        (0..config.blocks_per_stage).fold(h, |h, blk| {
            lewin_graph(pv, &format!("gsg.{stage}.block{blk}"), h, config)
        })
    };
    let k = config.gsg_stages;
    let mut h = x;
    let mut skips = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        trace.push(g.shape(h));
        h = blocks(h, &format!("enc{i}"));
        skips.push(h);
        h = conv(pv, &format!("gsg.down{i}"), h, ConvSpec::strided(2, 1));
    }
    trace.push(g.shape(h));
    h = blocks(h, "bottleneck");
    for i in (0..k - 1).rev() {
        let up = conv(pv, &format!("gsg.up{i}"), g.upsample2(h), ConvSpec::same(1));
        let cat = g.concat(&[up, skips[i]]);
        h = conv(pv, &format!("gsg.skip{i}"), cat, ConvSpec::same(1));
        trace.push(g.shape(h));
        h = blocks(h, &format!("dec{i}"));
    }
    Ok(h)
}

fn eval(params: &NetParams, x: &Tensor, f: impl FnOnce(&ParamVars, Var) -> Result<Var>) -> Result<Tensor> {
    let g = Graph::new();
    let pv = ParamVars::bind(&g, params, false);
    let out = f(&pv, g.constant(x.clone()))?;
    Ok((*g.value(out)).clone())
}

/// Window attention on a `[c, h, w]` map with the projections under `prefix`.
pub fn w_msa(x: &Tensor, params: &NetParams, prefix: &str, config: &NetConfig) -> Result<Tensor> {
    check_windows(x.shape(), config.window_size, config.heads)?;
    eval(params, x, |pv, v| Ok(w_msa_graph(pv, prefix, v, config)))
}

pub fn leff(x: &Tensor, params: &NetParams, prefix: &str, config: &NetConfig) -> Result<Tensor> {
    x.dims3()?;
    eval(params, x, |pv, v| Ok(leff_graph(pv, prefix, v, config)))
}

pub fn lewin_block(x: &Tensor, params: &NetParams, prefix: &str, config: &NetConfig) -> Result<Tensor> {
    check_windows(x.shape(), config.window_size, config.heads)?;
    eval(params, x, |pv, v| Ok(lewin_graph(pv, prefix, v, config)))
}

pub fn global_spatial_guidance(x: &Tensor, params: &NetParams, config: &NetConfig) -> Result<Tensor> {
    eval(params, x, |pv, v| gsg_graph(pv, v, config))
}

/// Global-guidance parameters whose residual branches are zeroed and whose
/// samplers pass features straight through: down-projections keep the
/// top-left sample of each 2×2 cell, up-projections keep the leading
/// channels and skip projections select the skip half. The branch is then
/// the identity map.
pub fn identity_gsg_params(config: &NetConfig, seed: u64) -> NetParams {
    let mut b = SpecBuilder::new();
    gsg_specs(&mut b, config);
    let mut params = NetParams::from_specs(&b.finish(), seed);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        if name.ends_with(".attn.out.weight") || name.ends_with(".leff.contract.weight") {
            *params.expect_mut(name) = Tensor::zeros(params.get(name).unwrap().shape());
        }
    }
    let k = config.gsg_stages;
    for i in 0..k.saturating_sub(1) {
        let (w, wn) = (config.gsg_width(i), config.gsg_width(i + 1));
        let mut down = Tensor::zeros(&[wn, w, 4, 4]);
        for c in 0..w {
            // with padding 1, kernel tap (1, 1) reads input (2·oy, 2·ox)
            down.data_mut()[((c * w + c) * 4 + 1) * 4 + 1] = 1.0;
        }
        *params.expect_mut(&format!("gsg.down{i}.weight")) = down;
        let mut up = Tensor::zeros(&[w, wn, 1, 1]);
        for c in 0..w {
            up.data_mut()[c * wn + c] = 1.0;
        }
        *params.expect_mut(&format!("gsg.up{i}.weight")) = up;
        let mut skip = Tensor::zeros(&[w, 2 * w, 1, 1]);
        for c in 0..w {
            skip.data_mut()[c * 2 * w + w + c] = 1.0;
        }
        *params.expect_mut(&format!("gsg.skip{i}.weight")) = skip;
    }
    params
}
