use super::gsg::{gsg_graph, gsg_specs};
use super::params::{NetParams, ParamSpec, ParamVars, SpecBuilder};
use super::unet::{decoder_graph, decoder_specs, encoder_graph, encoder_specs};
use super::{conv, NetConfig, Variant};
use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::masks::{default_hard_masks, mask_net_specs, soft_masks_graph, MaskTriple, MASK_OVER, MASK_UNDER};
use crate::raw_model::{pack, HdrImage, PackedRaw, RawMosaic, CH_B, CH_G1, CH_G2, CH_R};
use crate::tensor::Tensor;

/// Every parameter array of the configured network.
pub fn net_specs(config: &NetConfig) -> Vec<ParamSpec> {
    let mut b = SpecBuilder::new();
    let mut head_in = 0;
    if config.uses_dig() {
        if config.learns_masks() {
            mask_net_specs(&mut b, MASK_OVER, config.mask_width);
            mask_net_specs(&mut b, MASK_UNDER, config.mask_width);
        }
        encoder_specs(&mut b, "ue_g", 2, config);
        encoder_specs(&mut b, "ue_rb", 2, config);
        encoder_specs(&mut b, "ue_rgbg", 4, config);
        decoder_specs(&mut b, "d_g", config);
        decoder_specs(&mut b, "d_rb", config);
        head_in += config.base_width;
    }
    if config.uses_gsg() {
        b.conv("gsg.embed", 4, config.base_width, 3, 1);
        gsg_specs(&mut b, config);
        head_in += config.base_width;
    }
    b.conv("head.fuse", head_in, 4, 1, 1);
    b.identity_conv("head.skip", 4);
    b.finish()
}

/// Inputs below this are clamped before entering the skip path.
pub const SKIP_FLOOR: f64 = 1.0 / 65536.0;

/// Inverse softplus of `max(x, SKIP_FLOOR)`, so an identity skip projection
/// makes the head return the packed input where the fused branch is zero.
pub fn skip_input(x: &Tensor) -> Tensor {
    x.map(|v| {
        let y = v.max(SKIP_FLOOR);
        y + (-(-y).exp_m1()).ln()
    })
}

/// `Y_DI = M_under ⊙ D_g(Y_G, Y_RGBG) + M_over ⊙ D_rb(Y_RB, Y_RGBG)` for a
/// packed input `x: [4, h, w]` and single-channel masks `[1, h, w]`.
///
/// The guide images are sliced from the value of `x`, so no gradient flows
/// back into `x` itself.
pub fn dig_graph(pv: &ParamVars, x: Var, over: Var, under: Var, config: &NetConfig) -> Result<Var> {
    let g = pv.graph;
    let xv = g.value(x);
    let green = g.constant(xv.select_channels(&[CH_G1, CH_G2])?);
    let redblue = g.constant(xv.select_channels(&[CH_R, CH_B])?);
    let y_g = encoder_graph(pv, "ue_g", green, config)?;
    let y_rb = encoder_graph(pv, "ue_rb", redblue, config)?;
    let y_rgbg = encoder_graph(pv, "ue_rgbg", x, config)?;
    let yg_dec = decoder_graph(pv, "d_g", &y_g, &y_rgbg, config);
    let yrb_dec = decoder_graph(pv, "d_rb", &y_rb, &y_rgbg, config);
    let a = g.mul_channel_mask(yg_dec, under);
    let b = g.mul_channel_mask(yrb_dec, over);
    Ok(g.add(a, b))
}


/// Graph handles produced by [`forward_graph`]; all maps are cropped back to
/// the unpadded packed resolution.
pub struct ForwardOutput {
    /// `[4, h, w]` non-negative radiance.
    pub hdr: Var,
    /// Learned `[1, h, w]` masks, when the variant learns them.
    pub soft_over: Option<Var>,
    pub soft_under: Option<Var>,
}

/// The full network on one packed image. The input is replicate-padded up
/// to [`NetConfig::size_multiple`] and the outputs are cropped back.
pub fn forward_graph(pv: &ParamVars, packed: &PackedRaw, config: &NetConfig) -> Result<ForwardOutput> {
    let g = pv.graph;
    let (h, w) = (packed.height(), packed.width());
    let m = config.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = packed.tensor().hwc_to_chw()?.pad_replicate(ph, pw)?;
    let x = g.constant(padded.clone());

    let mut features = Vec::with_capacity(2);
    let mut soft = None;
    if config.uses_dig() {
        let (over, under) = match config.variant {
            Variant::HardMasks => {
                let hard = default_hard_masks(&PackedRaw::new(padded.chw_to_hwc()?)?);
                let (o, u) = hard.as_feature_maps()?;
                (g.constant(o), g.constant(u))
            }
            _ => {
                let (o, u) = soft_masks_graph(pv, x, config);
                soft = Some((o, u));
                (o, u)
            }
        };
        features.push(dig_graph(pv, x, over, under, config)?);
    }
    if config.uses_gsg() {
        let embed = conv(pv, "gsg.embed", x, ConvSpec::same(3));
        features.push(gsg_graph(pv, embed, config)?);
    }
    let cat = if features.len() == 1 {
        features[0]
    } else {
        g.concat(&features)
    };
    let fused = conv(pv, "head.fuse", cat, ConvSpec::same(1));
    let skip = conv(pv, "head.skip", g.constant(skip_input(&padded)), ConvSpec::same(1));
    let pre = g.add(fused, skip);
    let hdr = g.crop(g.softplus(pre), h, w);
    Ok(ForwardOutput {
        hdr,
        soft_over: soft.map(|(o, _)| g.crop(o, h, w)),
        soft_under: soft.map(|(_, u)| g.crop(u, h, w)),
    })
}

/// Dual intensity guidance features `[base_width, h, w]` for explicit masks.
pub fn dual_intensity_guidance(
    packed: &PackedRaw,
    masks: &MaskTriple,
    params: &NetParams,
    config: &NetConfig,
) -> Result<Tensor> {
    let (h, w) = (packed.height(), packed.width());
    if masks.shape() != [h, w, 1] {
        return shape_err(format!("masks {:?} do not match packed {h}x{w}", masks.shape()));
    }
    let g = Graph::new();
    let pv = ParamVars::bind(&g, params, false);
    let x = g.constant(packed.tensor().hwc_to_chw()?);
    let (o, u) = masks.as_feature_maps()?;
    let y = dig_graph(&pv, x, g.constant(o), g.constant(u), config)?;
    Ok((*g.value(y)).clone())
}

pub fn forward_packed(packed: &PackedRaw, params: &NetParams, config: &NetConfig) -> Result<HdrImage> {
    config.validate()?;
    params.check_against(&net_specs(config))?;
    let g = Graph::new();
    let pv = ParamVars::bind(&g, params, false);
    let out = forward_graph(&pv, packed, config)?;
    let hdr = g.value(out.hdr);
    if let Some(i) = hdr.first_non_finite() {
        let [_, h, w] = hdr.dims3()?;
        return Err(Error::Numerical {
            location: format!(
                "network output channel {} at ({}, {})",
                i / (h * w),
                (i / w) % h,
                i % w
            ),
        });
    }
    HdrImage::new(hdr.chw_to_hwc()?)
}

/// Reconstruct packed-resolution HDR radiance from one Raw frame.
pub fn forward(raw: &RawMosaic, params: &NetParams, config: &NetConfig) -> Result<HdrImage> {
    forward_packed(&pack(raw)?, params, config)
}

