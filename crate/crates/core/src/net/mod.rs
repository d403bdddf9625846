//! The reconstruction network: dual intensity guidance (three U-Net encoder
//! branches, two decoders and mask-weighted fusion), global spatial guidance
//! (a U-shaped stack of window-attention blocks) and the fusion head.

mod gsg;
mod model;
pub mod params;
mod unet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, ConvSpec, Var};
use crate::error::{arg_err, Result};
use params::ParamVars;

pub use gsg::{
    global_spatial_guidance, gsg_graph, identity_gsg_params, leff, leff_graph, lewin_block,
    lewin_graph, lewin_specs, w_msa, w_msa_graph,
};
pub use model::{
    dual_intensity_guidance, dig_graph, forward, forward_graph, forward_packed, net_specs, skip_input,
    SKIP_FLOOR,
    ForwardOutput,
};
pub use params::{NetParams, ParamSpec};
pub use unet::{decoder_graph, encoder_graph, unet_encode, EncoderOutput};

/// Which guidance paths are active; everything but `Full` is an ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Drop dual intensity guidance (and the learned masks).
    NoDualGuidance,
    /// Drop global spatial guidance.
    NoGlobalGuidance,
    /// Use fixed-threshold masks instead of learned ones.
    HardMasks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_width: usize,
    pub unet_depth: usize,
    pub gsg_stages: usize,
    pub blocks_per_stage: usize,
    pub window_size: usize,
    pub heads: usize,
    pub leff_expansion: f64,
    /// Width of the over/under-exposure mask networks.
    pub mask_width: usize,
    pub activation: Activation,
    pub variant: Variant,
    pub ln_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            unet_depth: 2,
            gsg_stages: 2,
            blocks_per_stage: 2,
            window_size: 8,
            heads: 2,
            leff_expansion: 2.0,
            mask_width: 16,
            activation: Activation::Silu,
            variant: Variant::Full,
            ln_eps: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.mask_width == 0 || self.window_size == 0 {
            return arg_err("widths and window size must be positive");
        }
        if self.gsg_stages == 0 {
            return arg_err("at least one global guidance stage is required");
        }
        if self.heads == 0 || !self.base_width.is_multiple_of(self.heads) {
            return arg_err(format!(
                "heads ({}) must divide base_width ({})",
                self.heads, self.base_width
            ));
        }
        if !(self.leff_expansion > 0.0) || self.leff_hidden(self.base_width) == 0 {
            return arg_err("leff_expansion must be positive");
        }
        Ok(())
    }

    pub fn uses_dig(&self) -> bool {
        self.variant != Variant::NoDualGuidance
    }

    pub fn uses_gsg(&self) -> bool {
        self.variant != Variant::NoGlobalGuidance
    }

    pub fn learns_masks(&self) -> bool {
        matches!(self.variant, Variant::Full | Variant::NoGlobalGuidance)
    }

    /// U-Net feature width at `level`.
    pub fn unet_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Global-guidance feature width at `stage`.
    pub fn gsg_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn leff_hidden(&self, width: usize) -> usize {
        (width as f64 * self.leff_expansion).round() as usize
    }

    /// Packed-resolution side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        let mut m = 1;
        if self.uses_dig() {
            m = lcm(m, 1 << self.unet_depth);
        }
        if self.uses_gsg() {
            m = lcm(m, self.window_size << (self.gsg_stages - 1));
        }
        m
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Convolution with the `{name}.weight` / `{name}.bias` pair.
pub(crate) fn conv(pv: &ParamVars, name: &str, x: Var, spec: ConvSpec) -> Var {
    pv.graph.conv2d(
        x,
        pv.get(&format!("{name}.weight")),
        Some(pv.get(&format!("{name}.bias"))),
        spec,
    )
}
