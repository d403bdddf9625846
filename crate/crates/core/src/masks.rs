//! Exposure masks: fixed-threshold masks, learned soft masks and the loss
//! tying the two together.
//!
//! All masks are single-channel at packed resolution and are broadcast over
//! feature channels wherever they weight features.

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::net::params::{NetParams, ParamVars, SpecBuilder};
use crate::net::NetConfig;
use crate::raw_model::PackedRaw;
use crate::tensor::Tensor;

pub const HARD_LO: f64 = 0.05;
pub const HARD_HI: f64 = 0.95;

/// Over-, under- and well-exposed maps, each `(h, w, 1)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTriple {
    pub over: Tensor,
    pub under: Tensor,
    pub well: Tensor,
}

/// `max(1 − over − under, 0)`.
#[inline]
pub fn well_exposed(over: f64, under: f64) -> f64 {
    (1.0 - over - under).max(0.0)
}

impl MaskTriple {
    /// Build from over/under maps, deriving the well-exposed map.
    pub fn from_over_under(over: Tensor, under: Tensor) -> Result<Self> {
        if over.shape() != under.shape() {
            return shape_err("over/under mask shapes differ");
        }
        let well = over.zip_map(&under, well_exposed);
        Ok(Self { over, under, well })
    }

    pub fn shape(&self) -> &[usize] {
        self.over.shape()
    }

    /// Over and under maps as `[1, h, w]` feature maps.
    pub(crate) fn as_feature_maps(&self) -> Result<(Tensor, Tensor)> {
        let [h, w, _] = self.over.dims3()?;
        Ok((
            self.over.clone().reshape(&[1, h, w])?,
            self.under.clone().reshape(&[1, h, w])?,
        ))
    }
}

/// Threshold masks on the brightest channel of every packed pixel:
/// over-exposed above `hi`, under-exposed below `lo`.
pub fn hard_masks(packed: &PackedRaw, lo: f64, hi: f64) -> Result<MaskTriple> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return arg_err(format!("need 0 <= lo < hi <= 1, got lo={lo} hi={hi}"));
    }
    let (h, w) = (packed.height(), packed.width());
    let mut over = Vec::with_capacity(h * w);
    let mut under = Vec::with_capacity(h * w);
    for px in packed.tensor().data().chunks_exact(4) {
        let brightest = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        over.push(if brightest > hi { 1.0 } else { 0.0 });
        under.push(if brightest < lo { 1.0 } else { 0.0 });
    }
    MaskTriple::from_over_under(
        Tensor::new(&[h, w, 1], over)?,
        Tensor::new(&[h, w, 1], under)?,
    )
}

pub fn default_hard_masks(packed: &PackedRaw) -> MaskTriple {
    hard_masks(packed, HARD_LO, HARD_HI).expect("default thresholds are valid")
}

/// One mask network: 3×3 entry projection, two residual blocks of two 3×3
/// convolutions, 1×1 exit projection to a single logit channel.
pub fn mask_net_specs(b: &mut SpecBuilder, prefix: &str, width: usize) {
    b.conv(&format!("{prefix}.entry"), 4, width, 3, 1);
    for r in 0..2 {
        b.conv(&format!("{prefix}.res{r}a"), width, width, 3, 1);
        b.conv(&format!("{prefix}.res{r}b"), width, width, 3, 1);
    }
    b.conv(&format!("{prefix}.exit"), width, 1, 1, 1);
}

/// Parameter names of the over/under mask networks.
pub const MASK_OVER: &str = "mask_over";
pub const MASK_UNDER: &str = "mask_under";

/// Both mask networks at the configured width.
pub fn mask_specs(config: &NetConfig) -> Vec<crate::net::ParamSpec> {
    let mut b = SpecBuilder::new();
    mask_net_specs(&mut b, MASK_OVER, config.mask_width);
    mask_net_specs(&mut b, MASK_UNDER, config.mask_width);
    b.finish()
}

/// Logits `[1, h, w]` of one mask network applied to `x: [4, h, w]`.
pub fn mask_net_graph(pv: &ParamVars, prefix: &str, x: Var, config: &NetConfig) -> Var {
    use crate::net::conv;
    let g = pv.graph;
    let act = config.activation;
    let mut h = g.activation(conv(pv, &format!("{prefix}.entry"), x, ConvSpec::same(3)), act);
    for r in 0..2 {
        let a = g.activation(conv(pv, &format!("{prefix}.res{r}a"), h, ConvSpec::same(3)), act);
        let b = conv(pv, &format!("{prefix}.res{r}b"), a, ConvSpec::same(3));
        h = g.add(h, b);
    }
    conv(pv, &format!("{prefix}.exit"), h, ConvSpec::same(1))
}

/// `(sigmoid(P_o(x)), sigmoid(P_u(x)))` as `[1, h, w]` maps.
pub fn soft_masks_graph(pv: &ParamVars, x: Var, config: &NetConfig) -> (Var, Var) {
    let g = pv.graph;
    let over = g.sigmoid(mask_net_graph(pv, MASK_OVER, x, config));
    let under = g.sigmoid(mask_net_graph(pv, MASK_UNDER, x, config));
    (over, under)
}

pub fn soft_masks(packed: &PackedRaw, params: &NetParams, config: &NetConfig) -> Result<MaskTriple> {
    params.check_against(&mask_specs(config))?;
    let g = Graph::new();
    let pv = ParamVars::bind(&g, params, false);
    let x = g.constant(packed.tensor().hwc_to_chw()?);
    let (over, under) = soft_masks_graph(&pv, x, config);
    let (h, w) = (packed.height(), packed.width());
    let to_map = |v: Var, which: &str| -> Result<Tensor> {
        let t = (*g.value(v)).clone();
        if let Some(i) = t.first_non_finite() {
            return Err(Error::Numerical {
                location: format!("{which} mask at ({}, {})", i / w, i % w),
            });
        }
        t.reshape(&[h, w, 1])
    };
    MaskTriple::from_over_under(to_map(over, "over")?, to_map(under, "under")?)
}

/// `mean|over_s − over_h| + mean|under_s − under_h|`.
pub fn mask_loss(soft: &MaskTriple, hard: &MaskTriple) -> Result<f64> {
    if soft.over.shape() != hard.over.shape() || soft.under.shape() != hard.under.shape() {
        return shape_err(format!(
            "mask shapes differ: {:?} vs {:?}",
            soft.shape(),
            hard.shape()
        ));
    }
    let l1 = |a: &Tensor, b: &Tensor| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    };
    Ok(l1(&soft.over, &hard.over) + l1(&soft.under, &hard.under))
}

/// Differentiable [`mask_loss`] for `[1, h, w]` soft maps on a graph.
pub fn mask_loss_graph(g: &Graph, over: Var, under: Var, hard: &MaskTriple) -> Result<Var> {
    let (ho, hu) = hard.as_feature_maps()?;
    if g.shape(over) != ho.shape() || g.shape(under) != hu.shape() {
        return shape_err("soft and hard mask shapes differ");
    }
    let a = g.l1_mean(over, &ho);
    let b = g.l1_mean(under, &hu);
    Ok(g.add(a, b))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn packed_from(px: &[[f64; 4]], h: usize, w: usize) -> PackedRaw {
        PackedRaw::new(Tensor::new(&[h, w, 4], px.concat()).unwrap()).unwrap()
    }

    fn random_packed(seed: u64, h: usize, w: usize) -> PackedRaw {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PackedRaw::new(Tensor::from_fn(&[h, w, 4], |_| rng.random::<f64>())).unwrap()
    }

    fn mask_params(seed: u64) -> (NetParams, NetConfig) {
        let config = NetConfig::default();
        (NetParams::from_specs(&mask_specs(&config), seed), config)
    }

    #[test]
    fn hard_mask_examples() {
        let p = packed_from(&[[0.1, 0.99, 0.2, 0.97], [0.5; 4], [0.04; 4]], 1, 3);
        let m = hard_masks(&p, HARD_LO, HARD_HI).unwrap();
        assert_eq!(m.over.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(m.under.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(m.well.data(), &[0.0, 1.0, 0.0]);
        assert!(matches!(hard_masks(&p, 0.5, 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn hard_masks_are_idempotent_on_their_output() {
        let p = random_packed(3, 6, 6);
        let m = hard_masks(&p, 0.2, 0.8).unwrap();
        // embed: over -> 1, under -> 0, well -> 0.5 (mid-tone)
        let embedded: Vec<f64> = m
            .over
            .data()
            .iter()
            .zip(m.under.data())
            .flat_map(|(&o, &u)| {
                let v = if o == 1.0 { 1.0 } else if u == 1.0 { 0.0 } else { 0.5 };
                [v; 4]
            })
            .collect();
        let again = hard_masks(&PackedRaw::new(Tensor::new(&[6, 6, 4], embedded).unwrap()).unwrap(), 0.2, 0.8).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn soft_masks_saturate_with_large_negative_bias() {
        let (mut params, config) = mask_params(1);
        for net in [MASK_OVER, MASK_UNDER] {
            let w = params.expect_mut(&format!("{net}.exit.weight"));
            *w = Tensor::zeros(w.shape());
            *params.expect_mut(&format!("{net}.exit.bias")) = Tensor::scalar(-20.0);
        }
        let m = soft_masks(&random_packed(2, 4, 4), &params, &config).unwrap();
        assert!(m.over.data().iter().all(|&v| v < 1e-8 && v > 0.0));
        assert!(m.under.data().iter().all(|&v| v < 1e-8 && v > 0.0));
        assert!(m.well.data().iter().all(|&v| v > 1.0 - 1e-8));
    }

    #[test]
    fn soft_masks_surface_non_finite_values() {
        let (mut params, config) = mask_params(1);
        *params.expect_mut("mask_over.exit.bias") = Tensor::scalar(f64::NAN);
        let err = soft_masks(&random_packed(2, 4, 4), &params, &config).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "{err}");
    }

    #[test]
    fn mask_loss_examples() {
        let p = random_packed(5, 4, 4);
        let hard = default_hard_masks(&p);
        assert_eq!(mask_loss(&hard, &hard).unwrap(), 0.0);
        let shifted = MaskTriple {
            over: hard.over.map(|v| v + 0.1),
            ..hard.clone()
        };
        assert!((mask_loss(&shifted, &hard).unwrap() - 0.1).abs() < 1e-12);
        let small = default_hard_masks(&random_packed(5, 2, 2));
        assert!(matches!(mask_loss(&small, &hard), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_map = || Tensor::from_fn(&[5, 7, 1], |_| rng.random::<f64>());
        let soft = MaskTriple::from_over_under(rand_map(), rand_map()).unwrap();
        let hard = MaskTriple::from_over_under(rand_map(), rand_map()).unwrap();
        let mut over = 0.0;
        let mut under = 0.0;
        for i in 0..35 {
            over += (soft.over.data()[i] - hard.over.data()[i]).abs();
            under += (soft.under.data()[i] - hard.under.data()[i]).abs();
        }
        let oracle = over / 35.0 + under / 35.0;
        let got = mask_loss(&soft, &hard).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);

        // graph version agrees
        let g = Graph::new();
        let (so, su) = soft.as_feature_maps().unwrap();
        let l = mask_loss_graph(&g, g.constant(so), g.constant(su), &hard).unwrap();
        assert!((g.value(l).item() - oracle).abs() <= 1e-12 * oracle);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn soft_mask_ranges_and_well_rule(pseed in 0u64..1000, iseed in 0u64..1000) {
            let (params, config) = mask_params(pseed);
            let m = soft_masks(&random_packed(iseed, 4, 6), &params, &config).unwrap();
            for i in 0..24 {
                let (o, u, w) = (m.over.data()[i], m.under.data()[i], m.well.data()[i]);
                prop_assert!(o > 0.0 && o < 1.0 && u > 0.0 && u < 1.0);
                prop_assert_eq!(w, (1.0 - o - u).max(0.0));
                prop_assert!(o + u + w >= 1.0 - 1e-12);
                if o + u <= 1.0 {
                    prop_assert!((o + u + w - 1.0).abs() < 1e-15);
                }
            }
        }
    }
}
