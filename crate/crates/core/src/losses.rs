//! Training objective: log-space reconstruction, a pluggable perceptual term
//! and the mask constraint.
//!
//! Graph variants take the prediction as a `[c, h, w]` variable and the
//! reference as a constant tensor in the same layout.

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::masks::{mask_loss, mask_loss_graph, MaskTriple};
use crate::raw_model::HdrImage;
use crate::tensor::Tensor;

/// One 16-bit quantization step.
pub const LOG_EPS: f64 = 1.0 / 65536.0;
pub use crate::metrics::DEFAULT_MU;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean of `(ln(h + eps) − ln(href + eps))²`.
pub fn log_l2(h: &HdrImage, href: &HdrImage, eps: f64) -> Result<f64> {
    check_pair(h.tensor(), href.tensor())?;
    if eps <= 0.0 {
        return arg_err("log_l2 eps must be positive");
    }
    let n = h.tensor().len() as f64;
    Ok(h.tensor()
        .data()
        .iter()
        .zip(href.tensor().data())
        .map(|(a, b)| ((a + eps).ln() - (b + eps).ln()).powi(2))
        .sum::<f64>()
        / n)
}

pub fn log_l2_graph(g: &Graph, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_pair(&Tensor::zeros(&g.shape(pred)), target)?;
    Ok(g.log_l2(pred, target, eps))
}

/// A perceptual distance, differentiable in its first argument.
pub trait PerceptualLoss {
    fn name(&self) -> &str;

    /// Distance between `pred` and `target`, both `[c, h, w]`.
    fn loss_graph(&self, g: &Graph, pred: Var, target: &Tensor) -> Result<Var>;

    fn loss(&self, h: &HdrImage, href: &HdrImage) -> Result<f64> {
        check_pair(h.tensor(), href.tensor())?;
        let g = Graph::new();
        let pred = g.constant(h.tensor().hwc_to_chw()?);
        let l = self.loss_graph(&g, pred, &href.tensor().hwc_to_chw()?)?;
        let v = g.value(l).item();
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Numerical {
                location: format!("perceptual loss '{}' returned {v}", self.name()),
            });
        }
        Ok(v)
    }
}

/// L1 distance between finite-difference gradient maps of a Gaussian pyramid
/// built on μ-law tone-mapped inputs. `mu = None` skips the tone mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidGradientLoss {
    pub levels: usize,
    pub mu: Option<f64>,
}

impl Default for PyramidGradientLoss {
    fn default() -> Self {
        Self {
            levels: 3,
            mu: Some(DEFAULT_MU),
        }
    }
}

const BINOMIAL: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

fn depthwise_kernel(c: usize, kh: usize, kw: usize, taps: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(&[c, 1, kh, kw], |i| {
        let r = i % (kh * kw);
        taps(r / kw, r % kw)
    })
}

/// 5×5 binomial blur with stride 2, renormalized at the borders so that
/// constants pass through unchanged.
fn blur_down(g: &Graph, x: Var) -> Var {
    let shape = g.shape(x);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let spec = ConvSpec::strided(2, 2).with_groups(c);
    let kernel = depthwise_kernel(c, 5, 5, |r, s| BINOMIAL[r] * BINOMIAL[s]);
    let blurred = g.conv2d(x, g.constant(kernel.clone()), None, spec);
    let ones = Graph::new();
    let norm = ones.conv2d(
        ones.constant(Tensor::full(&[c, h, w], 1.0)),
        ones.constant(kernel),
        None,
        spec,
    );
    let inv = ones.value(norm).map(|v| 1.0 / v);
    g.mul(blurred, g.constant(inv))
}

/// Horizontal and vertical forward differences; a direction is absent when
/// the map is a single pixel wide in it.
fn gradient_maps(g: &Graph, x: Var) -> Vec<Var> {
    let shape = g.shape(x);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let spec = ConvSpec::valid().with_groups(c);
    let mut out = Vec::with_capacity(2);
    if w >= 2 {
        let dx = depthwise_kernel(c, 1, 2, |_, s| if s == 0 { -1.0 } else { 1.0 });
        out.push(g.conv2d(x, g.constant(dx), None, spec));
    }
    if h >= 2 {
        let dy = depthwise_kernel(c, 2, 1, |r, _| if r == 0 { -1.0 } else { 1.0 });
        out.push(g.conv2d(x, g.constant(dy), None, spec));
    }
    out
}

impl PyramidGradientLoss {
    /// Pyramid levels after the optional tone mapping, finest first.
    pub fn pyramid(&self, g: &Graph, x: Var, peak: f64) -> Vec<Var> {
        let mut level = match self.mu {
            Some(mu) => g.mu_tonemap(x, mu, peak),
            None => x,
        };
        let mut out = vec![level];
        for _ in 1..self.levels {
            level = blur_down(g, level);
            out.push(level);
        }
        out
    }
}

impl PerceptualLoss for PyramidGradientLoss {
    fn name(&self) -> &str {
        "pyramid_gradient"
    }

    fn loss_graph(&self, g: &Graph, pred: Var, target: &Tensor) -> Result<Var> {
        check_pair(&Tensor::zeros(&g.shape(pred)), target)?;
        if self.levels == 0 {
            return arg_err("pyramid needs at least one level");
        }
        if let Some(mu) = self.mu {
            if mu <= 0.0 {
                return arg_err("mu must be positive");
            }
        }
        // An all-zero reference tone-maps against a unit ceiling.
        let peak = if target.max() > 0.0 { target.max() } else { 1.0 };

        let reference = Graph::new();
        let ref_levels = self.pyramid(&reference, reference.constant(target.clone()), peak);
        let pred_levels = self.pyramid(g, pred, peak);

        let mut terms = Vec::new();
        for (p, r) in pred_levels.into_iter().zip(ref_levels) {
            let rg = gradient_maps(&reference, r);
            for (pm, rm) in gradient_maps(g, p).into_iter().zip(rg) {
                terms.push(g.l1_mean(pm, &reference.value(rm)));
            }
        }
        if terms.is_empty() {
            return shape_err("input too small for gradient maps");
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t);
        }
        Ok(g.scale(total, 1.0 / self.levels as f64))
    }
}

/// Weights of the perceptual and mask terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tau1: 0.5, tau2: 0.5 }
    }
}

/// `log_l2 + τ1·perceptual + τ2·mask_loss`.
pub fn total_loss(
    h: &HdrImage,
    href: &HdrImage,
    soft: &MaskTriple,
    hard: &MaskTriple,
    weights: LossWeights,
    perceptual: &dyn PerceptualLoss,
) -> Result<f64> {
    let rec = log_l2(h, href, LOG_EPS)?;
    let per = if weights.tau1 != 0.0 {
        perceptual.loss(h, href)?
    } else {
        0.0
    };
    let mask = mask_loss(soft, hard)?;
    Ok(rec + weights.tau1 * per + weights.tau2 * mask)
}

/// The individual terms of the objective on a graph. Terms with a zero
/// weight, and the mask term when no soft masks exist, are not built.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub log_l2: Var,
    pub perceptual: Option<Var>,
    pub mask: Option<Var>,
}

pub fn loss_terms_graph(
    g: &Graph,
    pred: Var,
    target: &Tensor,
    soft: Option<(Var, Var)>,
    hard: &MaskTriple,
    weights: LossWeights,
    perceptual: &dyn PerceptualLoss,
) -> Result<LossTerms> {
    let rec = log_l2_graph(g, pred, target, LOG_EPS)?;
    let mut total = rec;
    let mut per = None;
    if weights.tau1 != 0.0 {
        let p = perceptual.loss_graph(g, pred, target)?;
        total = g.add(total, g.scale(p, weights.tau1));
        per = Some(p);
    }
    let mut mask = None;
    if let (Some((over, under)), true) = (soft, weights.tau2 != 0.0) {
        let m = mask_loss_graph(g, over, under, hard)?;
        total = g.add(total, g.scale(m, weights.tau2));
        mask = Some(m);
    }
    Ok(LossTerms {
        total,
        log_l2: rec,
        perceptual: per,
        mask,
    })
}

/// Graph form of [`total_loss`]. Without soft masks the mask term is absent.
pub fn total_loss_graph(
    g: &Graph,
    pred: Var,
    target: &Tensor,
    soft: Option<(Var, Var)>,
    hard: &MaskTriple,
    weights: LossWeights,
    perceptual: &dyn PerceptualLoss,
) -> Result<Var> {
    Ok(loss_terms_graph(g, pred, target, soft, hard, weights, perceptual)?.total)
}
