//! Evaluation metrics: linear PSNR, PSNR on μ-law tone-mapped images, SSIM
//! and MS-SSIM.
//!
//! Images are `[h, w, c]`. Where a peak is needed it comes from the
//! reference, which is always the second argument.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::raw_model::HdrImage;
use crate::tensor::Tensor;

pub const DEFAULT_MU: f64 = 5000.0;
/// Ceiling used when an infinite PSNR is tabulated.
pub const PSNR_TABLE_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_tonemap_args(mu: f64, peak: f64) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return arg_err(format!("mu must be positive, got {mu}"));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return arg_err(format!("peak must be positive, got {peak}"));
    }
    Ok(())
}

/// `log(1 + μ·clamp(x/peak, 0, 1)) / log(1 + μ)` for one value.
#[inline]
pub fn mu_law(x: f64, mu: f64, peak: f64) -> f64 {
    (mu * (x / peak).clamp(0.0, 1.0)).ln_1p() / mu.ln_1p()
}

pub fn mu_tonemap(x: &Tensor, mu: f64, peak: f64) -> Result<Tensor> {
    check_tonemap_args(mu, peak)?;
    Ok(x.map(|v| mu_law(v, mu, peak)))
}

/// Peak of a reference image; an all-zero reference maps against 1.
pub fn reference_peak(reference: &Tensor) -> f64 {
    let m = reference.max();
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return shape_err("empty images");
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(peak² / MSE)`; identical images give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if !(peak > 0.0) {
        return arg_err(format!("peak must be positive, got {peak}"));
    }
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// PSNR between μ-law tone-mapped images.
pub fn psnr_mu(a: &Tensor, b: &Tensor, mu: f64, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    psnr(&mu_tonemap(a, mu, peak)?, &mu_tonemap(b, mu, peak)?, 1.0)
}

/// Caps `+∞` for tables and reports.
pub fn table_db(v: f64) -> f64 {
    v.min(PSNR_TABLE_CAP)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |f: &dyn Fn(usize) -> f64| filter_valid(&(0..h * w).map(f).collect::<Vec<_>>(), h, w, &k);
    let mu_a = prod(&|i| a[i]);
    let mu_b = prod(&|i| b[i]);
    let aa = prod(&|i| a[i] * a[i]);
    let bb = prod(&|i| b[i] * b[i]);
    let ab = prod(&|i| a[i] * b[i]);
    let n = mu_a.len() as f64;
    let (mut s, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let contrast = (2.0 * cov + c2) / (va + vb + c2);
        let luminance = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s += luminance * contrast;
        cs += contrast;
    }
    (s / n, cs / n)
}

fn planes(t: &Tensor) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let [h, w, c] = t.dims3()?;
    let data = t.data();
    let planes = (0..c)
        .map(|ch| (0..h * w).map(|p| data[p * c + ch]).collect())
        .collect();
    Ok((h, w, planes))
}

/// Per-channel `(ssim, cs)` averaged over channels.
fn ssim_terms(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    check_pair(a, b)?;
    let (h, w, pa) = planes(a)?;
    let (_, _, pb) = planes(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let (mut s, mut cs) = (0.0, 0.0);
    for (x, y) in pa.iter().zip(&pb) {
        let (ps, pcs) = ssim_plane(x, y, h, w);
        s += ps;
        cs += pcs;
    }
    let c = pa.len() as f64;
    Ok((s / c, cs / c))
}

/// Mean SSIM with an 11×11 Gaussian window (σ 1.5), dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ssim_terms(a, b)?.0)
}

fn downsample2(t: &Tensor) -> Tensor {
    let [h, w, c] = t.dims3().expect("rank checked");
    let (nh, nw) = (h / 2, w / 2);
    let d = t.data();
    Tensor::from_fn(&[nh, nw, c], |i| {
        let (y, x, ch) = (i / (nw * c), (i / c) % nw, i % c);
        let at = |yy: usize, xx: usize| d[(yy * w + xx) * c + ch];
        0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1))
    })
}

/// Five-scale MS-SSIM with 2×2 average downsampling between scales.
/// Negative per-scale terms are clamped to zero.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let [h, w, _] = a.dims3()?;
    let need = SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1);
    if h < need || w < need {
        return shape_err(format!("ms_ssim needs at least {need}x{need}, got {h}x{w}"));
    }
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut out = 1.0;
    for (scale, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (s, cs) = ssim_terms(&x, &y)?;
        if scale + 1 == MS_SSIM_WEIGHTS.len() {
            out *= s.max(0.0).powf(*weight);
        } else {
            out *= cs.max(0.0).powf(*weight);
            x = downsample2(&x);
            y = downsample2(&y);
        }
    }
    Ok(out)
}

/// One evaluated scene. PSNR values are capped at [`PSNR_TABLE_CAP`];
/// `ms_ssim` is absent for images too small for five scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene_id: String,
    pub psnr: f64,
    pub psnr_mu: f64,
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    pub mu: f64,
    pub peak: f64,
}

/// Scores `pred` against `reference`. Structural metrics run on tone-mapped
/// images; the peak is the reference maximum.
pub fn evaluate(scene_id: &str, pred: &HdrImage, reference: &HdrImage, mu: f64) -> Result<MetricReport> {
    let (a, b) = (pred.tensor(), reference.tensor());
    check_pair(a, b)?;
    let peak = reference_peak(b);
    let ta = mu_tonemap(a, mu, peak)?;
    let tb = mu_tonemap(b, mu, peak)?;
    let [h, w, _] = a.dims3()?;
    let need = SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1);
    Ok(MetricReport {
        scene_id: scene_id.to_string(),
        psnr: table_db(psnr(a, b, peak)?),
        psnr_mu: table_db(psnr(&ta, &tb, 1.0)?),
        ssim: ssim(&ta, &tb)?,
        ms_ssim: if h >= need && w >= need {
            Some(ms_ssim(&ta, &tb)?)
        } else {
            None
        },
        mu,
        peak,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(seed: u64, shape: &[usize], scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| scale * rng.random::<f64>())
    }

    #[test]
    fn tonemap_endpoints_and_midpoint() {
        let t = mu_tonemap(&Tensor::new(&[3], vec![0.0, 2.5, 5.0]).unwrap(), 5000.0, 5.0).unwrap();
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[2], 1.0);
        let oracle = 2501.0f64.ln() / 5001.0f64.ln();
        assert!((t.data()[1] - oracle).abs() < 1e-15);
        assert!(mu_tonemap(&t, 0.0, 1.0).is_err());
        assert!(mu_tonemap(&t, 1.0, -1.0).is_err());
    }

    #[test]
    fn psnr_closed_form_and_sentinel() {
        let a = random(1, &[6, 5, 4], 3.0);
        assert_eq!(psnr(&a, &a, 3.0).unwrap(), f64::INFINITY);
        assert_eq!(table_db(psnr(&a, &a, 3.0).unwrap()), 100.0);
        let e = 0.0123;
        let b = a.map(|v| v + e);
        let want = 20.0 * (3.0 / e).log10();
        assert!((psnr(&b, &a, 3.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let a = random(2, &[5, 7, 3], 2.0);
        let b = random(3, &[5, 7, 3], 2.0);
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a.data()[i] - b.data()[i]).powi(2);
        }
        let m = acc / a.len() as f64;
        assert!((mse(&a, &b).unwrap() - m).abs() <= 1e-12 * m);
        assert!((psnr(&a, &b, 2.0).unwrap() - 10.0 * (4.0 / m).log10()).abs() < 1e-9);
        assert!(psnr(&a, &random(1, &[5, 7, 2], 1.0), 1.0).is_err());
    }

    #[test]
    fn psnr_mu_composition_and_scale_invariance() {
        let a = random(4, &[8, 8, 4], 6.0);
        let b = random(5, &[8, 8, 4], 6.0);
        let peak = b.max();
        let direct = psnr_mu(&a, &b, DEFAULT_MU, peak).unwrap();
        let composed = psnr(
            &mu_tonemap(&a, DEFAULT_MU, peak).unwrap(),
            &mu_tonemap(&b, DEFAULT_MU, peak).unwrap(),
            1.0,
        )
        .unwrap();
        assert_eq!(direct, composed);
        let scaled = psnr_mu(&a.map(|v| v * 4.0), &b.map(|v| v * 4.0), DEFAULT_MU, peak * 4.0).unwrap();
        assert!((scaled - direct).abs() < 1e-9);
        assert_eq!(psnr_mu(&a, &a, DEFAULT_MU, peak).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let a = random(6, &[8, 8, 1], 1.0);
        let noise = random(7, &[8, 8, 1], 1.0).map(|v| v - 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.001, 0.01, 0.1, 1.0] {
            let p = psnr(&a.zip_map(&noise, |x, n| x + amp * n), &a, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    fn ssim_loop_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let [h, w, c] = a.dims3().unwrap();
        let mut k2 = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut total = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let mut acc = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for y in 0..=h - SSIM_WINDOW {
                for x in 0..=w - SSIM_WINDOW {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let k = k2[i][j] / total;
                            let va = a.data()[((y + i) * w + x + j) * c + ch];
                            let vb = b.data()[((y + i) * w + x + j) * c + ch];
                            ma += k * va;
                            mb += k * vb;
                            saa += k * va * va;
                            sbb += k * vb * vb;
                            sab += k * va * vb;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    acc += (2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2)
                        / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let a = random(8, &[16, 14, 2], 1.0);
        let b = random(9, &[16, 14, 2], 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_loop_oracle(&a, &b)).abs() < 1e-10);
        assert!(ssim(&random(1, &[10, 20, 1], 1.0), &random(2, &[10, 20, 1], 1.0)).is_err());
    }

    #[test]
    fn ssim_of_inverted_checkerboard() {
        let x = Tensor::from_fn(&[16, 16, 1], |i| ((i / 16 + i % 16) % 2) as f64);
        let inv = x.map(|v| 1.0 - v);
        let s = ssim(&x, &inv).unwrap();
        assert!(s < 0.2);
        assert!((s - ssim_loop_oracle(&x, &inv)).abs() < 1e-10);
    }

    #[test]
    fn ms_ssim_identity_and_range() {
        let a = random(10, &[176, 180, 1], 1.0);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = a.zip_map(&random(11, &[176, 180, 1], 0.3), |x, n| (x + n).min(1.0));
        let m = ms_ssim(&a, &b).unwrap();
        assert!(m > 0.0 && m < 1.0);
        assert!(ms_ssim(&random(1, &[170, 200, 1], 1.0), &random(1, &[170, 200, 1], 1.0)).is_err());
    }

    #[test]
    fn report_serializes() {
        let a = HdrImage::new(random(12, &[16, 16, 4], 8.0)).unwrap();
        let b = HdrImage::new(random(13, &[16, 16, 4], 8.0)).unwrap();
        let r = evaluate("s0", &a, &b, DEFAULT_MU).unwrap();
        assert!(r.psnr.is_finite() && r.psnr_mu.is_finite() && r.ms_ssim.is_none());
        assert_eq!(r.peak, b.tensor().max());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
        let same = evaluate("s1", &b, &b, DEFAULT_MU).unwrap();
        assert_eq!(same.psnr, PSNR_TABLE_CAP);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tonemap_strictly_increasing(x1 in 0.0f64..10.0, dx in 1e-6f64..10.0, mu in 1.0f64..1e4) {
            let peak = 20.0;
            prop_assert!(mu_law(x1, mu, peak) < mu_law(x1 + dx, mu, peak));
            prop_assert!((0.0..=1.0).contains(&mu_law(x1, mu, peak)));
        }
    }
}
