//! Synthetic HDR scenes and a linear Raw capture model: per-channel
//! sensitivity, exposure gain, optional Poisson-Gaussian noise, clipping and
//! quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::raw_model::{PackedRaw, RawMosaic, CH_B, CH_G1, CH_G2, CH_R};
use crate::tensor::Tensor;

/// Channel means of the reference capture set (R, G, B) in sensor counts.
pub const REFERENCE_CHANNEL_MEANS: [f64; 3] = [704.93, 1273.61, 942.00];

/// Relative gains derived from [`REFERENCE_CHANNEL_MEANS`], green = 1.
pub const DEFAULT_SENSITIVITY: [f64; 3] = [
    REFERENCE_CHANNEL_MEANS[0] / REFERENCE_CHANNEL_MEANS[1],
    1.0,
    REFERENCE_CHANNEL_MEANS[2] / REFERENCE_CHANNEL_MEANS[1],
];

pub const DEFAULT_EVS: [f64; 3] = [-3.0, 0.0, 3.0];

/// Linear RGB radiance at the reference exposure, `(H, W, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneHdr(Tensor);

impl SceneHdr {
    pub fn new(radiance: Tensor) -> Result<Self> {
        let [_, _, c] = radiance.dims3()?;
        if c != 3 {
            return shape_err(format!("scene radiance needs 3 channels, got {c}"));
        }
        if radiance.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return arg_err("scene radiance must be finite and non-negative");
        }
        Ok(Self(radiance))
    }

    pub fn radiance(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0.data()[(y * self.width() + x) * 3 + c]
    }

    /// `log2(max / smallest positive value)`.
    pub fn dynamic_range_stops(&self) -> f64 {
        let max = self.0.max();
        let min_pos = self
            .0
            .data()
            .iter()
            .copied()
            .filter(|v| *v > 0.0)
            .fold(f64::INFINITY, f64::min);
        (max / min_pos).log2()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraProfile {
    /// Relative channel gains `(s_r, s_g, s_b)`.
    pub sensitivity: [f64; 3],
    pub bit_depth: u32,
    pub black_level: u32,
    pub white_level: u32,
    /// Read noise standard deviation in counts.
    #[serde(default)]
    pub read_noise_sigma: f64,
    /// Counts per photo-electron; 0 disables shot noise.
    #[serde(default)]
    pub shot_noise_gain: f64,
}

impl Default for CameraProfile {
    fn default() -> Self {
        Self {
            sensitivity: DEFAULT_SENSITIVITY,
            bit_depth: 14,
            black_level: 512,
            white_level: 16383,
            read_noise_sigma: 0.0,
            shot_noise_gain: 0.0,
        }
    }
}

impl CameraProfile {
    /// Level, sensitivity and noise sanity; sufficient for [`capture`].
    pub fn validate_levels(&self) -> Result<()> {
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::InvalidProfile(format!("bit depth {}", self.bit_depth)));
        }
        let max_code = (1u32 << self.bit_depth) - 1;
        if self.black_level >= self.white_level || self.white_level > max_code {
            return Err(Error::InvalidProfile(format!(
                "need black ({}) < white ({}) <= {max_code}",
                self.black_level, self.white_level
            )));
        }
        if self.sensitivity.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidProfile("sensitivities must be positive".into()));
        }
        if !(self.read_noise_sigma >= 0.0 && self.shot_noise_gain >= 0.0) {
            return Err(Error::InvalidProfile("noise parameters must be >= 0".into()));
        }
        Ok(())
    }

    /// Full invariant check, including green-dominant sensitivities.
    pub fn validate(&self) -> Result<()> {
        self.validate_levels()?;
        let [r, g, b] = self.sensitivity;
        if !(g > r && g > b) {
            return Err(Error::InvalidProfile(format!(
                "green sensitivity must dominate, got ({r}, {g}, {b})"
            )));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }

    pub fn is_noiseless(&self) -> bool {
        self.read_noise_sigma == 0.0 && self.shot_noise_gain == 0.0
    }
}

/// Scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    /// Stops between the brightest emitter and the darkest shadow well.
    pub dynamic_range_bits: u32,
    /// log2 of the geometric centre of that range.
    #[serde(default)]
    pub center_log2: f64,
    /// Disable colour tints so every pixel is grey.
    #[serde(default)]
    pub neutral: bool,
    /// Debug mode: fill with a single radiance value.
    #[serde(default)]
    pub constant: Option<f64>,
}

impl SceneOptions {
    pub fn new(dynamic_range_bits: u32) -> Self {
        Self {
            dynamic_range_bits,
            center_log2: 0.0,
            neutral: false,
            constant: None,
        }
    }
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self::new(20)
    }
}

pub fn render_scene(seed: u64, size: (usize, usize), dynamic_range_bits: u32) -> Result<SceneHdr> {
    render_scene_with(seed, size, &SceneOptions::new(dynamic_range_bits))
}

/// Smooth random field on `[0, 1]`: bilinear interpolation of a coarse
/// lattice with smoothstep weights.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64 * cells as f64;
        let iy = (fy.floor() as usize).min(cells - 1);
        let ty = smooth(fy - iy as f64);
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64 * cells as f64;
            let ix = (fx.floor() as usize).min(cells - 1);
            let tx = smooth(fx - ix as f64);
            let l = |a: usize, b: usize| lattice[a * n + b];
            let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
            let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, rel: (f64, f64)) -> Self {
        let side = h.min(w) as f64;
        let r = (rng.random_range(rel.0..rel.1) * side).max(1.5);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        if rng.random_bool(0.5) {
            Shape::Disk { cy, cx, r }
        } else {
            let ry = r * rng.random_range(0.6..1.4);
            let rx = r * rng.random_range(0.6..1.4);
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { cy, cx, .. } => (cy, cx),
            Shape::Rect { y0, x0, y1, x1 } => ((y0 + y1) / 2.0, (x0 + x1) / 2.0),
        }
    }

    /// Membership is decided per 2×2 CFA tile (at the tile centre) so that
    /// object edges never split a Bayer quad.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = ((y & !1) as f64 + 1.0, (x & !1) as f64 + 1.0);
        match *self {
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py <= y1 && px >= x0 && px <= x1,
        }
    }
}

/// Deterministic synthetic scene: a smooth mid-tone base, shadow wells down
/// to the bottom of the requested range and hard-edged emitters up to its top.
pub fn render_scene_with(seed: u64, size: (usize, usize), opts: &SceneOptions) -> Result<SceneHdr> {
    let (h, w) = size;
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("scene size must be even and non-zero, got {h}x{w}"));
    }
    if let Some(v) = opts.constant {
        if !(v.is_finite() && v >= 0.0) {
            return arg_err("constant radiance must be finite and >= 0");
        }
        return SceneHdr::new(Tensor::full(&[h, w, 3], v));
    }
    if !(8..=24).contains(&opts.dynamic_range_bits) {
        return arg_err(format!(
            "dynamic_range_bits must be in [8, 24], got {}",
            opts.dynamic_range_bits
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = opts.dynamic_range_bits as f64;
    let hi_log2 = opts.center_log2 + (bits / 2.0).ceil();
    let lo_log2 = hi_log2 - bits;
    let (max_rad, min_rad) = (hi_log2.exp2(), lo_log2.exp2());

    let base = value_noise(&mut rng, h, w, 4);
    let tints: Vec<Vec<f64>> = (0..3).map(|_| value_noise(&mut rng, h, w, 3)).collect();
    let mut rad = vec![0.0; h * w * 3];
    for p in 0..h * w {
        let level = (-4.0 + 3.5 * base[p]).exp2();
        for c in 0..3 {
            let tint = if opts.neutral {
                1.0
            } else {
                (0.6 * (tints[c][p] - 0.5)).exp2()
            };
            rad[p * 3 + c] = (level * tint).clamp(min_rad, max_rad);
        }
    }

    let n_wells = rng.random_range(1..=3);
    let n_emitters = rng.random_range(1..=3);
    let mut objects = Vec::new();
    for i in 0..n_wells {
        let shape = Shape::random(&mut rng, h, w, (0.06, 0.14));
        let level = if i == 0 {
            min_rad
        } else {
            (lo_log2 + rng.random_range(0.0..2.0)).exp2()
        };
        objects.push((shape, level));
    }
    for i in 0..n_emitters {
        let shape = Shape::random(&mut rng, h, w, (0.04, 0.1));
        let level = if i == 0 {
            max_rad
        } else {
            (hi_log2 - rng.random_range(0.0..2.0)).exp2()
        };
        objects.push((shape, level));
    }
    for (shape, level) in &objects {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    rad[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(*level);
                }
            }
        }
    }
    // Both range extremes must survive overlapping objects.
    let anchors = [(objects[0].0, min_rad), (objects[n_wells].0, max_rad)];
    for (shape, level) in anchors {
        let (cy, cx) = shape.center();
        let y = (cy.max(0.0) as usize).min(h - 1) & !1;
        let x = (cx.max(0.0) as usize).min(w - 1) & !1;
        if !rad.chunks_exact(3).any(|px| px[0] == level) {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = (y + dy) * w + x + dx;
                rad[p * 3..p * 3 + 3].fill(level);
            }
        }
    }
    SceneHdr::new(Tensor::new(&[h, w, 3], rad)?)
}

/// Colour of the CFA site at `(y, x)` as an RGB index.
#[inline]
pub fn cfa_color(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Expose the scene at `ev` stops relative to the reference exposure.
pub fn capture(scene: &SceneHdr, profile: &CameraProfile, ev: f64, seed: u64) -> Result<RawMosaic> {
    profile.validate_levels()?;
    let (h, w) = (scene.height(), scene.width());
    let range = f64::from(profile.white_level - profile.black_level);
    let gain = ev.exp2() * range;
    let black = f64::from(profile.black_level);
    let max_code = f64::from(profile.max_code());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let read = (profile.read_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, profile.read_noise_sigma).expect("sigma > 0"));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let c = cfa_color(y, x);
            let mut signal = gain * profile.sensitivity[c] * scene.at(y, x, c);
            if profile.shot_noise_gain > 0.0 && signal > 0.0 {
                let electrons = signal / profile.shot_noise_gain;
                let sample: f64 = Poisson::new(electrons)
                    .map(|d| d.sample(&mut rng))
                    .unwrap_or(electrons);
                signal = sample * profile.shot_noise_gain;
            }
            if let Some(n) = &read {
                signal += n.sample(&mut rng);
            }
            data.push((signal + black).round().clamp(0.0, max_code) as u16);
        }
    }
    RawMosaic::new(
        h,
        w,
        data,
        profile.black_level,
        profile.white_level,
        profile.bit_depth,
        ev,
    )
}

/// Mosaics of one scene at increasing exposure values.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureStack {
    pub mosaics: Vec<RawMosaic>,
    pub evs: Vec<f64>,
}

impl ExposureStack {
    pub fn new(mosaics: Vec<RawMosaic>) -> Result<Self> {
        let evs = mosaics.iter().map(|m| m.exposure_ev).collect();
        let stack = Self { mosaics, evs };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.mosaics.first() else {
            return arg_err("exposure stack is empty");
        };
        if self.evs.len() != self.mosaics.len() {
            return arg_err("one exposure value per mosaic required");
        }
        if self.evs.windows(2).any(|p| !(p[0] < p[1])) {
            return arg_err("exposure values must be strictly increasing");
        }
        for m in &self.mosaics[1..] {
            if (m.height(), m.width()) != (first.height(), first.width()) {
                return shape_err("stack mosaics differ in shape");
            }
            if (m.black_level, m.white_level, m.bit_depth)
                != (first.black_level, first.white_level, first.bit_depth)
            {
                return Err(Error::InvalidProfile("stack mosaics differ in levels".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mosaics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mosaics.is_empty()
    }

    /// The mosaic captured at `ev`, if present.
    pub fn at_ev(&self, ev: f64) -> Option<&RawMosaic> {
        self.evs.iter().position(|e| *e == ev).map(|i| &self.mosaics[i])
    }
}

pub fn bracket(
    scene: &SceneHdr,
    profile: &CameraProfile,
    evs: &[f64],
    seed: u64,
) -> Result<ExposureStack> {
    if evs.is_empty() {
        return arg_err("at least one exposure value is required");
    }
    let mosaics = evs
        .iter()
        .enumerate()
        .map(|(i, &ev)| capture(scene, profile, ev, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    ExposureStack::new(mosaics)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrgbOptions {
    /// Per-channel (R, G, B) gains; `None` disables white balance.
    pub white_balance: Option<[f64; 3]>,
    /// Display gamma; `None` leaves values linear.
    pub gamma: Option<f64>,
}

impl Default for SrgbOptions {
    fn default() -> Self {
        Self {
            white_balance: Some(DEFAULT_SENSITIVITY.map(|s| 1.0 / s)),
            gamma: Some(2.2),
        }
    }
}

/// A minimal camera pipeline: green averaging, white balance, gamma and
/// 8-bit quantization. Output is `(h, w, 3)` with values `k / 255`.
pub fn simulate_srgb(packed: &PackedRaw) -> Tensor {
    simulate_srgb_with(packed, &SrgbOptions::default())
}

pub fn simulate_srgb_with(packed: &PackedRaw, opts: &SrgbOptions) -> Tensor {
    let (h, w) = (packed.height(), packed.width());
    let wb = opts.white_balance.unwrap_or([1.0; 3]);
    let mut out = Vec::with_capacity(h * w * 3);
    for px in packed.tensor().data().chunks_exact(4) {
        let rgb = [px[CH_R], 0.5 * (px[CH_G1] + px[CH_G2]), px[CH_B]];
        for c in 0..3 {
            let mut v = (rgb[c] * wb[c]).clamp(0.0, 1.0);
            if let Some(g) = opts.gamma {
                v = v.powf(1.0 / g);
            }
            out.push((v * 255.0).round() / 255.0);
        }
    }
    Tensor::new(&[h, w, 3], out).expect("shape")
}
