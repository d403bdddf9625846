//! Raw sensor frames, the packed RGBG representation, HDR images and the
//! guide-channel split used by the network.
//!
//! Packed channel order is `[R, G1, B, G2]`: for the RGGB tile at `(2i, 2j)`,
//! R is `(2i, 2j)`, G1 is `(2i, 2j+1)`, G2 is `(2i+1, 2j)` and B is
//! `(2i+1, 2j+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const CH_R: usize = 0;
pub const CH_G1: usize = 1;
pub const CH_B: usize = 2;
pub const CH_G2: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cfa {
    #[default]
    #[serde(rename = "RGGB")]
    Rggb,
}

/// Single-channel Bayer frame in sensor counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMosaic {
    height: usize,
    width: usize,
    data: Vec<u16>,
    pub cfa: Cfa,
    pub black_level: u32,
    pub white_level: u32,
    pub bit_depth: u32,
    pub exposure_ev: f64,
}

impl RawMosaic {
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<u16>,
        black_level: u32,
        white_level: u32,
        bit_depth: u32,
        exposure_ev: f64,
    ) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "{height}x{width} mosaic needs {} samples, got {}",
                height * width,
                data.len()
            ));
        }
        if !height.is_multiple_of(2) || !width.is_multiple_of(2) || height == 0 || width == 0 {
            return shape_err(format!("mosaic dimensions must be even and non-zero, got {height}x{width}"));
        }
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::InvalidProfile(format!("bit depth {bit_depth} outside 1..=16")));
        }
        let max_code = (1u32 << bit_depth) - 1;
        if black_level >= white_level || white_level > max_code {
            return Err(Error::InvalidProfile(format!(
                "need 0 <= black ({black_level}) < white ({white_level}) <= {max_code}"
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| u32::from(v) > max_code) {
            return Err(Error::InvalidProfile(format!(
                "sample {v} exceeds the {bit_depth}-bit range"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            cfa: Cfa::Rggb,
            black_level,
            white_level,
            bit_depth,
            exposure_ev,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Copy of the `h × w` window at `(y, x)`. Both offsets must be even so
    /// the CFA phase is preserved.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if !y.is_multiple_of(2) || !x.is_multiple_of(2) || y + h > self.height || x + w > self.width {
            return shape_err(format!(
                "crop {h}x{w} at ({y},{x}) invalid for {}x{} mosaic",
                self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w);
        for row in y..y + h {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + w]);
        }
        Self::new(
            h,
            w,
            data,
            self.black_level,
            self.white_level,
            self.bit_depth,
            self.exposure_ev,
        )
    }

    /// Normalize one sample: black maps to 0, white to 1, clamped.
    #[inline]
    pub fn normalize_value(&self, v: u16) -> f64 {
        let range = f64::from(self.white_level - self.black_level);
        ((f64::from(v) - f64::from(self.black_level)) / range).clamp(0.0, 1.0)
    }
}

/// Black-level subtraction and white-level scaling to `[0, 1]`, `[H, W]`.
pub fn normalize(mosaic: &RawMosaic) -> Result<Tensor> {
    if mosaic.white_level <= mosaic.black_level {
        return Err(Error::InvalidProfile("white level equals black level".into()));
    }
    let data = mosaic.data.iter().map(|&v| mosaic.normalize_value(v)).collect();
    Tensor::new(&[mosaic.height, mosaic.width], data)
}

/// Normalized `(h, w, 4)` packed Bayer image in `[R, G1, B, G2]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedRaw(Tensor);

impl PackedRaw {
    pub fn new(data: Tensor) -> Result<Self> {
        let [_, _, c] = data.dims3()?;
        if c != 4 {
            return shape_err(format!("packed raw needs 4 channels, got {c}"));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("packed raw values must lie in [0, 1]".into()));
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0.data()[(y * self.width() + x) * 4 + c]
    }
}

/// Non-negative linear radiance, `(h, w, 4)` in packed channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage(Tensor);

impl HdrImage {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims3()?;
        if let Some(i) = data.data().iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Argument(format!(
                "HDR values must be finite and non-negative (element {i} is {})",
                data.data()[i]
            )));
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.dims3().expect("validated at construction")
    }

    pub fn height(&self) -> usize {
        self.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.shape()[1]
    }

    /// Spatial crop in packed coordinates.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        let [hh, ww, c] = self.shape();
        if y + h > hh || x + w > ww {
            return shape_err(format!("crop {h}x{w} at ({y},{x}) outside {hh}x{ww}"));
        }
        let mut out = Vec::with_capacity(h * w * c);
        for row in y..y + h {
            let start = (row * ww + x) * c;
            out.extend_from_slice(&self.0.data()[start..start + w * c]);
        }
        Ok(Self(Tensor::new(&[h, w, c], out)?))
    }
}

/// Green (under-exposure) and red/blue (over-exposure) guide images.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidePair {
    /// `(h, w, 2)`: `[G1, G2]`
    pub green: Tensor,
    /// `(h, w, 2)`: `[R, B]`
    pub redblue: Tensor,
}

pub fn pack(mosaic: &RawMosaic) -> Result<PackedRaw> {
    if !mosaic.height.is_multiple_of(2) || !mosaic.width.is_multiple_of(2) {
        return shape_err("mosaic dimensions must be even");
    }
    if mosaic.white_level <= mosaic.black_level {
        return Err(Error::InvalidProfile("white level equals black level".into()));
    }
    let (h, w) = (mosaic.height / 2, mosaic.width / 2);
    let mut out = vec![0.0; h * w * 4];
    for i in 0..h {
        for j in 0..w {
            let px = &mut out[(i * w + j) * 4..(i * w + j + 1) * 4];
            px[CH_R] = mosaic.normalize_value(mosaic.at(2 * i, 2 * j));
            px[CH_G1] = mosaic.normalize_value(mosaic.at(2 * i, 2 * j + 1));
            px[CH_G2] = mosaic.normalize_value(mosaic.at(2 * i + 1, 2 * j));
            px[CH_B] = mosaic.normalize_value(mosaic.at(2 * i + 1, 2 * j + 1));
        }
    }
    Ok(PackedRaw(Tensor::new(&[h, w, 4], out)?))
}

/// Inverse spatial arrangement of [`pack`], returning the normalized `[H, W]` mosaic.
pub fn unpack(packed: &Tensor) -> Result<Tensor> {
    let [h, w, c] = packed.dims3()?;
    if c != 4 {
        return shape_err(format!("packed raw needs 4 channels, got {c}"));
    }
    let (hh, ww) = (2 * h, 2 * w);
    let mut out = vec![0.0; hh * ww];
    let d = packed.data();
    for i in 0..h {
        for j in 0..w {
            let px = &d[(i * w + j) * 4..(i * w + j + 1) * 4];
            out[2 * i * ww + 2 * j] = px[CH_R];
            out[2 * i * ww + 2 * j + 1] = px[CH_G1];
            out[(2 * i + 1) * ww + 2 * j] = px[CH_G2];
            out[(2 * i + 1) * ww + 2 * j + 1] = px[CH_B];
        }
    }
    Tensor::new(&[hh, ww], out)
}

pub fn extract_guides(packed: &PackedRaw) -> GuidePair {
    let t = packed.tensor();
    let (h, w) = (packed.height(), packed.width());
    let mut green = Vec::with_capacity(h * w * 2);
    let mut redblue = Vec::with_capacity(h * w * 2);
    for px in t.data().chunks_exact(4) {
        green.extend_from_slice(&[px[CH_G1], px[CH_G2]]);
        redblue.extend_from_slice(&[px[CH_R], px[CH_B]]);
    }
    GuidePair {
        green: Tensor::new(&[h, w, 2], green).expect("shape"),
        redblue: Tensor::new(&[h, w, 2], redblue).expect("shape"),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mosaic(h: usize, w: usize, data: Vec<u16>) -> RawMosaic {
        RawMosaic::new(h, w, data, 512, 16383, 14, 0.0).unwrap()
    }

    #[test]
    fn normalize_endpoints_and_interior() {
        let m = mosaic(2, 2, vec![512, 16383, 8447, 0]);
        let n = normalize(&m).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
        let expected = (8447.0 - 512.0) / (16383.0 - 512.0);
        assert!((n.data()[2] - expected).abs() < 1e-15);
        // below black clamps to zero
        assert_eq!(n.data()[3], 0.0);
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(matches!(
            RawMosaic::new(2, 2, vec![0; 4], 100, 100, 14, 0.0),
            Err(Error::InvalidProfile(_))
        ));
        assert!(RawMosaic::new(2, 2, vec![0; 4], 0, 20000, 14, 0.0).is_err());
        assert!(RawMosaic::new(2, 2, vec![20000; 4], 0, 16383, 14, 0.0).is_err());
        assert!(matches!(
            RawMosaic::new(3, 2, vec![0; 6], 0, 100, 14, 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pack_single_tile() {
        let m = mosaic(2, 2, vec![1000, 2000, 3000, 4000]);
        let p = pack(&m).unwrap();
        assert_eq!(p.tensor().shape(), &[1, 1, 4]);
        let nv = |v: u16| m.normalize_value(v);
        // r = (0,0), g1 = (0,1), g2 = (1,0), b = (1,1)
        assert_eq!(p.tensor().data(), &[nv(1000), nv(2000), nv(4000), nv(3000)]);
    }

    #[test]
    fn pack_matches_index_loop() {
        let data: Vec<u16> = (0..16).map(|i| 600 + 997 * i as u16).collect();
        let m = mosaic(4, 4, data.clone());
        let p = pack(&m).unwrap();
        let scale = |v: u16| (f64::from(v) - 512.0) / 15871.0;
        for i in 0..2 {
            for j in 0..2 {
                let tile = |dy: usize, dx: usize| data[(2 * i + dy) * 4 + 2 * j + dx];
                let want = [scale(tile(0, 0)), scale(tile(0, 1)), scale(tile(1, 1)), scale(tile(1, 0))];
                for c in 0..4 {
                    assert_eq!(p.at(i, j, c), want[c]);
                }
            }
        }
    }

    #[test]
    fn unpack_single_tile() {
        let t = Tensor::new(&[1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let u = unpack(&t).unwrap();
        assert_eq!(u.data(), &[0.1, 0.2, 0.4, 0.3]);
        assert!(unpack(&Tensor::zeros(&[1, 1, 3])).is_err());
    }

    #[test]
    fn guides_select_channels() {
        let p = PackedRaw::new(Tensor::new(&[1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let g = extract_guides(&p);
        assert_eq!(g.green.data(), &[0.2, 0.4]);
        assert_eq!(g.redblue.data(), &[0.1, 0.3]);
        let z = extract_guides(&PackedRaw::new(Tensor::zeros(&[2, 2, 4])).unwrap());
        assert!(z.green.data().iter().chain(z.redblue.data()).all(|&v| v == 0.0));
    }

    fn arb_mosaic() -> impl Strategy<Value = RawMosaic> {
        (1usize..5, 1usize..5).prop_flat_map(|(hh, ww)| {
            proptest::collection::vec(0u16..16384, 4 * hh * ww)
                .prop_map(move |d| mosaic(2 * hh, 2 * ww, d))
        })
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(m in arb_mosaic()) {
            let round = unpack(pack(&m).unwrap().tensor()).unwrap();
            prop_assert_eq!(round, normalize(&m).unwrap());
        }

        #[test]
        fn guides_are_a_permutation(m in arb_mosaic()) {
            let p = pack(&m).unwrap();
            let g = extract_guides(&p);
            for (i, px) in p.tensor().data().chunks_exact(4).enumerate() {
                let rebuilt = [g.redblue.data()[2 * i], g.green.data()[2 * i],
                               g.redblue.data()[2 * i + 1], g.green.data()[2 * i + 1]];
                prop_assert_eq!(px, &rebuilt[..]);
            }
        }

        #[test]
        fn normalize_is_monotone(a in 0u16..16384, b in 0u16..16384) {
            let m = mosaic(2, 2, vec![0; 4]);
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(m.normalize_value(lo) <= m.normalize_value(hi));
            prop_assert_eq!(m.normalize_value(16383), 1.0);
        }
    }
}
