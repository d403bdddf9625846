//! Weighted fusion of a linear exposure stack into packed HDR radiance.

use crate::camera_sim::ExposureStack;
use crate::error::Result;
use crate::raw_model::{pack, HdrImage, PackedRaw};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeOptions {
    pub z_lo: f64,
    pub z_hi: f64,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            z_lo: 0.02,
            z_hi: 0.98,
        }
    }
}

impl MergeOptions {
    /// Triangular hat weight, zero outside `(z_lo, z_hi)`.
    #[inline]
    pub fn weight(&self, z: f64) -> f64 {
        if z <= self.z_lo || z >= self.z_hi {
            0.0
        } else {
            (z - self.z_lo).min(self.z_hi - z)
        }
    }
}

pub fn merge(stack: &ExposureStack) -> Result<HdrImage> {
    merge_with(stack, &MergeOptions::default())
}

/// Per packed pixel and channel, `Σ w(z_i)·z_i/t_i / Σ w(z_i)` with
/// `t_i = 2^ev_i`. When every weight is zero the longest exposure that is
/// still below `z_hi` is used, or the shortest exposure if all are saturated.
pub fn merge_with(stack: &ExposureStack, opts: &MergeOptions) -> Result<HdrImage> {
    stack.validate()?;
    let packed: Vec<PackedRaw> = stack.mosaics.iter().map(pack).collect::<Result<_>>()?;
    let times: Vec<f64> = stack.evs.iter().map(|ev| ev.exp2()).collect();
    let (h, w) = (packed[0].height(), packed[0].width());
    let mut out = vec![0.0; h * w * 4];
    let mut samples = vec![0.0; packed.len()];
    for (i, o) in out.iter_mut().enumerate() {
        for (s, p) in samples.iter_mut().zip(&packed) {
            *s = p.tensor().data()[i];
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (&z, &t) in samples.iter().zip(&times) {
            let wt = opts.weight(z);
            num += wt * z / t;
            den += wt;
        }
        *o = if den > 0.0 {
            num / den
        } else {
            // evs are strictly increasing, so index order is exposure order.
            let k = samples.iter().rposition(|&z| z < opts.z_hi).unwrap_or(0);
            samples[k] / times[k]
        };
    }
    HdrImage::new(Tensor::new(&[h, w, 4], out)?)
}

/// Fraction of packed pixels for which some exposure has a positive weight
/// in all four channels.
pub fn coverage_report(stack: &ExposureStack) -> Result<f64> {
    coverage_with(stack, &MergeOptions::default())
}

pub fn coverage_with(stack: &ExposureStack, opts: &MergeOptions) -> Result<f64> {
    stack.validate()?;
    let packed: Vec<PackedRaw> = stack.mosaics.iter().map(pack).collect::<Result<_>>()?;
    let n = packed[0].height() * packed[0].width();
    let covered = (0..n)
        .filter(|&p| {
            packed.iter().any(|frame| {
                frame.tensor().data()[p * 4..p * 4 + 4]
                    .iter()
                    .all(|&z| opts.weight(z) > 0.0)
            })
        })
        .count();
    Ok(covered as f64 / n as f64)
}
