//! Dense row-major `f64` arrays.
//!
//! Feature maps inside the network are `[channels, height, width]`; images at
//! the API boundary are `[height, width, channels]`.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// `[h, w, c]` to `[c, h, w]`.
    pub fn hwc_to_chw(&self) -> Result<Self> {
        let [h, w, c] = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(&[c, h, w], out)
    }

    /// `[c, h, w]` to `[h, w, c]`.
    pub fn chw_to_hwc(&self) -> Result<Self> {
        let [c, h, w] = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ch] = self.data[(ch * h + y) * w + x];
                }
            }
        }
        Tensor::new(&[h, w, c], out)
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok([a, b, c]),
            s => shape_err(format!("expected a rank-3 array, got shape {s:?}")),
        }
    }

    /// Pick channels (first axis) of a `[c, h, w]` tensor.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let [c, h, w] = self.dims3()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(channels.len() * plane);
        for &ch in channels {
            if ch >= c {
                return shape_err(format!("channel {ch} out of range for {c} channels"));
            }
            out.extend_from_slice(&self.data[ch * plane..(ch + 1) * plane]);
        }
        Tensor::new(&[channels.len(), h, w], out)
    }

    /// Replicate-pad a `[c, h, w]` tensor on the bottom and right edges.
    pub fn pad_replicate(&self, new_h: usize, new_w: usize) -> Result<Self> {
        let [c, h, w] = self.dims3()?;
        if new_h < h || new_w < w || h == 0 || w == 0 {
            return shape_err(format!("cannot pad {h}x{w} to {new_h}x{new_w}"));
        }
        let mut out = vec![0.0; c * new_h * new_w];
        for ch in 0..c {
            for y in 0..new_h {
                let sy = y.min(h - 1);
                for x in 0..new_w {
                    let sx = x.min(w - 1);
                    out[(ch * new_h + y) * new_w + x] = self.data[(ch * h + sy) * w + sx];
                }
            }
        }
        Tensor::new(&[c, new_h, new_w], out)
    }

    /// Round every element to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}
