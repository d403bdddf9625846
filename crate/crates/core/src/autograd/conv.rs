use super::{Graph, Var};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution. Padding is zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1 with "same" padding for an odd square kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad_h: kernel / 2,
            pad_w: kernel / 2,
            groups: 1,
        }
    }

    pub fn valid() -> Self {
        Self {
            stride: 1,
            pad_h: 0,
            pad_w: 0,
            groups: 1,
        }
    }

    pub fn strided(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad_h: pad,
            pad_w: pad,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if ph < kh || pw < kw || self.stride == 0 {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// C = A·B (or C += A·B) with optional transposition of the operands.
/// `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n`, all row-major as stored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above describe `a` (m×k), `b` (k×n) and `c` (m×n)
    // exactly within the bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    cin_g: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    /// Unfold the channels `[c0, c0 + cin_g)` of `x` into `[cin_g·kh·kw, oh·ow]`.
    fn im2col(&self, x: &[f64], c0: usize, cols: &mut [f64]) {
        let n = self.oh * self.ow;
        let s = self.spec.stride as isize;
        for ci in 0..self.cin_g {
            let plane = &x[(c0 + ci) * self.h * self.w..(c0 + ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    let dst = &mut cols[row..row + n];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ky as isize - self.spec.pad_h as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - self.spec.pad_w as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into `dx`.
    fn col2im(&self, cols: &[f64], c0: usize, dx: &mut [f64]) {
        let n = self.oh * self.ow;
        let s = self.spec.stride as isize;
        for ci in 0..self.cin_g {
            let plane = &mut dx[(c0 + ci) * self.h * self.w..(c0 + ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    let src = &cols[row..row + n];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ky as isize - self.spec.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = ox as isize * s + kx as isize - self.spec.pad_w as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D cross-correlation of `x: [cin, h, w]` with `weight: [cout, cin/groups, kh, kw]`
    /// plus an optional `bias: [cout]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Var {
        let vx = self.value(x);
        let vw = self.value(weight);
        let [cin, h, w] = vx.dims3().expect("conv2d: input must be [c,h,w]");
        let &[cout, cin_g, kh, kw] = vw.shape() else {
            panic!("conv2d: weight must be rank 4, got {:?}", vw.shape());
        };
        let groups = spec.groups;
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0);
        assert_eq!(cin / groups, cin_g, "conv2d: weight/input channel mismatch");
        let cout_g = cout / groups;
        let (oh, ow) = spec
            .output_size(h, w, kh, kw)
            .unwrap_or_else(|| panic!("conv2d: kernel {kh}x{kw} larger than padded {h}x{w}"));
        let geo = Geometry {
            cin_g,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let n = oh * ow;
        let kdim = cin_g * kh * kw;
        let mut cols = vec![0.0; groups * kdim * n];
        let mut out = vec![0.0; cout * n];
        for g in 0..groups {
            let gcols = &mut cols[g * kdim * n..(g + 1) * kdim * n];
            geo.im2col(vx.data(), g * cin_g, gcols);
            gemm(
                cout_g,
                kdim,
                n,
                &vw.data()[g * cout_g * kdim..(g + 1) * cout_g * kdim],
                false,
                gcols,
                false,
                &mut out[g * cout_g * n..(g + 1) * cout_g * n],
                false,
            );
        }
        if let Some(b) = bias {
            let vb = self.value(b);
            assert_eq!(vb.shape(), &[cout], "conv2d: bias shape");
            for (co, &bv) in vb.data().iter().enumerate() {
                for o in &mut out[co * n..(co + 1) * n] {
                    *o += bv;
                }
            }
        }
        let out = Tensor::new(&[cout, oh, ow], out).unwrap();
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let wshape = vw.shape().to_vec();
        self.push(out, &parents, move |g, needs| {
            let gy = g.data();
            let gx = needs[0].then(|| {
                let mut dx = vec![0.0; cin * h * w];
                let mut dcols = vec![0.0; kdim * n];
                for grp in 0..groups {
                    gemm(
                        kdim,
                        cout_g,
                        n,
                        &vw.data()[grp * cout_g * kdim..(grp + 1) * cout_g * kdim],
                        true,
                        &gy[grp * cout_g * n..(grp + 1) * cout_g * n],
                        false,
                        &mut dcols,
                        false,
                    );
                    geo.col2im(&dcols, grp * cin_g, &mut dx);
                }
                Tensor::new(&[cin, h, w], dx).unwrap()
            });
            let gw = needs[1].then(|| {
                let mut dw = vec![0.0; cout * kdim];
                for grp in 0..groups {
                    gemm(
                        cout_g,
                        n,
                        kdim,
                        &gy[grp * cout_g * n..(grp + 1) * cout_g * n],
                        false,
                        &cols[grp * kdim * n..(grp + 1) * kdim * n],
                        true,
                        &mut dw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim],
                        false,
                    );
                }
                Tensor::new(&wshape, dw).unwrap()
            });
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    Tensor::from_fn(&[cout], |co| gy[co * n..(co + 1) * n].iter().sum())
                }));
            }
            grads
        })
    }
}
