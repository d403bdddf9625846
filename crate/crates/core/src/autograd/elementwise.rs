use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Pointwise nonlinearity used inside the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// x·sigmoid(x)
    #[default]
    Silu,
    /// Test hook: no nonlinearity.
    Identity,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&vb, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&va, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    /// `x ⊙ m` with a single-channel `m: [1, h, w]` broadcast over the
    /// channels of `x: [c, h, w]`.
    pub fn mul_channel_mask(&self, x: Var, m: Var) -> Var {
        let vx = self.value(x);
        let vm = self.value(m);
        let [c, h, w] = vx.dims3().expect("mul_channel_mask: x must be [c,h,w]");
        assert_eq!(vm.shape(), &[1, h, w], "mul_channel_mask: mask shape");
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let xs = &vx.data()[ch * plane..(ch + 1) * plane];
            for ((o, &xv), &mv) in out[ch * plane..].iter_mut().zip(xs).zip(vm.data()) {
                *o = xv * mv;
            }
        }
        let out = Tensor::new(&[c, h, w], out).unwrap();
        self.push(out, &[x, m], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut d = g.clone();
                for ch in 0..c {
                    for (dv, &mv) in d.data_mut()[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .zip(vm.data())
                    {
                        *dv *= mv;
                    }
                }
                d
            });
            let gm = needs[1].then(|| {
                let mut d = vec![0.0; plane];
                for ch in 0..c {
                    let gs = &g.data()[ch * plane..(ch + 1) * plane];
                    let xs = &vx.data()[ch * plane..(ch + 1) * plane];
                    for ((dv, &gv), &xv) in d.iter_mut().zip(gs).zip(xs) {
                        *dv += gv * xv;
                    }
                }
                Tensor::new(&[1, h, w], d).unwrap()
            });
            vec![gx, gm]
        })
    }

    /// Concatenate `[c_i, h, w]` maps along the channel axis.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let [_, h, w] = values[0].dims3().expect("concat: rank-3 inputs");
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            let [_, hh, ww] = v.dims3().expect("concat: rank-3 inputs");
            assert_eq!((hh, ww), (h, w), "concat: spatial mismatch");
            data.extend_from_slice(v.data());
            sizes.push(v.len());
        }
        let c_total = data.len() / (h * w);
        let out = Tensor::new(&[c_total, h, w], data).unwrap();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.push(out, parts, move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (i, &n) in sizes.iter().enumerate() {
                grads.push(needs[i].then(|| {
                    Tensor::new(&shapes[i], g.data()[offset..offset + n].to_vec()).unwrap()
                }));
                offset += n;
            }
            grads
        })
    }

    /// Top-left crop of a `[c, h, w]` map.
    pub fn crop(&self, x: Var, new_h: usize, new_w: usize) -> Var {
        let vx = self.value(x);
        let [c, h, w] = vx.dims3().expect("crop: rank-3 input");
        assert!(new_h <= h && new_w <= w, "crop larger than input");
        if new_h == h && new_w == w {
            return x;
        }
        let mut out = Vec::with_capacity(c * new_h * new_w);
        for ch in 0..c {
            for y in 0..new_h {
                let row = (ch * h + y) * w;
                out.extend_from_slice(&vx.data()[row..row + new_w]);
            }
        }
        let out = Tensor::new(&[c, new_h, new_w], out).unwrap();
        self.push(out, &[x], move |g, _| {
            let mut d = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for y in 0..new_h {
                    let src = (ch * new_h + y) * new_w;
                    let dst = (ch * h + y) * w;
                    d.data_mut()[dst..dst + new_w].copy_from_slice(&g.data()[src..src + new_w]);
                }
            }
            vec![Some(d)]
        })
    }

    /// 2× nearest-neighbour upsampling of a `[c, h, w]` map.
    pub fn upsample2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let [c, h, w] = vx.dims3().expect("upsample2: rank-3 input");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = vx.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out).unwrap();
        self.push(out, &[x], move |g, _| {
            let mut d = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        d.data_mut()[(ch * h + y / 2) * w + xx / 2] +=
                            g.data()[(ch * oh + y) * ow + xx];
                    }
                }
            }
            vec![Some(d)]
        })
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let vx = self.value(x);
        let out = vx.map(f);
        self.push(out, &[x], move |g, _| {
            vec![Some(g.zip_map(&vx, |gv, xv| gv * df(xv)))]
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        })
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, sigmoid)
    }

    pub fn activation(&self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Silu => self.unary(x, silu, silu_grad),
            Activation::Identity => x,
        }
    }

    /// μ-law compression of `clamp(x / peak, 0, 1)`.
    pub fn mu_tonemap(&self, x: Var, mu: f64, peak: f64) -> Var {
        let denom = mu.ln_1p();
        self.unary(
            x,
            move |v| (mu * (v / peak).clamp(0.0, 1.0)).ln_1p() / denom,
            move |v| {
                let u = v / peak;
                if u > 0.0 && u < 1.0 {
                    mu / ((1.0 + mu * u) * denom * peak)
                } else {
                    0.0
                }
            },
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        self.push(Tensor::scalar(vx.sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    /// Mean of `(ln(x + eps) − ln(target + eps))²`.
    pub fn log_l2(&self, x: Var, target: &Tensor, eps: f64) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), target.shape(), "log_l2: shape mismatch");
        let n = vx.len() as f64;
        let diff = vx.zip_map(target, |a, b| (a + eps).ln() - (b + eps).ln());
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        self.push(Tensor::scalar(loss), &[x], move |g, _| {
            let s = g.item() * 2.0 / n;
            vec![Some(diff.zip_map(&vx, |d, a| s * d / (a + eps)))]
        })
    }

    /// Mean absolute difference from a constant target.
    pub fn l1_mean(&self, x: Var, target: &Tensor) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), target.shape(), "l1_mean: shape mismatch");
        let n = vx.len() as f64;
        let diff = vx.zip_map(target, |a, b| a - b);
        let loss = diff.data().iter().map(|d| d.abs()).sum::<f64>() / n;
        self.push(Tensor::scalar(loss), &[x], move |g, _| {
            let s = g.item() / n;
            vec![Some(diff.map(|d| {
                if d > 0.0 {
                    s
                } else if d < 0.0 {
                    -s
                } else {
                    0.0
                }
            }))]
        })
    }
}
