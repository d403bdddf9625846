use super::{Graph, Var};
use crate::tensor::Tensor;

/// Token indices (into an `h·w` plane) of every non-overlapping window,
/// row-major within each window.
fn window_tokens(h: usize, w: usize, window: usize) -> Vec<Vec<usize>> {
    let mut windows = Vec::with_capacity((h / window) * (w / window));
    for wy in 0..h / window {
        for wx in 0..w / window {
            let mut idx = Vec::with_capacity(window * window);
            for dy in 0..window {
                for dx in 0..window {
                    idx.push((wy * window + dy) * w + wx * window + dx);
                }
            }
            windows.push(idx);
        }
    }
    windows
}

impl Graph {
    /// Multi-head scaled dot-product attention restricted to non-overlapping
    /// `window × window` groups of tokens. `q`, `k`, `v` are `[c, h, w]` with
    /// `c` split evenly across `heads`; `h` and `w` must be multiples of
    /// `window`.
    pub fn window_attention(&self, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Var {
        let vq = self.value(q);
        let vk = self.value(k);
        let vv = self.value(v);
        let [c, h, w] = vq.dims3().expect("window_attention: [c,h,w] inputs");
        assert_eq!(vk.shape(), vq.shape());
        assert_eq!(vv.shape(), vq.shape());
        assert!(heads > 0 && c % heads == 0, "heads must divide channels");
        assert!(
            window > 0 && h % window == 0 && w % window == 0,
            "window must divide spatial dims"
        );
        let d = c / heads;
        let n = h * w;
        let scale = 1.0 / (d as f64).sqrt();
        let t = window * window;
        let windows = window_tokens(h, w, window);
        // probs[(win * heads + head) * t * t + i * t + j]
        let mut probs = vec![0.0; windows.len() * heads * t * t];
        let mut out = vec![0.0; c * n];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut row = vec![0.0; t];
        for (wi, tokens) in windows.iter().enumerate() {
            for head in 0..heads {
                let base = (wi * heads + head) * t * t;
                let c0 = head * d;
                for (i, &ti) in tokens.iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, &tj) in tokens.iter().enumerate() {
                        let mut s = 0.0;
                        for ch in c0..c0 + d {
                            s += qd[ch * n + ti] * kd[ch * n + tj];
                        }
                        row[j] = s * scale;
                        max = max.max(row[j]);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    let p = &mut probs[base + i * t..base + (i + 1) * t];
                    for (pj, r) in p.iter_mut().zip(&row) {
                        *pj = r / z;
                    }
                    for ch in c0..c0 + d {
                        let mut acc = 0.0;
                        for (j, &tj) in tokens.iter().enumerate() {
                            acc += p[j] * vd[ch * n + tj];
                        }
                        out[ch * n + ti] = acc;
                    }
                }
            }
        }
        let out = Tensor::new(&[c, h, w], out).unwrap();
        self.push(out, &[q, k, v], move |g, needs| {
            let gd = g.data();
            let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
            let mut dq = vec![0.0; c * n];
            let mut dk = vec![0.0; c * n];
            let mut dv = vec![0.0; c * n];
            let mut ds = vec![0.0; t * t];
            for (wi, tokens) in windows.iter().enumerate() {
                for head in 0..heads {
                    let base = (wi * heads + head) * t * t;
                    let p = &probs[base..base + t * t];
                    let c0 = head * d;
                    // dV = Pᵀ dO
                    if needs[2] {
                        for ch in c0..c0 + d {
                            for (j, &tj) in tokens.iter().enumerate() {
                                let mut acc = 0.0;
                                for (i, &ti) in tokens.iter().enumerate() {
                                    acc += p[i * t + j] * gd[ch * n + ti];
                                }
                                dv[ch * n + tj] += acc;
                            }
                        }
                    }
                    if !(needs[0] || needs[1]) {
                        continue;
                    }
                    // dP = dO Vᵀ, then softmax adjoint row by row.
                    for (i, &ti) in tokens.iter().enumerate() {
                        let mut dot = 0.0;
                        for (j, &tj) in tokens.iter().enumerate() {
                            let mut dp = 0.0;
                            for ch in c0..c0 + d {
                                dp += gd[ch * n + ti] * vd[ch * n + tj];
                            }
                            ds[i * t + j] = dp;
                            dot += dp * p[i * t + j];
                        }
                        for j in 0..t {
                            ds[i * t + j] = p[i * t + j] * (ds[i * t + j] - dot) * scale;
                        }
                    }
                    for (i, &ti) in tokens.iter().enumerate() {
                        for (j, &tj) in tokens.iter().enumerate() {
                            let s = ds[i * t + j];
                            if s == 0.0 {
                                continue;
                            }
                            for ch in c0..c0 + d {
                                dq[ch * n + ti] += s * kd[ch * n + tj];
                                dk[ch * n + tj] += s * qd[ch * n + ti];
                            }
                        }
                    }
                }
            }
            let wrap = |data: Vec<f64>| Tensor::new(&[c, h, w], data).unwrap();
            vec![
                needs[0].then(|| wrap(dq)),
                needs[1].then(|| wrap(dk)),
                needs[2].then(|| wrap(dv)),
            ]
        })
    }
}
