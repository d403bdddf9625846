use super::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    /// Per-token layer normalization of `x: [c, h, w]` over its channels,
    /// followed by a per-channel affine map.
    pub fn layer_norm(&self, x: Var, gain: Var, offset: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let vg = self.value(gain);
        let vb = self.value(offset);
        let [c, h, w] = vx.dims3().expect("layer_norm: input must be [c,h,w]");
        assert_eq!(vg.shape(), &[c]);
        assert_eq!(vb.shape(), &[c]);
        let n = h * w;
        let xd = vx.data();
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            let mean = (0..c).map(|ch| xd[ch * n + p]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| {
                    let d = xd[ch * n + p] - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                let xh = (xd[ch * n + p] - mean) * is;
                xhat[ch * n + p] = xh;
                out[ch * n + p] = vg.data()[ch] * xh + vb.data()[ch];
            }
        }
        let out = Tensor::new(&[c, h, w], out).unwrap();
        self.push(out, &[x, gain, offset], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut dx = vec![0.0; c * n];
                for p in 0..n {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for ch in 0..c {
                        let d = gd[ch * n + p] * vg.data()[ch];
                        mean_d += d;
                        mean_dx += d * xhat[ch * n + p];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for ch in 0..c {
                        let d = gd[ch * n + p] * vg.data()[ch];
                        dx[ch * n + p] = inv_std[p] * (d - mean_d - xhat[ch * n + p] * mean_dx);
                    }
                }
                Tensor::new(&[c, h, w], dx).unwrap()
            });
            let ggain = needs[1].then(|| {
                Tensor::from_fn(&[c], |ch| {
                    (0..n).map(|p| gd[ch * n + p] * xhat[ch * n + p]).sum()
                })
            });
            let goff = needs[2]
                .then(|| Tensor::from_fn(&[c], |ch| gd[ch * n..(ch + 1) * n].iter().sum()));
            vec![gx, ggain, goff]
        })
    }
}
