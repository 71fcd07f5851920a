//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients into
//! every node that requires them. Gradients are never allocated, computed, or
//! stored for nodes that do not require them, so frozen parameters stay
//! untouched by construction.
//!
//! The op set is exactly what the segmentation networks and objectives need:
//! 3D convolution (kernel 1 or 3, stride 1, zero padding), batch
//! normalization, Leaky-ReLU, sigmoid, 2x average pooling, 2x nearest
//! upsampling, channel concat/slice, elementwise add, full-map summation,
//! Dice and binary cross-entropy losses, the size-margin penalty, weighted
//! scalar combination, and overlap-averaged tile stitching.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv3 { x: Var, w: Var, b: Var, k: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, invstd: Vec<f64>, batch_stats: bool },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    AvgPool2 { x: Var },
    UpsampleNearest2 { x: Var },
    Concat { a: Var, b: Var, a_channels: usize },
    Add { a: Var, b: Var },
    SliceChannel { x: Var, c: usize },
    SumAll { x: Var },
    DiceLoss { probs: Var, target: Tensor, eps: f64 },
    BceLoss { probs: Var, target: Tensor },
    SizePenalty { s_hat: Var, prior: f64, gamma: f64 },
    WeightedSum { terms: Vec<(Var, f64)> },
    Stitch { tiles: Vec<Var>, origins: Vec<[usize; 3]>, coverage: Tensor },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass and computes reverse-mode gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// 3D convolution, stride 1, zero padding `k/2`. `x` is `[ci, d, h, w]`,
    /// `w` is `[co, ci, k, k, k]`, `b` is `[co]`. Supported kernels: 1 and 3.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        assert!(k == 1 || k == 3, "conv3d supports kernels 1 and 3, got {k}");
        let out = conv3d_forward(self.value(x), self.value(w), self.value(b), k);
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out, req, Op::Conv3 { x, w, b, k })
    }

    /// Batch normalization over the spatial axes of a `[c, d, h, w]` map.
    ///
    /// With `batch_stats == true` the statistics of `x` itself are used and
    /// differentiated through; the per-channel `(mean, var)` actually used is
    /// returned so the caller can maintain running estimates. With
    /// `batch_stats == false` the supplied `fixed` statistics are used and the
    /// op is a plain affine map (inference mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        fixed: Option<(&[f64], &[f64])>,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.numel() / c;
        let (mean, var): (Vec<f64>, Vec<f64>) = match fixed {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s = xv.channel(ch);
                    let m = s.iter().sum::<f64>() / n as f64;
                    let v = s.iter().map(|&t| (t - m) * (t - m)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(xv.shape());
        for ch in 0..c {
            let src = self.value(x).channel(ch);
            let dst = out.channel_mut(ch);
            let (m, is, gc, bc) = (mean[ch], invstd[ch], g[ch], bt[ch]);
            for (o, &s) in dst.iter_mut().zip(src.iter()) {
                *o = (s - m) * is * gc + bc;
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let v = self.push(
            out,
            req,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
                batch_stats: fixed.is_none(),
            },
        );
        (v, mean, var)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let req = self.requires(x);
        self.push(out, req, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let req = self.requires(x);
        self.push(out, req, Op::Sigmoid { x })
    }

    /// 2x2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, d, h, w] = shape4(xv);
        assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {:?}", xv.shape());
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, od, oh, ow]);
        for ch in 0..c {
            let src = xv.channel(ch);
            for z in 0..od {
                for y in 0..oh {
                    for x2 in 0..ow {
                        let mut acc = 0.0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += src[((2 * z + dz) * h + 2 * y + dy) * w + 2 * x2 + dx];
                                }
                            }
                        }
                        out.channel_mut(ch)[(z * oh + y) * ow + x2] = acc * 0.125;
                    }
                }
            }
        }
        let req = self.requires(x);
        self.push(out, req, Op::AvgPool2 { x })
    }

    /// Nearest-neighbor 2x upsampling along all spatial axes.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, d, h, w] = shape4(xv);
        let (od, oh, ow) = (d * 2, h * 2, w * 2);
        let mut out = Tensor::zeros(&[c, od, oh, ow]);
        for ch in 0..c {
            let src = xv.channel(ch);
            let dst = out.channel_mut(ch);
            for z in 0..od {
                for y in 0..oh {
                    let srow = &src[((z / 2) * h + y / 2) * w..];
                    let drow = &mut dst[(z * oh + y) * ow..(z * oh + y) * ow + ow];
                    for (x2, o) in drow.iter_mut().enumerate() {
                        *o = srow[x2 / 2];
                    }
                }
            }
        }
        let req = self.requires(x);
        self.push(out, req, Op::UpsampleNearest2 { x })
    }

    /// Channel-axis concatenation of two `[c, d, h, w]` maps.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(&av.shape()[1..], &bv.shape()[1..], "concat spatial dims differ");
        let a_channels = av.shape()[0];
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        let req = self.requires(a) || self.requires(b);
        self.push(out, req, Op::Concat { a, b, a_channels })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shapes differ");
        let mut out = av.clone();
        out.axpy(1.0, bv);
        let req = self.requires(a) || self.requires(b);
        self.push(out, req, Op::Add { a, b })
    }

    /// Select channel `c` of a `[C, d, h, w]` map as a `[1, d, h, w]` map.
    pub fn slice_channel(&mut self, x: Var, c: usize) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape[0] = 1;
        let out = Tensor::from_vec(&shape, xv.channel(c).to_vec()).expect("slice shape");
        let req = self.requires(x);
        self.push(out, req, Op::SliceChannel { x, c })
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let req = self.requires(x);
        self.push(out, req, Op::SumAll { x })
    }

    /// Soft Dice loss `1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`.
    /// `target` is a constant mask of the same shape as `probs`.
    pub fn dice_loss(&mut self, probs: Var, target: Tensor, eps: f64) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), target.shape(), "dice shapes differ");
        let inter: f64 = pv.data().iter().zip(target.data()).map(|(p, y)| p * y).sum();
        let denom = pv.sum() + target.sum() + eps;
        let out = Tensor::scalar(1.0 - (2.0 * inter + eps) / denom);
        let req = self.requires(probs);
        self.push(out, req, Op::DiceLoss { probs, target, eps })
    }

    /// Mean binary cross-entropy on probabilities, clamped to [1e-7, 1-1e-7].
    pub fn bce_loss(&mut self, probs: Var, target: Tensor) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), target.shape(), "bce shapes differ");
        let n = pv.numel() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(total / n);
        let req = self.requires(probs);
        self.push(out, req, Op::BceLoss { probs, target })
    }

    /// Margin penalty on a predicted size scalar: zero on the closed band
    /// `[(1-gamma)*prior, (1+gamma)*prior]`, absolute distance to the nearer
    /// band edge outside it. Subgradient at the band edges is 0.
    pub fn size_penalty(&mut self, s_hat: Var, prior: f64, gamma: f64) -> Var {
        let s = self.value(s_hat).item();
        let lo = (1.0 - gamma) * prior;
        let hi = (1.0 + gamma) * prior;
        let val = if s < lo {
            lo - s
        } else if s > hi {
            s - hi
        } else {
            0.0
        };
        let req = self.requires(s_hat);
        self.push(Tensor::scalar(val), req, Op::SizePenalty { s_hat, prior, gamma })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let val: f64 = terms.iter().map(|&(v, w)| self.value(v).item() * w).sum();
        let req = terms.iter().any(|&(v, _)| self.requires(v));
        self.push(Tensor::scalar(val), req, Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Assemble overlapping `[c, pd, ph, pw]` tiles into a `[c, d, h, w]` map
    /// by uniform averaging wherever tiles overlap. Tile regions extending
    /// beyond the output bounds are ignored. Every output voxel must be
    /// covered by at least one tile.
    pub fn stitch(&mut self, tiles: &[Var], origins: &[[usize; 3]], out_spatial: [usize; 3]) -> Var {
        assert_eq!(tiles.len(), origins.len());
        assert!(!tiles.is_empty(), "stitch needs at least one tile");
        let c = self.value(tiles[0]).shape()[0];
        let [d, h, w] = out_spatial;
        let mut coverage = Tensor::zeros(&[d, h, w]);
        for (&t, o) in tiles.iter().zip(origins) {
            let tv = self.value(t);
            assert_eq!(tv.shape()[0], c, "stitch tiles must share channel count");
            let [_, pd, ph, pw] = shape4(tv);
            for z in o[0]..(o[0] + pd).min(d) {
                for y in o[1]..(o[1] + ph).min(h) {
                    for x in o[2]..(o[2] + pw).min(w) {
                        coverage.data_mut()[(z * h + y) * w + x] += 1.0;
                    }
                }
            }
        }
        assert!(coverage.min() >= 1.0, "stitch tiles leave uncovered voxels");
        let mut out = Tensor::zeros(&[c, d, h, w]);
        for (&t, o) in tiles.iter().zip(origins) {
            let tv = self.value(t).clone();
            let [_, pd, ph, pw] = shape4(&tv);
            for ch in 0..c {
                let src = tv.channel(ch);
                let dst = out.channel_mut(ch);
                for z in o[0]..(o[0] + pd).min(d) {
                    for y in o[1]..(o[1] + ph).min(h) {
                        let cov_row = coverage.data();
                        for x in o[2]..(o[2] + pw).min(w) {
                            let oi = (z * h + y) * w + x;
                            let si = ((z - o[0]) * ph + (y - o[1])) * pw + (x - o[2]);
                            dst[oi] += src[si] / cov_row[oi];
                        }
                    }
                }
            }
        }
        let req = tiles.iter().any(|&t| self.requires(t));
        self.push(out, req, Op::Stitch { tiles: tiles.to_vec(), origins: origins.to_vec(), coverage })
    }

    fn grad_buf(&mut self, v: Var) -> &mut Tensor {
        if self.nodes[v.0].grad.is_none() {
            let shape = self.nodes[v.0].value.shape().to_vec();
            self.nodes[v.0].grad = Some(Tensor::zeros(&shape));
        }
        self.nodes[v.0].grad.as_mut().unwrap()
    }

    fn add_grad(&mut self, v: Var, g: &Tensor) {
        if self.requires(v) {
            self.grad_buf(v).axpy(1.0, g);
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate into every node
    /// with `requires_grad`; all other nodes are skipped entirely.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidShape("backward root must be scalar".into()));
        }
        if !self.requires(root) {
            return Ok(()); // nothing on the tape wants gradients
        }
        *self.grad_buf(root) = Tensor::scalar(1.0);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let gout = self.nodes[id].grad.clone().unwrap();
            // Ops are matched by moving minimal data out to appease borrowing.
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv3 { x, w, b, k } => {
                    let (x, w, b, k) = (*x, *w, *b, *k);
                    if self.requires(x) {
                        let gx = conv3d_backward_input(&gout, self.value(w), k);
                        self.add_grad(x, &gx);
                    }
                    if self.requires(w) {
                        let gw = conv3d_backward_weight(&gout, self.value(x), self.value(w).shape(), k);
                        self.add_grad(w, &gw);
                    }
                    if self.requires(b) {
                        let co = self.value(b).numel();
                        let mut gb = Tensor::zeros(&[co]);
                        for c in 0..co {
                            gb.data_mut()[c] = gout.channel(c).iter().sum();
                        }
                        self.add_grad(b, &gb);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats } => {
                    let (x, gamma, beta, batch_stats) = (*x, *gamma, *beta, *batch_stats);
                    let (mean, invstd) = (mean.clone(), invstd.clone());
                    let c = gout.shape()[0];
                    let n = (gout.numel() / c) as f64;
                    let gvals = self.value(gamma).data().to_vec();
                    let xv = self.value(x).clone();
                    if self.requires(beta) {
                        let mut gb = Tensor::zeros(&[c]);
                        for ch in 0..c {
                            gb.data_mut()[ch] = gout.channel(ch).iter().sum();
                        }
                        self.add_grad(beta, &gb);
                    }
                    if self.requires(gamma) {
                        let mut gg = Tensor::zeros(&[c]);
                        for ch in 0..c {
                            let go = gout.channel(ch);
                            let xs = xv.channel(ch);
                            gg.data_mut()[ch] = go
                                .iter()
                                .zip(xs.iter())
                                .map(|(&g, &xx)| g * (xx - mean[ch]) * invstd[ch])
                                .sum();
                        }
                        self.add_grad(gamma, &gg);
                    }
                    if self.requires(x) {
                        let mut gx = Tensor::zeros(xv.shape());
                        for ch in 0..c {
                            let go = gout.channel(ch);
                            let xs = xv.channel(ch);
                            let gd = gx.channel_mut(ch);
                            if batch_stats {
                                let sum_g: f64 = go.iter().sum();
                                let sum_gxhat: f64 = go
                                    .iter()
                                    .zip(xs.iter())
                                    .map(|(&g, &xx)| g * (xx - mean[ch]) * invstd[ch])
                                    .sum();
                                let scale = gvals[ch] * invstd[ch] / n;
                                for ((o, &g), &xx) in gd.iter_mut().zip(go.iter()).zip(xs.iter()) {
                                    let xhat = (xx - mean[ch]) * invstd[ch];
                                    *o = scale * (n * g - sum_g - xhat * sum_gxhat);
                                }
                            } else {
                                let scale = gvals[ch] * invstd[ch];
                                for (o, &g) in gd.iter_mut().zip(go.iter()) {
                                    *o = scale * g;
                                }
                            }
                        }
                        self.add_grad(x, &gx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    if self.requires(x) {
                        let xv = self.value(x);
                        let mut gx = gout.clone();
                        for (g, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                            if v <= 0.0 {
                                *g *= slope;
                            }
                        }
                        self.add_grad(x, &gx);
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    if self.requires(x) {
                        let yv = &self.nodes[id].value;
                        let mut gx = gout.clone();
                        for (g, &y) in gx.data_mut().iter_mut().zip(yv.data()) {
                            *g *= y * (1.0 - y);
                        }
                        self.add_grad(x, &gx);
                    }
                }
                Op::AvgPool2 { x } => {
                    let x = *x;
                    if self.requires(x) {
                        let xs = self.value(x).shape().to_vec();
                        let [c, d, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                        let (oh, ow) = (h / 2, w / 2);
                        let mut gx = Tensor::zeros(&xs);
                        for ch in 0..c {
                            let go = gout.channel(ch);
                            let gd = gx.channel_mut(ch);
                            for z in 0..d {
                                for y in 0..h {
                                    for x2 in 0..w {
                                        gd[(z * h + y) * w + x2] =
                                            0.125 * go[((z / 2) * oh + y / 2) * ow + x2 / 2];
                                    }
                                }
                            }
                        }
                        self.add_grad(x, &gx);
                    }
                }
                Op::UpsampleNearest2 { x } => {
                    let x = *x;
                    if self.requires(x) {
                        let xs = self.value(x).shape().to_vec();
                        let [c, d, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                        let (gh, gw) = (h * 2, w * 2);
                        let mut gx = Tensor::zeros(&xs);
                        for ch in 0..c {
                            let go = gout.channel(ch);
                            let gd = gx.channel_mut(ch);
                            for z in 0..2 * d {
                                for y in 0..gh {
                                    for x2 in 0..gw {
                                        gd[((z / 2) * h + y / 2) * w + x2 / 2] +=
                                            go[(z * gh + y) * gw + x2];
                                    }
                                }
                            }
                        }
                        self.add_grad(x, &gx);
                    }
                }
                Op::Concat { a, b, a_channels } => {
                    let (a, b, ac) = (*a, *b, *a_channels);
                    let plane: usize = gout.shape()[1..].iter().product();
                    if self.requires(a) {
                        let mut shape = gout.shape().to_vec();
                        shape[0] = ac;
                        let ga = Tensor::from_vec(&shape, gout.data()[..ac * plane].to_vec()).unwrap();
                        self.add_grad(a, &ga);
                    }
                    if self.requires(b) {
                        let bc = gout.shape()[0] - ac;
                        let mut shape = gout.shape().to_vec();
                        shape[0] = bc;
                        let gb = Tensor::from_vec(&shape, gout.data()[ac * plane..].to_vec()).unwrap();
                        self.add_grad(b, &gb);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &gout);
                    self.add_grad(b, &gout);
                }
                Op::SliceChannel { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.requires(x) {
                        let mut gx = Tensor::zeros(self.value(x).shape());
                        gx.channel_mut(c).copy_from_slice(gout.data());
                        self.add_grad(x, &gx);
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    if self.requires(x) {
                        let g = gout.item();
                        let gx = Tensor::full(self.value(x).shape(), g);
                        self.add_grad(x, &gx);
                    }
                }
                Op::DiceLoss { probs, target, eps } => {
                    let (probs, eps) = (*probs, *eps);
                    let target = target.clone();
                    if self.requires(probs) {
                        let pv = self.value(probs);
                        let inter: f64 = pv.data().iter().zip(target.data()).map(|(p, y)| p * y).sum();
                        let num = 2.0 * inter + eps;
                        let den = pv.sum() + target.sum() + eps;
                        let g = gout.item();
                        let mut gx = Tensor::zeros(pv.shape());
                        for ((o, &y), _) in gx.data_mut().iter_mut().zip(target.data()).zip(pv.data()) {
                            // d/dp [ -num/den ] = -(2y*den - num) / den^2
                            *o = g * (-(2.0 * y * den - num) / (den * den));
                        }
                        self.add_grad(probs, &gx);
                    }
                }
                Op::BceLoss { probs, target } => {
                    let probs = *probs;
                    let target = target.clone();
                    if self.requires(probs) {
                        let pv = self.value(probs);
                        let n = pv.numel() as f64;
                        let g = gout.item();
                        let mut gx = Tensor::zeros(pv.shape());
                        for ((o, &y), &p) in gx.data_mut().iter_mut().zip(target.data()).zip(pv.data()) {
                            if (1e-7..=1.0 - 1e-7).contains(&p) {
                                *o = g * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
                            }
                        }
                        self.add_grad(probs, &gx);
                    }
                }
                Op::SizePenalty { s_hat, prior, gamma } => {
                    let (s_hat, prior, gamma) = (*s_hat, *prior, *gamma);
                    if self.requires(s_hat) {
                        let s = self.value(s_hat).item();
                        let lo = (1.0 - gamma) * prior;
                        let hi = (1.0 + gamma) * prior;
                        let slope = if s < lo {
                            -1.0
                        } else if s > hi {
                            1.0
                        } else {
                            0.0
                        };
                        let g = Tensor::scalar(gout.item() * slope);
                        self.add_grad(s_hat, &g);
                    }
                }
                Op::WeightedSum { terms } => {
                    let terms = terms.clone();
                    let g = gout.item();
                    for (v, w) in terms {
                        if self.requires(v) {
                            let gi = Tensor::scalar(g * w);
                            self.add_grad(v, &gi);
                        }
                    }
                }
                Op::Stitch { tiles, origins, coverage } => {
                    let tiles = tiles.clone();
                    let origins = origins.clone();
                    let coverage = coverage.clone();
                    let [c, d, h, w] = shape4(&gout);
                    for (&t, o) in tiles.iter().zip(&origins) {
                        if !self.requires(t) {
                            continue;
                        }
                        let tshape = self.value(t).shape().to_vec();
                        let [_, pd, ph, pw] = [tshape[0], tshape[1], tshape[2], tshape[3]];
                        let mut gt = Tensor::zeros(&tshape);
                        for ch in 0..c {
                            let go = gout.channel(ch);
                            let gd = gt.channel_mut(ch);
                            for z in o[0]..(o[0] + pd).min(d) {
                                for y in o[1]..(o[1] + ph).min(h) {
                                    for x in o[2]..(o[2] + pw).min(w) {
                                        let oi = (z * h + y) * w + x;
                                        let si = ((z - o[0]) * ph + (y - o[1])) * pw + (x - o[2]);
                                        gd[si] = go[oi] / coverage.data()[oi];
                                    }
                                }
                            }
                        }
                        self.add_grad(t, &gt);
                    }
                }
            }
        }
        Ok(())
    }
}

fn shape4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    [s[0], s[1], s[2], s[3]]
}

/// Clipped row range so that `x + dx` stays inside `[0, w)` for `x` in range.
#[inline]
fn shifted_range(extent: usize, delta: isize) -> (usize, usize) {
    let lo = if delta < 0 { (-delta) as usize } else { 0 };
    let hi = if delta > 0 { extent - delta as usize } else { extent };
    (lo, hi.max(lo))
}

fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, k: usize) -> Tensor {
    let [ci, d, h, wd] = shape4(x);
    let co = w.shape()[0];
    debug_assert_eq!(w.shape(), &[co, ci, k, k, k]);
    debug_assert_eq!(b.shape(), &[co]);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[co, d, h, wd]);
    for oc in 0..co {
        {
            let dst = out.channel_mut(oc);
            let bias = b.data()[oc];
            dst.iter_mut().for_each(|v| *v = bias);
        }
        for icx in 0..ci {
            let src = x.channel(icx);
            let wbase = (oc * ci + icx) * k * k * k;
            for kz in 0..k {
                let dz = kz as isize - pad;
                let (z0, z1) = shifted_range(d, dz);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = shifted_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = shifted_range(wd, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w.data()[wbase + (kz * k + ky) * k + kx];
                        let dst = out.channel_mut(oc);
                        for z in z0..z1 {
                            let sz = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let orow = &mut dst[(z * h + y) * wd + x0..(z * h + y) * wd + x1];
                                let sbase = (sz * h + sy) * wd;
                                let srow = &src[(sbase as isize + x0 as isize + dx) as usize
                                    ..(sbase as isize + x1 as isize + dx) as usize];
                                for (o, &s) in orow.iter_mut().zip(srow.iter()) {
                                    *o += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input: correlation of `gout` with the
/// kernel reflected through its center.
fn conv3d_backward_input(gout: &Tensor, w: &Tensor, k: usize) -> Tensor {
    let [co, d, h, wd] = shape4(gout);
    let ci = w.shape()[1];
    let pad = (k / 2) as isize;
    let mut gx = Tensor::zeros(&[ci, d, h, wd]);
    for icx in 0..ci {
        for oc in 0..co {
            let src = gout.channel(oc);
            let wbase = (oc * ci + icx) * k * k * k;
            for kz in 0..k {
                let dz = -(kz as isize - pad);
                let (z0, z1) = shifted_range(d, dz);
                for ky in 0..k {
                    let dy = -(ky as isize - pad);
                    let (y0, y1) = shifted_range(h, dy);
                    for kx in 0..k {
                        let dx = -(kx as isize - pad);
                        let (x0, x1) = shifted_range(wd, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w.data()[wbase + (kz * k + ky) * k + kx];
                        let dst = gx.channel_mut(icx);
                        for z in z0..z1 {
                            let sz = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let orow = &mut dst[(z * h + y) * wd + x0..(z * h + y) * wd + x1];
                                let sbase = (sz * h + sy) * wd;
                                let srow = &src[(sbase as isize + x0 as isize + dx) as usize
                                    ..(sbase as isize + x1 as isize + dx) as usize];
                                for (o, &s) in orow.iter_mut().zip(srow.iter()) {
                                    *o += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient w.r.t. the convolution weights: per-tap dot products between
/// `gout` and the correspondingly shifted input.
fn conv3d_backward_weight(gout: &Tensor, x: &Tensor, wshape: &[usize], k: usize) -> Tensor {
    let [co, d, h, wd] = shape4(gout);
    let ci = x.shape()[0];
    let pad = (k / 2) as isize;
    let mut gw = Tensor::zeros(wshape);
    for oc in 0..co {
        let go = gout.channel(oc);
        for icx in 0..ci {
            let src = x.channel(icx);
            let wbase = (oc * ci + icx) * k * k * k;
            for kz in 0..k {
                let dz = kz as isize - pad;
                let (z0, z1) = shifted_range(d, dz);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = shifted_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = shifted_range(wd, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for z in z0..z1 {
                            let sz = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &go[(z * h + y) * wd + x0..(z * h + y) * wd + x1];
                                let sbase = (sz * h + sy) * wd;
                                let srow = &src[(sbase as isize + x0 as isize + dx) as usize
                                    ..(sbase as isize + x1 as isize + dx) as usize];
                                acc += grow
                                    .iter()
                                    .zip(srow.iter())
                                    .map(|(&g, &s)| g * s)
                                    .sum::<f64>();
                            }
                        }
                        gw.data_mut()[wbase + (kz * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    /// Central finite-difference check of `d loss / d leaf` at `n_coords`
    /// random coordinates of the given leaf tensor.
    fn gradcheck(
        build: &dyn Fn(&mut Tape, &Tensor) -> Var,
        leaf0: &Tensor,
        n_coords: usize,
        h: f64,
        tol: f64,
        rng: &mut Rng,
    ) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf0.clone(), true);
        let loss = build(&mut tape, leaf0);
        let _ = loss;
        // Rebuild: the closure receives the tape and the leaf tensor and must
        // construct the graph using tape.leaf internally. Simplest scheme:
        // the closure pushes its own leaf, so do everything in one call.
        drop(tape);
        let eval = |t: &Tensor| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let loss = build(&mut tape, t);
            let val = tape.value(loss).item();
            (val, None)
        };
        // Analytic gradient.
        let mut tape = Tape::new();
        let loss = build(&mut tape, leaf0);
        tape.backward(loss).unwrap();
        // find the leaf: it is node 0 by convention of `build`
        let analytic = tape.grad(Var(0)).expect("leaf grad").clone();
        let _ = leaf;
        for _ in 0..n_coords {
            let i = rng.below(leaf0.numel());
            let mut plus = leaf0.clone();
            plus.data_mut()[i] += h;
            let mut minus = leaf0.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() < tol,
                "coord {i}: fd {fd:.9e} vs autodiff {an:.9e}"
            );
        }
    }

    #[test]
    fn conv3d_matches_direct_computation() {
        // 1 input channel, 1 output channel, k=3: check one interior voxel by hand.
        let mut rng = Rng::new(3);
        let x = rand_tensor(&[1, 4, 4, 4], &mut rng);
        let w = rand_tensor(&[1, 1, 3, 3, 3], &mut rng);
        let b = Tensor::from_vec(&[1], vec![0.7]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let bv = tape.leaf(b.clone(), false);
        let out = tape.conv3d(xv, wv, bv, 3);
        let mut expect = 0.7;
        for kz in 0..3usize {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let xi = (2 + kz - 1, 1 + ky - 1, 2 + kx - 1);
                    expect += w.data()[(kz * 3 + ky) * 3 + kx]
                        * x.data()[(xi.0 * 4 + xi.1) * 4 + xi.2];
                }
            }
        }
        let got = tape.value(out).channel(0)[(2 * 4 + 1) * 4 + 2];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn conv3d_zero_padding_at_corner() {
        let x = Tensor::full(&[1, 2, 2, 2], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
        let out = tape.conv3d(xv, wv, bv, 3);
        // corner voxel sees exactly the 2x2x2 in-bounds neighborhood
        assert_eq!(tape.value(out).channel(0)[0], 8.0);
    }

    #[test]
    fn conv3d_gradcheck() {
        let mut rng = Rng::new(11);
        let x0 = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let w0 = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
        let b0 = rand_tensor(&[3], &mut rng);
        // grad wrt input
        let w0c = w0.clone();
        let b0c = b0.clone();
        let build_x = move |tape: &mut Tape, t: &Tensor| {
            let x = tape.leaf(t.clone(), true);
            let w = tape.leaf(w0c.clone(), false);
            let b = tape.leaf(b0c.clone(), false);
            let y = tape.conv3d(x, w, b, 3);
            let s = tape.sigmoid(y);
            tape.sum_all(s)
        };
        gradcheck(&build_x, &x0, 12, 1e-5, 1e-6, &mut rng);
        // grad wrt weight
        let x0c = x0.clone();
        let b0c = b0.clone();
        let build_w = move |tape: &mut Tape, t: &Tensor| {
            let w = tape.leaf(t.clone(), true);
            let x = tape.leaf(x0c.clone(), false);
            let b = tape.leaf(b0c.clone(), false);
            let y = tape.conv3d(x, w, b, 3);
            let s = tape.sigmoid(y);
            tape.sum_all(s)
        };
        gradcheck(&build_w, &w0, 12, 1e-5, 1e-6, &mut rng);
        // grad wrt bias
        let x0c = x0.clone();
        let w0c = w0.clone();
        let build_b = move |tape: &mut Tape, t: &Tensor| {
            let b = tape.leaf(t.clone(), true);
            let x = tape.leaf(x0c.clone(), false);
            let w = tape.leaf(w0c.clone(), false);
            let y = tape.conv3d(x, w, b, 3);
            let s = tape.sigmoid(y);
            tape.sum_all(s)
        };
        gradcheck(&build_b, &b0, 3, 1e-5, 1e-6, &mut rng);
    }

    #[test]
    fn conv1x1_parameter_shape_and_gradcheck() {
        let mut rng = Rng::new(7);
        let x0 = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let w0 = rand_tensor(&[2, 4, 1, 1, 1], &mut rng);
        let b0 = rand_tensor(&[2], &mut rng);
        let (x0c, b0c) = (x0.clone(), b0.clone());
        let build = move |tape: &mut Tape, t: &Tensor| {
            let w = tape.leaf(t.clone(), true);
            let x = tape.leaf(x0c.clone(), false);
            let b = tape.leaf(b0c.clone(), false);
            let y = tape.conv3d(x, w, b, 1);
            tape.sum_all(y)
        };
        gradcheck(&build, &w0, 8, 1e-5, 1e-6, &mut rng);
    }

    #[test]
    fn batch_norm_normalizes_and_gradchecks() {
        let mut rng = Rng::new(5);
        let x0 = rand_tensor(&[2, 4, 4, 4], &mut rng);
        {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false);
            let g = tape.leaf(Tensor::full(&[2], 1.0), false);
            let b = tape.leaf(Tensor::zeros(&[2]), false);
            let (y, mean, var) = tape.batch_norm(x, g, b, 1e-5, None);
            let yc = tape.value(y).channel(0);
            let m: f64 = yc.iter().sum::<f64>() / yc.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!(mean[0].is_finite() && var[0] > 0.0);
        }
        let build = move |tape: &mut Tape, t: &Tensor| {
            let x = tape.leaf(t.clone(), true);
            let g = tape.leaf(Tensor::from_vec(&[2], vec![1.3, 0.8]).unwrap(), false);
            let b = tape.leaf(Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap(), false);
            let (y, _, _) = tape.batch_norm(x, g, b, 1e-5, None);
            let s = tape.sigmoid(y);
            tape.sum_all(s)
        };
        gradcheck(&build, &x0, 12, 1e-5, 1e-5, &mut rng);
    }

    #[test]
    fn batch_norm_fixed_stats_is_affine() {
        let mut rng = Rng::new(9);
        let x0 = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let mean = vec![0.5];
        let var = vec![4.0];
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), false);
        let g = tape.leaf(Tensor::from_vec(&[1], vec![2.0]).unwrap(), false);
        let b = tape.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap(), false);
        let (y, _, _) = tape.batch_norm(x, g, b, 0.0, Some((&mean, &var)));
        for (o, &i) in tape.value(y).data().iter().zip(x0.data()) {
            assert!((o - ((i - 0.5) / 2.0 * 2.0 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_upsample_concat_add_gradcheck() {
        let mut rng = Rng::new(13);
        let x0 = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let build = move |tape: &mut Tape, t: &Tensor| {
            let x = tape.leaf(t.clone(), true);
            let p = tape.avg_pool2(x);
            let u = tape.upsample_nearest2(p);
            let c = tape.concat(u, x);
            let s = tape.slice_channel(c, 1);
            let a = tape.add(s, s);
            let sg = tape.sigmoid(a);
            tape.sum_all(sg)
        };
        gradcheck(&build, &x0, 12, 1e-5, 1e-6, &mut rng);
    }

    #[test]
    fn dice_loss_value_and_gradcheck() {
        let mut rng = Rng::new(17);
        // probs = target exactly -> loss ~ 0
        let y = Tensor::from_fn(&[1, 4, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let p = tape.leaf(y.clone(), false);
        let l = tape.dice_loss(p, y.clone(), 1e-5);
        assert!(tape.value(l).item() < 1e-4);
        // gradcheck on random probabilities in (0,1)
        let p0 = Tensor::from_fn(&[1, 4, 4, 4], |_| rng.uniform_in(0.05, 0.95));
        let yc = y.clone();
        let build = move |tape: &mut Tape, t: &Tensor| {
            let p = tape.leaf(t.clone(), true);
            tape.dice_loss(p, yc.clone(), 1e-5)
        };
        gradcheck(&build, &p0, 12, 1e-6, 1e-6, &mut rng);
    }

    #[test]
    fn bce_loss_gradcheck() {
        let mut rng = Rng::new(19);
        let y = Tensor::from_fn(&[1, 3, 3, 3], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let p0 = Tensor::from_fn(&[1, 3, 3, 3], |_| rng.uniform_in(0.1, 0.9));
        let build = move |tape: &mut Tape, t: &Tensor| {
            let p = tape.leaf(t.clone(), true);
            tape.bce_loss(p, y.clone())
        };
        gradcheck(&build, &p0, 10, 1e-6, 1e-6, &mut rng);
    }

    #[test]
    fn size_penalty_piecewise_values_and_slope() {
        let cases = [
            (95.0, 0.0, 0.0),   // inside band [90, 110]
            (80.0, 10.0, -1.0), // below
            (121.0, 11.0, 1.0), // above
        ];
        for (s_hat, want, slope) in cases {
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::scalar(s_hat), true);
            let p = tape.size_penalty(s, 100.0, 0.1);
            assert!((tape.value(p).item() - want).abs() < 1e-12);
            tape.backward(p).unwrap();
            assert_eq!(tape.grad(s).unwrap().item(), slope);
        }
    }

    #[test]
    fn stitch_single_tile_identity_and_overlap_average() {
        let mut rng = Rng::new(23);
        let t0 = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(t0.clone(), false);
        let out = tape.stitch(&[a], &[[0, 0, 0]], [2, 2, 2]);
        assert!(tape.value(out).bit_eq(&t0));

        // two tiles overlapping on one x-column: average there
        let t1 = Tensor::full(&[1, 1, 1, 2], 1.0);
        let t2 = Tensor::full(&[1, 1, 1, 2], 3.0);
        let mut tape = Tape::new();
        let a = tape.leaf(t1, true);
        let b = tape.leaf(t2, true);
        let out = tape.stitch(&[a, b], &[[0, 0, 0], [0, 0, 1]], [1, 1, 3]);
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0]);
        let s = tape.sum_all(out);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 0.5]);
        assert_eq!(tape.grad(b).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn stitch_gradcheck_through_sigmoid() {
        let mut rng = Rng::new(29);
        let t0 = rand_tensor(&[1, 2, 2, 4], &mut rng);
        let other = rand_tensor(&[1, 2, 2, 4], &mut rng);
        let build = move |tape: &mut Tape, t: &Tensor| {
            let a = tape.leaf(t.clone(), true);
            let b = tape.leaf(other.clone(), false);
            let st = tape.stitch(&[a, b], &[[0, 0, 0], [0, 0, 2]], [2, 2, 6]);
            let s = tape.sigmoid(st);
            tape.sum_all(s)
        };
        gradcheck(&build, &t0, 10, 1e-5, 1e-6, &mut rng);
    }

    #[test]
    fn no_grad_allocated_for_frozen_leaves() {
        let mut rng = Rng::new(31);
        let x0 = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let frozen = tape.leaf(x0.clone(), false);
        let live = tape.leaf(x0, true);
        let y = tape.add(frozen, live);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(live).is_some());
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.3), true);
        let b = tape.leaf(Tensor::scalar(10.0), true);
        let l = tape.weighted_sum(&[(a, 1.0), (b, 1.0)]);
        assert!((tape.value(l).item() - 10.3).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 1.0);
        assert_eq!(tape.grad(b).unwrap().item(), 1.0);
    }
}
