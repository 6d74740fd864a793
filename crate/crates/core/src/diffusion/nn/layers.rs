use rand::Rng;

use super::{gemm_view, join, matmul, Module, Param, Real, Tensor, View};

/// 2-D convolution via im2col and GEMM. Weights are `[cout, cin*kh*kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
    cols: Vec<T>,
    /// Zero-padded input of the last forward, `[n, cin, chan_stride]`.
    padded: Vec<T>,
    padded_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::uniform(vec![cout, fan_in], bound, rng),
            bias: Param::uniform(vec![cout], bound, rng),
            input: None,
            cols: Vec::new(),
            padded: Vec::new(),
            padded_hw: (0, 0),
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, (3, 3), (1, 1), (1, 1), rng)
    }

    pub fn pointwise(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, (1, 1), (1, 1), (0, 0), rng)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad == (0, 0)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    /// Visits every (column row, output row, input row) triple together with
    /// the valid output-column range and its input-column offset. Rows that
    /// fall into the padding are passed with `iy = None`.
    fn for_each_row(
        &self,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, Option<usize>, std::ops::Range<usize>, isize),
    ) {
        let (oh, ow) = self.out_hw(h, w);
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        for c in 0..self.cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let shift = kj as isize - self.pad.1 as isize;
                    // ox valid when 0 <= ox*sw + shift < w
                    let lo = if shift < 0 { ((-shift) as usize).div_ceil(sw) } else { 0 };
                    let hi = if (w as isize) > shift {
                        (((w as isize - shift) as usize).div_ceil(sw)).min(ow)
                    } else {
                        0
                    };
                    for oy in 0..oh {
                        let iy = (oy * sh + ki) as isize - self.pad.0 as isize;
                        let src = (iy >= 0 && iy < h as isize).then(|| c * h * w + iy as usize * w);
                        f(row, oy, src, lo..hi.max(lo), shift);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let ohw = oh * ow;
        let sw = self.stride.1;
        self.for_each_row(h, w, |row, oy, src, valid, shift| {
            let dst = &mut cols[row * ohw + oy * ow..row * ohw + (oy + 1) * ow];
            let Some(base) = src else {
                dst.fill(T::zero());
                return;
            };
            dst[..valid.start].fill(T::zero());
            dst[valid.end..].fill(T::zero());
            if valid.is_empty() {
                return;
            }
            let first = (base as isize + (valid.start * sw) as isize + shift) as usize;
            if sw == 1 {
                dst[valid.clone()].copy_from_slice(&x[first..first + valid.len()]);
            } else {
                for (k, d) in dst[valid].iter_mut().enumerate() {
                    *d = x[first + k * sw];
                }
            }
        });
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let ohw = oh * ow;
        let sw = self.stride.1;
        self.for_each_row(h, w, |row, oy, src, valid, shift| {
            let Some(base) = src else { return };
            if valid.is_empty() {
                return;
            }
            let g = &cols[row * ohw + oy * ow + valid.start..row * ohw + oy * ow + valid.end];
            let first = (base as isize + (valid.start * sw) as isize + shift) as usize;
            if sw == 1 {
                for (d, v) in dx[first..first + g.len()].iter_mut().zip(g) {
                    *d += *v;
                }
            } else {
                for (k, v) in g.iter().enumerate() {
                    dx[first + k * sw] += *v;
                }
            }
        });
    }

    /// Stride-1 convolution whose output has the input's size.
    fn is_same(&self) -> bool {
        let (kh, kw) = self.kernel;
        self.stride == (1, 1) && kh == 2 * self.pad.0 + 1 && kw == 2 * self.pad.1 + 1 && !self.is_pointwise()
    }

    /// Padded row width and per-channel stride of the padded buffer. The
    /// stride leaves `kw` spare values so every tap's shifted view of
    /// `h * wp` outputs stays in bounds.
    fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let wp = w + 2 * self.pad.1;
        let hp = h + 2 * self.pad.0;
        (wp, hp * wp + self.kernel.1)
    }

    /// Same-size convolution as one GEMM per kernel tap on shifted views
    /// of the padded input. Outputs are computed on the padded row grid and
    /// the `2 * pad` junk columns per row are dropped.
    fn forward_same(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, cin, h, w] = x.shape;
        let (kh, kw) = self.kernel;
        let taps = kh * kw;
        let k = self.weight.shape[1];
        let (wp, cs) = self.padded_dims(h, w);
        let p = h * wp;
        self.padded.clear();
        self.padded.resize(n * cin * cs, T::zero());
        for i in 0..n {
            let src = x.sample(i);
            for ci in 0..cin {
                for y in 0..h {
                    let dst = (i * cin + ci) * cs + (y + self.pad.0) * wp + self.pad.1;
                    self.padded[dst..dst + w].copy_from_slice(&src[(ci * h + y) * w..(ci * h + y + 1) * w]);
                }
            }
        }
        let mut out = Tensor::zeros([n, self.cout, h, w]);
        let mut big = std::mem::take(&mut self.cols);
        big.resize(self.cout * p, T::zero());
        for i in 0..n {
            for ki in 0..kh {
                for kj in 0..kw {
                    let tap = ki * kw + kj;
                    gemm_view(
                        self.cout,
                        cin,
                        p,
                        &self.weight.value,
                        View { offset: tap, rs: k, cs: taps },
                        &self.padded,
                        View::rows(i * cin * cs + ki * wp + kj, cs),
                        if tap == 0 { T::zero() } else { T::one() },
                        &mut big,
                        View::rows(0, p),
                    );
                }
            }
            let y = out.sample_mut(i);
            for co in 0..self.cout {
                let b = self.bias.value[co];
                for r in 0..h {
                    let src = &big[co * p + r * wp..co * p + r * wp + w];
                    for (d, v) in y[(co * h + r) * w..(co * h + r + 1) * w].iter_mut().zip(src) {
                        *d = *v + b;
                    }
                }
            }
        }
        self.cols = big;
        self.padded_hw = (h, w);
        out
    }

    fn backward_same(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w) = self.padded_hw;
        let [n, cout, _, _] = dy.shape;
        assert_eq!(dy.shape, [n, self.cout, h, w], "conv grad shape");
        let cin = self.cin;
        let (kh, kw) = self.kernel;
        let taps = kh * kw;
        let k = self.weight.shape[1];
        let (wp, cs) = self.padded_dims(h, w);
        let p = h * wp;
        assert_eq!(self.padded.len(), n * cin * cs, "conv backward without forward");
        let mut dx = Tensor::zeros([n, cin, h, w]);
        let mut dyp = vec![T::zero(); cout * p];
        let mut dxp = vec![T::zero(); cin * cs];
        // Position-major copies: the weight-gradient GEMM has a long
        // reduction over positions and runs far faster with both operands
        // laid out that way.
        let mut dypt = vec![T::zero(); p * cout];
        let mut xpt = vec![T::zero(); cs * cin];
        for i in 0..n {
            let g = dy.sample(i);
            for co in 0..cout {
                let plane = &g[co * h * w..(co + 1) * h * w];
                self.bias.grad[co] += plane.iter().copied().sum::<T>();
                for r in 0..h {
                    dyp[co * p + r * wp..co * p + r * wp + w].copy_from_slice(&plane[r * w..(r + 1) * w]);
                }
            }
            for (co, row) in dyp.chunks_exact(p).enumerate() {
                for (q, v) in row.iter().enumerate() {
                    dypt[q * cout + co] = *v;
                }
            }
            let xs = &self.padded[i * cin * cs..(i + 1) * cin * cs];
            for (ci, row) in xs.chunks_exact(cs).enumerate() {
                for (q, v) in row.iter().enumerate() {
                    xpt[q * cin + ci] = *v;
                }
            }
            dxp.iter_mut().for_each(|v| *v = T::zero());
            for ki in 0..kh {
                for kj in 0..kw {
                    let tap = ki * kw + kj;
                    let off = ki * wp + kj;
                    gemm_view(
                        cout,
                        p,
                        cin,
                        &dypt,
                        View { offset: 0, rs: 1, cs: cout },
                        &xpt,
                        View::rows(off * cin, cin),
                        T::one(),
                        &mut self.weight.grad,
                        View { offset: tap, rs: k, cs: taps },
                    );
                    gemm_view(
                        cin,
                        cout,
                        p,
                        &self.weight.value,
                        View { offset: tap, rs: taps, cs: k },
                        &dyp,
                        View::rows(0, p),
                        T::one(),
                        &mut dxp,
                        View::rows(off, cs),
                    );
                }
            }
            let d = dx.sample_mut(i);
            for ci in 0..cin {
                for y in 0..h {
                    let src = ci * cs + (y + self.pad.0) * wp + self.pad.1;
                    d[(ci * h + y) * w..(ci * h + y + 1) * w].copy_from_slice(&dxp[src..src + w]);
                }
            }
        }
        self.padded.clear();
        dx
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.cin, "conv input channels");
        if self.is_same() {
            return self.forward_same(x);
        }
        let (oh, ow) = self.out_hw(h, w);
        let ohw = oh * ow;
        let k = self.weight.shape[1];
        let mut out = Tensor::zeros([n, self.cout, oh, ow]);
        let mut cols = std::mem::take(&mut self.cols);
        if !self.is_pointwise() {
            cols.resize(k * ohw, T::zero());
        }
        for i in 0..n {
            let src: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, &mut cols);
                &cols
            };
            let y = out.sample_mut(i);
            matmul(&self.weight.value, false, src, false, y, self.cout, k, ohw, T::zero());
            for (co, b) in self.bias.value.iter().enumerate() {
                y[co * ohw..(co + 1) * ohw].iter_mut().for_each(|v| *v += *b);
            }
        }
        self.cols = cols;
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        if self.is_same() {
            return self.backward_same(dy);
        }
        let x = self.input.take().expect("conv backward without forward");
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_hw(h, w);
        let ohw = oh * ow;
        let k = self.weight.shape[1];
        assert_eq!(dy.shape, [n, self.cout, oh, ow], "conv grad shape");
        let mut dx = Tensor::zeros(x.shape);
        let mut cols = std::mem::take(&mut self.cols);
        let mut dcols = vec![T::zero(); if self.is_pointwise() { 0 } else { k * ohw }];
        if !self.is_pointwise() {
            cols.resize(k * ohw, T::zero());
        }
        for i in 0..n {
            let g = dy.sample(i);
            for (co, db) in self.bias.grad.iter_mut().enumerate() {
                *db += g[co * ohw..(co + 1) * ohw].iter().copied().sum::<T>();
            }
            if self.is_pointwise() {
                matmul(g, false, x.sample(i), true, &mut self.weight.grad, self.cout, ohw, k, T::one());
                matmul(&self.weight.value, true, g, false, dx.sample_mut(i), k, self.cout, ohw, T::zero());
            } else {
                self.im2col(x.sample(i), h, w, &mut cols);
                matmul(g, false, &cols, true, &mut self.weight.grad, self.cout, ohw, k, T::one());
                matmul(&self.weight.value, true, g, false, &mut dcols, k, self.cout, ohw, T::zero());
                self.col2im(&dcols, h, w, dx.sample_mut(i));
            }
        }
        self.cols = cols;
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    xhat: Option<Tensor<T>>,
    inv_std: Vec<T>,
}

/// Largest group count <= 32 that divides `channels` with at least four
/// channels per group (one group for narrow layers).
pub fn norm_groups(channels: usize) -> usize {
    (1..=32.min(channels / 4).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl<T: Real> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            groups: norm_groups(channels),
            channels,
            eps: 1e-5,
            gamma: Param::new(vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(vec![channels]),
            xhat: None,
            inv_std: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = x.shape;
        assert_eq!(c, self.channels, "group norm channels");
        let hw = x.hw();
        let cpg = c / self.groups;
        let m = (cpg * hw) as f64;
        let mut xhat = Tensor::zeros(x.shape);
        let mut out = Tensor::zeros(x.shape);
        self.inv_std.clear();
        for i in 0..n {
            for g in 0..self.groups {
                let range = (i * c + g * cpg) * hw..(i * c + (g + 1) * cpg) * hw;
                let src = &x.data[range.clone()];
                let mean = src.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m;
                let var = src
                    .iter()
                    .map(|v| (v.to_f64().unwrap() - mean).powi(2))
                    .sum::<f64>()
                    / m;
                let inv = 1.0 / (var + self.eps).sqrt();
                self.inv_std.push(T::lit(inv));
                let (mean, inv) = (T::lit(mean), T::lit(inv));
                for k in 0..cpg {
                    let ch = g * cpg + k;
                    let (gamma, beta) = (self.gamma.value[ch], self.beta.value[ch]);
                    let plane = range.start + k * hw..range.start + (k + 1) * hw;
                    let xs = &x.data[plane.clone()];
                    let xh = &mut xhat.data[plane.clone()];
                    let o = &mut out.data[plane];
                    for j in 0..hw {
                        let v = (xs[j] - mean) * inv;
                        xh[j] = v;
                        o[j] = v * gamma + beta;
                    }
                }
            }
        }
        self.xhat = Some(xhat);
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let xhat = self.xhat.take().expect("group norm backward without forward");
        let [n, c, _, _] = xhat.shape;
        let hw = xhat.hw();
        let cpg = c / self.groups;
        let m = T::lit((cpg * hw) as f64);
        let mut dx = Tensor::zeros(xhat.shape);
        for i in 0..n {
            for g in 0..self.groups {
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for k in 0..cpg {
                    let ch = g * cpg + k;
                    let plane = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    let (d, xh) = (&dy.data[plane.clone()], &xhat.data[plane]);
                    let mut sd = T::zero();
                    let mut sdx = T::zero();
                    for j in 0..hw {
                        sd += d[j];
                        sdx += d[j] * xh[j];
                    }
                    self.gamma.grad[ch] += sdx;
                    self.beta.grad[ch] += sd;
                    sum_d += sd * self.gamma.value[ch];
                    sum_dx += sdx * self.gamma.value[ch];
                }
                let inv = self.inv_std[i * self.groups + g];
                let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
                for k in 0..cpg {
                    let ch = g * cpg + k;
                    let gamma = self.gamma.value[ch];
                    let plane = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    let (d, xh) = (&dy.data[plane.clone()], &xhat.data[plane.clone()]);
                    let out = &mut dx.data[plane];
                    for j in 0..hw {
                        out[j] = inv * (d[j] * gamma - mean_d - xh[j] * mean_dx);
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for GroupNorm<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `x * sigmoid(x)`.
#[derive(Debug, Clone, Default)]
pub struct Silu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Silu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let out = x.map(|v| v / (T::one() + (-v).exp()));
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("silu backward without forward");
        let mut dx = x;
        for (v, g) in dx.data.iter_mut().zip(&dy.data) {
            let s = T::one() / (T::one() + (-*v).exp());
            *v = *g * s * (T::one() + *v * (T::one() - s));
        }
        dx
    }
}

/// Dense layer on `[n, in, 1, 1]` tensors; weights are `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Param::uniform(vec![out, inp], bound, rng),
            bias: Param::uniform(vec![out], bound, rng),
            input: None,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape[1], self.weight.shape[0])
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (inp, out) = self.dims();
        let n = x.n();
        assert_eq!(x.sample_len(), inp, "linear input width");
        let mut y = Tensor::zeros([n, out, 1, 1]);
        matmul(&x.data, false, &self.weight.value, true, &mut y.data, n, inp, out, T::zero());
        for row in y.data.chunks_exact_mut(out) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += *b;
            }
        }
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("linear backward without forward");
        let (inp, out) = self.dims();
        let n = x.n();
        matmul(&dy.data, true, &x.data, false, &mut self.weight.grad, out, n, inp, T::one());
        for row in dy.data.chunks_exact(out) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += *g;
            }
        }
        let mut dx = Tensor::zeros(x.shape);
        matmul(&dy.data, false, &self.weight.value, false, &mut dx.data, n, out, inp, T::zero());
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub channels: usize,
    pub norm: GroupNorm<T>,
    pub qkv: Conv2d<T>,
    pub proj: Conv2d<T>,
    qkv_out: Option<Tensor<T>>,
    probs: Vec<T>,
}

impl<T: Real> Attention<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            norm: GroupNorm::new(channels),
            qkv: Conv2d::pointwise(channels, 3 * channels, rng),
            proj: Conv2d::pointwise(channels, channels, rng),
            qkv_out: None,
            probs: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let scale = T::lit(1.0 / (c as f64).sqrt());
        let qkv = self.qkv.forward(&self.norm.forward(x));
        let mut attended = Tensor::zeros([n, c, h, w]);
        self.probs.clear();
        self.probs.resize(n * hw * hw, T::zero());
        for i in 0..n {
            let s = qkv.sample(i);
            let (q, k, v) = (&s[..c * hw], &s[c * hw..2 * c * hw], &s[2 * c * hw..]);
            let p = &mut self.probs[i * hw * hw..(i + 1) * hw * hw];
            matmul(q, true, k, false, p, hw, c, hw, T::zero());
            for row in p.chunks_exact_mut(hw) {
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v * scale - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v = *v / sum);
            }
            matmul(v, false, p, true, attended.sample_mut(i), c, hw, hw, T::zero());
        }
        self.qkv_out = Some(qkv);
        let mut out = self.proj.forward(&attended);
        out.add_assign(x);
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let qkv = self.qkv_out.take().expect("attention backward without forward");
        let [n, c, h, w] = dy.shape;
        let hw = h * w;
        let scale = T::lit(1.0 / (c as f64).sqrt());
        let d_att = self.proj.backward(dy);
        let mut dqkv = Tensor::zeros(qkv.shape);
        let mut dp = vec![T::zero(); hw * hw];
        for i in 0..n {
            let s = qkv.sample(i);
            let (q, k, v) = (&s[..c * hw], &s[c * hw..2 * c * hw], &s[2 * c * hw..]);
            let p = &self.probs[i * hw * hw..(i + 1) * hw * hw];
            let go = d_att.sample(i);
            let dst = dqkv.sample_mut(i);
            let (dq, rest) = dst.split_at_mut(c * hw);
            let (dk, dv) = rest.split_at_mut(c * hw);
            matmul(go, false, p, false, dv, c, hw, hw, T::zero());
            matmul(go, true, v, false, &mut dp, hw, c, hw, T::zero());
            for (drow, prow) in dp.chunks_exact_mut(hw).zip(p.chunks_exact(hw)) {
                let dot: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                for (d, pv) in drow.iter_mut().zip(prow) {
                    *d = *pv * (*d - dot) * scale;
                }
            }
            matmul(k, false, &dp, true, dq, c, hw, hw, T::zero());
            matmul(q, false, &dp, false, dk, c, hw, hw, T::zero());
        }
        let mut dx = self.norm.backward(&self.qkv.backward(&dqkv));
        dx.add_assign(dy);
        dx
    }
}

impl<T: Real> Module<T> for Attention<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Checks d<f(x), g>/dx against central differences on a few inputs.
    fn check_input_grad(
        mut f: impl FnMut(&Tensor<f64>) -> Tensor<f64>,
        mut back: impl FnMut(&Tensor<f64>) -> Tensor<f64>,
        x: &Tensor<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let y = f(x);
        let g = rand_tensor(y.shape, rng);
        let dx = back(&g);
        let h = 1e-6;
        for idx in [0, x.data.len() / 3, x.data.len() - 1] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (dot(&f(&xp), &g) - dot(&f(&xm), &g)) / (2.0 * h);
            assert!(
                (fd - dx.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "idx {idx}: fd {fd} analytic {}",
                dx.data[idx]
            );
        }
    }

    #[test]
    fn conv_direct_small() {
        // 1 channel 3x3 input, 3x3 kernel of ones, same padding: sums of
        // neighbourhoods.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::<f64>::same3(1, 1, &mut rng);
        conv.weight.value = vec![1.0; 9];
        conv.bias.value = vec![0.5];
        let x = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let y = conv.forward(&x);
        assert_eq!(y.data[4], 45.5);
        assert_eq!(y.data[0], 1.0 + 2.0 + 4.0 + 5.0 + 0.5);
    }

    #[test]
    fn conv_strided_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(2, 2, (3, 3), (2, 2), (1, 1), &mut rng);
        assert_eq!(conv.out_hw(16, 256), (8, 128));
        let conv = Conv2d::<f64>::new(2, 2, (3, 3), (1, 2), (1, 1), &mut rng);
        assert_eq!(conv.out_hw(1, 512), (1, 256));
    }

    #[test]
    fn conv_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, shape) in [((1, 1), [2, 3, 4, 6]), ((2, 2), [1, 3, 4, 8]), ((1, 2), [1, 2, 1, 8])] {
            let conv = Conv2d::<f64>::new(3.min(shape[1]), 4, (3, 3), stride, (1, 1), &mut rng);
            let x = rand_tensor(shape, &mut rng);
            let mut a = conv.clone();
            let mut b = conv.clone();
            check_input_grad(
                |x| a.forward(x),
                |g| {
                    b.forward(&x);
                    b.backward(g)
                },
                &x,
                &mut rng,
            );
        }
        let conv = Conv2d::<f64>::pointwise(3, 2, &mut rng);
        let x = rand_tensor([2, 3, 2, 2], &mut rng);
        let (mut a, mut b) = (conv.clone(), conv);
        check_input_grad(|x| a.forward(x), |g| { b.forward(&x); b.backward(g) }, &x, &mut rng);
    }

    #[test]
    fn group_norm_normalizes_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gn = GroupNorm::<f64>::new(8);
        assert_eq!(gn.groups, 2);
        let x = rand_tensor([2, 8, 2, 3], &mut rng);
        let y = gn.forward(&x);
        let group: Vec<f64> = y.data[..4 * 6].to_vec();
        let mean = group.iter().sum::<f64>() / 24.0;
        assert!(mean.abs() < 1e-12);
        gn.gamma.value.iter_mut().enumerate().for_each(|(i, g)| *g = 0.5 + i as f64 * 0.1);
        let (mut a, mut b) = (gn.clone(), gn);
        check_input_grad(|x| a.forward(x), |g| { b.forward(&x); b.backward(g) }, &x, &mut rng);
    }

    #[test]
    fn silu_and_linear_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor([3, 5, 1, 1], &mut rng);
        let (mut a, mut b) = (Silu::<f64>::new(), Silu::<f64>::new());
        check_input_grad(|x| a.forward(x), |g| { b.forward(&x); b.backward(g) }, &x, &mut rng);
        let lin = Linear::<f64>::new(5, 4, &mut rng);
        let (mut a, mut b) = (lin.clone(), lin);
        check_input_grad(|x| a.forward(x), |g| { b.forward(&x); b.backward(g) }, &x, &mut rng);
    }

    #[test]
    fn attention_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let att = Attention::<f64>::new(4, &mut rng);
        let x = rand_tensor([2, 4, 2, 3], &mut rng);
        let (mut a, mut b) = (att.clone(), att);
        check_input_grad(|x| a.forward(x), |g| { b.forward(&x); b.backward(g) }, &x, &mut rng);
    }

    #[test]
    fn groups() {
        assert_eq!(norm_groups(4), 1);
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(128), 32);
        assert_eq!(norm_groups(512), 32);
        assert_eq!(norm_groups(96), 24);
    }
}
